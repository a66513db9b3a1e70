"""Task-guided prototype experts.

Each global prototype scores every instance by cosine similarity in a
learned query/key subspace, keeps its top-k instances, and returns the
softmax-weighted mean of their (unprojected) features.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

log = logging.getLogger(__name__)


@dataclass
class AttentionRecord:
    sims: np.ndarray  # (K, N)
    selected: np.ndarray  # (K, k_im) instance indices, best first
    weights: np.ndarray  # (K, N), zero off-selection
    k_im: int


def topk_count(n: int, k: int, k_min: int = 60, strategy: str = "hardcode",
               proportion: float = 1.0) -> int:
    """Instances kept per prototype.

    ``hardcode``: min(k_min, floor(N/K)); ``proportion``: floor(p * N/K).
    Both are clamped to [1, N].
    """
    if n < 1 or k < 1:
        raise ValueError(f"need N >= 1 and K >= 1, got N={n}, K={k}")
    if strategy == "hardcode":
        kim = min(k_min, n // k)
    elif strategy == "proportion":
        kim = math.floor(proportion * n / k)
    else:
        raise ValueError(f"unknown top-k strategy {strategy!r}")
    return max(1, min(n, kim))


def _unit_rows(x: Tensor) -> Tensor:
    nrm = dm.l2_norm(x, axis=1, keepdims=True)
    # zero rows stay zero and therefore score 0
    return x / (nrm + dm.tensor((nrm.data == 0).astype(nrm.data.dtype)))


def cosine_scores(P: Tensor, H: Tensor, W_Q: Tensor, W_K: Tensor) -> Tensor:
    return dm.matmul(_unit_rows(P @ W_Q), dm.transpose(_unit_rows(H @ W_K)))


def select_topk(sims: np.ndarray, k_im: int) -> np.ndarray:
    """Row-wise indices of the k_im largest scores; ties go to the lower index."""
    return np.argsort(-sims, axis=1, kind="stable")[:, :k_im]


def sparse_attend(sims: Tensor, k_im: int, index: np.ndarray | None = None,
                  logit_scale: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Softmax over each row's selected scores; zeros elsewhere.

    The index set is a routing decision: gradients only reach the selected
    logits. Pass ``index`` to reuse a frozen selection.
    """
    n = sims.shape[1]
    if k_im > n:
        raise ValueError(f"k_im={k_im} exceeds bag size {n}")
    if index is None:
        index = select_topk(sims.data, k_im)
    picked = dm.gather(sims, index)
    if logit_scale != 1.0:
        picked = dm.scale(picked, logit_scale)
    return dm.scatter(dm.softmax(picked, axis=1), index, n), index


def condition(weights: Tensor, H: Tensor) -> Tensor:
    return dm.matmul(weights, H)


def diversity_loss(P, form: str = "supp") -> Tensor:
    """Redundancy penalty on the row-normalised Gram matrix.

    ``supp``: mean over all (i, j) of (G - I)^2.  ``main``: sum over i != j of G^2.
    """
    P = dm.as_tensor(P)
    if (np.linalg.norm(P.data, axis=1) == 0).any():
        raise ValueError("diversity_loss: zero-norm prototype row")
    Ph = _unit_rows(P)
    G = Ph @ dm.transpose(Ph)
    k = P.shape[0]
    eye = np.eye(k)
    if form == "supp":
        return dm.mean((G - dm.tensor(eye)) * (G - dm.tensor(eye)))
    if form == "main":
        off = dm.masked_fill(G, eye.astype(bool), 0.0)
        return dm.sum(off * off)
    raise ValueError(f"unknown diversity form {form!r}")


class PrototypeBank:
    def __init__(self, k: int, d: int, *, d_att: int | None = None, ema_beta: float = 0.95,
                 k_min: int = 60, topk_strategy: str = "hardcode", topk_proportion: float = 1.0,
                 logit_scale: float = 1.0, rng: np.random.Generator | None = None,
                 prefix: str = "bank"):
        if k < 1:
            raise ValueError("prototype count must be >= 1")
        if not 0.0 < ema_beta < 1.0:
            raise ValueError(f"ema_beta must lie in (0, 1), got {ema_beta}")
        rng = rng if rng is not None else np.random.default_rng(0)
        d_att = d if d_att is None else d_att
        self.k, self.d, self.d_att = k, d, d_att
        self.ema_beta = ema_beta
        self.k_min = k_min
        self.topk_strategy = topk_strategy
        self.topk_proportion = topk_proportion
        self.logit_scale = logit_scale
        p0 = rng.normal(size=(k, d))
        p0 /= np.linalg.norm(p0, axis=1, keepdims=True)
        self.P = dm.tensor(p0, requires_grad=True, name=f"{prefix}.P")
        b = 1.0 / math.sqrt(d)
        self.W_Q = dm.tensor(rng.uniform(-b, b, (d, d_att)), requires_grad=True, name=f"{prefix}.W_Q")
        self.W_K = dm.tensor(rng.uniform(-b, b, (d, d_att)), requires_grad=True, name=f"{prefix}.W_K")
        self.reset_epoch()

    def parameters(self) -> list[Tensor]:
        return [self.P, self.W_Q, self.W_K]

    def reset_epoch(self) -> None:
        self.accum_sum = np.zeros((self.k, self.d))
        self.accum_count = 0

    def k_im(self, n: int) -> int:
        return topk_count(n, self.k, self.k_min, self.topk_strategy, self.topk_proportion)

    def forward_bag(self, H: Tensor, train: bool = False,
                    index: np.ndarray | None = None) -> tuple[Tensor, AttentionRecord]:
        n = H.shape[0]
        if n < 1:
            raise ValueError("empty bag")
        k_im = self.k_im(n) if index is None else index.shape[1]
        sims = cosine_scores(self.P, H, self.W_Q, self.W_K)
        weights, index = sparse_attend(sims, k_im, index, self.logit_scale)
        cond = condition(weights, H)
        if train:
            self.accum_sum += cond.data
            self.accum_count += 1
        return cond, AttentionRecord(sims.data.copy(), index, weights.data.copy(), k_im)

    def ema_update(self, epoch_mean: np.ndarray | None = None) -> bool:
        """P <- beta P + (1 - beta) mean; returns False (no-op) if nothing accumulated."""
        if epoch_mean is None:
            if self.accum_count == 0:
                log.warning("ema_update skipped: no bags accumulated this epoch")
                return False
            epoch_mean = self.accum_sum / self.accum_count
        b = self.ema_beta
        self.P.data[...] = b * self.P.data + (1.0 - b) * np.asarray(epoch_mean)
        self.reset_epoch()
        return True
