"""Discrete-time hazard head, censoring-aware NLL and concordance index."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

PROB_EPS = 1e-7


@dataclass
class SurvivalOutput:
    hazards: Tensor  # (B,)
    surv: Tensor  # (B,), S_j = prod_{k<=j} (1 - h_k)

    @property
    def risk(self) -> float:
        """Sum of hazards, used to rank patients."""
        return float(self.hazards.data.sum())


def survival_from_hazards(hazards) -> SurvivalOutput:
    hazards = dm.as_tensor(hazards)
    return SurvivalOutput(hazards, dm.cumprod(dm.sub(1.0, hazards)))


class SurvivalHead:
    def __init__(self, d: int, n_bins: int = 4, *, rng: np.random.Generator | None = None,
                 prefix: str = "head"):
        rng = rng if rng is not None else np.random.default_rng(0)
        b = 1.0 / math.sqrt(d)
        self.W_out = dm.tensor(rng.uniform(-b, b, (n_bins, d)), requires_grad=True, name=f"{prefix}.W_out")
        self.b_out = dm.tensor(np.zeros(n_bins), requires_grad=True, name=f"{prefix}.b_out")

    def parameters(self) -> list[Tensor]:
        return [self.W_out, self.b_out]

    def predict(self, h_fused: Tensor) -> SurvivalOutput:
        return survival_from_hazards(dm.sigmoid(dm.matmul(self.W_out, h_fused) + self.b_out))


def _event_prob(out: SurvivalOutput, y: int, censored: bool) -> Tensor:
    if censored:
        return dm.index(out.surv, y)
    h_y = dm.index(out.hazards, y)
    return h_y if y == 0 else dm.index(out.surv, y - 1) * h_y


def nll_loss(outputs: Sequence[SurvivalOutput], bins: Sequence[int], censored: Sequence[bool],
             nll_alpha: float = 0.4) -> Tensor:
    """(1 - a) * (L_unc + L_cen) + a * L_unc, summed over the batch."""
    if len(outputs) == 0:
        raise ValueError("nll_loss: empty batch")
    if not 0.0 <= nll_alpha <= 1.0:
        raise ValueError(f"nll_alpha must lie in [0, 1], got {nll_alpha}")
    unc, cen = [], []
    for out, y, c in zip(outputs, bins, censored):
        if y is None or not 0 <= y < out.hazards.shape[0]:
            raise ValueError(f"invalid bin {y}")
        term = dm.neg(dm.log(dm.clip(_event_prob(out, int(y), bool(c)), PROB_EPS, 1.0 - PROB_EPS)))
        (cen if c else unc).append(term)
    zero = dm.tensor(0.0)
    l_unc = _total(unc) if unc else zero
    l_cen = _total(cen) if cen else zero
    return dm.scale(l_unc + l_cen, 1.0 - nll_alpha) + dm.scale(l_unc, nll_alpha)


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def composite_loss(nll: Tensor, div_hist=None, div_st=None, lambda_div: float = 0.2) -> Tensor:
    if lambda_div < 0:
        raise ValueError("lambda_div must be >= 0")
    divs = [d for d in (div_hist, div_st) if d is not None]
    if not divs or lambda_div == 0:
        return nll
    return nll + dm.scale(_total(divs), lambda_div)


class NoComparablePairs(ValueError):
    pass


def c_index(risks, times, censored) -> float:
    """Harrell's C: pairs (i, j) with t_i < t_j and i an event; risk ties count 1/2."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censored, dtype=bool)
    comparable = (t[:, None] < t[None, :]) & ~c[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise NoComparablePairs("c_index: no comparable pairs")
    conc = (r[:, None] > r[None, :]) & comparable
    ties = (r[:, None] == r[None, :]) & comparable
    return float((conc.sum() + 0.5 * ties.sum()) / n_pairs)
