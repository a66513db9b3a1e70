"""Gated-attention fusion of stacked prototype features."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor


@dataclass
class FusionOutput:
    h_fused: Tensor
    alphas: np.ndarray
    scores: np.ndarray | None = None


def stack(p_hist: Tensor | None, p_st: Tensor | None) -> Tensor:
    """Histology rows first; either side may be absent (single-modality runs)."""
    parts = [p for p in (p_hist, p_st) if p is not None and p.shape[0] > 0]
    if not parts:
        raise ValueError("stack: both modalities are empty")
    if len(parts) == 2 and parts[0].shape[1] != parts[1].shape[1]:
        raise dm.ShapeError(f"stack: incompatible shapes {parts[0].shape} and {parts[1].shape}")
    return parts[0] if len(parts) == 1 else dm.concat(parts, axis=0)


def unstack(h: Tensor, k_hist: int) -> tuple[Tensor, Tensor]:
    return dm.index(h, slice(0, k_hist)), dm.index(h, slice(k_hist, None))


class GatedAttention:
    def __init__(self, d: int, d_att: int = 256, *, dropout: float = 0.25,
                 rng: np.random.Generator | None = None, prefix: str = "fusion"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.d_att, self.dropout = d, d_att, dropout
        b = 1.0 / math.sqrt(d)
        self.W_a = dm.tensor(rng.uniform(-b, b, (d_att, d)), requires_grad=True, name=f"{prefix}.W_a")
        self.W_b = dm.tensor(rng.uniform(-b, b, (d_att, d)), requires_grad=True, name=f"{prefix}.W_b")
        c = 1.0 / math.sqrt(d_att)
        self.w_c = dm.tensor(rng.uniform(-c, c, (d_att,)), requires_grad=True, name=f"{prefix}.w_c")

    def parameters(self) -> list[Tensor]:
        return [self.W_a, self.W_b, self.w_c]

    def gate_scores(self, h: Tensor, train: bool = False, rng: dm.DropoutRNG | None = None) -> Tensor:
        a = dm.dropout(dm.tanh(h @ dm.transpose(self.W_a)), self.dropout, rng, train)
        g = dm.dropout(dm.sigmoid(h @ dm.transpose(self.W_b)), self.dropout, rng, train)
        return dm.matmul(a * g, self.w_c)

    def fuse(self, h: Tensor, train: bool = False, rng: dm.DropoutRNG | None = None,
             mode: str = "gated") -> FusionOutput:
        r = h.shape[0]
        if r < 1:
            raise ValueError("fuse needs at least one row")
        if mode == "mean_pool":
            return FusionOutput(dm.mean(h, axis=0), np.full(r, 1.0 / r))
        if mode != "gated":
            raise ValueError(f"unknown fusion mode {mode!r}")
        s = self.gate_scores(h, train, rng)
        alphas = dm.softmax(s, axis=0)
        return FusionOutput(dm.matmul(alphas, h), alphas.data.copy(), s.data.copy())
