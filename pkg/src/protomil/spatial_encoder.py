"""Per-modality spatial contextualisation.

Instances are projected to the latent width, padded onto the smallest
enclosing square grid, passed through self-attention -> positional
depthwise convolutions -> self-attention, and the transformer output is
blended back into the layer-normalised projection.
"""
from __future__ import annotations

import math

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

PPEG_KERNELS = (7, 5, 3)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def grid_pad(H: Tensor) -> tuple[Tensor, int]:
    """Pad N rows to S*S by cycling the leading rows; S = ceil(sqrt(N))."""
    n = H.shape[0]
    if n < 1:
        raise ValueError("grid_pad needs at least one row")
    s = math.isqrt(n)
    if s * s < n:
        s += 1
    pad = s * s - n
    if pad == 0:
        return H, s
    return dm.take_rows(H, np.concatenate([np.arange(n), np.arange(pad) % n])), s


class TransLayer:
    """Pre-norm block: x + MHA(LN(x)), then x + GELU(LN(x) W + b)."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, prefix: str):
        if d % n_heads:
            raise ValueError(f"latent dim {d} not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        mk = lambda name, arr: dm.tensor(arr, requires_grad=True, name=f"{prefix}.{name}")
        self.ln1_g = mk("ln1_g", np.ones(d))
        self.ln1_b = mk("ln1_b", np.zeros(d))
        self.wq = mk("wq", _uniform(rng, d, (d, d)))
        self.wk = mk("wk", _uniform(rng, d, (d, d)))
        self.wv = mk("wv", _uniform(rng, d, (d, d)))
        self.wo = mk("wo", _uniform(rng, d, (d, d)))
        self.ln2_g = mk("ln2_g", np.ones(d))
        self.ln2_b = mk("ln2_b", np.zeros(d))
        self.ff_w = mk("ff_w", _uniform(rng, d, (d, d)))
        self.ff_b = mk("ff_b", np.zeros(d))

    def parameters(self) -> list[Tensor]:
        return [self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo,
                self.ln2_g, self.ln2_b, self.ff_w, self.ff_b]

    def attention(self, x: Tensor) -> Tensor:
        q, k, v = dm.linear(x, self.wq), dm.linear(x, self.wk), dm.linear(x, self.wv)
        return dm.linear(dm.multi_head_attention(q, k, v, self.n_heads), self.wo)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(dm.layer_norm(x, gain=self.ln1_g, bias=self.ln1_b))
        y = dm.layer_norm(x, gain=self.ln2_g, bias=self.ln2_b)
        return x + dm.gelu(dm.linear(y, self.ff_w, self.ff_b))


class PPEG:
    """Sum of depthwise same-padded convolutions over the token grid, plus identity."""

    def __init__(self, d: int, rng: np.random.Generator, prefix: str, kernels=PPEG_KERNELS):
        self.kernels = tuple(kernels)
        self.weights = {k: dm.tensor(_uniform(rng, k * k, (k, k, d)), requires_grad=True,
                                     name=f"{prefix}.conv{k}_w") for k in self.kernels}
        self.biases = {k: dm.tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.conv{k}_b")
                       for k in self.kernels}

    def parameters(self) -> list[Tensor]:
        return [t for k in self.kernels for t in (self.weights[k], self.biases[k])]

    def __call__(self, z: Tensor, s: int) -> Tensor:
        if z.shape[0] != 1 + s * s:
            raise ValueError(f"ppeg expects 1 + {s}^2 = {1 + s * s} tokens, got {z.shape[0]}")
        d = z.shape[1]
        cls = dm.index(z, slice(0, 1))
        grid = dm.reshape(dm.index(z, slice(1, None)), (s, s, d))
        out = grid
        for k in self.kernels:
            out = out + dm.depthwise_conv2d(grid, self.weights[k], self.biases[k])
        return dm.concat([cls, dm.reshape(out, (s * s, d))], axis=0)


class SpatialEncoder:
    def __init__(self, d_input: int, d: int = 512, *, n_heads: int = 4, blend_alpha: float = 0.1,
                 dropout: float = 0.25, blend_normalize_t: bool = True,
                 rng: np.random.Generator | None = None, prefix: str = "enc"):
        if not 0.0 <= blend_alpha < 1.0:
            raise ValueError(f"blend_alpha must lie in [0, 1), got {blend_alpha}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_input, self.d = d_input, d
        self.blend_alpha = blend_alpha
        self.dropout = dropout
        self.blend_normalize_t = blend_normalize_t
        self.proj_w = dm.tensor(_uniform(rng, d_input, (d_input, d)), requires_grad=True, name=f"{prefix}.proj_w")
        self.proj_b = dm.tensor(_uniform(rng, d_input, (d,)), requires_grad=True, name=f"{prefix}.proj_b")
        self.cls_token = dm.tensor(np.zeros((1, d)), requires_grad=True, name=f"{prefix}.cls")
        self.layer1 = TransLayer(d, n_heads, rng, f"{prefix}.layer1")
        self.ppeg = PPEG(d, rng, f"{prefix}.ppeg")
        self.layer2 = TransLayer(d, n_heads, rng, f"{prefix}.layer2")

    def parameters(self) -> list[Tensor]:
        return ([self.proj_w, self.proj_b, self.cls_token] + self.layer1.parameters()
                + self.ppeg.parameters() + self.layer2.parameters())

    def project(self, M, train: bool = False, rng: dm.DropoutRNG | None = None) -> Tensor:
        M = dm.as_tensor(M)
        if M.ndim != 2 or M.shape[1] != self.d_input:
            raise dm.ShapeError(f"project: input {M.shape} does not match input width {self.d_input}")
        if M.shape[0] < 1:
            raise ValueError("project needs at least one instance")
        return dm.dropout(dm.relu(dm.linear(M, self.proj_w, self.proj_b)), self.dropout, rng, train)

    def contextualize(self, H: Tensor) -> Tensor:
        """Transformer/PPEG path; returns T with the class token and padding removed."""
        n = H.shape[0]
        padded, s = grid_pad(H)
        z = dm.concat([self.cls_token, padded], axis=0)
        z = self.layer1(z)
        z = self.ppeg(z, s)
        z = self.layer2(z)
        return dm.index(z, slice(1, 1 + n))

    def encode(self, M, train: bool = False, rng: dm.DropoutRNG | None = None,
               spatial: bool = True) -> Tensor:
        """H~ = (1 - a) LN(H) + a LN(T); with ``spatial=False`` just LN(H)."""
        H = self.project(M, train, rng)
        base = dm.layer_norm(H)
        if not spatial:
            return base
        T = self.contextualize(H)
        if self.blend_normalize_t:
            T = dm.layer_norm(T)
        a = self.blend_alpha
        return dm.scale(base, 1.0 - a) + dm.scale(T, a)
