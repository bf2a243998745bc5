"""Text-to-image cross-attention and gated feature fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from expertchain import autograd as ag
from expertchain.autograd import ContractError, DimensionError, Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        d = self.wq.shape[0]
        for t in (self.wq, self.wk, self.wv):
            if t.shape != (d, d):
                raise DimensionError(f"attention projections must be {d}x{d}, got {t.shape}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str = "attn") -> "AttentionParams":
        bound = 1.0 / math.sqrt(d)
        mats = [Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True, name=f"{prefix}.{n}")
                for n in ("wq", "wk", "wv")]
        return cls(*mats)

    def named(self, prefix: str = "attn") -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}


@dataclass
class GateParams:
    wl: Tensor
    wv: Tensor

    def __post_init__(self):
        d = self.wl.shape[0]
        if self.wl.shape != (d, d) or self.wv.shape != (d, d):
            raise DimensionError(f"gate weights must be square and equal, got {self.wl.shape}, {self.wv.shape}")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str = "gate") -> "GateParams":
        bound = 1.0 / math.sqrt(d)
        return cls(
            Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True, name=f"{prefix}.wl"),
            Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True, name=f"{prefix}.wv"),
        )

    def named(self, prefix: str = "gate") -> dict[str, Tensor]:
        return {f"{prefix}.wl": self.wl, f"{prefix}.wv": self.wv}


def attention_weights(ft: Tensor, fi: Tensor, p: AttentionParams) -> Tensor:
    """Row-stochastic ``n x m`` matrix of text-to-patch attention."""
    if ft.shape[1] != p.dim or fi.shape[1] != p.dim:
        raise DimensionError(
            f"hidden size mismatch: text {ft.shape}, image {fi.shape}, projections {p.dim}"
        )
    q = ag.matmul(ft, p.wq)
    k = ag.matmul(fi, p.wk)
    logits = ag.mul(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(p.dim))
    return ag.softmax_rows(logits)


def cross_attention(ft: Tensor, fi: Tensor, p: AttentionParams) -> Tensor:
    """Attention-guided visual features, one row per text token.

    ``softmax((ft Wq)(fi Wk)^T / sqrt(d)) (fi Wv)``; every output row is a
    convex combination of the projected image rows.
    """
    weights = attention_weights(ft, fi, p)
    return ag.matmul(weights, ag.matmul(fi, p.wv))


def baseline_gate(ft: Tensor, h_att: Tensor, g: GateParams) -> Tensor:
    """Single learned gate ``sigmoid(ft Wl + h_att Wv)`` (no experts)."""
    if ft.shape != h_att.shape:
        raise DimensionError(f"gate inputs differ in shape: {ft.shape} vs {h_att.shape}")
    if ft.shape[1] != g.wl.shape[0]:
        raise DimensionError(f"gate weights are {g.wl.shape}, features are {ft.shape}")
    return ag.sigmoid(ag.add(ag.matmul(ft, g.wl), ag.matmul(h_att, g.wv)))


def gated_fuse(ft: Tensor, h_att: Tensor, lam: Tensor) -> Tensor:
    """Elementwise convex mix ``(1 - lam) * ft + lam * h_att``."""
    if not (ft.shape == h_att.shape == lam.shape):
        raise DimensionError(f"fuse shapes differ: {ft.shape}, {h_att.shape}, {lam.shape}")
    if np.any(lam.data < 0.0) or np.any(lam.data > 1.0):
        raise ContractError("gate values outside [0, 1]")
    return ag.convex_mix(ft, h_att, lam)
