"""Sparse top-k mixture of experts used as the text/image fusion gate.

Routing is per token row. For each row the router scores all experts from
``[ft_row ; h_att_row]``, keeps the ``k`` best, and turns those ``k`` scores
into weights with a softmax. The weighted sum of the selected experts'
outputs is the per-feature gate logit; its sigmoid mixes the text features
with the attention-guided image features.

Experts that no row selects are never evaluated, so their parameters get an
exact zero gradient and perturbing them cannot change the forward output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from expertchain import autograd as ag
from expertchain.autograd import ContractError, DimensionError, Tensor
from expertchain.fusion import gated_fuse

# grid-search optima recorded for the four public Med-VQA benchmarks
REFERENCE_EXPERT_COUNTS = {"VQA-RAD": 6, "SLAKE-EN": 10, "Med-VQA-2019": 5, "PathVQA": 5}
REFERENCE_TOP_K = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 6
    top_k: int = 2
    expert_hidden: int = 16
    seed: int = 0
    # reserved; no auxiliary balancing loss is implemented
    load_balancing: bool = False

    def __post_init__(self):
        if self.num_experts < 1 or self.expert_hidden < 1:
            raise ConfigError("num_experts and expert_hidden must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, num_experts={self.num_experts}]")
        if self.load_balancing:
            raise ConfigError("load-balancing loss is not supported")


@dataclass
class Expert:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class MoEParams:
    gate_w: Tensor
    gate_b: Tensor
    experts: list[Expert]

    def __post_init__(self):
        in_dim, n = self.gate_w.shape
        if self.gate_b.shape != (1, n):
            raise DimensionError(f"gating bias {self.gate_b.shape} does not match {n} experts")
        if len(self.experts) != n:
            raise DimensionError(f"gating scores {n} experts but {len(self.experts)} are defined")
        for i, e in enumerate(self.experts):
            h = e.w1.shape[1]
            if (e.w1.shape != (in_dim, h) or e.b1.shape != (1, h)
                    or e.w2.shape != (h, in_dim // 2) or e.b2.shape != (1, in_dim // 2)):
                raise DimensionError(f"expert {i} has inconsistent shapes")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.gate_w.shape[0] // 2

    @classmethod
    def init(cls, d: int, cfg: MoEConfig, rng: np.random.Generator, prefix: str = "moe") -> "MoEParams":
        def uniform(shape, fan_in, name):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)

        def zeros(shape, name):
            return Tensor(np.zeros(shape), requires_grad=True, name=name)

        gate_w = uniform((2 * d, cfg.num_experts), 2 * d, f"{prefix}.gate.w")
        gate_b = zeros((1, cfg.num_experts), f"{prefix}.gate.b")
        experts = []
        for i in range(cfg.num_experts):
            h = cfg.expert_hidden
            experts.append(Expert(
                uniform((2 * d, h), 2 * d, f"{prefix}.expert{i}.w1"),
                zeros((1, h), f"{prefix}.expert{i}.b1"),
                uniform((h, d), h, f"{prefix}.expert{i}.w2"),
                zeros((1, d), f"{prefix}.expert{i}.b2"),
            ))
        return cls(gate_w, gate_b, experts)

    def named(self, prefix: str = "moe") -> dict[str, Tensor]:
        out = {f"{prefix}.gate.w": self.gate_w, f"{prefix}.gate.b": self.gate_b}
        for i, e in enumerate(self.experts):
            out[f"{prefix}.expert{i}.w1"] = e.w1
            out[f"{prefix}.expert{i}.b1"] = e.b1
            out[f"{prefix}.expert{i}.w2"] = e.w2
            out[f"{prefix}.expert{i}.b2"] = e.b2
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], num_experts: int, prefix: str = "moe") -> "MoEParams":
        experts = [
            Expert(*(tensors[f"{prefix}.expert{i}.{part}"] for part in ("w1", "b1", "w2", "b2")))
            for i in range(num_experts)
        ]
        return cls(tensors[f"{prefix}.gate.w"], tensors[f"{prefix}.gate.b"], experts)


@dataclass
class RoutingRecord:
    item_id: str
    row: int
    experts: list[int]
    weights: list[float]
    category: str

    def to_json(self) -> str:
        return json.dumps({
            "item_id": self.item_id, "row": self.row, "experts": self.experts,
            "weights": self.weights, "category": self.category,
        })


@dataclass
class RoutingLog:
    records: list[RoutingRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def extend(self, other: "RoutingLog") -> None:
        self.records.extend(other.records)

    def write_jsonl(self, fh: IO[str]) -> None:
        for r in self.records:
            fh.write(r.to_json() + "\n")

    @classmethod
    def read_jsonl(cls, lines: Iterable[str]) -> "RoutingLog":
        records = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(RoutingRecord(
                    str(obj["item_id"]), int(obj["row"]), [int(e) for e in obj["experts"]],
                    [float(w) for w in obj["weights"]], str(obj["category"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"routing log line {n}: {exc}") from exc
        return cls(records)


def gate_scores(ft: Tensor, h_att: Tensor, p: MoEParams) -> Tensor:
    """Router logits, ``n x N``, from the row-wise concatenation of both inputs."""
    if ft.shape != h_att.shape:
        raise DimensionError(f"gating inputs differ in shape: {ft.shape} vs {h_att.shape}")
    if 2 * ft.shape[1] != p.gate_w.shape[0]:
        raise DimensionError(f"gating expects width {p.gate_w.shape[0]}, got 2*{ft.shape[1]}")
    return ag.add_row(ag.matmul(ag.concat_cols(ft, h_att), p.gate_w), p.gate_b)


def top_k_select(scores: Sequence[float], k: int) -> tuple[list[int], list[float]]:
    """Indices and values of the ``k`` largest scores.

    Ordered by descending score; equal scores keep ascending index order.
    """
    values = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= values.size:
        raise ConfigError(f"top_k={k} must lie in [1, {values.size}]")
    order = np.argsort(-values, kind="stable")[:k]
    return [int(i) for i in order], [float(values[i]) for i in order]


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= scores.shape[1]:
        raise ConfigError(f"top_k={k} must lie in [1, {scores.shape[1]}]")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def expert_weights(values: Sequence[float]) -> list[float]:
    """Softmax over the selected experts' scores only."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("need at least one selected score")
    e = np.exp(v - v.max())
    return (e / e.sum()).tolist()


def _expert_apply(x: Tensor, e: Expert) -> Tensor:
    hidden = ag.relu(ag.add_row(ag.matmul(x, e.w1), e.b1))
    return ag.add_row(ag.matmul(hidden, e.w2), e.b2)


def expert_forward(index: int, ft_row: Tensor, h_att_row: Tensor, p: MoEParams) -> Tensor:
    """One expert on one token: ``W2 relu(W1 [ft; h] + b1) + b2``."""
    if not 0 <= index < p.num_experts:
        raise ContractError(f"expert index {index} outside [0, {p.num_experts})")
    return _expert_apply(ag.concat_cols(ft_row, h_att_row), p.experts[index])


def moe_gate_logits(ft: Tensor, h_att: Tensor, cfg: MoEConfig, p: MoEParams) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Weighted vote of the selected experts; returns ``(E, indices, weights)``.

    ``E`` is ``n x d``; ``indices`` and ``weights`` are ``n x k`` arrays.
    """
    if p.num_experts != cfg.num_experts:
        raise ConfigError(f"config names {cfg.num_experts} experts, parameters hold {p.num_experts}")
    scores = gate_scores(ft, h_att, p)
    chosen = _top_k_rows(scores.data, cfg.top_k)
    weights = ag.softmax_rows(ag.take_cols(scores, chosen))
    x = ag.concat_cols(ft, h_att)
    n, d = ft.shape
    total = None
    for e in range(p.num_experts):
        rows, slots = np.nonzero(chosen == e)
        if rows.size == 0:
            continue
        out = _expert_apply(ag.take_rows(x, rows), p.experts[e])
        w = ag.take_cols(ag.take_rows(weights, rows), slots[:, None])
        part = ag.scatter_rows(ag.scale_rows(out, w), rows, n)
        total = part if total is None else ag.add(total, part)
    return total, chosen, weights.data


def moe_fuse(
    ft: Tensor,
    h_att: Tensor,
    cfg: MoEConfig,
    p: MoEParams,
    item_id: str = "",
    category: str = "",
) -> tuple[Tensor, RoutingLog]:
    """Fuse text and attended image features through the sparse expert gate."""
    logits, chosen, weights = moe_gate_logits(ft, h_att, cfg, p)
    fused = gated_fuse(ft, h_att, ag.sigmoid(logits))
    log = RoutingLog([
        RoutingRecord(item_id, r, chosen[r].tolist(), weights[r].tolist(), category)
        for r in range(ft.shape[0])
    ])
    return fused, log
