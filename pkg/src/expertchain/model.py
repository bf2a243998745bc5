"""The locally trained answer model.

Pipeline per item: token embedding lookup -> cross-attention over image
patch features -> fusion (sparse MoE gate or single baseline gate) ->
mean-pool into a context vector -> autoregressive readout where the logits
at step ``t`` are ``(context + prev_embed[y_{t-1}]) @ W_out + b_out``.

Batches are built as one graph: cross-attention runs per item, the fused
rows of all items are stacked so routing and expert evaluation happen once
per batch.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from expertchain import autograd as ag
from expertchain.autograd import ContractError, DimensionError, Tensor
from expertchain.fusion import AttentionParams, GateParams, baseline_gate, cross_attention, gated_fuse
from expertchain.moe import MoEConfig, MoEParams, RoutingLog, RoutingRecord, moe_gate_logits

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)
CHECKPOINT_FORMAT = "expertchain-checkpoint/1"

_TOKEN_RE = re.compile(r"<[a-z]+>|\w+|[^\w\s]")


class FeatureFileError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = []
        for t in texts:
            words.extend(tokenize(t))
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    @property
    def sep(self) -> int:
        return self.stoi[SEP]

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk) for w in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        """Join tokens up to the first end-of-sequence, dropping padding."""
        words = []
        for i in ids:
            if i == self.eos:
                break
            if i != self.pad:
                words.append(self.itos[i])
        return " ".join(words)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 8e-5
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    fusion: str = "moe"
    dim: int = 16

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.fusion not in ("moe", "gate"):
            raise ValueError(f"fusion must be 'moe' or 'gate', got {self.fusion!r}")


@dataclass
class ModelParams:
    """All trainable tensors, keyed by unique name."""

    tensors: dict[str, Tensor]
    fusion: str
    num_experts: int = 0

    @property
    def dim(self) -> int:
        return self.tensors["embed"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tensors["embed"].shape[0]

    @property
    def attn(self) -> AttentionParams:
        t = self.tensors
        return AttentionParams(t["attn.wq"], t["attn.wk"], t["attn.wv"])

    @property
    def moe(self) -> MoEParams:
        return MoEParams.from_named(self.tensors, self.num_experts)

    @property
    def gate(self) -> GateParams:
        return GateParams(self.tensors["gate.wl"], self.tensors["gate.wv"])

    def replace(self, tensors: dict[str, Tensor]) -> "ModelParams":
        return ModelParams(tensors, self.fusion, self.num_experts)

    def zeros_like(self) -> "ModelParams":
        return self.replace({n: Tensor(np.zeros(t.shape), requires_grad=True, name=n)
                             for n, t in self.tensors.items()})


def init_params(vocab_size: int, dim: int, fusion: str, moe_cfg: MoEConfig | None, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(dim)
    t: dict[str, Tensor] = {}

    def uniform(name, shape, b=bound):
        t[name] = Tensor(rng.uniform(-b, b, shape), requires_grad=True, name=name)

    uniform("embed", (vocab_size, dim), 1.0)
    t.update(AttentionParams.init(dim, rng).named())
    if fusion == "moe":
        if moe_cfg is None:
            raise ValueError("moe fusion needs a MoEConfig")
        t.update(MoEParams.init(dim, moe_cfg, rng).named())
        num_experts = moe_cfg.num_experts
    elif fusion == "gate":
        t.update(GateParams.init(dim, rng).named())
        num_experts = 0
    else:
        raise ValueError(f"unknown fusion mode {fusion!r}")
    uniform("prev_embed", (vocab_size, dim), 1.0)
    uniform("out.w", (dim, vocab_size))
    t["out.b"] = Tensor(np.zeros((1, vocab_size)), requires_grad=True, name="out.b")
    return ModelParams(t, fusion, num_experts)


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

def encode_text(tokens: Sequence[int], params: ModelParams) -> Tensor:
    """Textual features: one embedding row per token id."""
    if len(tokens) == 0:
        raise ContractError("cannot encode an empty token sequence")
    v = params.vocab_size
    bad = [i for i in tokens if not 0 <= i < v]
    if bad:
        raise ContractError(f"token ids {bad} outside vocabulary of size {v}")
    return ag.take_rows(params.tensors["embed"], tokens)


def load_image_features(path: str | Path, dim: int | None = None) -> np.ndarray:
    """Read an ``m x d`` patch-feature file.

    Format: first line ``"m d"``, then ``m`` lines of ``d`` decimal numbers.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FeatureFileError(f"{path}:1: empty feature file")
    header = lines[0].split()
    try:
        m, d = (int(x) for x in header)
    except ValueError:
        raise FeatureFileError(f"{path}:1: header must be two integers 'm d', got {lines[0]!r}") from None
    if m < 1 or d < 1:
        raise FeatureFileError(f"{path}:1: dimensions must be positive")
    if len(lines) - 1 != m:
        raise FeatureFileError(f"{path}:{len(lines)}: header declares {m} rows, found {len(lines) - 1}")
    rows = []
    for n, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != d:
            raise FeatureFileError(f"{path}:{n}: expected {d} values, found {len(parts)}")
        try:
            row = [float(x) for x in parts]
        except ValueError:
            raise FeatureFileError(f"{path}:{n}: non-numeric value") from None
        if not all(math.isfinite(x) for x in row):
            raise FeatureFileError(f"{path}:{n}: non-finite value")
        rows.append(row)
    if dim is not None and d != dim:
        raise DimensionError(f"{path}: feature width {d} does not match model width {dim}")
    return np.array(rows, dtype=np.float64)


def write_image_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    m, d = features.shape
    lines = [f"{m} {d}"] + [" ".join(repr(float(x)) for x in row) for row in features]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# forward pass and loss
# --------------------------------------------------------------------------

@dataclass
class Example:
    """An item ready for the model: token ids, patch features, answer ids."""

    item_id: str
    tokens: list[int]
    features: np.ndarray
    target: list[int]
    category: str = ""


@dataclass
class BatchOutput:
    logits: Tensor                      # (sum of steps) x |V|
    step_counts: list[int]
    contexts: Tensor                    # B x d
    routing: RoutingLog = field(default_factory=RoutingLog)


def _fuse(ft: Tensor, h_att: Tensor, params: ModelParams, moe_cfg: MoEConfig | None):
    if params.fusion == "gate":
        return gated_fuse(ft, h_att, baseline_gate(ft, h_att, params.gate)), None, None
    logits, chosen, weights = moe_gate_logits(ft, h_att, moe_cfg, params.moe)
    return gated_fuse(ft, h_att, ag.sigmoid(logits)), chosen, weights


def encode_context(
    examples: Sequence[Example], params: ModelParams, moe_cfg: MoEConfig | None
) -> tuple[Tensor, RoutingLog]:
    """Pooled fused context, one row per example."""
    fts, hs, spans = [], [], []
    start = 0
    for ex in examples:
        ft = encode_text(ex.tokens, params)
        fi = Tensor(ex.features)
        if fi.shape[1] != params.dim:
            raise DimensionError(f"item {ex.item_id}: feature width {fi.shape[1]} != model width {params.dim}")
        fts.append(ft)
        hs.append(cross_attention(ft, fi, params.attn))
        spans.append((start, start + ft.shape[0]))
        start += ft.shape[0]
    ft_all = fts[0] if len(fts) == 1 else ag.concat_rows(fts)
    h_all = hs[0] if len(hs) == 1 else ag.concat_rows(hs)
    fused, chosen, weights = _fuse(ft_all, h_all, params, moe_cfg)
    pooled = []
    log = RoutingLog()
    for ex, (a, b) in zip(examples, spans):
        rows = fused if len(examples) == 1 else ag.take_rows(fused, list(range(a, b)))
        pooled.append(ag.mean_rows(rows))
        if chosen is not None:
            for r in range(a, b):
                log.records.append(RoutingRecord(
                    ex.item_id, r - a, chosen[r].tolist(), weights[r].tolist(), ex.category))
    contexts = pooled[0] if len(pooled) == 1 else ag.concat_rows(pooled)
    return contexts, log


def step_logits(contexts: Tensor, owner: Sequence[int], prev: Sequence[int], params: ModelParams) -> Tensor:
    """Logit rows for steps whose context row is ``owner[i]`` and previous token ``prev[i]``."""
    t = params.tensors
    ctx = ag.take_rows(contexts, owner)
    hidden = ag.add(ctx, ag.take_rows(t["prev_embed"], prev))
    return ag.add_row(ag.matmul(hidden, t["out.w"]), t["out.b"])


def forward_batch(examples: Sequence[Example], params: ModelParams, moe_cfg: MoEConfig | None) -> BatchOutput:
    """Teacher-forced logits for every target step of every example."""
    if not examples:
        raise ContractError("empty batch")
    contexts, log = encode_context(examples, params, moe_cfg)
    owner, prev, counts = [], [], []
    bos = _bos_id(params)
    for i, ex in enumerate(examples):
        if not ex.target:
            raise ContractError(f"item {ex.item_id} has an empty target")
        history = [bos] + ex.target[:-1]
        owner.extend([i] * len(history))
        prev.extend(history)
        counts.append(len(history))
    return BatchOutput(step_logits(contexts, owner, prev, params), counts, contexts, log)


def forward(
    tokens: Sequence[int],
    features: np.ndarray,
    target: Sequence[int],
    params: ModelParams,
    moe_cfg: MoEConfig | None = None,
) -> Tensor:
    """Per-step logits (``len(target) x |V|``) for a single item under teacher forcing."""
    ex = Example("", list(tokens), np.asarray(features, dtype=np.float64), list(target))
    return forward_batch([ex], params, moe_cfg).logits


def _bos_id(params: ModelParams) -> int:
    return SPECIALS.index(BOS)


def loss_nll(logits: Tensor, target: Sequence[int]) -> Tensor:
    """Summed token negative log-likelihood of ``target`` under softmax(logits)."""
    if logits.shape[0] != len(target):
        raise DimensionError(f"{logits.shape[0]} logit steps for a target of length {len(target)}")
    return ag.cross_entropy_rows(logits, target)


def batch_loss(examples: Sequence[Example], params: ModelParams, moe_cfg: MoEConfig | None) -> Tensor:
    """Mean over examples of each example's summed token NLL."""
    out = forward_batch(examples, params, moe_cfg)
    targets = [t for ex in examples for t in ex.target]
    return ag.mul(loss_nll(out.logits, targets), 1.0 / len(examples))


# --------------------------------------------------------------------------
# training and decoding
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float]


def train(
    examples: Sequence[Example],
    params: ModelParams,
    cfg: TrainConfig,
    moe_cfg: MoEConfig | None = None,
    steps: int | None = None,
) -> TrainResult:
    """Plain SGD with teacher forcing.

    Each epoch shuffles the examples with a generator seeded from
    ``cfg.seed`` and walks them in ``cfg.batch_size`` chunks. ``steps``
    caps the total number of updates (useful for memorization checks).
    The trace holds the mean batch loss of each epoch.
    """
    if not examples:
        raise TrainingError("cannot train on an empty dataset")
    dims = {ex.features.shape[1] for ex in examples}
    if dims != {params.dim}:
        raise DimensionError(f"feature widths {sorted(dims)} do not match model width {params.dim}")
    rng = np.random.default_rng(cfg.seed)
    names = list(params.tensors)
    trace: list[float] = []
    done = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            loss = batch_loss(batch, params, moe_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"items {[ex.item_id for ex in batch]}"
                )
            losses.append(value)
            grads = ag.backward(loss, params.tensors)
            if cfg.lr > 0:
                params = params.replace({
                    n: Tensor(params.tensors[n].data - cfg.lr * grads[n], requires_grad=True, name=n)
                    for n in names
                })
            done += 1
            if steps is not None and done >= steps:
                break
        trace.append(float(np.mean(losses)))
        logger.debug("epoch %d loss %.6f", epoch, trace[-1])
        if steps is not None and done >= steps:
            break
    return TrainResult(params, trace)


def greedy_decode(
    tokens: Sequence[int],
    features: np.ndarray,
    params: ModelParams,
    moe_cfg: MoEConfig | None = None,
    max_len: int = 8,
    item_id: str = "",
    category: str = "",
) -> tuple[list[int], RoutingLog]:
    """Argmax decoding (ties to the lowest id) until end-of-sequence or ``max_len``."""
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    ex = Example(item_id, list(tokens), np.asarray(features, dtype=np.float64), [], category)
    contexts, log = encode_context([ex], params, moe_cfg)
    eos = SPECIALS.index(EOS)
    out: list[int] = []
    prev = _bos_id(params)
    for _ in range(max_len):
        logits = step_logits(contexts, [0], [prev], params).data[0]
        nxt = int(np.argmax(logits))
        if nxt == eos:
            break
        out.append(nxt)
        prev = nxt
    return out, log


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    vocab: Vocab,
    train_cfg: TrainConfig,
    moe_cfg: MoEConfig | None,
) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "fusion": params.fusion,
        "train_config": asdict(train_cfg),
        "moe_config": asdict(moe_cfg) if moe_cfg is not None else None,
        "vocab": vocab.itos,
        "tensors": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Vocab, TrainConfig, MoEConfig | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    tensors = {
        name: Tensor(np.array(spec["data"], dtype=np.float64).reshape(spec["shape"]), requires_grad=True, name=name)
        for name, spec in doc["tensors"].items()
    }
    moe_cfg = MoEConfig(**doc["moe_config"]) if doc["moe_config"] else None
    vocab = Vocab(w for w in doc["vocab"] if w not in SPECIALS)
    if vocab.itos != doc["vocab"]:
        raise ValueError(f"{path}: vocabulary specials are out of order")
    params = ModelParams(tensors, doc["fusion"], moe_cfg.num_experts if moe_cfg else 0)
    return params, vocab, TrainConfig(**doc["train_config"]), moe_cfg
