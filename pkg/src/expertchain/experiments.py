"""Train/evaluate runs and the (experts, top-k) grid search."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from expertchain.data import VQAItem, build_vocab, to_examples
from expertchain.metrics import EvalReport, build_report
from expertchain.model import (
    Example,
    ModelParams,
    TrainConfig,
    Vocab,
    greedy_decode,
    init_params,
    train,
)
from expertchain.moe import ConfigError, MoEConfig, RoutingLog

logger = logging.getLogger(__name__)

GRID_COLUMNS = ("num_experts", "top_k", "status", "accuracy", "final_loss")

# desk-scale settings for the bundled synthetic task (the library defaults
# keep lr=8e-5, batch 8, 100 epochs)
SYNTHETIC_TRAIN = TrainConfig(lr=0.1, batch_size=8, epochs=20, seed=0, fusion="moe", dim=16)
SYNTHETIC_MOE = MoEConfig(num_experts=4, top_k=2, expert_hidden=16, seed=0)


@dataclass
class Evaluation:
    predictions: list[str]
    routing: RoutingLog
    report: EvalReport


@dataclass
class RunResult:
    params: ModelParams
    vocab: Vocab
    loss_trace: list[float]
    evaluation: Evaluation

    @property
    def accuracy(self) -> float:
        r = self.evaluation.report
        return r.closed_accuracy if r.closed_accuracy is not None else r.exact_match


def split_items(items: Sequence[VQAItem], split: str) -> list[VQAItem]:
    chosen = [it for it in items if it.split == split]
    if not chosen:
        raise ValueError(f"no items in split {split!r}")
    return chosen


def vocab_for(items: Sequence[VQAItem], rationales: Mapping[str, tuple[str, str]] | None) -> Vocab:
    extra = [t for pair in (rationales or {}).values() for t in pair]
    return build_vocab(items, extra)


def evaluate(
    items: Sequence[VQAItem],
    examples: Sequence[Example],
    params: ModelParams,
    vocab: Vocab,
    moe_cfg: MoEConfig | None,
    max_len: int = 8,
) -> Evaluation:
    predictions = []
    routing = RoutingLog()
    for it, ex in zip(items, examples):
        ids, log = greedy_decode(ex.tokens, ex.features, params, moe_cfg, max_len, it.id, it.category)
        predictions.append(vocab.decode(ids))
        routing.extend(log)
    report = build_report(predictions, [it.answer for it in items], [it.category for it in items],
                          [it.closed for it in items], routing)
    return Evaluation(predictions, routing, report)


def run_experiment(
    items: Sequence[VQAItem],
    train_cfg: TrainConfig,
    moe_cfg: MoEConfig | None,
    rationales: Mapping[str, tuple[str, str]] | None = None,
    train_split: str = "train",
    eval_split: str | None = None,
) -> RunResult:
    """Train from scratch on ``train_split`` and evaluate on ``eval_split``.

    ``eval_split`` defaults to ``"test"`` when present, else the train split.
    """
    vocab = vocab_for(items, rationales)
    train_items = split_items(items, train_split)
    if eval_split is None:
        eval_split = "test" if any(it.split == "test" for it in items) else train_split
    eval_items = split_items(items, eval_split)
    moe = moe_cfg if train_cfg.fusion == "moe" else None
    train_ex = to_examples(train_items, vocab, train_cfg.dim, rationales)
    eval_ex = train_ex if eval_split == train_split else to_examples(eval_items, vocab, train_cfg.dim, rationales)
    params = init_params(len(vocab), train_cfg.dim, train_cfg.fusion, moe, train_cfg.seed)
    result = train(train_ex, params, train_cfg, moe)
    evaluation = evaluate(eval_items, eval_ex, result.params, vocab, moe)
    return RunResult(result.params, vocab, result.loss_trace, evaluation)


@dataclass
class GridCell:
    num_experts: int
    top_k: int
    status: str
    accuracy: float | None = None
    final_loss: float | None = None
    error: str = ""


def grid_search(
    items: Sequence[VQAItem],
    expert_counts: Sequence[int],
    top_ks: Sequence[int],
    train_cfg: TrainConfig,
    expert_hidden: int = 16,
    rationales: Mapping[str, tuple[str, str]] | None = None,
    eval_split: str | None = None,
) -> list[GridCell]:
    """One full train+eval per ``(N, k)`` cell, all with ``train_cfg.seed``.

    A cell that fails (including ``k > N``) is recorded and the search goes on.
    """
    if not expert_counts or not top_ks:
        raise ValueError("grid needs at least one expert count and one k")
    cfg = replace(train_cfg, fusion="moe")
    cells = []
    for n in expert_counts:
        for k in top_ks:
            try:
                moe = MoEConfig(num_experts=n, top_k=k, expert_hidden=expert_hidden, seed=cfg.seed)
                run = run_experiment(items, cfg, moe, rationales, eval_split=eval_split)
            except (ConfigError, ArithmeticError, RuntimeError, ValueError) as exc:
                logger.warning("grid cell N=%d k=%d failed: %s", n, k, exc)
                cells.append(GridCell(n, k, "failed", error=str(exc)))
                continue
            cells.append(GridCell(n, k, "ok", run.accuracy, run.loss_trace[-1]))
    return cells


def grid_csv(cells: Sequence[GridCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for c in cells:
        w.writerow([c.num_experts, c.top_k, c.status,
                    "" if c.accuracy is None else repr(c.accuracy),
                    "" if c.final_loss is None else repr(c.final_loss)])
    return buf.getvalue()


def grid_text(cells: Sequence[GridCell]) -> str:
    lines = [f"{'N':>4} {'k':>3}  {'accuracy':>9}  {'final loss':>11}"]
    for c in cells:
        if c.status == "ok":
            lines.append(f"{c.num_experts:>4} {c.top_k:>3}  {c.accuracy:>9.4f}  {c.final_loss:>11.6f}")
        else:
            lines.append(f"{c.num_experts:>4} {c.top_k:>3}  failed: {c.error}")
    ok = [c for c in cells if c.status == "ok"]
    if ok:
        best = max(ok, key=lambda c: (c.accuracy, -c.num_experts, -c.top_k))
        lines.append(f"best: N={best.num_experts} k={best.top_k} accuracy={best.accuracy:.4f}")
    return "\n".join(lines) + "\n"
