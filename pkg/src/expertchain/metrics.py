"""Answer metrics, expert-utilization tallies, and the evaluation report."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

from expertchain.moe import RoutingLog


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def accuracy_closed(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold answers")
    if not golds:
        raise ValueError("accuracy of an empty list is undefined")
    hits = sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(predictions, golds))
    return hits / len(golds)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 over whitespace tokens."""
    ref = reference.split()
    if not ref:
        raise ValueError("reference must be non-empty")
    cand = candidate.split()
    if not cand:
        return 0.0
    lcs = _lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_from_counts(matches: Sequence[int], totals: Sequence[int], cand_len: int, ref_len: int) -> float:
    """Combine clipped n-gram counts; add-one smoothing from bigrams upward."""
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        p = m / t if n == 1 else (m + 1) / (t + 1)
        log_p += math.log(p)
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p / len(matches))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Smoothed sentence BLEU with brevity penalty."""
    cand, ref = candidate.split(), reference.split()
    if not cand:
        return 0.0
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matches.append(sum(min(k, r[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return bleu_from_counts(matches, totals, len(cand), len(ref))


def expert_utilization(log: RoutingLog) -> dict[str, dict[int, float]]:
    """Per category, the share of total routing weight each expert received."""
    if not len(log):
        raise ValueError("routing log is empty")
    mass: dict[str, dict[int, float]] = defaultdict(lambda: defaultdict(float))
    for rec in log.records:
        for e, w in zip(rec.experts, rec.weights):
            mass[rec.category][e] += w
    out = {}
    for cat in sorted(mass):
        total = sum(mass[cat].values())
        out[cat] = {e: mass[cat][e] / total for e in sorted(mass[cat])}
    return out


@dataclass
class CategoryScore:
    count: int
    correct: int
    accuracy: float


@dataclass
class EvalReport:
    num_items: int
    exact_match: float
    closed_accuracy: float | None
    closed_count: int
    open_rouge_l: float | None
    open_bleu: float | None
    open_count: int
    per_category: dict[str, CategoryScore] = field(default_factory=dict)
    expert_utilization: dict[str, dict[int, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["expert_utilization"] = {
            c: {str(e): w for e, w in h.items()} for c, h in self.expert_utilization.items()
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"items: {self.num_items}", f"exact match: {self.exact_match:.4f}"]
        if self.closed_accuracy is not None:
            lines.append(f"closed-end accuracy: {self.closed_accuracy:.4f} ({self.closed_count} items)")
        if self.open_rouge_l is not None:
            lines.append(f"open-end ROUGE-L: {self.open_rouge_l:.4f}  BLEU: {self.open_bleu:.4f} ({self.open_count} items)")
        lines.append("per category:")
        for cat, s in self.per_category.items():
            lines.append(f"  {cat:<12} {s.correct:>5}/{s.count:<5} {s.accuracy:.4f}")
        if self.expert_utilization:
            lines.append("expert weight share by category:")
            for cat, hist in self.expert_utilization.items():
                cells = "  ".join(f"e{e}={w:.3f}" for e, w in hist.items())
                lines.append(f"  {cat:<12} {cells}")
        return "\n".join(lines) + "\n"


def build_report(
    predictions: Sequence[str],
    golds: Sequence[str],
    categories: Sequence[str],
    closed: Sequence[bool],
    routing: RoutingLog | None = None,
) -> EvalReport:
    """Assemble an :class:`EvalReport`; depends only on its arguments."""
    n = len(golds)
    if not (len(predictions) == n == len(categories) == len(closed)):
        raise ValueError("predictions, golds, categories and closed flags must align")
    if n == 0:
        raise ValueError("nothing to report")
    hits = [normalize_answer(p) == normalize_answer(g) for p, g in zip(predictions, golds)]
    per_cat: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for cat, h in zip(categories, hits):
        per_cat[cat][0] += 1
        per_cat[cat][1] += int(h)
    closed_idx = [i for i in range(n) if closed[i]]
    open_idx = [i for i in range(n) if not closed[i]]
    rouge = bleu_score = None
    if open_idx:
        rouge = sum(rouge_l(predictions[i], golds[i]) for i in open_idx) / len(open_idx)
        bleu_score = sum(bleu(predictions[i], golds[i]) for i in open_idx) / len(open_idx)
    return EvalReport(
        num_items=n,
        exact_match=sum(hits) / n,
        closed_accuracy=(accuracy_closed([predictions[i] for i in closed_idx], [golds[i] for i in closed_idx])
                         if closed_idx else None),
        closed_count=len(closed_idx),
        open_rouge_l=rouge,
        open_bleu=bleu_score,
        open_count=len(open_idx),
        per_category={c: CategoryScore(cnt, ok, ok / cnt) for c, (cnt, ok) in sorted(per_cat.items())},
        expert_utilization=expert_utilization(routing) if routing is not None and len(routing) else {},
    )
