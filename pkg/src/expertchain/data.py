"""VQA items, JSON-lines dataset loading, and the synthetic category task."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from expertchain.model import SEP, Example, Vocab, load_image_features, tokenize, write_image_features

REQUIRED_FIELDS = ("id", "question", "options", "answer", "image_features", "category")


class DatasetError(ValueError):
    pass


@dataclass
class VQAItem:
    id: str
    question: str
    options: list[str]
    answer: str
    image_features: Path
    category: str
    split: str = "train"

    @property
    def closed(self) -> bool:
        return bool(self.options)

    def options_text(self) -> str:
        return " ".join(self.options)


def load_dataset(path: str | Path) -> list[VQAItem]:
    """Strictly parse a JSON-lines dataset.

    Feature paths are resolved relative to the dataset file and must exist.
    """
    path = Path(path)
    base = path.parent
    items: list[VQAItem] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{n}: expected an object")
            missing = [f for f in REQUIRED_FIELDS if f not in obj]
            if missing:
                raise DatasetError(f"{path}:{n}: missing field(s) {', '.join(missing)}")
            item_id = obj["id"]
            if not isinstance(item_id, str) or not item_id:
                raise DatasetError(f"{path}:{n}: id must be a non-empty string")
            if item_id in seen:
                raise DatasetError(f"{path}:{n}: duplicate id {item_id!r} (first on line {seen[item_id]})")
            seen[item_id] = n
            options = obj["options"]
            if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                raise DatasetError(f"{path}:{n}: options must be a list of strings")
            for f in ("question", "answer", "category", "image_features"):
                if not isinstance(obj[f], str) or not obj[f].strip():
                    raise DatasetError(f"{path}:{n}: {f} must be a non-empty string")
            if options and obj["answer"] not in options:
                raise DatasetError(f"{path}:{n}: answer {obj['answer']!r} is not one of the options")
            feat = Path(obj["image_features"])
            if not feat.is_absolute():
                feat = base / feat
            if not feat.is_file():
                raise DatasetError(f"{path}:{n}: feature file {obj['image_features']!r} not found")
            items.append(VQAItem(item_id, obj["question"], options, obj["answer"], feat,
                                 obj["category"], obj.get("split", "train")))
    if not items:
        raise DatasetError(f"{path}: no items")
    return items


def context_text(item: VQAItem, rationale: str = "", caption: str = "") -> str:
    """Encoder input: question, options, rationale, caption joined by separators."""
    return f" {SEP} ".join([item.question, item.options_text(), rationale, caption])


def build_vocab(items: Sequence[VQAItem], extra_texts: Sequence[str] = ()) -> Vocab:
    texts = []
    for it in items:
        texts.extend([it.question, it.answer, *it.options])
    texts.extend(extra_texts)
    return Vocab.build(texts)


def to_examples(
    items: Sequence[VQAItem],
    vocab: Vocab,
    dim: int | None = None,
    rationales: Mapping[str, tuple[str, str]] | None = None,
) -> list[Example]:
    """Tokenize items and load their features.

    ``rationales`` maps item id to ``(follow-up rationale, caption)``.
    """
    out = []
    cache: dict[Path, np.ndarray] = {}
    for it in items:
        rationale, caption = (rationales or {}).get(it.id, ("", ""))
        if it.image_features not in cache:
            cache[it.image_features] = load_image_features(it.image_features, dim)
        out.append(Example(
            it.id,
            vocab.encode(context_text(it, rationale, caption)),
            cache[it.image_features],
            vocab.encode(it.answer) + [vocab.eos],
            it.category,
        ))
    return out


# --------------------------------------------------------------------------
# synthetic category-mixture task
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Category:
    name: str
    question: str
    options: tuple[str, str]


SYNTHETIC_CATEGORIES = (
    _Category("head", "is there a lesion in the head ?", ("yes", "no")),
    _Category("chest", "which side of the chest ?", ("left", "right")),
    _Category("abdomen", "is the abdomen small or large ?", ("small", "large")),
    _Category("pelvis", "is the pelvis normal or abnormal ?", ("normal", "abnormal")),
)

SYNTHETIC_RATIONALE = "the image shows the {name} region"
SYNTHETIC_CAPTION = "a scan of the {name}"


@dataclass
class SyntheticSpec:
    num_items: int = 512
    test_items: int = 64
    dim: int = 16
    patches: int = 4
    noise: float = 0.1
    seed: int = 1234
    categories: tuple[_Category, ...] = field(default=SYNTHETIC_CATEGORIES)


def make_synthetic(out_dir: str | Path, spec: SyntheticSpec | None = None) -> Path:
    """Write a dataset where the answer depends jointly on question and image.

    Each image has one patch per category: a fixed positional code plus a
    shared pattern vector with sign ``+1`` or ``-1``. An item of category
    ``c`` is answered by the sign of patch ``c``, so the model has to read
    the right patch for the question it was asked.

    Also writes ``transcript.jsonl``, a mock LLM transcript with a mix of
    effective and ineffective verdicts. Returns the dataset path.
    """
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cats = spec.categories
    if spec.patches < len(cats):
        raise ValueError("need at least one patch per category")
    positions = rng.normal(0.0, 1.0, (spec.patches, spec.dim))
    pattern = rng.choice([-1.0, 1.0], spec.dim)
    lines, transcript = [], []
    for i in range(spec.num_items):
        cat_idx = i % len(cats)
        cat = cats[cat_idx]
        signs = rng.choice([-1.0, 1.0], spec.patches)
        feats = positions + signs[:, None] * pattern[None, :] + rng.normal(0.0, spec.noise, (spec.patches, spec.dim))
        feats = np.round(feats, 6)
        item_id = f"syn-{i:04d}"
        fname = f"features/{item_id}.txt"
        write_image_features(out / fname, feats)
        answer = cat.options[0] if signs[cat_idx] > 0 else cat.options[1]
        split = "test" if i >= spec.num_items - spec.test_items else "train"
        lines.append(json.dumps({
            "id": item_id, "question": cat.question, "options": list(cat.options), "answer": answer,
            "image_features": fname, "category": cat.name, "split": split,
        }))
        good = SYNTHETIC_RATIONALE.format(name=cat.name)
        effective = i % 3 != 0
        transcript.append({"stage": "initial", "item_id": item_id,
                           "response": good if effective else f"the {cat.options[0]} side of the image"})
        transcript.append({"stage": "followup", "item_id": item_id,
                           "response": "VERDICT: EFFECTIVE" if effective else "VERDICT: INEFFECTIVE"})
        if not effective:
            transcript.append({"stage": "regenerate", "item_id": item_id, "response": good})
        transcript.append({"stage": "caption", "item_id": item_id,
                           "response": SYNTHETIC_CAPTION.format(name=cat.name)})
    path = out / "dataset.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "transcript.jsonl").write_text(
        "".join(json.dumps(t) + "\n" for t in transcript), encoding="utf-8")
    return path


def synthetic_vocab_words() -> list[str]:
    words: list[str] = []
    for c in SYNTHETIC_CATEGORIES:
        for text in (c.question, *c.options, SYNTHETIC_RATIONALE.format(name=c.name),
                     SYNTHETIC_CAPTION.format(name=c.name), f"the {c.options[0]} side of the image"):
            words.extend(w for w in tokenize(text) if w not in words)
    return words
