import json

import numpy as np
import pytest

from expertchain.data import load_dataset, make_synthetic
from expertchain.model import write_image_features


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    make_synthetic(out)
    return out


@pytest.fixture(scope="session")
def synthetic_items(synthetic_dir):
    return load_dataset(synthetic_dir / "dataset.jsonl")


@pytest.fixture
def small_dataset(tmp_path):
    """Three hand-written items with 2x4 feature files; returns the dataset path."""
    rows = [
        {"id": "a", "question": "Is there a localized mass?", "options": ["yes", "no"], "answer": "yes",
         "image_features": "img/a.txt", "category": "head"},
        {"id": "b", "question": "Which side?", "options": ["left", "right"], "answer": "right",
         "image_features": "img/b.txt", "category": "chest"},
        {"id": "c", "question": "What organ is shown?", "options": [], "answer": "the liver",
         "image_features": "img/c.txt", "category": "abdomen"},
    ]
    (tmp_path / "img").mkdir()
    rng = np.random.default_rng(0)
    for r in rows:
        write_image_features(tmp_path / r["image_features"], rng.normal(size=(2, 4)))
    path = tmp_path / "data.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def write_transcript(path, entries):
    path.write_text("".join(json.dumps({"stage": s, "item_id": i, "response": r}) + "\n" for s, i, r in entries))
    return path
