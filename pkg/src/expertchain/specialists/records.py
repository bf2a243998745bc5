"""Per-item rationale state and its append-only JSON-lines store."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable

EFFECTIVE, INEFFECTIVE, UNRESOLVED = "Effective", "Ineffective", "Unresolved"
VERDICTS = (EFFECTIVE, INEFFECTIVE, UNRESOLVED)


@dataclass(frozen=True)
class RationaleRecord:
    item_id: str
    initial_rationale: str = ""
    verdict: str = UNRESOLVED
    followup_rationale: str = ""
    caption: str = ""
    attempt_count: int = 0
    error: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == EFFECTIVE and self.followup_rationale != self.initial_rationale:
            raise ValueError(f"{self.item_id}: effective verdict must keep the initial rationale")
        if self.verdict == INEFFECTIVE and not self.followup_rationale.strip():
            raise ValueError(f"{self.item_id}: ineffective verdict needs a regenerated rationale")

    def update(self, **changes) -> "RationaleRecord":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


class RecordStore:
    """Append-only log of record snapshots; the last line per item wins.

    ``put`` is serialized with a lock so concurrent workers can share one
    store. ``compact`` rewrites the file to one line per item in a given
    order, which makes the file independent of completion order.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, RationaleRecord] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        obj.pop("stage", None)
                        rec = RationaleRecord(**obj)
                    except (json.JSONDecodeError, TypeError, ValueError) as exc:
                        raise ValueError(f"{self.path}:{n}: bad record ({exc})") from None
                    self._records[rec.item_id] = rec

    def get(self, item_id: str) -> RationaleRecord | None:
        return self._records.get(item_id)

    def records(self) -> dict[str, RationaleRecord]:
        return dict(self._records)

    @staticmethod
    def _line(rec: RationaleRecord, stage: str) -> str:
        return json.dumps({"stage": stage, **rec.to_dict()}, sort_keys=True, ensure_ascii=False) + "\n"

    def put(self, rec: RationaleRecord, stage: str) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(self._line(rec, stage))
            self._records[rec.item_id] = rec

    def compact(self, order: Iterable[str]) -> None:
        with self._lock:
            order = list(order)
            known = set(order)
            ids = order + sorted(i for i in self._records if i not in known)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                for item_id in ids:
                    if item_id in self._records:
                        fh.write(self._line(self._records[item_id], "snapshot"))
            os.replace(tmp, self.path)


def load_rationales(path: str | Path) -> dict[str, tuple[str, str]]:
    """Map item id to ``(follow-up rationale, caption)`` for resolved records."""
    return {
        item_id: (rec.followup_rationale, rec.caption)
        for item_id, rec in RecordStore(path).records().items()
        if rec.verdict in (EFFECTIVE, INEFFECTIVE)
    }
