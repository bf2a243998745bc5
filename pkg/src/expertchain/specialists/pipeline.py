"""Initial rationale, follow-up review, and caption stages over a dataset."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from string import Template
from typing import Sequence

from expertchain.autograd import ContractError
from expertchain.specialists.backends import Backend, BackendError
from expertchain.specialists.prompts import build_prompt, load_templates
from expertchain.specialists.records import (
    EFFECTIVE,
    INEFFECTIVE,
    UNRESOLVED,
    RationaleRecord,
    RecordStore,
)

logger = logging.getLogger(__name__)

_VERDICT_RE = re.compile(r"^\s*VERDICT:\s*(EFFECTIVE|INEFFECTIVE)\s*$", re.IGNORECASE | re.MULTILINE)


class StageError(RuntimeError):
    """A stage failed; ``record`` is the item's state after the failure."""

    def __init__(self, message: str, record: RationaleRecord):
        super().__init__(message)
        self.record = record


def parse_verdict(reply: str) -> str | None:
    """``Effective``/``Ineffective`` from the last verdict line, or ``None``."""
    found = _VERDICT_RE.findall(reply)
    if not found:
        return None
    return EFFECTIVE if found[-1].upper() == "EFFECTIVE" else INEFFECTIVE


def _ask(backend: Backend, stage: str, item, prompt: str, attempt: int = 0) -> str:
    return backend.send(prompt, item.image_features, stage=stage, item_id=item.id, attempt=attempt)


def generate_initial_rationale(
    item, record: RationaleRecord, backend: Backend,
    templates: dict[str, Template] | None = None, force: bool = False,
) -> RationaleRecord:
    if record.initial_rationale and not force:
        return record
    reply = _ask(backend, "initial", item, build_prompt("initial", item, templates=templates))
    if not reply.strip():
        raise StageError(f"{item.id}: empty initial rationale",
                         record.update(verdict=UNRESOLVED, error="empty initial rationale"))
    # a new initial rationale invalidates any earlier review
    return record.update(initial_rationale=reply, verdict=UNRESOLVED, followup_rationale="",
                         attempt_count=record.attempt_count + 1, error="")


def follow_up_review(
    item, record: RationaleRecord, backend: Backend, max_retries: int = 2,
    templates: dict[str, Template] | None = None, force: bool = False,
) -> RationaleRecord:
    """Keep an effective rationale verbatim; replace an ineffective one.

    The review reply must carry a ``VERDICT: EFFECTIVE|INEFFECTIVE`` line;
    unparseable replies are re-asked up to ``max_retries`` times.
    """
    if not record.initial_rationale:
        raise ContractError(f"{item.id}: follow-up review needs an initial rationale")
    if record.verdict != UNRESOLVED and not force:
        return record
    prompt = build_prompt("followup", item, record.initial_rationale, templates)
    verdict = None
    for attempt in range(max_retries + 1):
        verdict = parse_verdict(_ask(backend, "followup", item, prompt, attempt))
        if verdict is not None:
            break
        logger.info("%s: no verdict line in review reply (attempt %d)", item.id, attempt + 1)
    if verdict is None:
        msg = f"no parseable verdict after {max_retries + 1} attempts"
        raise StageError(f"{item.id}: {msg}",
                         record.update(verdict=UNRESOLVED, followup_rationale="", error=msg))
    if verdict == EFFECTIVE:
        return record.update(verdict=EFFECTIVE, followup_rationale=record.initial_rationale, error="")
    regen = _ask(backend, "regenerate", item, build_prompt("regenerate", item, record.initial_rationale, templates))
    if not regen.strip():
        msg = "empty regenerated rationale"
        raise StageError(f"{item.id}: {msg}", record.update(verdict=UNRESOLVED, followup_rationale="", error=msg))
    return record.update(verdict=INEFFECTIVE, followup_rationale=regen, error="")


def generate_caption(
    item, record: RationaleRecord, backend: Backend,
    templates: dict[str, Template] | None = None, force: bool = False,
) -> RationaleRecord:
    if record.caption and not force:
        return record
    reply = _ask(backend, "caption", item, build_prompt("caption", item, templates=templates))
    if not reply.strip():
        raise StageError(f"{item.id}: empty caption", record.update(error="empty caption"))
    return record.update(caption=reply)


@dataclass
class PipelineResult:
    records: dict[str, RationaleRecord]
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def failure_report(self) -> str:
        if not self.failures:
            return "all items resolved\n"
        return "".join(f"{item_id}: {msg}\n" for item_id, msg in self.failures)


def _process(item, store: RecordStore, backend: Backend, max_retries: int,
             templates, force: bool) -> str | None:
    record = store.get(item.id) or RationaleRecord(item.id)
    steps = (
        ("initial", lambda r: generate_initial_rationale(item, r, backend, templates, force)),
        ("followup", lambda r: follow_up_review(item, r, backend, max_retries, templates, force)),
        ("caption", lambda r: generate_caption(item, r, backend, templates, force)),
    )
    for stage, step in steps:
        try:
            updated = step(record)
        except StageError as exc:
            store.put(exc.record, stage)
            return str(exc)
        except (BackendError, OSError) as exc:
            return f"{item.id}: {stage}: {exc}"
        if updated != record:
            store.put(updated, stage)
            record = updated
    return None


def run_pipeline(
    items: Sequence,
    backend: Backend,
    store: RecordStore,
    parallelism: int = 1,
    max_retries: int = 2,
    templates: dict[str, Template] | None = None,
    force: bool = False,
) -> PipelineResult:
    """Run every stage for every item with up to ``parallelism`` workers.

    Items are independent; the store is compacted into dataset order at the
    end, so the result does not depend on ``parallelism`` or completion order.
    """
    if parallelism < 1:
        raise ContractError("parallelism must be at least 1")
    templates = templates or load_templates()
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        errors = list(pool.map(lambda it: _process(it, store, backend, max_retries, templates, force), items))
    store.compact(it.id for it in items)
    records = store.records()
    failures = []
    for item, err in zip(items, errors):
        rec = records.get(item.id)
        if err is not None:
            failures.append((item.id, err))
        elif rec is None or rec.verdict == UNRESOLVED:
            failures.append((item.id, "unresolved"))
    return PipelineResult(records, failures)
