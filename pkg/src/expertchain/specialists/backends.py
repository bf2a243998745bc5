"""LLM backends: a transcript-replaying mock and a generic HTTP-JSON client."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class BackendConfigError(BackendError, ValueError):
    pass


class TranscriptMissError(BackendError):
    pass


class TransportFailure(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    api_key_env: str | None = None
    transcript: Path | None = None
    strict: bool = False
    backoff: float = 0.5
    image_mode: str = "path"

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise BackendConfigError(f"backend kind must be 'mock' or 'http', got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise BackendConfigError("http backend requires an endpoint")
        if self.kind == "mock" and self.transcript is None:
            raise BackendConfigError("mock backend requires a transcript path")
        if self.max_retries < 0 or self.timeout <= 0 or self.backoff < 0:
            raise BackendConfigError("max_retries/backoff must be >= 0 and timeout > 0")
        if self.image_mode not in ("path", "base64"):
            raise BackendConfigError(f"image_mode must be 'path' or 'base64', got {self.image_mode!r}")


class Backend(Protocol):
    def send(self, prompt: str, image_ref: Path, *, stage: str, item_id: str, attempt: int = 0) -> str: ...


def _check_image(image_ref: Path) -> None:
    if not Path(image_ref).is_file():
        raise FileNotFoundError(f"image reference {image_ref} does not exist")


class MockBackend:
    """Replays canned responses keyed by ``(stage, item_id)``.

    Repeated entries for one key are served in file order, one per attempt;
    later attempts reuse the last entry. Outside strict mode a missing key
    yields a stable echo built from the prompt digest.
    """

    def __init__(self, transcript: str | Path, strict: bool = False):
        self.strict = strict
        self.entries: dict[tuple[str, str], list[str]] = {}
        path = Path(transcript)
        with path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = (str(obj["stage"]), str(obj["item_id"]))
                    response = obj["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise BackendConfigError(f"{path}:{n}: bad transcript line ({exc})") from None
                if not isinstance(response, str):
                    raise BackendConfigError(f"{path}:{n}: response must be a string")
                self.entries.setdefault(key, []).append(response)

    def send(self, prompt: str, image_ref: Path, *, stage: str, item_id: str, attempt: int = 0) -> str:
        _check_image(image_ref)
        replies = self.entries.get((stage, item_id))
        if not replies:
            if self.strict:
                raise TranscriptMissError(f"no transcript entry for stage={stage!r} item_id={item_id!r}")
            digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
            return f"[mock {stage} {digest}]"
        return replies[min(attempt, len(replies) - 1)]


class HttpBackend:
    """POSTs ``{prompt, stage, item_id, image}`` as JSON and reads ``text`` back.

    Timeouts, connection failures and 5xx replies are retried up to
    ``max_retries`` times with exponential backoff.
    """

    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        headers = {}
        if cfg.api_key_env:
            key = os.environ.get(cfg.api_key_env)
            if not key:
                raise BackendConfigError(f"environment variable {cfg.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self.client = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self.client.close()

    def _payload(self, prompt: str, image_ref: Path, stage: str, item_id: str) -> dict:
        body = {"prompt": prompt, "stage": stage, "item_id": item_id}
        if self.cfg.image_mode == "base64":
            body["image_b64"] = base64.b64encode(Path(image_ref).read_bytes()).decode("ascii")
        else:
            body["image_path"] = str(image_ref)
        return body

    def send(self, prompt: str, image_ref: Path, *, stage: str, item_id: str, attempt: int = 0) -> str:
        _check_image(image_ref)
        body = self._payload(prompt, image_ref, stage, item_id)
        attempts = 0
        last = "no attempt made"
        while True:
            attempts += 1
            try:
                resp = self.client.post(self.cfg.endpoint, json=body)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code} from {self.cfg.endpoint}: {resp.text[:200]}")
                else:
                    try:
                        data = resp.json()
                        return str(data["text"])
                    except (ValueError, KeyError, TypeError):
                        raise BackendError(f"malformed reply from {self.cfg.endpoint}: {resp.text[:200]}") from None
            if attempts > self.cfg.max_retries:
                raise TransportFailure(f"{self.cfg.endpoint}: {last}", attempts)
            delay = self.cfg.backoff * (2 ** (attempts - 1))
            logger.warning("attempt %d to %s failed (%s); retrying in %.2fs", attempts, self.cfg.endpoint, last, delay)
            if delay:
                time.sleep(delay)


def make_backend(cfg: BackendConfig, transport: httpx.BaseTransport | None = None) -> Backend:
    if cfg.kind == "mock":
        return MockBackend(cfg.transcript, strict=cfg.strict)
    return HttpBackend(cfg, transport=transport)


def backend_send(cfg: BackendConfig, prompt: str, image_ref: Path, *, stage: str, item_id: str) -> str:
    """One-shot send through a freshly built backend."""
    backend = make_backend(cfg)
    try:
        return backend.send(prompt, image_ref, stage=stage, item_id=item_id)
    finally:
        if isinstance(backend, HttpBackend):
            backend.close()
