"""LLM-backed rationale generation and review."""

from expertchain.specialists.backends import (
    BackendConfig,
    BackendConfigError,
    BackendError,
    HttpBackend,
    MockBackend,
    TranscriptMissError,
    TransportFailure,
    backend_send,
    make_backend,
)
from expertchain.specialists.pipeline import (
    PipelineResult,
    StageError,
    follow_up_review,
    generate_caption,
    generate_initial_rationale,
    parse_verdict,
    run_pipeline,
)
from expertchain.specialists.prompts import REQUIRED_FRAGMENTS, build_prompt, load_templates
from expertchain.specialists.records import (
    EFFECTIVE,
    INEFFECTIVE,
    UNRESOLVED,
    RationaleRecord,
    RecordStore,
    load_rationales,
)
