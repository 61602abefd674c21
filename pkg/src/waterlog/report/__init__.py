"""Two-step report generation over a pluggable multimodal chat client, plus scoring."""

from .client import (
    ClientError,
    HttpChatClient,
    MockClient,
    RecordingClient,
    ReplayClient,
    RetriableError,
    RetryingClient,
    VlmClient,
    build_client,
    image_part,
    message,
    payload_text,
    serializable,
    text_part,
)
from .pipeline import (
    AssessmentReport,
    Caption,
    PipelineError,
    PromptFlags,
    caption_image,
    generate_report,
    parse_sections,
    report_messages,
)
from .prompts import (
    IMAGE_PROMPT,
    IMAGE_TOKEN,
    MASK_PROMPT,
    SECTIONS,
    TemplateError,
    TemplateSet,
    build_semantic_prompt,
    build_spatial_prompt,
    build_structural_prompt,
    load_templates,
    mask_visualization,
    region_stats,
)
from .scoring import (
    ScoringParseError,
    ScoringReport,
    build_reference_corpus,
    load_jsonl,
    parse_score,
    score_report,
    scoring_messages,
)
