"""Two-step report generation: caption first, then the conditioned report."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .client import ClientError, RetriableError, image_part, message, text_part
from .prompts import (
    IMAGE_PROMPT,
    MASK_PROMPT,
    SECTIONS,
    TemplateSet,
    build_semantic_prompt,
    build_spatial_prompt,
    build_structural_prompt,
    mask_visualization,
)


class PipelineError(RuntimeError):
    """A generation step failed; ``__cause__`` holds the client error."""


@dataclass(frozen=True)
class PromptFlags:
    semantic: bool = True
    spatial: bool = True
    structural: bool = True

    @classmethod
    def none(cls) -> "PromptFlags":
        return cls(False, False, False)


@dataclass
class Caption:
    text: str
    image_id: str = ""


@dataclass
class AssessmentReport:
    image_id: str
    raw: str
    sections: dict = field(default_factory=dict)
    parsed: bool = False
    caption: str | None = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def caption_image(image: np.ndarray, client, templates: TemplateSet, image_id: str = "") -> Caption:
    msgs = [message("user", image_part(image, "image"), text_part(f"{IMAGE_PROMPT}\n{templates.caption}"))]
    try:
        text = client.generate(msgs)
    except ClientError as exc:
        raise PipelineError(f"caption step failed for {image_id or 'image'}") from exc
    text = (text or "").strip()
    if not text:
        raise RetriableError("empty caption")
    return Caption(text, image_id)


def report_messages(image, mask, caption: str | None, templates: TemplateSet, flags: PromptFlags, grid=(3, 3)):
    """Step-2 payload: image (+ mask visualization) and the enabled prompt texts."""
    parts = [image_part(image, "image")]
    texts = [IMAGE_PROMPT]
    if flags.semantic:
        texts.append(build_semantic_prompt(caption))
    if flags.spatial:
        parts.append(image_part(mask_visualization(mask), "mask"))
        texts.append(f"{MASK_PROMPT}\n{build_spatial_prompt(mask, grid)}")
    texts.append(build_structural_prompt(templates) if flags.structural else templates.bare)
    parts.append(text_part("\n\n".join(texts)))
    return [message("user", *parts)]


_HEADER = re.compile(
    r"^\s*(?:#+\s*)?(?:\d+[.)]\s*)?(?:\*\*)?\s*(extent|depth|risks?|impacts?)\b\s*(?:\*\*)?\s*:?\s*(?:\*\*)?\s*(.*)$",
    re.I,
)


def parse_sections(text: str) -> tuple[dict, bool]:
    """Split a report into the four sections by header lines.

    Exact ``Name:`` headers are preferred; headers with numbering, markdown
    emphasis, different case or plural forms are also accepted.
    """
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _HEADER.match(line)
        if m:
            name = m.group(1).lower().rstrip("s")
            key = next(s for s in SECTIONS if s.lower() == name)
            if key not in sections:
                current = key
                sections[current] = [m.group(2)] if m.group(2).strip() else []
                continue
        if current is not None:
            sections[current].append(line)
    out = {k: "\n".join(v).strip() for k, v in sections.items()}
    ok = all(out.get(s) for s in SECTIONS)
    return {s: out.get(s, "") for s in SECTIONS}, ok


def generate_report(image, mask, client, templates: TemplateSet, flags: PromptFlags = PromptFlags(),
                    grid=(3, 3), image_id: str = "") -> AssessmentReport:
    """Caption (only when the semantic prompt is on), then one report call."""
    caption = caption_image(image, client, templates, image_id).text if flags.semantic else None
    msgs = report_messages(image, mask, caption, templates, flags, grid)
    try:
        raw = client.generate(msgs)
    except ClientError as exc:
        raise PipelineError(f"report step failed for {image_id or 'image'}") from exc
    sections, ok = parse_sections(raw)
    return AssessmentReport(image_id, raw, sections, ok, caption, asdict(flags))
