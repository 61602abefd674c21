"""Evaluator-based report scoring and draft reference-corpus construction."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

from .client import ClientError, image_part, message, text_part
from .prompts import TemplateSet


class ScoringParseError(ValueError):
    pass


@dataclass
class ScoringReport:
    score: int
    explanation: str

    def to_dict(self) -> dict:
        return asdict(self)


_SCORE_PATTERNS = (
    re.compile(r"\bscore\b\s*(?:of|is|:|=)?\s*(?:of\s*)?\**\s*(\d+(?:\.\d+)?)\s*(?:/\s*10|out of 10)?", re.I),
    re.compile(r"\b(\d+(?:\.\d+)?)\s*(?:/\s*10|out of 10)\b", re.I),
    re.compile(r"^\s*(\d+(?:\.\d+)?)\s*$", re.M),
)


def parse_score(text: str) -> ScoringReport:
    """Extract the 1-10 score: "Score: 8", "a score of 8", "10/10", or a bare number line."""
    for pat in _SCORE_PATTERNS:
        m = pat.search(text)
        if m:
            value = float(m.group(1))
            if value != int(value) or not 1 <= value <= 10:
                raise ScoringParseError(f"score {m.group(1)} outside the integer range 1..10")
            explanation = (text[: m.start()] + text[m.end() :]).strip(" \n.:*")
            return ScoringReport(int(value), explanation)
    raise ScoringParseError("no score found in evaluator output")


def scoring_messages(image, reference: str, generated: str, templates: TemplateSet):
    body = (
        f"Reference report:\n{reference.strip()}\n\n"
        f"Generated report:\n{generated.strip()}\n\n"
        f"Evaluation requirements:\n{templates.scoring_requirements}"
    )
    return [
        message("system", text_part(templates.scoring_system)),
        message("user", image_part(image, "image")),
        message("user", text_part(body)),
    ]


def score_report(image, reference: str, generated: str, client, templates: TemplateSet) -> ScoringReport:
    if not reference.strip() or not generated.strip():
        raise ValueError("both reports must be non-empty")
    return parse_score(client.generate(scoring_messages(image, reference, generated, templates)))


def reference_messages(image, templates: TemplateSet):
    return [message("system", text_part(templates.reference_system)), message("user", image_part(image, "image"))]


def build_reference_corpus(images, client, templates: TemplateSet, out_path) -> Path:
    """Draft one reference per ``(image_id, image)``; entries await manual review.

    Failures are recorded per item and the batch continues.
    """
    out = Path(out_path)
    with open(out, "w") as fh:
        for image_id, image in images:
            rec = {"image": image_id, "metadata": {"reviewed": False}}
            try:
                rec["reference"] = client.generate(reference_messages(image, templates)).strip()
            except ClientError as exc:
                rec["reference"] = None
                rec["error"] = str(exc)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def load_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
