"""Prompt templates and the semantic / spatial / structural prompt builders."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .. import _kernels

IMAGE_TOKEN = "<image>"
IMAGE_PROMPT = f"Image: {IMAGE_TOKEN}"
MASK_PROMPT = f"Waterlogging mask: {IMAGE_TOKEN}"
SECTIONS = ("Extent", "Depth", "Risk", "Impact")
OVERLAY_COLOR = (0, 200, 255)

_TEMPLATE_FILES = {
    "caption": "caption.txt",
    "report": "report.txt",
    "bare": "bare.txt",
    "reference_system": "reference_system.txt",
    "scoring_system": "scoring_system.txt",
    "scoring_requirements": "scoring_requirements.txt",
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateSet:
    caption: str
    report: str
    bare: str
    reference_system: str
    scoring_system: str
    scoring_requirements: str

    def __post_init__(self):
        missing = [s for s in SECTIONS if not re.search(rf"^\s*{s}:", self.report, re.M)]
        if missing:
            raise TemplateError(f"report template lacks section headers: {', '.join(missing)}")


def load_templates(directory: str | Path | None = None) -> TemplateSet:
    """Packaged defaults, with any same-named files in ``directory`` taking precedence."""
    pkg = resources.files("waterlog.report") / "templates"
    texts = {}
    for key, fname in _TEMPLATE_FILES.items():
        override = Path(directory) / fname if directory else None
        if override is not None and override.exists():
            texts[key] = override.read_text().strip()
        else:
            texts[key] = (pkg / fname).read_text().strip()
    return TemplateSet(**texts)


# ------------------------------------------------------------- builders


def build_semantic_prompt(caption: str) -> str:
    if not caption or not caption.strip():
        raise ValueError("caption is empty")
    return f"Scene description: {caption.strip().replace(IMAGE_TOKEN, '')}"


def build_structural_prompt(templates: TemplateSet) -> str:
    return templates.report


def _grid_labels(rows: int, cols: int) -> list[list[str]]:
    if (rows, cols) == (3, 3):
        r = ("top", "middle", "bottom")
        c = ("left", "center", "right")
        return [[f"{r[i]}-{c[j]}" for j in range(3)] for i in range(3)]
    return [[f"row {i + 1} col {j + 1}" for j in range(cols)] for i in range(rows)]


def _edges(n: int, parts: int) -> list[int]:
    return [int(round(k * n / parts)) for k in range(parts + 1)]


def region_stats(mask: np.ndarray, grid=(3, 3)) -> dict:
    """Coverage, per-cell coverage, component count and largest-region bbox."""
    m = np.asarray(mask) != 0
    h, w = m.shape
    rows, cols = grid
    ye, xe = _edges(h, rows), _edges(w, cols)
    cells = [[float(m[ye[i] : ye[i + 1], xe[j] : xe[j + 1]].mean()) if ye[i + 1] > ye[i] and xe[j + 1] > xe[j] else 0.0
              for j in range(cols)] for i in range(rows)]
    labels, n = _kernels.label_components(m)
    bbox = None
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
        big = int(np.argmax(sizes)) + 1
        ys, xs = np.nonzero(labels == big)
        bbox = (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)
    return {"coverage": float(m.mean()) if m.size else 0.0, "cells": cells, "components": int(n), "bbox": bbox}


def build_spatial_prompt(mask: np.ndarray, grid=(3, 3)) -> str:
    """Text encoding of where the water is: coverage, grid cells, regions."""
    st = region_stats(mask, grid)
    labels = _grid_labels(*grid)
    lines = [f"Overall water coverage {100.0 * st['coverage']:.1f}% of the image."]
    lines.append(f"Water coverage per region ({grid[0]}x{grid[1]} grid):")
    for lab_row, cov_row in zip(labels, st["cells"]):
        lines.append("  " + ", ".join(f"{lab} {100.0 * c:.1f}%" for lab, c in zip(lab_row, cov_row)))
    lines.append(f"Connected water regions: {st['components']}.")
    if st["bbox"] is not None:
        x0, y0, x1, y1 = st["bbox"]
        lines.append(f"Largest region bounding box (x0, y0, x1, y1, normalized): ({x0:.2f}, {y0:.2f}, {x1:.2f}, {y1:.2f}).")
    return "\n".join(lines)


def mask_visualization(mask: np.ndarray) -> np.ndarray:
    """Water pixels in a fixed overlay colour on black, uint8 ``(H, W, 3)``."""
    m = np.asarray(mask) != 0
    out = np.zeros((*m.shape, 3), dtype=np.uint8)
    out[m] = OVERLAY_COLOR
    return out
