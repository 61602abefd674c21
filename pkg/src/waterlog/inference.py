"""Model loading, per-image prediction and sharded evaluation."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import SegModel, load_arrays_into, read_checkpoint_config
from .config import ConfigError, RunConfig
from .data import load_image, load_mask
from .metrics import ConfusionCounts, MetricReport, PRAccumulator, PRCurve, accumulate, compute_metrics, default_thresholds
from .s2match.perturb import binarize


def load_model(path, cfg: RunConfig, which: str = "teacher") -> SegModel:
    """Model from a trainer checkpoint (``.pt``) or a weights archive (``.npz``).

    Raises :class:`ConfigError` when the checkpoint does not fit ``cfg``.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model = SegModel(cfg.backbone, cfg.adaptation)
    if path.suffix == ".npz":
        bcfg, acfg = read_checkpoint_config(path)
        if bcfg != cfg.backbone or acfg != cfg.adaptation:
            raise ConfigError(f"checkpoint {path} was written for a different backbone/adaptation config")
        with np.load(path) as z:
            load_arrays_into(model, {k: z[k] for k in z.files})
    else:
        state = torch.load(path, weights_only=False)
        saved = state.get("config", {})
        for section in ("backbone", "adaptation"):
            if section in saved and saved[section] != cfg.to_dict()[section]:
                raise ConfigError(f"checkpoint {path}: {section} config differs from the run config")
        try:
            model.load_state_dict(state[which])
        except (KeyError, RuntimeError) as exc:
            raise ConfigError(f"checkpoint {path} does not match the model: {exc}") from exc
    model.eval()
    return model


@torch.no_grad()
def predict_probs(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Water probability for one ``(H, W, 3)`` float image, at its own size.

    Images are resized to the model input size and the map is resized back.
    """
    h, w = image.shape[:2]
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(dtype)
    size = tuple(model.cfg.input_size)
    if (h, w) != size:
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    p = model(x)
    if (h, w) != size:
        p = F.interpolate(p[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return p[0].clamp(0.0, 1.0).to(torch.float64).numpy()


@dataclass
class EvalShard:
    counts: ConfusionCounts
    pr: PRAccumulator
    per_image: list  # [(image_path, iou, dice)]


def _eval_shard(predict, pairs, thresholds, binarize_threshold) -> EvalShard:
    counts = ConfusionCounts()
    acc = PRAccumulator(thresholds)
    rows = []
    for img_path, mask_path in pairs:
        gt = load_mask(mask_path)
        probs = predict(img_path)
        pred = binarize(torch.from_numpy(probs), binarize_threshold).numpy().astype(np.uint8)
        c = accumulate(pred, gt)
        counts = counts + c
        acc.add(probs, gt)
        m = compute_metrics(c)
        rows.append((str(img_path), m.iou, m.dice))
    return EvalShard(counts, acc, rows)


def evaluate_pairs(predict, pairs, n_thresholds: int = 99, workers: int = 1, binarize_threshold: float = 0.5):
    """Metrics over ``pairs`` with ``predict(image_path) -> probs``.

    Pairs are split into ``workers`` contiguous shards evaluated concurrently;
    counts and histograms are integer sums, so the result is independent of
    the shard count.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluation set is empty")
    workers = max(1, min(workers, len(pairs)))
    bounds = np.linspace(0, len(pairs), workers + 1).round().astype(int)
    shards = [pairs[bounds[i] : bounds[i + 1]] for i in range(workers)]
    thresholds = default_thresholds(n_thresholds)
    if workers == 1:
        results = [_eval_shard(predict, shards[0], thresholds, binarize_threshold)]
    else:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda s: _eval_shard(predict, s, thresholds, binarize_threshold), shards))
    counts = ConfusionCounts()
    acc = PRAccumulator(thresholds)
    per_image = []
    for r in results:
        counts = counts + r.counts
        acc.merge(r.pr)
        per_image.extend(r.per_image)
    return compute_metrics(counts), acc.curve(), per_image


def model_predictor(model: SegModel):
    def predict(img_path):
        return predict_probs(model, load_image(img_path))

    return predict


def write_eval_outputs(out_dir, report: MetricReport, curve: PRCurve, per_image, extra: dict | None = None):
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["bep"] = {"threshold": curve.break_even[0], "value": curve.break_even[1]}
    payload.update(extra or {})
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    curve.to_csv(out / "pr.csv", include_bep=False)
    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "iou", "dice"])
        for row in per_image:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    return out
