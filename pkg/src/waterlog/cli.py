"""Command-line entry points.

``waterlog {train|evaluate|infer|report|score|toygen|plotdata|sweep} [--config C] [--set key=value ...]``

Exit codes: 0 success, 2 config or validation error, 3 runtime or client error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, ToySceneParams, generate_toy_dataset, load_image, load_mask, save_mask, scan_dataset
from .metrics import METRIC_NAMES, break_even_point

log = logging.getLogger("waterlog")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


# ----------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def run_dir_for(cfg: RunConfig, explicit=None) -> Path:
    """``<output.root>/<run_name or timestamp>-<config hash>`` unless given."""
    if explicit:
        return Path(explicit)
    prefix = cfg.output.run_name or time.strftime("%Y%m%d-%H%M%S")
    return Path(cfg.output.root) / f"{prefix}-{cfg.config_hash()}"


def _write_config(run_dir: Path, cfg: RunConfig):
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.config_hash(), "config": cfg.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write_jsonl(path: Path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _image_id(path) -> str:
    return Path(path).stem


# ------------------------------------------------------------------- train


def train_run(cfg: RunConfig, run_dir: Path, resume=None) -> dict:
    """Train, then evaluate the configured model on the validation split if present."""
    from .inference import evaluate_pairs, load_model, model_predictor, write_eval_outputs
    from .s2match.engine import fit

    manifest = scan_dataset(cfg.data.root, "train")
    _write_config(run_dir, cfg)
    trainer = fit(cfg, manifest, run_dir, resume=resume)
    ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.pt"))
    summary = {"checkpoint": str(ckpts[-1]), "iterations": trainer.iteration, "config_hash": cfg.config_hash()}
    if (Path(cfg.data.root) / cfg.data.val_split / "images").is_dir():
        val = scan_dataset(cfg.data.root, cfg.data.val_split)
        model = load_model(ckpts[-1], cfg, cfg.output.eval_model)
        report, curve, per_image = evaluate_pairs(model_predictor(model), val.labeled, cfg.output.pr_thresholds, 1,
                                                  cfg.s2match.binarize_threshold)
        write_eval_outputs(run_dir / "final_eval", report, curve, per_image,
                           {"config_hash": cfg.config_hash(), "model": cfg.output.eval_model})
        summary["metrics"] = {k: getattr(report, k) for k in METRIC_NAMES}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = run_dir_for(cfg, args.run_dir)
    summary = train_run(cfg, run_dir, args.resume)
    print(json.dumps({"run_dir": str(run_dir), **summary}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    from .inference import evaluate_pairs, load_model, model_predictor, write_eval_outputs

    cfg = _config(args)
    which = "student" if args.student else cfg.output.eval_model
    model = load_model(args.checkpoint, cfg, which)
    split = args.split or cfg.data.val_split
    manifest = scan_dataset(args.data or cfg.data.root, split)
    report, curve, per_image = evaluate_pairs(model_predictor(model), manifest.labeled, cfg.output.pr_thresholds,
                                              args.workers, cfg.s2match.binarize_threshold)
    out = Path(args.out) if args.out else run_dir_for(cfg) / "eval"
    write_eval_outputs(out, report, curve, per_image,
                       {"config_hash": cfg.config_hash(), "model": which, "checkpoint": str(args.checkpoint),
                        "split": split})
    print(report.to_json())
    return EXIT_OK


# ------------------------------------------------------------------- infer


def infer_images(model, paths, out_dir: Path, threshold: float = 0.5) -> list[Path]:
    from .inference import predict_probs

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in paths:
        probs = predict_probs(model, load_image(p))
        mask = (probs >= threshold).astype(np.uint8)
        stem = _image_id(p)
        save_mask(out_dir / f"{stem}_mask.png", mask)
        np.save(out_dir / f"{stem}_prob.npy", probs)
        written.append(out_dir / f"{stem}_mask.png")
    return written


def cmd_infer(args) -> int:
    from .inference import load_model

    cfg = _config(args)
    model = load_model(args.checkpoint, cfg, "student" if args.student else cfg.output.eval_model)
    for p in args.images:
        if not Path(p).is_file():
            raise ConfigError(f"image not found: {p}")
    written = infer_images(model, args.images, Path(args.out), cfg.s2match.binarize_threshold)
    print(json.dumps([str(w) for w in written]))
    return EXIT_OK


# ------------------------------------------------------------------ report


def report_records(images, masks, client, templates, flags, grid, max_in_flight: int, config_hash: str) -> list[dict]:
    """One record per image; images run concurrently, each report's two steps in order."""
    from .report import PipelineError, generate_report

    def one(item):
        path, img, mask = item
        base = {"image": _image_id(path), "path": str(path), "metadata": {"config_hash": config_hash}}
        try:
            rep = generate_report(img, mask, client, templates, flags, grid, _image_id(path))
        except PipelineError as exc:
            cause = exc.__cause__
            return {**base, "generated": None, "error": f"{exc}: {cause}" if cause else str(exc)}
        return {**base, "generated": rep.raw, "sections": rep.sections, "parsed": rep.parsed,
                "caption": rep.caption, "flags": rep.flags}

    items = list(zip(images, [load_image(p) for p in images], masks))
    with ThreadPoolExecutor(max_in_flight) as ex:
        return list(ex.map(one, items))


def cmd_report(args) -> int:
    from .report import PromptFlags, build_client, load_templates

    cfg = _config(args)
    ccfg = cfg.report_client
    if args.masks_dir:
        masks = []
        for p in args.images:
            mp = Path(args.masks_dir) / (Path(p).stem + ".png")
            if not mp.is_file():
                raise ConfigError(f"mask not found: {mp}")
            masks.append(load_mask(mp))
    elif args.checkpoint:
        from .inference import load_model, predict_probs

        model = load_model(args.checkpoint, cfg, cfg.output.eval_model)
        masks = [(predict_probs(model, load_image(p)) >= cfg.s2match.binarize_threshold).astype(np.uint8)
                 for p in args.images]
    else:
        raise ConfigError("report needs --checkpoint or --masks-dir")
    flags = PromptFlags.none() if args.no_s3cot else PromptFlags(ccfg.semantic, ccfg.spatial, ccfg.structural)
    client = build_client(ccfg)
    templates = load_templates(ccfg.templates_dir)
    records = report_records(args.images, masks, client, templates, flags, tuple(ccfg.grid), ccfg.max_in_flight,
                             cfg.config_hash())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, records)
    failed = sum(1 for r in records if r.get("error"))
    print(json.dumps({"reports": len(records), "failed": failed, "out": str(out)}))
    return EXIT_RUNTIME if failed == len(records) and records else EXIT_OK


# ------------------------------------------------------------------- score


def score_summary(scores: list[int]) -> dict:
    if not scores:
        return {"n": 0, "mean": None, "std": None, "median": None, "distribution": {}}
    return {
        "n": len(scores),
        "mean": statistics.fmean(scores),
        "std": statistics.pstdev(scores),
        "median": statistics.median(scores),
        "min": min(scores),
        "max": max(scores),
        "distribution": {str(k): v for k, v in sorted(Counter(scores).items())},
    }


def cmd_score(args) -> int:
    from .report import ClientError, ScoringParseError, build_client, load_jsonl, load_templates, score_report

    cfg = _config(args)
    reports = load_jsonl(args.reports)
    corpus = {r["image"]: r for r in load_jsonl(args.corpus)}
    client = build_client(cfg.evaluator)
    templates = load_templates(cfg.evaluator.templates_dir)
    out_records, scores = [], []
    for rec in reports:
        item = {"image": rec["image"]}
        ref = corpus.get(rec["image"])
        try:
            if ref is None or not ref.get("reference"):
                raise KeyError(f"no reference for image {rec['image']!r}")
            if not rec.get("generated"):
                raise KeyError(f"no generated report for image {rec['image']!r}")
            image = load_image(rec.get("path") or ref.get("path"))
            sr = score_report(image, ref["reference"], rec["generated"], client, templates)
            item.update(sr.to_dict())
            scores.append(sr.score)
        except (KeyError, FileNotFoundError, TypeError, ClientError, ScoringParseError, ValueError) as exc:
            item["error"] = str(exc)
        out_records.append(item)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, out_records)
    summary = score_summary(scores)
    summary["errors"] = sum(1 for r in out_records if "error" in r)
    Path(args.summary or out.with_suffix(".summary.json")).write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ toygen


def cmd_toygen(args) -> int:
    params = ToySceneParams(lighting=args.lighting)
    m = generate_toy_dataset(args.n_labeled, args.n_unlabeled, (args.size, args.size), args.seed, args.out, args.n_val,
                             params)
    print(json.dumps({"root": m.root, "labeled": len(m.labeled), "unlabeled": len(m.unlabeled), "val": args.n_val}))
    return EXIT_OK


# ---------------------------------------------------------------- plotdata


def quartiles(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [0, 25, 50, 75, 100])  # linear interpolation between order statistics
    return {"n": int(v.size), "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "mean": float(v.mean())}


def _label(path) -> str:
    p = Path(path)
    return p.parent.name if p.stem in ("metrics", "per_image", "pr", "scores") else p.stem


def _read_pr(path):
    pts = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("kind", "point") == "point":
                pts.append((float(row["threshold"]), float(row["precision"]), float(row["recall"])))
    return pts


def cmd_plotdata(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.metrics:
        with open(out / "radar.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "metric", "value"])
            for p in args.metrics:
                d = json.loads(Path(p).read_text())
                for name in METRIC_NAMES:
                    w.writerow([_label(p), name, repr(float(d[name]))])
        written.append("radar.csv")
    if args.pr:
        with open(out / "pr.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "threshold", "precision", "recall", "kind"])
            for p in args.pr:
                pts = _read_pr(p)
                for t, pr, rc in pts:
                    w.writerow([_label(p), repr(t), repr(pr), repr(rc), "point"])
                t, v = break_even_point(pts)
                w.writerow([_label(p), repr(t), repr(v), repr(v), "bep"])
        written.append("pr.csv")
    if args.per_image:
        with open(out / "box.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["n", "min", "q1", "median", "q3", "max", "mean"]
            w.writerow(["method", "metric", *cols])
            for p in args.per_image:
                with open(p, newline="") as f:
                    rows = list(csv.DictReader(f))
                for metric in ("iou", "dice"):
                    q = quartiles([float(r[metric]) for r in rows])
                    w.writerow([_label(p), metric, *[repr(q[c]) if c != "n" else q[c] for c in cols]])
        written.append("box.csv")
    if args.scores:
        with open(out / "violin.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "score", "count", "fraction"])
            for p in args.scores:
                vals = [r["score"] for r in map(json.loads, Path(p).read_text().splitlines()) if "score" in r]
                c = Counter(vals)
                for s in range(1, 11):
                    w.writerow([_label(p), s, c.get(s, 0), repr(c.get(s, 0) / len(vals) if vals else 0.0)])
        written.append("violin.csv")
    if not written:
        raise ConfigError("plotdata needs at least one of --metrics, --pr, --per-image, --scores")
    print(json.dumps([str(out / w) for w in written]))
    return EXIT_OK


# ------------------------------------------------------------------- sweep


def sweep(base_args: list[str], key: str, values: list[str], seeds: list[int], out: Path, config=None) -> Path:
    """Train + validate once per (value, seed); one CSV row per run plus per-value means."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        for seed in seeds:
            cfg = load_config(config, [*base_args, f"{key}={value}", f"s2match.seed={seed}"])
            run = out / f"{key.replace('.', '_')}={value}" / f"seed{seed}"
            summary = train_run(cfg, run)
            if "metrics" not in summary:
                raise ConfigError(f"sweep needs a validation split under {cfg.data.root}/{cfg.data.val_split}")
            rows.append({"key": key, "value": value, "seed": seed, **summary["metrics"]})
            log.info("sweep %s=%s seed=%d iou=%.4f", key, value, seed, summary["metrics"]["iou"])
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value", "seed", *METRIC_NAMES])
        for r in rows:
            w.writerow([r["key"], r["value"], r["seed"], *[repr(r[m]) for m in METRIC_NAMES]])
        for value in values:
            sel = [r for r in rows if r["value"] == value]
            w.writerow([key, value, "mean", *[repr(float(np.mean([r[m] for r in sel]))) for m in METRIC_NAMES]])
    return path


def cmd_sweep(args) -> int:
    path = sweep(args.set or [], args.key, args.values, args.seeds, Path(args.out), args.config)
    print(path.read_text(), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="waterlog", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dot-path override")
        p.set_defaults(fn=fn)
        return p

    p = command("train", cmd_train, "train with S2Match")
    p.add_argument("--resume", help="trainer checkpoint to resume from")
    p.add_argument("--run-dir", help="explicit run directory")

    p = command("evaluate", cmd_evaluate, "six metrics + PR curve on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--data", help="dataset root (defaults to data.root)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--student", action="store_true", help="evaluate student instead of teacher weights")
    p.add_argument("--out")

    p = command("infer", cmd_infer, "write masks and probability maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--student", action="store_true")
    p.add_argument("images", nargs="+")

    p = command("report", cmd_report, "generate assessment reports")
    p.add_argument("--checkpoint")
    p.add_argument("--masks-dir", help="use <stem>.png masks instead of model predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--no-s3cot", action="store_true", help="image + bare instruction only")
    p.add_argument("images", nargs="+")

    p = command("score", cmd_score, "score generated reports against references")
    p.add_argument("--reports", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary")

    p = command("toygen", cmd_toygen, "write the synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-labeled", type=int, default=10)
    p.add_argument("--n-unlabeled", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lighting", type=float, default=0.0, help="per-scene gain/contrast/colour-cast strength")

    p = command("plotdata", cmd_plotdata, "tidy CSVs for radar / PR / box / violin figures")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", nargs="*")
    p.add_argument("--pr", nargs="*")
    p.add_argument("--per-image", nargs="*")
    p.add_argument("--scores", nargs="*")

    p = command("sweep", cmd_sweep, "train one run per value of a config key")
    p.add_argument("--key", required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
