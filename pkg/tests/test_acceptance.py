"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.
"""

import copy
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from conftest import tiny_adaptation, tiny_backbone  # noqa: E402

from waterlog.adaptation import apply_freeze_policy  # noqa: E402
from waterlog.backbone import build_model, fuse  # noqa: E402
from waterlog.cli import main as cli_main  # noqa: E402
from waterlog.cli import train_run  # noqa: E402
from waterlog.config import AdaptationConfig, BackboneConfig, config_from_dict, load_config  # noqa: E402
from waterlog.data import ToySceneParams, generate_toy_dataset, load_mask, scan_dataset  # noqa: E402
from waterlog.inference import evaluate_pairs  # noqa: E402
from waterlog.metrics import dice_from_iou  # noqa: E402
from waterlog.report import MockClient, PromptFlags, generate_report, load_templates, parse_score  # noqa: E402
from waterlog.report import ScoringParseError, payload_text  # noqa: E402
from waterlog.s2match import (  # noqa: E402
    complementary_dropout_pair,
    ema_gamma,
    ema_update,
    sample_half_mask,
    ss_consistency_loss,
    stochastic_depth_fuse,
    supervised_loss,
    total_loss,
    ws_consistency_loss,
)
from waterlog.s2match.engine import Views, compute_losses  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
RESULTS: list[str] = []

# Toy setup shared by the directional and sweep criteria. The lighting knob adds
# per-scene gain/contrast/colour-cast variation so that unlabeled data carries
# information the 10 labeled scenes do not cover.
TOY = dict(n_labeled=10, n_unlabeled=200, image_size=(64, 64), seed=0, n_val=50)
TOY_PARAMS = ToySceneParams(lighting=0.6)
DIRECTIONAL_SETTINGS = ["s2match.epochs=120", "s2match.lr0=0.002", "adaptation.train_base=true"]
SEEDS = (0, 1, 2)


def record(n: int, title: str, ok: bool, detail: str, elapsed: float, limit: float | None = None):
    timing = f"{elapsed:.2f}s" + (f" (limit {limit:g}s)" if limit else "")
    if limit is not None and elapsed >= limit:
        ok = False
        detail += "; runtime limit exceeded"
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} | {detail} | {timing}"
    RESULTS.append(line)
    return ok


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "toy"
    generate_toy_dataset(TOY["n_labeled"], TOY["n_unlabeled"], TOY["image_size"], TOY["seed"], root, TOY["n_val"],
                         TOY_PARAMS)
    return root


# --------------------------------------------------------------- 1. metrics


def test_criterion_01_metric_identities():
    t0 = time.perf_counter()
    with open(FIXTURES / "published_metrics.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    worst = 0.0
    for r in rows:
        iou, rec, spec = float(r["iou"]), float(r["recall"]), float(r["specificity"])
        worst = max(worst, abs(dice_from_iou(iou) - float(r["dice"])), abs(math.sqrt(rec * spec) - float(r["g_mean"])))
    ok = len(rows) == 21 and worst < 1e-3
    assert record(1, "published dice/g_mean identities", ok, f"{len(rows)} rows, max |d|={worst:.2e} (tol 1e-3)",
                  time.perf_counter() - t0, 1)


# ----------------------------------------------------------- 2. loss oracles


def _h(p, y, eps=1e-7):
    p = min(max(p, eps), 1 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def _oracle_losses(p_l, y, p1, p2, pw, tau, tau_s, lam):
    b, hh, ww = p_l.shape
    n = hh * ww
    l_l = sum(_h(p_l[i, r, c], y[i, r, c]) for i in range(b) for r in range(hh) for c in range(ww)) / (b * n)
    ws = ss = 0.0
    for i in range(b):
        a_ws = a_ss = 0.0
        for r in range(hh):
            for c in range(ww):
                w = pw[i, r, c]
                yw = 1.0 if w >= 0.5 else 0.0
                if w >= tau or w <= 1 - tau:
                    a_ws += _h(p1[i, r, c], yw) + _h(p2[i, r, c], yw)
                if w >= tau_s or w <= 1 - tau_s:
                    y1 = 1.0 if p1[i, r, c] >= 0.5 else 0.0
                    y2 = 1.0 if p2[i, r, c] >= 0.5 else 0.0
                    a_ss += _h(p1[i, r, c], y2) + _h(p2[i, r, c], y1)
        ws += a_ws / n
        ss += a_ss / n
    ws /= 4 * b
    ss /= 4 * b
    return l_l, ws, ss, l_l + lam * (ws + ss)


def test_criterion_02_loss_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        p_l, p1, p2 = (rng.random((2, 4, 4)) for _ in range(3))
        # push a share of teacher pixels into the confident tails so both masks are exercised
        pw = np.where(rng.random((2, 4, 4)) < 0.5, rng.choice([0.01, 0.03, 0.9, 0.99], (2, 4, 4)), rng.random((2, 4, 4)))
        y = (rng.random((2, 4, 4)) < 0.5).astype(float)
        lam = float(rng.uniform(0, 2))
        want = _oracle_losses(p_l, y, p1, p2, pw, 0.95, 0.8, lam)
        T = torch.tensor
        got = (
            supervised_loss(T(p_l), T(y)).item(),
            ws_consistency_loss(T(p1), T(p2), T(pw), 0.95).item(),
            ss_consistency_loss(T(p1), T(p2), T(pw), 0.8).item(),
        )
        got = (*got, total_loss(*(T(v, dtype=torch.float64) for v in got), lam).item())
        worst = max(worst, *(abs(a - b) for a, b in zip(got, want)))
    ok = worst < 1e-6
    assert record(2, "loss scalar-loop oracles (supervised, ws, ss, total)", ok,
                  f"100 trials of 2x4x4, max |d|={worst:.2e} (tol 1e-6)", time.perf_counter() - t0, 10)


# ------------------------------------------------------------ 3. gradients


def test_criterion_03_gradient_check():
    t0 = time.perf_counter()
    cfg = config_from_dict({
        "backbone": dataclasses.asdict(tiny_backbone()),
        "adaptation": dataclasses.asdict(tiny_adaptation()),
        "augment": {"crop_size": [16, 16]},
        # tau values low enough that the confidence masks keep pixels on a fresh model
        "s2match": {"tau": 0.55, "tau_s": 0.52},
    })
    s = cfg.s2match
    torch.manual_seed(0)
    student = build_model(cfg.backbone, cfg.adaptation, seed=5, dtype=torch.float64)
    with torch.no_grad():
        for p in student.parameters():
            p.add_(0.1 * torch.randn_like(p))
    teacher = copy.deepcopy(student)
    params = apply_freeze_policy(student)
    named = dict(student.named_parameters())
    n_params = sum(p.numel() for p in student.parameters())
    g = torch.Generator().manual_seed(11)
    views = Views(torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64),
                  (torch.rand(2, 16, 16, generator=g) > 0.5).double(),
                  *(torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) for _ in range(3)))

    def loss():
        # identical perturbation draws on every evaluation
        return compute_losses(student, teacher, views, s, torch.Generator().manual_seed(3))["L"]

    student.train()
    student.zero_grad()
    loss().backward()
    worst, count = 0.0, 0
    h = 1e-6
    with torch.no_grad():
        for name in params:
            p = named[name]
            flat, grad = p.data.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                num, ana = (up - down) / (2 * h), grad[i].item()
                # relative error, with an absolute floor for parameters whose gradient is ~0
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
                count += 1
    ok = n_params <= 5000 and worst < 1e-3
    assert record(3, "total-loss gradient vs central differences (float64)", ok,
                  f"{n_params} params, {count} trainable checked, max rel err={worst:.2e} (tol 1e-3)",
                  time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 4. EMA


def test_criterion_04_ema_schedule():
    t0 = time.perf_counter()
    checks = [ema_gamma(0) == 0.0, abs(ema_gamma(249) - 0.996) < 1e-15,
              all(ema_gamma(i) == 0.996 for i in range(250, 5000, 97))]
    model = build_model(tiny_backbone(), tiny_adaptation(), seed=1, dtype=torch.float64)
    teacher = build_model(tiny_backbone(), tiny_adaptation(), seed=2, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p))
    ema_update(teacher, model, 0)
    checks.append(all(torch.equal(a, b) for a, b in zip(teacher.state_dict().values(), model.state_dict().values())))
    worst = 0.0
    rng = np.random.default_rng(0)
    for it in (1, 17, 249, 1000):
        a, b = rng.random((5, 7)), rng.random((5, 7))
        t = {"w": torch.tensor(a)}
        gm = ema_update(t, {"w": torch.tensor(b)}, it)
        worst = max(worst, float(np.abs(t["w"].numpy() - (gm * a + (1 - gm) * b)).max()))
    checks.append(worst <= 1e-12)
    assert record(4, "EMA schedule and update", all(checks),
                  f"gamma(0)=0, gamma(249)={ema_gamma(249):.6f}, capped, closed-form max |d|={worst:.1e}",
                  time.perf_counter() - t0)


# ---------------------------------------------------------- 5. perturbations


def test_criterion_05_perturbation_invariants():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    popcount_ok = all(int(sample_half_mask(c, g).sum()) == c // 2 for c in (2, 4, 16, 32, 64) for _ in range(50))
    fs = [torch.rand(3, c, 5, 5, dtype=torch.float64) for c in (8, 16, 32)]
    comp_ok = True
    for _ in range(20):
        a, b, _ = complementary_dropout_pair(fs, [f.clone() for f in fs], g)
        comp_ok &= all(torch.equal(x + y, 2 * f) for x, y, f in zip(a, b, fs))
    f3 = torch.rand(1, 4, 6, 6, dtype=torch.float64)
    f4 = torch.rand(1, 4, 3, 3, dtype=torch.float64)
    det = fuse(f3, f4)
    n = 20000
    out = stochastic_depth_fuse(f3.expand(n, -1, -1, -1), f4.expand(n, -1, -1, -1), 0.5, "train", g)
    rel = float(((out.mean(0, keepdim=True) - det).norm() / det.norm()))
    p0_ok = torch.equal(stochastic_depth_fuse(f3, f4, 0.0, "train", g), det)
    ok = popcount_ok and comp_ok and rel < 0.02 and p0_ok
    assert record(5, "CD popcount/complement, SD expectation, p_skip=0", ok,
                  f"popcount={popcount_ok}, complement={comp_ok}, SD MC rel err={rel:.4f} (tol 0.02), p0 exact={p0_ok}",
                  time.perf_counter() - t0)


# ----------------------------------------------------------- 6. adaptation


def test_criterion_06_adaptation_identities():
    t0 = time.perf_counter()
    cfg = BackboneConfig()
    base = build_model(cfg, None, seed=7)
    adapted = build_model(cfg, AdaptationConfig(), seed=7)
    x = torch.rand(2, 3, *cfg.input_size)
    base.eval(), adapted.eval()
    identical = torch.equal(base(x), adapted(x))

    model = build_model(cfg, AdaptationConfig(encoder_tune_ratio=0.0), seed=3)
    apply_freeze_policy(model)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    model.train()
    model(x).mean().backward()
    opt.step()
    enc_same = all(torch.equal(p, before[n]) for n, p in model.named_parameters() if n.startswith("encoder."))
    changed = sum(not torch.equal(p, before[n]) for n, p in model.named_parameters() if n.startswith("adaptation."))
    ok = identical and enc_same and changed > 0
    assert record(6, "fresh adaptation bit-identical; ratio-0 step keeps encoder bits", ok,
                  f"identical={identical}, encoder unchanged={enc_same}, adaptation tensors changed={changed}",
                  time.perf_counter() - t0)


# ---------------------------------------------------------- 7. directional


def _train_iou(root, out, extra):
    cfg = load_config(None, [f"data.root={root}", f"output.root={out}", *DIRECTIONAL_SETTINGS, *extra])
    run = Path(out) / "_".join(x.replace("=", "-") for x in extra)
    return train_run(cfg, run)["metrics"]["iou"]


@pytest.mark.slow
def test_criterion_07_directional(toy_dataset, tmp_path):
    t0 = time.perf_counter()
    arms = {
        "s2match": ["s2match.lambda_u=1"],
        "supervised": ["s2match.lambda_u=0"],
        "ratio0": ["s2match.lambda_u=1", "data.unlabeled_ratio=0"],
    }
    ious = {k: [] for k in arms}
    for seed in SEEDS:
        for arm, extra in arms.items():
            ious[arm].append(_train_iou(toy_dataset, tmp_path, [*extra, f"s2match.seed={seed}"]))
    mean = {k: float(np.mean(v)) for k, v in ious.items()}
    ok = mean["s2match"] >= mean["supervised"] and mean["s2match"] >= mean["ratio0"]
    per = "; ".join(f"{k} " + "/".join(f"{v:.3f}" for v in ious[k]) + f" mean {mean[k]:.3f}" for k in arms)
    assert record(7, "S2Match >= supervised and ratio 100% >= 0% (mean val IoU, 3 seeds)", ok, per,
                  time.perf_counter() - t0, 900)


# ----------------------------------------------------------------- 8. sweep


@pytest.mark.slow
def test_criterion_08_threshold_sweep(toy_dataset, tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "sweep"
    code = cli_main(["sweep", "--set", f"data.root={toy_dataset}", "--set", "s2match.epochs=2",
                     "--set", "s2match.tau=0.95", "--key", "s2match.tau_s",
                     "--values", "0.5", "0.65", "0.8", "0.95", "--out", str(out)])
    rows = list(csv.DictReader(open(out / "sweep.csv"))) if (out / "sweep.csv").exists() else []
    values = [r["value"] for r in rows if r["seed"] == "mean"]
    ok = code == 0 and values == ["0.5", "0.65", "0.8", "0.95"] and all(0 <= float(r["iou"]) <= 1 for r in rows)
    detail = ", ".join(f"tau_s={r['value']} iou={float(r['iou']):.3f}" for r in rows if r["seed"] == "mean")
    assert record(8, "tau_s sweep emits comparison CSV", ok, f"exit {code}; {detail}", time.perf_counter() - t0)


# ------------------------------------------------------- 9. report prompts


def test_criterion_09_report_contract():
    t0 = time.perf_counter()
    templates = load_templates()
    rng = np.random.default_rng(0)
    image = rng.random((24, 24, 3))
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[10:, 3:17] = 1
    client = MockClient()
    rep = generate_report(image, mask, client, templates)
    step2 = payload_text(client.calls[1])
    coverage = f"coverage {100 * mask.mean():.1f}%"
    contract = (len(client.calls) == 2 and rep.caption in step2 and coverage in step2
                and all(f"{s}:" in step2 for s in ("Extent", "Depth", "Risk", "Impact")))

    ablations = True
    for flags in (PromptFlags(semantic=False), PromptFlags(spatial=False), PromptFlags(structural=False),
                  PromptFlags.none()):
        c = MockClient()
        generate_report(image, mask, c, templates, flags=flags)
        text = payload_text(c.calls[-1])
        n_img = sum(p["type"] == "image" for p in c.calls[-1][0]["parts"])
        ablations &= len(c.calls) == (2 if flags.semantic else 1)
        ablations &= ("Scene description:" in text) == flags.semantic
        ablations &= (coverage in text) == flags.spatial and n_img == (2 if flags.spatial else 1)
        ablations &= ("Extent:" in text) == flags.structural
    score = parse_score("Overall, I assign the textual report a score of 8.").score
    try:
        parse_score("The report is thorough but no number is given.")
        digit_free = False
    except ScoringParseError:
        digit_free = True
    ok = contract and ablations and score == 8 and digit_free
    assert record(9, "two-call report contract, ablation payloads, score parser", ok,
                  f"calls={len(client.calls)}, payload={contract}, ablations={ablations}, score={score}, "
                  f"digit-free error={digit_free}", time.perf_counter() - t0)


# ------------------------------------------------------------ 10. determinism


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    root = tmp_path / "toy"
    generate_toy_dataset(4, 6, (32, 32), 1, root, n_val=6)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "backbone": {"stage_depths": [1, 1, 1, 1], "stage_channels": [8, 12, 16, 20], "neck_channels": 8,
                     "patch_stride": 4, "attention_heads": 1, "input_size": [32, 32]},
        "augment": {"crop_size": [32, 32]},
        "s2match": {"epochs": 2, "lr0": 1e-3},
        "data": {"root": str(root)},
    }))
    logs = []
    for k in range(2):
        assert cli_main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / f"r{k}")]) == 0
        logs.append((tmp_path / f"r{k}" / "train_log.jsonl").read_bytes())
    logs_equal = logs[0] == logs[1] and len(logs[0]) > 0

    # noisy soft predictions so the PR histograms are non-trivial
    val = scan_dataset(root, "val").labeled
    rng = np.random.default_rng(0)
    probs = {}
    for img, m in val:
        gt = load_mask(m)
        probs[img] = np.clip(0.7 * gt + 0.5 * rng.random(gt.shape), 0, 1)
    reports = [evaluate_pairs(lambda p: probs[p], val, 99, workers=w)[0] for w in (1, 4)]
    ok = logs_equal and reports[0] == reports[1]
    assert record(10, "bitwise-identical training logs; 1 vs 4 metric shards", ok,
                  f"logs identical={logs_equal}, reports identical={reports[0] == reports[1]}",
                  time.perf_counter() - t0)


if __name__ == "__main__":
    # the PASS/FAIL lines are printed by the terminal-summary hook in conftest.py
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
