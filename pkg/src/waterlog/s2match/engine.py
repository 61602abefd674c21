"""S2Match training engine.

One coordinator owns the student, the EMA teacher and the optimizer. Each
iteration:

1. weak-augment labeled and unlabeled images, draw two strong views per
   unlabeled image;
2. teacher predicts the weak views (no perturbation, no gradient);
3. student predicts labeled images with stochastic depth, and both strong
   views with stochastic depth plus complementary channel dropout;
4. ``L = L_l + lambda * (L_ws + L_ss)``, one AdamW step, EMA update.

All randomness derives from ``(seed, iteration)`` or per-sample seeds, so a
run resumed from an epoch checkpoint continues bit-identically.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..adaptation import apply_freeze_policy
from ..augment import strong_augment, weak_augment
from ..backbone import SegModel, build_model
from ..config import RunConfig, S2MatchConfig
from ..data import Batch, DatasetManifest, ImageCache, iterations_per_epoch, sample_epoch, subsample_unlabeled
from .ema import ema_update
from .losses import poly_lr, ss_consistency_loss, supervised_loss, total_loss, ws_consistency_loss
from .perturb import complementary_dropout_pair, stochastic_depth_fuse

log = logging.getLogger(__name__)


@dataclass
class Views:
    labeled: torch.Tensor  # (B_l, 3, H, W)
    masks: torch.Tensor  # (B_l, H, W)
    weak: torch.Tensor  # (B_u, 3, H, W)
    strong1: torch.Tensor
    strong2: torch.Tensor


def _to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def make_views(batch: Batch, cache: ImageCache, cfg: RunConfig, dtype=torch.float32) -> Views:
    """Weak views for every image plus two strong views per unlabeled image."""
    acfg = cfg.augment
    li, lm, w, s1, s2 = [], [], [], [], []
    n_l = len(batch.labeled)
    for (img_path, mask_path), seed in zip(batch.labeled, batch.seeds[:n_l]):
        rng = np.random.default_rng(seed)
        img, mask, _ = weak_augment(_to_chw(cache.image(img_path)), torch.from_numpy(cache.mask(mask_path)), rng, acfg)
        li.append(img)
        lm.append(mask)
    for img_path, seed in zip(batch.unlabeled, batch.seeds[n_l:]):
        rng = np.random.default_rng(seed)
        img, _, _ = weak_augment(_to_chw(cache.image(img_path)), None, rng, acfg)
        w.append(img)
        s1.append(strong_augment(img, rng, acfg))
        s2.append(strong_augment(img, rng, acfg))

    def stack(xs, shape):
        return torch.stack(xs).to(dtype) if xs else torch.zeros((0, *shape), dtype=dtype)

    ch, cw = acfg.crop_size
    return Views(
        stack(li, (3, ch, cw)), stack(lm, (ch, cw)), stack(w, (3, ch, cw)), stack(s1, (3, ch, cw)), stack(s2, (3, ch, cw))
    )


def predict_labeled(student: SegModel, x, s: S2MatchConfig, generator):
    f1, f2, f3, f4 = student.features(x)
    p = s.p_skip if s.sd_enabled else 0.0
    return student.decode(f1, f2, stochastic_depth_fuse(f3, f4, p, "train", generator))


def predict_strong_pair(student: SegModel, xs1, xs2, s: S2MatchConfig, generator):
    """Both strong views in one encoder pass; SD per sample, then complementary dropout."""
    n = xs1.shape[0]
    f1, f2, f3, f4 = student.features(torch.cat([xs1, xs2]))
    p = s.p_skip if s.sd_enabled else 0.0
    f3f = stochastic_depth_fuse(f3, f4, p, "train", generator)
    a = [f1[:n], f2[:n], f3f[:n]]
    b = [f1[n:], f2[n:], f3f[n:]]
    if s.cd_enabled:
        a, b, _ = complementary_dropout_pair(a, b, generator)
    return student.decode(*a), student.decode(*b)


def compute_losses(student, teacher, views: Views, s: S2MatchConfig, generator) -> dict:
    """Loss tensors (graph attached) for one batch; unlabeled terms are 0 when unused."""
    p_l = predict_labeled(student, views.labeled, s, generator)
    l_l = supervised_loss(p_l, views.masks.to(p_l.dtype), s.eps)
    zero = p_l.new_zeros(())
    l_ws = l_ss = zero
    if views.weak.shape[0] > 0 and s.lambda_u > 0:
        with torch.no_grad():
            teacher.eval()
            p_w = teacher(views.weak)
        p_s1, p_s2 = predict_strong_pair(student, views.strong1, views.strong2, s, generator)
        l_ws = ws_consistency_loss(p_s1, p_s2, p_w, s.tau, s.binarize_threshold, s.eps)
        if s.sc_enabled:
            l_ss = ss_consistency_loss(p_s1, p_s2, p_w, s.tau_s, s.binarize_threshold, s.eps)
    return {"L_l": l_l, "L_ws": l_ws, "L_ss": l_ss, "L": total_loss(l_l, l_ws, l_ss, s.lambda_u)}


def iteration_generator(seed: int, iteration: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, iteration, 7]).generate_state(1)[0]))
    return g


class S2MatchTrainer:
    """Owns student, teacher, optimizer and the iteration counter."""

    def __init__(self, cfg: RunConfig, student: SegModel | None = None, total_iters: int | None = None):
        self.cfg = cfg
        s = cfg.s2match
        self.student = student if student is not None else build_model(cfg.backbone, cfg.adaptation, seed=s.seed)
        self.dtype = next(self.student.parameters()).dtype
        self.trainable = apply_freeze_policy(self.student)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        params = [p for p in self.student.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=s.lr0, weight_decay=s.weight_decay)
        self.iteration = 0
        self.total_iters = total_iters
        self.cache = ImageCache()

    def train_step(self, batch: Batch | Views) -> dict:
        s = self.cfg.s2match
        views = batch if isinstance(batch, Views) else make_views(batch, self.cache, self.cfg, self.dtype)
        total = self.total_iters or (self.iteration + 1)
        lr = poly_lr(min(self.iteration, total), total, s.lr0, s.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.student.train()
        losses = compute_losses(self.student, self.teacher, views, s, iteration_generator(s.seed, self.iteration))
        self.optimizer.zero_grad(set_to_none=True)
        losses["L"].backward()
        self.optimizer.step()
        gamma = ema_update(self.teacher, self.student, self.iteration, s.gamma_cap)
        record = {"iter": self.iteration, **{k: float(v.detach()) for k, v in losses.items()}, "gamma": gamma, "lr": lr}
        self.iteration += 1
        return record

    # ------------------------------------------------------------ persistence

    def state_dict(self, epoch: int) -> dict:
        return {
            "epoch": epoch,
            "iteration": self.iteration,
            "total_iters": self.total_iters,
            "config": self.cfg.to_dict(),
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> int:
        self.student.load_state_dict(state["student"])
        self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = int(state["iteration"])
        self.total_iters = state["total_iters"]
        torch.set_rng_state(state["torch_rng"])
        return int(state["epoch"])


def fit(cfg: RunConfig, manifest: DatasetManifest, run_dir, resume: str | Path | None = None,
        progress=None) -> S2MatchTrainer:
    """Train for ``cfg.s2match.epochs`` epochs, writing ``train_log.jsonl`` and
    ``checkpoints/epoch_XXX.pt`` under ``run_dir``."""
    s = cfg.s2match
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    n_iter = iterations_per_epoch(len(manifest.labeled), s.batch_labeled)
    trainer = S2MatchTrainer(cfg, total_iters=n_iter * s.epochs)
    pool = subsample_unlabeled(manifest, cfg.data.unlabeled_ratio, s.seed)
    if s.batch_unlabeled == 0 or s.lambda_u == 0:
        pool = []
    start = 0
    log_path = run_dir / "train_log.jsonl"
    mode = "w"
    if resume is not None:
        start = trainer.load_state_dict(torch.load(resume, weights_only=False)) + 1
        mode = "a"
        _truncate_log(log_path, trainer.iteration)
    with open(log_path, mode) as fh:
        for epoch in range(start, s.epochs):
            for batch in sample_epoch(manifest, s.batch_labeled, s.batch_unlabeled if pool else 0, epoch, s.seed, pool):
                rec = trainer.train_step(batch)
                fh.write(json.dumps(rec) + "\n")
                if progress is not None:
                    progress(rec)
            fh.flush()
            torch.save(trainer.state_dict(epoch), run_dir / "checkpoints" / f"epoch_{epoch:03d}.pt")
            log.info("epoch %d done (iter %d)", epoch, trainer.iteration)
    return trainer


def _truncate_log(path: Path, n_records: int):
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)[:n_records]
    path.write_text("".join(lines))
