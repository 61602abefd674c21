"""Feature perturbations: scale-wise stochastic depth and complementary dropout."""

from __future__ import annotations

import torch

from ..backbone import fuse, upsample2x
from ..config import ConfigError


def binarize(p: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """1 where ``p >= threshold`` else 0, same dtype as ``p``."""
    return (p >= threshold).to(p.dtype)


def stochastic_depth_fuse(f3_hat, f4_hat, p_skip: float, mode: str = "train", generator=None, survival=None):
    """Fuse the top two scales, randomly skipping the coarsest path in training.

    Train mode draws a per-sample survival indicator ``b`` with
    ``P(b = 1) = 1 - p_skip`` and returns ``f3 + b / (1 - p_skip) * up2(f4)``,
    so the expectation equals the deterministic fusion. ``survival`` pins
    ``b`` (shape ``(B,)``) instead of sampling.
    """
    if not 0.0 <= p_skip < 1.0:
        raise ConfigError(f"p_skip must lie in [0, 1), got {p_skip}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or (p_skip == 0.0 and survival is None):
        return fuse(f3_hat, f4_hat)
    if survival is None:
        u = torch.rand(f3_hat.shape[0], generator=generator, dtype=torch.float64)
        survival = (u < 1.0 - p_skip).to(f3_hat.dtype)
    b = survival.to(f3_hat.dtype).view(-1, 1, 1, 1)
    fuse(f3_hat[:0], f4_hat[:0])  # shape validation only
    return f3_hat + (b / (1.0 - p_skip)) * upsample2x(f4_hat)


def sample_half_mask(channels: int, generator=None) -> torch.Tensor:
    """Channel mask with exactly ``channels // 2`` ones, positions uniformly random."""
    if channels % 2:
        raise ConfigError(f"complementary dropout needs an even channel count, got {channels}")
    perm = torch.randperm(channels, generator=generator)
    mask = torch.zeros(channels)
    mask[perm[: channels // 2]] = 1.0
    return mask


def complementary_dropout_pair(features_s1, features_s2, generator=None, masks=None):
    """Give the two strong streams complementary halves of every scale's channels.

    Returns ``(out1, out2, masks)`` with ``out1[k] = f1[k] * M_k * 2`` and
    ``out2[k] = f2[k] * (1 - M_k) * 2``. One mask per scale, shared across
    the batch.
    """
    if len(features_s1) != len(features_s2):
        raise ValueError("both streams need the same number of scales")
    out1, out2, used = [], [], []
    for k, (a, b) in enumerate(zip(features_s1, features_s2)):
        if a.shape != b.shape:
            raise ValueError(f"scale {k}: stream shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
        m = masks[k] if masks is not None else sample_half_mask(a.shape[1], generator)
        m = m.to(a.dtype)
        view = m.view(1, -1, 1, 1)
        out1.append(a * view * 2)
        out2.append(b * (1 - view) * 2)
        used.append(m)
    return out1, out2, used
