"""Supervised, weak-to-strong and strong-to-strong losses."""

from __future__ import annotations

import torch

from .perturb import binarize

EPS = 1e-7


def bce(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-pixel binary cross-entropy with ``p`` clamped to ``[eps, 1 - eps]``."""
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def supervised_loss(p_l, y_l, eps: float = EPS):
    """Mean per-pixel BCE per image, averaged over the labeled images."""
    if p_l.shape != y_l.shape:
        raise ValueError(f"shape mismatch {tuple(p_l.shape)} vs {tuple(y_l.shape)}")
    return bce(p_l, y_l.to(p_l.dtype), eps).mean(dim=(-2, -1)).mean()


def confidence_mask(p_w, tau: float):
    return ((p_w >= tau) | (p_w <= 1.0 - tau)).to(p_w.dtype)


def ws_consistency_loss(p_s1, p_s2, p_w, tau: float = 0.95, threshold: float = 0.5, eps: float = EPS):
    """Confidence-gated BCE of both strong views against the teacher's pseudo label.

    ``1 / (4 B_u) * sum_i mean_pixels[1(conf) * (H(p_s1, y_w) + H(p_s2, y_w))]``.
    Pseudo labels and the confidence mask carry no gradient.
    """
    p_w = p_w.detach()
    target = binarize(p_w, threshold)
    keep = confidence_mask(p_w, tau)
    per_pixel = keep * (bce(p_s1, target, eps) + bce(p_s2, target, eps))
    return per_pixel.mean(dim=(-2, -1)).sum() / (4 * p_w.shape[0])


def ss_consistency_loss(p_s1, p_s2, p_w, tau_s: float = 0.8, threshold: float = 0.5, eps: float = EPS):
    """Cross-supervision between the strong views, gated on teacher confidence at ``tau_s``."""
    keep = confidence_mask(p_w.detach(), tau_s)
    y1 = binarize(p_s1.detach(), threshold)
    y2 = binarize(p_s2.detach(), threshold)
    per_pixel = keep * (bce(p_s1, y2, eps) + bce(p_s2, y1, eps))
    return per_pixel.mean(dim=(-2, -1)).sum() / (4 * p_w.shape[0])


def total_loss(l_l, l_ws, l_ss, lambda_u: float = 1.0):
    return l_l + lambda_u * (l_ws + l_ss)


def poly_lr(iteration: int, total_iters: int, lr0: float = 2e-4, power: float = 0.9) -> float:
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return lr0 * (1.0 - iteration / total_iters) ** power
