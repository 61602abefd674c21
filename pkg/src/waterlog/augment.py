"""Weak (geometric) and strong (photometric) augmentation.

Images are float tensors ``(C, H, W)`` in ``[0, 1]``; masks are ``(H, W)``.
Every random draw comes from an explicit ``numpy.random.Generator`` and the
number of draws per call is fixed, so a pipeline is a pure function of
``(input, seed)``. Strong augmentation never touches geometry, which keeps
masks aligned across the weak view and both strong views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .config import AugmentationConfig


@dataclass(frozen=True)
class Geometry:
    """Replayable record of one weak-augmentation draw."""

    scale: float
    resized: tuple  # (h, w) after resizing
    pad: tuple  # (top, bottom, left, right) reflect padding before cropping
    offset: tuple  # (y, x) crop origin in the padded image
    crop: tuple  # (h, w)
    flip: bool


def draw_geometry(size: tuple, rng: np.random.Generator, cfg: AugmentationConfig) -> Geometry:
    h, w = size
    ch, cw = cfg.crop_size
    scale = float(rng.uniform(*cfg.resize_scale_range))
    u_y, u_x, u_flip = rng.random(3)
    rh, rw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ph, pw = max(0, ch - rh), max(0, cw - rw)
    pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    y = int(u_y * (rh + ph - ch + 1))
    x = int(u_x * (rw + pw - cw + 1))
    return Geometry(scale, (rh, rw), pad, (y, x), (ch, cw), bool(u_flip < cfg.hflip_prob))


def _pad(t: torch.Tensor, pad: tuple) -> torch.Tensor:
    top, bottom, left, right = pad
    if not any(pad):
        return t
    mode = "reflect" if max(top, bottom) < t.shape[-2] and max(left, right) < t.shape[-1] else "replicate"
    return F.pad(t.unsqueeze(0), (left, right, top, bottom), mode=mode).squeeze(0)


def replay(geom: Geometry, image: torch.Tensor, mask: torch.Tensor | None = None):
    """Apply a recorded geometry to an image (bilinear) and mask (nearest)."""
    if tuple(image.shape[-2:]) != tuple(geom.resized):
        image = F.interpolate(image.unsqueeze(0), size=geom.resized, mode="bilinear", align_corners=False)[0]
        image = image.clamp(0.0, 1.0)
        if mask is not None:
            m = F.interpolate(mask[None, None].float(), size=geom.resized, mode="nearest")[0, 0]
            mask = m.to(mask.dtype)
    y, x = geom.offset
    ch, cw = geom.crop
    image = _pad(image, geom.pad)[:, y : y + ch, x : x + cw]
    if mask is not None:
        mask = _pad(mask[None].float(), geom.pad)[0, y : y + ch, x : x + cw].to(mask.dtype)
    if geom.flip:
        image = image.flip(-1)
        mask = mask.flip(-1) if mask is not None else None
    return image.contiguous(), (mask.contiguous() if mask is not None else None)


def weak_augment(image, mask, rng: np.random.Generator, cfg: AugmentationConfig | None = None):
    """Random resize, crop (reflect-padded when needed) and horizontal flip.

    Returns ``(image, mask, geometry)``; the same transform hits the mask.
    """
    cfg = cfg or AugmentationConfig()
    if mask is not None and tuple(mask.shape[-2:]) != tuple(image.shape[-2:]):
        raise ValueError("image and mask are not spatially aligned")
    geom = draw_geometry(tuple(image.shape[-2:]), rng, cfg)
    img, m = replay(geom, image, mask)
    return img, m, geom


@dataclass(frozen=True)
class Photometric:
    jitter: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float
    gray: bool
    blur: bool
    sigma: float


def draw_photometric(rng: np.random.Generator, cfg: AugmentationConfig) -> Photometric:
    u_jit, u_gray, u_blur = rng.random(3)
    b = float(rng.uniform(*cfg.brightness))
    c = float(rng.uniform(*cfg.contrast))
    s = float(rng.uniform(*cfg.saturation))
    h = float(rng.uniform(*cfg.hue))
    sigma = float(rng.uniform(*cfg.blur_sigma))
    return Photometric(
        bool(u_jit < cfg.jitter_prob), b, c, s, h, bool(u_gray < cfg.gray_prob), bool(u_blur < cfg.blur_prob), sigma
    )


def apply_photometric(image: torch.Tensor, ph: Photometric) -> torch.Tensor:
    # order: jitter (brightness, contrast, saturation, hue) -> grayscale -> blur
    x = image
    if ph.jitter:
        if ph.brightness != 1.0:
            x = TF.adjust_brightness(x, ph.brightness)
        if ph.contrast != 1.0:
            x = TF.adjust_contrast(x, ph.contrast)
        if ph.saturation != 1.0:
            x = TF.adjust_saturation(x, ph.saturation)
        if ph.hue != 0.0:
            x = TF.adjust_hue(x, ph.hue)
    if ph.gray:
        x = TF.rgb_to_grayscale(x, num_output_channels=x.shape[0])
    if ph.blur:
        k = 2 * math.ceil(3.0 * ph.sigma) + 1
        k = min(k, 2 * ((min(x.shape[-2:]) - 1) // 2) + 1)
        x = TF.gaussian_blur(x, [k, k], [ph.sigma, ph.sigma])
    return x.clamp(0.0, 1.0)


def strong_augment(weak_image, rng: np.random.Generator, cfg: AugmentationConfig | None = None):
    """Photometric-only view of a weak image: jitter w.p. 0.8, gray w.p. 0.1, blur w.p. 0.5."""
    cfg = cfg or AugmentationConfig()
    return apply_photometric(weak_image, draw_photometric(rng, cfg))
