"""Four-stage hierarchical transformer encoder, channel neck, and mask decoder.

Stage 1 patchifies at ``patch_stride``; stages 2-4 each halve resolution
with a 2x2 strided merge. The neck maps every scale to ``neck_channels``
with 1x1 convs, the top two scales are fused (``f3 + up2(f4)``) and the
decoder consumes ``(f1, f2, f3_fuse)`` to produce a sigmoid probability map
at input resolution. Input images are RGB in ``[0, 1]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import adaptation as adapt
from .config import AdaptationConfig, BackboneConfig, ConfigError


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def fuse(f3_hat: torch.Tensor, f4_hat: torch.Tensor) -> torch.Tensor:
    """``f3 + bilinear_up2(f4)``."""
    if f3_hat.shape[1] != f4_hat.shape[1]:
        raise ValueError(f"channel mismatch: {f3_hat.shape[1]} vs {f4_hat.shape[1]}")
    if tuple(f3_hat.shape[-2:]) != (2 * f4_hat.shape[-2], 2 * f4_hat.shape[-1]):
        raise ValueError("f4 must be exactly half the spatial size of f3")
    return f3_hat + upsample2x(f4_hat)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def attend(self, q, k, v):
        b, n, c = q.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, c // h).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) * (c // h) ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out_proj(out)

    def forward(self, x):
        return adapt.gated_lora_attention(x, self)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = max(1, int(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, site=None, scale=1.0):
        h = self.norm1(x)
        if site is not None and hasattr(site, "lora_q"):
            a = adapt.gated_lora_attention(h, self.attn, site.lora_q, site.lora_v, site.lora_gate, scale)
        else:
            a = adapt.gated_lora_attention(h, self.attn)
        x = x + a
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        chans = [int(c) for c in cfg.stage_channels]
        p = cfg.patch_stride
        self.downsample = nn.ModuleList(
            [nn.Conv2d(cfg.in_channels, chans[0], p, stride=p)]
            + [nn.Conv2d(chans[k - 1], chans[k], 2, stride=2) for k in range(1, 4)]
        )
        gh, gw = cfg.input_size[0] // p, cfg.input_size[1] // p
        self.pos_embed = nn.Parameter(torch.zeros(1, chans[0], gh, gw))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(chans[k], cfg.attention_heads, cfg.mlp_ratio)
            for k in range(4)
            for _ in range(int(cfg.stage_depths[k]))
        )
        self.layer_stage = [k for k in range(4) for _ in range(int(cfg.stage_depths[k]))]

    def forward(self, x, adaptation=None):
        task = None
        if adaptation is not None and adaptation.has_adapter:
            task = adaptation.task_signal(x)
        feats = []
        idx = 0
        for k in range(4):
            x = self.downsample[k](x)
            if k == 0:
                x = x + self.pos_embed
            b, c, h, w = x.shape
            t = x.flatten(2).transpose(1, 2)
            tt = adapt.tokens_at(task, (h, w)) if task is not None else None
            while idx < len(self.blocks) and self.layer_stage[idx] == k:
                site = adaptation.layers[idx] if adaptation is not None else None
                if tt is not None:
                    t = adapt.adapter_inject(t, tt, site.unshared, adaptation.shared[k], site.adapter_gate)
                t = self.blocks[idx](t, site, adaptation.scale if adaptation is not None else 1.0)
                idx += 1
            x = t.transpose(1, 2).reshape(b, c, h, w)
            feats.append(x)
        return feats


class Neck(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(int(c), cfg.neck_channels, 1) for c in cfg.stage_channels)

    def forward(self, feats):
        if len(feats) != 4:
            raise ValueError(f"neck expects four scales, got {len(feats)}")
        return [p(f) for p, f in zip(self.proj, feats)]


class MaskDecoder(nn.Module):
    """Top-down three-scale decoder: conv, upsample-add, conv, upsample-add, 1x1 head."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.neck_channels
        self.patch_stride = cfg.patch_stride
        # bias-free hidden convs: zero features give a zero logit up to the head bias
        self.conv3 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, f1, f2, f3_fuse, out_size=None):
        s1, s2, s3 = f1.shape[-2:], f2.shape[-2:], f3_fuse.shape[-2:]
        if tuple(s1) != (2 * s2[0], 2 * s2[1]) or tuple(s2) != (2 * s3[0], 2 * s3[1]):
            raise ValueError("decoder scales are not at strides s, 2s, 4s")
        d = F.gelu(self.conv3(f3_fuse))
        d = F.gelu(self.conv2(f2 + upsample2x(d)))
        d = F.gelu(self.conv1(f1 + upsample2x(d)))
        logit = self.head(d)
        if out_size is None:
            out_size = (f1.shape[-2] * self.patch_stride, f1.shape[-1] * self.patch_stride)
        logit = F.interpolate(logit, size=out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logit[:, 0])


class SegModel(nn.Module):
    """Encoder + neck + decoder with optional hybrid adaptation."""

    def __init__(self, cfg: BackboneConfig | None = None, acfg: AdaptationConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.encoder = Encoder(self.cfg)
        self.neck = Neck(self.cfg)
        self.decoder = MaskDecoder(self.cfg)
        self.adaptation = adapt.HybridAdaptation(self.cfg, acfg) if acfg is not None else None
        self.register_buffer("pixel_mean", torch.tensor(self.cfg.pixel_mean).view(1, -1, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(self.cfg.pixel_std).view(1, -1, 1, 1), persistent=False)

    def _check(self, image):
        if image.dim() != 4 or image.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected (B, {self.cfg.in_channels}, H, W) image, got {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != tuple(self.cfg.input_size):
            raise ConfigError(f"image size {tuple(image.shape[-2:])} != configured {tuple(self.cfg.input_size)}")

    def encode(self, image):
        """Features ``f1..f4`` at strides s, 2s, 4s, 8s."""
        self._check(image)
        x = (image - self.pixel_mean.to(image.dtype)) / self.pixel_std.to(image.dtype)
        return self.encoder(x, self.adaptation)

    def features(self, image):
        """Neck outputs ``[f1_hat, f2_hat, f3_hat, f4_hat]``."""
        return self.neck(self.encode(image))

    def decode(self, f1_hat, f2_hat, f3_fuse):
        return self.decoder(f1_hat, f2_hat, f3_fuse, tuple(self.cfg.input_size))

    def forward(self, image, p_skip: float = 0.0, generator: torch.Generator | None = None):
        from .s2match.perturb import stochastic_depth_fuse

        f1, f2, f3, f4 = self.features(image)
        mode = "train" if self.training else "eval"
        f3_fuse = stochastic_depth_fuse(f3, f4, p_skip, mode, generator)
        return self.decode(f1, f2, f3_fuse)


def build_model(cfg: BackboneConfig, acfg: AdaptationConfig | None = None, seed: int = 0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegModel(cfg, acfg)
    return model.to(dtype)


# ---------------------------------------------------------------- checkpoints

BACKBONE_NS = "backbone/"
ADAPTATION_NS = "adaptation/"


def model_arrays(model: SegModel) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        ns = ADAPTATION_NS + name[len("adaptation.") :] if name.startswith("adaptation.") else BACKBONE_NS + name
        out[ns] = t.detach().cpu().numpy()
    return out


def save_checkpoint(path, model: SegModel, acfg: AdaptationConfig | None = None, adaptation_only: bool = False):
    """Write one ``.npz`` archive: namespaced arrays plus the configs as JSON."""
    import dataclasses

    arrays = model_arrays(model)
    if adaptation_only:
        arrays = {k: v for k, v in arrays.items() if k.startswith(ADAPTATION_NS)}
    meta = {"backbone": dataclasses.asdict(model.cfg)}
    if model.adaptation is not None:
        meta["adaptation"] = dataclasses.asdict(model.adaptation.acfg)
    arrays["__config__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_config(path) -> tuple[BackboneConfig, AdaptationConfig | None]:
    with np.load(path) as z:
        meta = json.loads(z["__config__"].tobytes().decode())
    from .config import config_from_dict

    full = config_from_dict({k: v for k, v in meta.items() if k in ("backbone", "adaptation")})
    return full.backbone, (full.adaptation if "adaptation" in meta else None)


def load_arrays_into(model: SegModel, arrays: dict[str, np.ndarray]):
    """Copy namespaced arrays into ``model`` after validating names and shapes."""
    state = model.state_dict()
    for key, value in arrays.items():
        if key == "__config__":
            continue
        if key.startswith(ADAPTATION_NS):
            name = "adaptation." + key[len(ADAPTATION_NS) :]
        elif key.startswith(BACKBONE_NS):
            name = key[len(BACKBONE_NS) :]
        else:
            raise ConfigError(f"unknown checkpoint entry {key!r}")
        if name not in state:
            raise ConfigError(f"checkpoint entry {key!r} has no matching parameter")
        if tuple(state[name].shape) != tuple(value.shape):
            raise ConfigError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(state[name].shape)}")
        state[name] = torch.as_tensor(value, dtype=state[name].dtype)
    model.load_state_dict(state)
    return model


def load_checkpoint(path, model: SegModel | None = None) -> SegModel:
    if model is None:
        bcfg, acfg = read_checkpoint_config(path)
        model = SegModel(bcfg, acfg)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    return load_arrays_into(model, arrays)
