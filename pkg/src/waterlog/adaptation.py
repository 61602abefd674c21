"""Hybrid parameter-efficient adaptation: gated LoRA + gated Adapter.

Every encoder layer owns a gated LoRA branch on the attention query/value
projections and a gated Adapter that injects a high-frequency task signal
ahead of the layer. Gates are ``sigmoid(linear(mean-pooled input))``.

Zero-init guarantees a fresh module leaves the frozen model's outputs
bit-identical: LoRA ``B`` and the adapter's output projection start at zero.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import AdaptationConfig, BackboneConfig, ConfigError


class GateUnit(nn.Module):
    """Per-site gate producing one weight in (0, 1) per sample.

    ``fixed`` replaces the learned gate by a constant (``1.0`` gives the
    ungated "stacked" ablation arm; ``0.0`` switches the branch off).
    """

    def __init__(self, dim: int, fixed: float | None = None):
        super().__init__()
        self.fixed = fixed
        if fixed is None:
            self.proj = nn.Linear(dim, 1)
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.fixed is not None:
            return x.new_full((x.shape[0],), float(self.fixed))
        return gate(x, self.proj.weight, self.proj.bias)


def gate(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Pool tokens ``(B, N, C)`` or maps ``(B, C, H, W)`` to ``(B, C)``, project, squash."""
    if x.dim() == 4:
        pooled = x.mean(dim=(2, 3))
    elif x.dim() == 3:
        pooled = x.mean(dim=1)
    else:
        raise ValueError(f"gate input must be 3-D tokens or 4-D maps, got {x.dim()}-D")
    return torch.sigmoid(F.linear(pooled, weight, bias)).squeeze(-1)


class LoraBranch(nn.Module):
    """Low-rank delta ``B @ A`` with ``A: dim -> rank`` and ``B: rank -> dim``."""

    def __init__(self, dim: int, rank: int):
        super().__init__()
        if rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.A = nn.Linear(dim, rank, bias=False)
        self.B = nn.Linear(rank, dim, bias=False)
        nn.init.kaiming_uniform_(self.A.weight, a=math.sqrt(5))
        nn.init.zeros_(self.B.weight)

    def forward(self, x):
        return self.B(self.A(x))


def gated_lora_attention(x, attn, lora_q=None, lora_v=None, gate_unit=None, scale=1.0):
    """Attention on tokens ``x`` with gated low-rank deltas on query and value.

    ``q = W_q x + g * scale * B_q A_q x`` and likewise for ``v``; keys untouched.
    With no LoRA branches this is exactly the frozen attention.
    """
    q = attn.q_proj(x)
    k = attn.k_proj(x)
    v = attn.v_proj(x)
    if lora_q is not None or lora_v is not None:
        g = gate_unit(x) if gate_unit is not None else x.new_ones(x.shape[0])
        g = g.view(-1, 1, 1) * scale
        if lora_q is not None:
            q = q + g * lora_q(x)
        if lora_v is not None:
            v = v + g * lora_v(x)
    return attn.attend(q, k, v)


def adapter_inject(layer_input, task_signal, unshared, shared, gate_unit=None):
    """Residual injection ``x + g * shared(unshared(task_signal))``.

    ``layer_input`` and ``task_signal`` are token sequences of equal length.
    """
    if layer_input.shape[:-1] != task_signal.shape[:-1]:
        raise ValueError(
            f"task signal {tuple(task_signal.shape)} not aligned with layer input {tuple(layer_input.shape)}"
        )
    delta = shared(unshared(task_signal))
    if delta.shape != layer_input.shape:
        raise ValueError("adapter output dimension does not match the layer")
    g = gate_unit(layer_input) if gate_unit is not None else layer_input.new_ones(layer_input.shape[0])
    return layer_input + g.view(-1, 1, 1) * delta


def high_pass(image: torch.Tensor, mask_ratio: float = 0.25) -> torch.Tensor:
    """Suppress the centred low-frequency block covering ``mask_ratio`` of the spectrum.

    Linear in ``image``; constant images map to (numerically) zero.
    """
    h, w = image.shape[-2:]
    half = int(math.sqrt(h * w * mask_ratio) // 2)
    spec = torch.fft.fftshift(torch.fft.fft2(image, norm="forward"), dim=(-2, -1))
    keep = torch.ones(h, w, dtype=image.dtype, device=image.device)
    keep[h // 2 - half : h // 2 + half, w // 2 - half : w // 2 + half] = 0
    spec = spec * keep
    return torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)), norm="forward").real


def extract_task_signal(image, embed: nn.Module, mask_ratio: float = 0.25):
    """High-frequency component of ``image`` patch-embedded to stage-1 resolution."""
    return embed(high_pass(image, mask_ratio))


class LayerAdaptation(nn.Module):
    def __init__(self, dim: int, hidden: int, acfg: AdaptationConfig):
        super().__init__()
        fixed = None if acfg.use_gate else 1.0
        if acfg.use_lora:
            self.lora_q = LoraBranch(dim, acfg.lora_rank)
            self.lora_v = LoraBranch(dim, acfg.lora_rank)
            self.lora_gate = GateUnit(dim, fixed)
        if acfg.use_adapter:
            self.unshared = nn.Sequential(nn.Linear(hidden, hidden), nn.GELU())
            self.adapter_gate = GateUnit(dim, fixed)


class HybridAdaptation(nn.Module):
    """All adaptation parameters of the encoder, kept apart from base weights.

    ``layers[i]`` belongs to encoder layer ``i`` (stage-major order). The
    task-signal embedding and the per-stage shared adapter projections are
    layer-independent.
    """

    def __init__(self, bcfg: BackboneConfig, acfg: AdaptationConfig):
        super().__init__()
        self.acfg = acfg
        self.scale = acfg.lora_scale if acfg.lora_scale is not None else 1.0 / acfg.lora_rank
        hidden = acfg.adapter_hidden
        dims = []
        for c, d in zip(bcfg.stage_channels, bcfg.stage_depths):
            dims += [int(c)] * int(d)
            if acfg.use_lora and acfg.lora_rank > c:
                raise ConfigError(f"lora_rank {acfg.lora_rank} exceeds layer width {c}")
        self.layer_dims = dims
        self.layer_stage = [k for k, d in enumerate(bcfg.stage_depths) for _ in range(int(d))]
        if acfg.use_adapter:
            p = bcfg.patch_stride
            self.task_embed = nn.Conv2d(bcfg.in_channels, hidden, p, stride=p, bias=False)
            self.shared = nn.ModuleList(nn.Linear(hidden, int(c)) for c in bcfg.stage_channels)
            for lin in self.shared:
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        self.layers = nn.ModuleList(LayerAdaptation(d, hidden, acfg) for d in dims)

    @property
    def has_adapter(self) -> bool:
        return self.acfg.use_adapter

    @property
    def has_lora(self) -> bool:
        return self.acfg.use_lora

    def task_signal(self, image):
        return extract_task_signal(image, self.task_embed, self.acfg.freq_mask_ratio)


def tokens_at(task_map: torch.Tensor, size: tuple) -> torch.Tensor:
    """Resample a stage-1 task map to ``size`` and flatten to tokens."""
    if tuple(task_map.shape[-2:]) != tuple(size):
        task_map = F.adaptive_avg_pool2d(task_map, size)
    return task_map.flatten(2).transpose(1, 2)


def select_top_layers(n_layers: int, ratio: float) -> list[int]:
    """Indices of the deepest ``round(ratio * n_layers)`` layers."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"encoder tune ratio {ratio} outside [0, 1]")
    n_sel = int(math.floor(ratio * n_layers + 0.5))
    return list(range(n_layers - n_sel, n_layers))


def apply_freeze_policy(model, ratio: float | None = None, train_base: bool | None = None) -> list[str]:
    """Set ``requires_grad`` per the tune ratio and return trainable parameter names.

    Neck, decoder and layer-independent adaptation parameters are always
    trainable. Per-layer adaptation parameters (LoRA, unshared MLP, gates)
    are trainable only for the top ``ratio`` fraction of encoder layers.
    Base encoder weights stay frozen unless ``train_base``.
    """
    acfg = model.adaptation.acfg if model.adaptation is not None else None
    if ratio is None:
        ratio = acfg.encoder_tune_ratio if acfg is not None else 0.0
    if train_base is None:
        train_base = acfg.train_base if acfg is not None else False
    n_layers = sum(model.cfg.stage_depths)
    selected = set(select_top_layers(n_layers, ratio))
    trainable = []
    for name, p in model.named_parameters():
        if name.startswith("encoder."):
            flag = bool(train_base)
        elif name.startswith("adaptation.layers."):
            flag = int(name.split(".")[2]) in selected
        else:
            flag = True
        p.requires_grad_(flag)
        if flag:
            trainable.append(name)
    return trainable
