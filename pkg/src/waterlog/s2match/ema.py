"""Mean-teacher EMA with the warm-up schedule ``min(1 - 1/(iter + 1), cap)``."""

from __future__ import annotations

import torch


def ema_gamma(iteration: int, gamma_cap: float = 0.996) -> float:
    return min(1.0 - 1.0 / (iteration + 1), gamma_cap)


def _state(obj):
    if isinstance(obj, torch.nn.Module):
        return obj.state_dict(keep_vars=True)
    return obj


@torch.no_grad()
def ema_update(teacher, student, iteration: int, gamma_cap: float = 0.996) -> float:
    """In-place ``teacher <- gamma * teacher + (1 - gamma) * student``; returns gamma.

    Works on modules (parameters and float buffers) or plain name->tensor dicts.
    """
    t_state, s_state = _state(teacher), _state(student)
    if list(t_state) != list(s_state):
        missing = set(t_state) ^ set(s_state)
        raise ValueError(f"teacher/student parameter names differ: {sorted(missing)[:5]}")
    gamma = ema_gamma(iteration, gamma_cap)
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t = t.data if isinstance(t, torch.nn.Parameter) else t
        s = s.data if isinstance(s, torch.nn.Parameter) else s
        if t.is_floating_point():
            t.mul_(gamma).add_(s * (1.0 - gamma))
        else:
            t.copy_(s)
    return gamma
