"""DDPM and flow-matching schedules, forward interpolation and pre-training targets.

Step indices are integers on ``0..num_steps``.  Index 0 is the clean endpoint
(``alpha_bar = 1`` / ``sigma = 0``) and ``num_steps`` the noisiest one.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

from .config import ScheduleConfig, ScheduleKind
from .errors import KindMismatchError, ShapeMismatchError


@lru_cache(maxsize=32)
def _alpha_bar_table(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    table = np.empty(num_steps + 1, dtype=np.float64)
    table[0] = 1.0
    table[1:] = np.cumprod(1.0 - betas)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=32)
def _sigma_table(num_steps: int, shift: float) -> np.ndarray:
    u = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    table = shift * u / (1.0 + (shift - 1.0) * u)
    table.setflags(write=False)
    return table


def betas(config: ScheduleConfig) -> np.ndarray:
    _require(config, ScheduleKind.DDPM)
    return np.linspace(config.beta_start, config.beta_end, config.num_steps, dtype=np.float64)


def alpha_bar_table(config: ScheduleConfig) -> np.ndarray:
    """Cumulative products of ``1 - beta``; entry ``t`` is the product over ``s = 1..t``."""
    _require(config, ScheduleKind.DDPM)
    return _alpha_bar_table(config.num_steps, config.beta_start, config.beta_end)


def sigma_table(config: ScheduleConfig) -> np.ndarray:
    _require(config, ScheduleKind.FM)
    return _sigma_table(config.num_steps, config.shift)


def alpha_bar(config: ScheduleConfig, t: int) -> float:
    _check_step(config, t)
    return float(alpha_bar_table(config)[t])


def sigma(config: ScheduleConfig, t: int) -> float:
    _check_step(config, t)
    return float(sigma_table(config)[t])


def interpolation_weights(config: ScheduleConfig, t):
    """Return ``(w_clean, w_noise)`` so that ``z_t = w_clean * z0 + w_noise * eps``.

    ``t`` is an int or a 1-D integer tensor (one step per batch element); the
    tensor form returns float64 tensors of the same length.
    """
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long().numpy()
        if idx.min() < 0 or idx.max() > config.num_steps:
            raise ValueError(f"step index out of range 0..{config.num_steps}")
        if config.kind is ScheduleKind.DDPM:
            ab = alpha_bar_table(config)[idx]
            wc, wn = np.sqrt(ab), np.sqrt(1.0 - ab)
        else:
            s = sigma_table(config)[idx]
            wc, wn = 1.0 - s, s
        return torch.from_numpy(wc), torch.from_numpy(wn)
    t = int(t)
    if config.kind is ScheduleKind.DDPM:
        ab = alpha_bar(config, t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))
    s = sigma(config, t)
    return 1.0 - s, s


def _broadcast(w, like: torch.Tensor):
    if isinstance(w, torch.Tensor):
        return w.to(like.dtype).to(like.device).view(-1, *([1] * (like.ndim - 1)))
    return w


def add_noise(config: ScheduleConfig, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Forward interpolation between clean latent and noise at step ``t``."""
    if z0.shape != eps.shape:
        raise ShapeMismatchError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    wc, wn = interpolation_weights(config, t)
    return _broadcast(wc, z0) * z0 + _broadcast(wn, eps) * eps


def training_target(config: ScheduleConfig, z0: torch.Tensor, eps: torch.Tensor, t=None) -> torch.Tensor:
    """Noise for DDPM, velocity ``eps - z0`` for flow matching."""
    if z0.shape != eps.shape:
        raise ShapeMismatchError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    if config.kind is ScheduleKind.DDPM:
        return eps
    return eps - z0


def _require(config: ScheduleConfig, kind: ScheduleKind) -> None:
    if config.kind is not kind:
        raise KindMismatchError(f"operation needs a {kind.value} schedule, got {config.kind.value}")


def _check_step(config: ScheduleConfig, t: int) -> None:
    if not 0 <= int(t) <= config.num_steps or int(t) != t:
        raise ValueError(f"step index {t} out of range 0..{config.num_steps}")
