"""One mid-timestep prediction: invert the forward interpolation at ``t_star``."""
from __future__ import annotations

import math

import torch

from .config import ScheduleConfig, ScheduleKind
from .errors import DegenerateTimestepError, ShapeMismatchError
from .scheduler import alpha_bar, sigma

ALPHA_BAR_FLOOR = 1e-8


def predict_one_step(config: ScheduleConfig, z_L: torch.Tensor, eps_pred: torch.Tensor, t_star: int) -> torch.Tensor:
    """Restored latent from the LQ latent and the denoiser output at ``t_star``.

    DDPM: ``(z_L - sqrt(1 - ab) * eps_pred) / sqrt(ab)``.
    FM:   ``z_L - sigma(t_star) * eps_pred``.
    """
    if z_L.shape != eps_pred.shape:
        raise ShapeMismatchError(f"z_L {tuple(z_L.shape)} vs eps_pred {tuple(eps_pred.shape)}")
    if config.kind is ScheduleKind.DDPM:
        ab = alpha_bar(config, t_star)
        if ab <= ALPHA_BAR_FLOOR:
            raise DegenerateTimestepError(f"alpha_bar({t_star}) = {ab:.3e} is below {ALPHA_BAR_FLOOR}")
        return (z_L - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    return z_L - sigma(config, t_star) * eps_pred
