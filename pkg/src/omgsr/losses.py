"""Training losses: latent refinement, pixel MSE, overlap-chunked perceptual and GAN terms.

Every loss returns a scalar tensor so gradients flow to whichever inputs
require them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .chunking import ChunkLayout, extract
from .config import ScheduleConfig
from .errors import NumericalFailureError, ShapeMismatchError
from .models import PROB_EPS
from .scheduler import add_noise

COMPONENTS = ("lan", "mse", "oc_lpips", "gan_g")
LOG_COLUMNS = ("step", "lan", "mse", "oc_lpips", "gan_g", "gan_d", "total")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 2.0
    lambda3: float = 5.0
    lambda4: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass(frozen=True)
class LossBreakdown:
    lan: float
    mse: float
    oc_lpips: float
    gan_g: float
    total: float
    gan_d: float = float("nan")

    def row(self, step: int) -> dict:
        return {"step": step, **{k: getattr(self, k) for k in LOG_COLUMNS[1:]}}


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def lan_loss(z_L, z_H, eps, config: ScheduleConfig, t_star: int) -> torch.Tensor:
    """Mean squared distance from the LQ latent to the noised HQ latent at ``t_star``."""
    _same_shape(z_L, z_H, "z_L/z_H")
    target = add_noise(config, z_H, eps, t_star)
    return torch.mean((z_L - target) ** 2)


def mse_loss(x_P, x_H) -> torch.Tensor:
    _same_shape(x_P, x_H, "x_P/x_H")
    return torch.mean((x_P - x_H) ** 2)


def _unit_channels(f, eps=1e-10):
    return f / (torch.sqrt(torch.sum(f * f, dim=1, keepdim=True)) + eps)


def perceptual_distance(a, b, embedder) -> torch.Tensor:
    """Mean over layers of the spatially averaged squared distance of channel-normalised features."""
    _same_shape(a, b, "perceptual inputs")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    fa, fb = embedder(a), embedder(b)
    per_layer = []
    for x, y in zip(fa, fb):
        if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
            raise NumericalFailureError("embedder produced non-finite features")
        d = (_unit_channels(x) - _unit_channels(y)) ** 2
        per_layer.append(d.sum(dim=1).mean())
    return torch.stack(per_layer).mean()


def oc_lpips(x_P, x_H, embedder, layout: ChunkLayout) -> torch.Tensor:
    """Plain mean over chunks of the per-chunk perceptual distance."""
    _same_shape(x_P, x_H, "x_P/x_H")
    pp, ph = extract(x_P, layout), extract(x_H, layout)
    return torch.stack([perceptual_distance(p, h, embedder) for p, h in zip(pp, ph)]).mean()


def _chunk_probs(x, discriminator, layout):
    if x.ndim == 3:
        x = x.unsqueeze(0)
    probs = torch.stack([discriminator(p) for p in extract(x, layout)])
    probs = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if not bool(((probs > 0) & (probs < 1)).all()):
        raise RuntimeError("discriminator probability outside (0, 1) after clamping")
    return probs


def oc_gan_d_loss(x_H, x_P, discriminator, layout: ChunkLayout) -> torch.Tensor:
    """Logistic discriminator loss averaged over chunks; ``x_P`` is treated as constant."""
    real = _chunk_probs(x_H, discriminator, layout)
    fake = _chunk_probs(x_P.detach(), discriminator, layout)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def oc_gan_g_loss(x_P, discriminator, layout: ChunkLayout) -> torch.Tensor:
    """Non-saturating generator loss averaged over chunks."""
    return -torch.log(_chunk_probs(x_P, discriminator, layout)).mean()


def combine(components, weights: LossWeights):
    """Weighted sum of the four generator-side components (tensors or floats)."""
    return (
        weights.lambda1 * components["lan"]
        + weights.lambda2 * components["mse"]
        + weights.lambda3 * components["oc_lpips"]
        + weights.lambda4 * components["gan_g"]
    )


def total_loss(components, weights: LossWeights = LossWeights()) -> LossBreakdown:
    vals = {k: float(components[k]) for k in COMPONENTS}
    gan_d = float(components["gan_d"]) if "gan_d" in components else float("nan")
    return LossBreakdown(total=float(combine(vals, weights)), gan_d=gan_d, **vals)
