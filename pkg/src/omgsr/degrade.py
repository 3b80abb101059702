"""Seeded synthetic LQ generation: blur, bicubic downscale, noise, block-DCT quantisation.

Random parameters are drawn from ``numpy.random.default_rng(seed)`` in this
fixed order: blur sigma, noise sigma, quality, then (second order only) blur
sigma, noise sigma, quality of the second pass; after that the noise fields
of pass one and pass two.  Every draw happens even when its range is
degenerate, so changing one range never shifts the others.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.fft import dctn, idctn

from .config import DegradationConfig
from .errors import ShapeMismatchError

BLOCK = 8
# quantisation step (8-bit levels) at quality 0; quality 100 disables quantisation
MAX_QUANT_STEP = 64.0
SECOND_PASS_SCALE = 0.5


@dataclass
class DegradeParams:
    blur_sigma: float
    noise_sigma: float
    quality: int
    blur_sigma2: float | None = None
    noise_sigma2: float | None = None
    quality2: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _validate(cfg: DegradationConfig):
    for name in ("blur_sigma_range", "noise_sigma_range", "compression_quality_range"):
        lo, hi = getattr(cfg, name)
        if lo > hi or lo < 0:
            raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
    lo, hi = cfg.compression_quality_range
    if hi > 100:
        raise ValueError("quality must be <= 100")
    if cfg.downscale_factor < 1:
        raise ValueError("downscale_factor must be >= 1")


def sample_params(cfg: DegradationConfig, rng: np.random.Generator) -> DegradeParams:
    def uni(rng_, r):
        return float(r[0] + (r[1] - r[0]) * rng_.random())

    def qual(rng_, r):
        return int(r[0] + np.floor((r[1] - r[0] + 1) * rng_.random()))

    p = DegradeParams(uni(rng, cfg.blur_sigma_range), uni(rng, cfg.noise_sigma_range),
                      qual(rng, cfg.compression_quality_range))
    if cfg.second_order:
        b2 = tuple(SECOND_PASS_SCALE * v for v in cfg.blur_sigma_range)
        n2 = tuple(SECOND_PASS_SCALE * v for v in cfg.noise_sigma_range)
        qlo, qhi = cfg.compression_quality_range
        q2 = (qlo + (100 - qlo) // 2, max(qhi, qlo + (100 - qlo) // 2))
        p.blur_sigma2, p.noise_sigma2, p.quality2 = uni(rng, b2), uni(rng, n2), qual(rng, q2)
    return p


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect", truncate=3.0)


def bicubic_resize(img: torch.Tensor, size) -> torch.Tensor:
    """Antialiased bicubic resize of a ``(C, H, W)`` or ``(B, C, H, W)`` tensor."""
    batched = img.ndim == 4
    x = img if batched else img.unsqueeze(0)
    if tuple(x.shape[-2:]) == tuple(size):
        out = x
    else:
        out = F.interpolate(x, size=tuple(size), mode="bicubic", align_corners=False, antialias=True)
    return out if batched else out.squeeze(0)


def downscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[-2:]
    t = torch.from_numpy(np.ascontiguousarray(img))
    return bicubic_resize(t, (h // factor, w // factor)).numpy()


def dct_quantise(img: np.ndarray, quality: int) -> np.ndarray:
    """Compression surrogate: quantise orthonormal 8x8 block DCT coefficients.

    ``img`` is in [-1, 1]; the step is linear in quality, in 8-bit levels.
    """
    step = MAX_QUANT_STEP * (100 - quality) / 100.0
    if step <= 0:
        return img
    c, h, w = img.shape
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    x = np.pad((img + 1.0) * 127.5, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = x.shape[1:]
    blocks = x.reshape(c, H // BLOCK, BLOCK, W // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, H, W)[:, :h, :w]
    return rec / 127.5 - 1.0


def _pass(img, blur_sigma, factor, noise_sigma, quality, noise_field):
    x = gaussian_blur(img, blur_sigma)
    x = downscale(x, factor)
    x = x + (noise_sigma / 127.5) * noise_field
    x = np.clip(x, -1.0, 1.0)
    return dct_quantise(x, quality)


def degrade_with_params(hq: torch.Tensor, config: DegradationConfig, seed: int):
    """Return ``(lq, params)``; ``hq`` is a ``(3, H, W)`` tensor in [-1, 1]."""
    _validate(config)
    f = config.downscale_factor
    h, w = hq.shape[-2:]
    if h % f or w % f:
        raise ShapeMismatchError(f"image {h}x{w} not divisible by factor {f}")
    rng = np.random.default_rng(seed)
    params = sample_params(config, rng)
    c = hq.shape[-3]
    lq_shape = (c, h // f, w // f)
    noise1 = rng.standard_normal(lq_shape)
    noise2 = rng.standard_normal(lq_shape) if config.second_order else None
    img = hq.detach().cpu().double().numpy()
    x = _pass(img, params.blur_sigma, f, params.noise_sigma, params.quality, noise1)
    if config.second_order:
        x = _pass(x, params.blur_sigma2, 1, params.noise_sigma2, params.quality2, noise2)
    x = np.clip(x, -1.0, 1.0)
    return torch.from_numpy(x).to(hq.dtype), params


def degrade(hq: torch.Tensor, config: DegradationConfig, seed: int) -> torch.Tensor:
    return degrade_with_params(hq, config, seed)[0]


def reference_downscale(hq: torch.Tensor, config: DegradationConfig, seed: int) -> torch.Tensor:
    """Blurred and downscaled image with the same sampled blur as :func:`degrade`, before noise."""
    rng = np.random.default_rng(seed)
    params = sample_params(config, rng)
    img = gaussian_blur(hq.detach().cpu().double().numpy(), params.blur_sigma)
    return torch.from_numpy(downscale(img, config.downscale_factor)).to(hq.dtype)
