"""Procedural texture corpus, LQ/HQ pair construction and PNG I/O.

Images are float ``(3, H, W)`` tensors in ``[-1, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DegradationConfig
from .degrade import bicubic_resize, degrade


def _smoothstep(d, width=1.0):
    # anti-aliased inside indicator from a signed distance (negative inside)
    return np.clip(0.5 - d / width, 0.0, 1.0)


def procedural_image(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    """Gradient background, a few shapes and an optional stripe patch."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    yy /= size
    xx /= size
    c0, c1 = rng.uniform(-0.9, 0.9, size=(2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 9)):
        color = rng.uniform(-1, 1, size=3)
        cy, cx = rng.uniform(0.05, 0.95, size=2)
        kind = rng.integers(0, 3)
        if kind == 0:
            r = rng.uniform(0.04, 0.25)
            d = (np.hypot(yy - cy, xx - cx) - r) * size
        elif kind == 1:
            hy, hx = rng.uniform(0.03, 0.22, size=2)
            th = rng.uniform(0, np.pi)
            u = np.cos(th) * (xx - cx) + np.sin(th) * (yy - cy)
            v = -np.sin(th) * (xx - cx) + np.cos(th) * (yy - cy)
            d = np.maximum(np.abs(u) - hx, np.abs(v) - hy) * size
        else:
            ry, rx = rng.uniform(0.04, 0.25, size=2)
            d = (np.hypot((yy - cy) / ry, (xx - cx) / rx) - 1.0) * min(ry, rx) * size
        m = _smoothstep(d, width=rng.uniform(0.8, 2.0))
        alpha = rng.uniform(0.6, 1.0)
        img = img * (1 - alpha * m) + color[:, None, None] * alpha * m
    if rng.random() < 0.7:
        freq = rng.uniform(4, 16)
        th = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(th) * xx + np.sin(th) * yy) + phase)
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.1, 0.35)
        m = _smoothstep((np.hypot(yy - cy, xx - cx) - r) * size, 2.0)
        color = rng.uniform(-1, 1, size=3)
        amp = rng.uniform(0.3, 0.8)
        img = img * (1 - amp * wave * m) + color[:, None, None] * amp * wave * m
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def make_corpus(n: int, size: int, seed: int) -> torch.Tensor:
    """``(n, 3, size, size)`` HQ images, image ``i`` seeded by ``(seed, i)``."""
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        out[i] = procedural_image(np.random.default_rng([seed, i]), size)
    return torch.from_numpy(out)


@dataclass
class PairSet:
    """HQ images, their degraded LQ versions and the bicubic-upsampled LQ."""

    hq: torch.Tensor
    lq: torch.Tensor
    lq_up: torch.Tensor

    def __len__(self):
        return self.hq.shape[0]


def pair_seed(seed: int, index: int) -> int:
    """Degradation seed of image ``index`` in a corpus built with ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_pairs(hq: torch.Tensor, config: DegradationConfig, seed: int) -> PairSet:
    lq = torch.stack([degrade(h, config, pair_seed(seed, i)) for i, h in enumerate(hq)])
    lq_up = bicubic_resize(lq, hq.shape[-2:]).clamp(-1, 1)
    return PairSet(hq, lq, lq_up)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = np.clip(np.round((img.detach().cpu().double().numpy() + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))


def save_png(img: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(np.transpose(arr, (2, 0, 1)) / 127.5 - 1.0).contiguous()


def to_unit(img: torch.Tensor) -> torch.Tensor:
    """Map ``[-1, 1]`` to ``[0, 1]``."""
    return (img + 1.0) / 2.0
