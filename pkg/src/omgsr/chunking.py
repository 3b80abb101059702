"""Overlap-chunked patch grids: planning, extraction and feathered blending."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError

BLEND_MODES = ("none", "feather")


@dataclass(frozen=True)
class ChunkLayout:
    image_size: tuple[int, int]
    patch_size: int
    starts_y: tuple[int, ...]
    starts_x: tuple[int, ...]
    min_overlap: int
    blend: str = "feather"

    @property
    def grid(self) -> tuple[int, int]:
        return len(self.starts_y), len(self.starts_x)

    @property
    def n_patches(self) -> int:
        return len(self.starts_y) * len(self.starts_x)

    def boxes(self):
        """Row-major ``(y, x)`` patch origins."""
        return [(y, x) for y in self.starts_y for x in self.starts_x]

    def overlaps(self, axis: int) -> list[int]:
        starts = self.starts_y if axis == 0 else self.starts_x
        return [self.patch_size - (b - a) for a, b in zip(starts, starts[1:])]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["overlap_y"] = self.overlaps(0)
        d["overlap_x"] = self.overlaps(1)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def axis_count(length: int, patch: int, min_overlap: int) -> int:
    """Fewest patches whose union covers ``length`` with adjacent overlaps >= ``min_overlap``."""
    if length <= patch:
        return 1
    return 1 + math.ceil((length - patch) / (patch - min_overlap))


def axis_starts(length: int, patch: int, min_overlap: int) -> tuple[int, ...]:
    k = axis_count(length, patch, min_overlap)
    if k == 1:
        return (0,)
    span = length - patch
    # round-half-up of i * span / (k - 1) in exact integer arithmetic
    return tuple((2 * i * span + (k - 1)) // (2 * (k - 1)) for i in range(k))


def plan_chunks(image_size, patch_size: int, min_overlap: int = 0, blend: str = "feather") -> ChunkLayout:
    h, w = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {h}x{w}")
    if not 0 <= min_overlap < patch_size:
        raise ValueError(f"min_overlap must be in [0, {patch_size}), got {min_overlap}")
    if blend not in BLEND_MODES:
        raise ValueError(f"blend must be one of {BLEND_MODES}")
    return ChunkLayout(
        image_size=(h, w),
        patch_size=patch_size,
        starts_y=axis_starts(h, patch_size, min_overlap),
        starts_x=axis_starts(w, patch_size, min_overlap),
        min_overlap=min_overlap,
        blend=blend,
    )


def single_patch_layout(size: int) -> ChunkLayout:
    return plan_chunks((size, size), size, 0)


def loss_layout(height: int, width: int, patch: int, min_overlap: int) -> ChunkLayout:
    """Chunk an image for a resolution-limited loss network.

    Images no larger than ``patch`` are used whole (one patch); larger ones are
    overlap-chunked at ``patch``.
    """
    if height == width and height <= patch:
        return single_patch_layout(height)
    p = min(patch, height, width)
    return plan_chunks((height, width), p, min(min_overlap, p - 1))


def extract(image: torch.Tensor, layout: ChunkLayout) -> list[torch.Tensor]:
    """Patches in row-major order; works on ``(..., H, W)`` tensors."""
    if tuple(image.shape[-2:]) != tuple(layout.image_size):
        raise ShapeMismatchError(f"image {tuple(image.shape[-2:])} vs layout {layout.image_size}")
    p = layout.patch_size
    return [image[..., y:y + p, x:x + p].clone() for y, x in layout.boxes()]


def _axis_ramps(starts, patch: int) -> list[np.ndarray]:
    ramps = []
    for i, s in enumerate(starts):
        pos = np.arange(patch, dtype=np.float64) + 0.5
        w = np.ones(patch, dtype=np.float64)
        if i > 0:
            ov = starts[i - 1] + patch - s
            if ov > 0:
                w = np.minimum(w, pos / ov)
        if i < len(starts) - 1:
            ov = s + patch - starts[i + 1]
            if ov > 0:
                w = np.minimum(w, (patch - pos) / ov)
        ramps.append(w)
    return ramps


def _axis_normalised(starts, patch: int, length: int) -> list[np.ndarray]:
    ramps = _axis_ramps(starts, patch)
    total = np.zeros(length, dtype=np.float64)
    for s, r in zip(starts, ramps):
        total[s:s + patch] += r
    if np.any(total <= 0):
        raise RuntimeError("blend weights vanish at some pixel; layout does not cover the image")
    return [r / total[s:s + patch] for s, r in zip(starts, ramps)]


def blend_weights(layout: ChunkLayout) -> list[np.ndarray]:
    """Per-patch ``(P, P)`` weights forming a partition of unity over the image."""
    h, w = layout.image_size
    p = layout.patch_size
    wy = _axis_normalised(layout.starts_y, p, h)
    wx = _axis_normalised(layout.starts_x, p, w)
    return [np.outer(a, b) for a in wy for b in wx]


def weight_field(layout: ChunkLayout) -> np.ndarray:
    h, w = layout.image_size
    p = layout.patch_size
    field = np.zeros((h, w), dtype=np.float64)
    for (y, x), wt in zip(layout.boxes(), blend_weights(layout)):
        field[y:y + p, x:x + p] += wt
    return field


def blend(patches, layout: ChunkLayout) -> torch.Tensor:
    """Reassemble patches into a full image.

    ``feather`` mixes overlaps with separable linear ramps normalised to sum to
    one; ``none`` pastes patches in row-major order, later ones on top.
    """
    patches = list(patches)
    if len(patches) != layout.n_patches:
        raise ShapeMismatchError(f"expected {layout.n_patches} patches, got {len(patches)}")
    p = layout.patch_size
    for q in patches:
        if tuple(q.shape[-2:]) != (p, p):
            raise ShapeMismatchError(f"patch of size {tuple(q.shape[-2:])}, layout wants {p}")
    lead = patches[0].shape[:-2]
    h, w = layout.image_size
    out = patches[0].new_zeros((*lead, h, w))
    if layout.blend == "none":
        for (y, x), q in zip(layout.boxes(), patches):
            out[..., y:y + p, x:x + p] = q
        return out
    for (y, x), q, wt in zip(layout.boxes(), patches, blend_weights(layout)):
        out[..., y:y + p, x:x + p] += q * torch.as_tensor(wt, dtype=q.dtype, device=q.device)
    return out


def tile_boundaries(layout: ChunkLayout, axis: int) -> list[int]:
    """Pixel indices ``j`` such that the pair ``(j - 1, j)`` straddles a patch edge."""
    starts = layout.starts_y if axis == 0 else layout.starts_x
    length = layout.image_size[axis]
    edges = set()
    for s in starts:
        if 0 < s < length:
            edges.add(s)
        e = s + layout.patch_size
        if 0 < e < length:
            edges.add(e)
    return sorted(edges)
