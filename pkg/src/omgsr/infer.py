"""Single-pass restoration and the two-stage tiled upscaler."""
from __future__ import annotations

import numpy as np
import torch

from .checkpoint import CheckpointBundle
from .chunking import ChunkLayout, blend, extract, plan_chunks, tile_boundaries
from .degrade import bicubic_resize
from .errors import ShapeMismatchError
from .predict import predict_one_step


def _require_t_star(bundle: CheckpointBundle) -> int:
    if bundle.t_star is None:
        raise ValueError("checkpoint has no selected mid-timestep (t_star)")
    return int(bundle.t_star)


def _batched(x: torch.Tensor):
    return (x.unsqueeze(0), True) if x.ndim == 3 else (x, False)


@torch.no_grad()
def one_step(bundle: CheckpointBundle, x: torch.Tensor) -> torch.Tensor:
    """Encoder, denoiser and decoder, one call each, at the bundle's ``t_star``."""
    t_star = _require_t_star(bundle)
    f = bundle.vae.downsample_factor
    if x.shape[-1] % f or x.shape[-2] % f:
        raise ShapeMismatchError(f"input {tuple(x.shape[-2:])} not divisible by VAE factor {f}")
    z_L = bundle.vae.encode(x, use_adapter=bundle.adapters_injected)
    eps_pred = bundle.denoiser(z_L, t_star)
    z_P = predict_one_step(bundle.config.scheduler, z_L, eps_pred, t_star)
    return bundle.vae.decode(z_P)


@torch.no_grad()
def restore(bundle: CheckpointBundle, x_L: torch.Tensor, scale: int | None = None) -> torch.Tensor:
    """Bicubic-upsample the LQ input by the training scale, then run the one-step pipeline."""
    scale = bundle.config.data.scale if scale is None else scale
    x, unbatched = _batched(x_L)
    h, w = x.shape[-2:]
    up = bicubic_resize(x, (h * scale, w * scale)).clamp(-1, 1)
    out = one_step(bundle, up)
    return out.squeeze(0) if unbatched else out


@torch.no_grad()
def tiled_pass(bundle: CheckpointBundle, x: torch.Tensor, layout: ChunkLayout) -> torch.Tensor:
    tiles = extract(x, layout)
    return blend([one_step(bundle, t) for t in tiles], layout)


@torch.no_grad()
def tiled_restore(bundle: CheckpointBundle, x_L: torch.Tensor, tile: int, min_overlap: int = 8,
                  stage2_scale: int | None = None, blend_mode: str = "feather") -> torch.Tensor:
    """Stage 1: plain restore.  Stage 2: bicubic-upsample by ``stage2_scale``,
    run the one-step pipeline tile by tile and blend the tiles back."""
    s2 = bundle.config.infer.stage2_scale if stage2_scale is None else stage2_scale
    x, unbatched = _batched(x_L)
    stage1 = restore(bundle, x)
    h, w = stage1.shape[-2:]
    up = bicubic_resize(stage1, (h * s2, w * s2)).clamp(-1, 1)
    f = bundle.vae.downsample_factor
    if tile % f:
        raise ShapeMismatchError(f"tile {tile} not divisible by VAE factor {f}")
    layout = plan_chunks(up.shape[-2:], min(tile, *up.shape[-2:]), min_overlap, blend_mode)
    out = tiled_pass(bundle, up, layout)
    return out.squeeze(0) if unbatched else out


def tile_layout(bundle: CheckpointBundle, lq_size, tile: int, min_overlap: int, stage2_scale: int | None = None,
                blend_mode: str = "feather") -> ChunkLayout:
    """The stage-2 layout :func:`tiled_restore` uses for an LQ input of ``lq_size``."""
    s2 = bundle.config.infer.stage2_scale if stage2_scale is None else stage2_scale
    s = bundle.config.data.scale * s2
    h, w = lq_size
    return plan_chunks((h * s, w * s), min(tile, h * s, w * s), min_overlap, blend_mode)


def seam_statistic(image: torch.Tensor, layout: ChunkLayout) -> float:
    """Worst tile-edge discontinuity relative to typical neighbour differences.

    For every column (row) line ``j`` the mean absolute first difference
    ``|x[..., j] - x[..., j-1]|`` is taken along the line.  The statistic is the
    largest value over lines straddling a tile edge divided by the median over
    all other lines.
    """
    x = image.detach().double()
    if x.ndim == 4:
        x = x[0]
    dx = (x[:, :, 1:] - x[:, :, :-1]).abs().mean(dim=(0, 1)).numpy()  # index j-1 -> pair (j-1, j)
    dy = (x[:, 1:, :] - x[:, :-1, :]).abs().mean(dim=(0, 2)).numpy()
    bx = [j - 1 for j in tile_boundaries(layout, 1)]
    by = [j - 1 for j in tile_boundaries(layout, 0)]
    interior = np.concatenate([np.delete(dx, bx), np.delete(dy, by)])
    seams = np.concatenate([dx[bx], dy[by]])
    if seams.size == 0:
        return 0.0
    med = float(np.median(interior))
    return float(seams.max() / max(med, 1e-12))
