"""PSNR, SSIM and a reference-metric evaluation harness.

Metric inputs are ``(C, H, W)`` arrays/tensors on a ``[0, peak]`` scale.  The
``pdist`` column uses the package's fixed perceptual embedder and is not
comparable to published LPIPS numbers.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .checkpoint import CheckpointBundle
from .data import load_png, to_unit
from .errors import ShapeMismatchError
from .infer import restore
from .losses import perceptual_distance
from .models import PerceptualEmbedder

PSNR_CAP = 99.0
CSV_COLUMNS = ("file", "psnr", "ssim", "pdist")


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a, b, window: int = 7, peak: float = 1.0) -> float:
    """Mean SSIM over all fully contained ``window`` x ``window`` boxes, averaged over channels.

    Local statistics use uniform weights and the unbiased (sample) covariance.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    n = window * window
    cov_norm = n / (n - 1)
    pad = window // 2
    vals = []
    for x, y in zip(a, b):
        ux, uy = uniform_filter(x, window), uniform_filter(y, window)
        uxx, uyy, uxy = uniform_filter(x * x, window), uniform_filter(y * y, window), uniform_filter(x * y, window)
        vx = cov_norm * (uxx - ux * ux)
        vy = cov_norm * (uyy - uy * uy)
        vxy = cov_norm * (uxy - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s[pad:s.shape[0] - pad, pad:s.shape[1] - pad].mean())
    return float(np.mean(vals))


def pair_files(data_dir) -> list[tuple[str, Path, Path]]:
    """``(name, lq_path, hq_path)`` for every PNG present in both ``lq/`` and ``hq/``, sorted by name."""
    root = Path(data_dir)
    lq, hq = root / "lq", root / "hq"
    if not lq.is_dir() or not hq.is_dir():
        raise FileNotFoundError(f"{root} must contain lq/ and hq/ subdirectories")
    names = sorted(p.name for p in lq.glob("*.png") if (hq / p.name).is_file())
    return [(n, lq / n, hq / n) for n in names]


def evaluate(model, dataset, embedder=None, out_csv=None, out_json=None) -> dict:
    """Restore every LQ image and score it against its HQ target.

    ``model`` is a :class:`CheckpointBundle` or any callable mapping an LQ
    image to its restoration.  ``dataset`` is a directory with ``lq/`` and ``hq/`` PNGs or a sequence of
    ``(name, lq_tensor, hq_tensor)``; images are in ``[-1, 1]`` and scored on
    ``[0, 1]``.  Returns ``{"rows": [...], "mean": {...}, "count": n}``.
    """
    if isinstance(dataset, (str, Path)):
        items = [(n, load_png(l), load_png(h)) for n, l, h in pair_files(dataset)]
    else:
        items = list(dataset)
    if not items:
        raise ValueError("evaluation dataset is empty")
    if isinstance(model, CheckpointBundle):
        bundle = model
        restore_fn = lambda x: restore(bundle, x)  # noqa: E731
    else:
        restore_fn = model
    embedder = embedder or PerceptualEmbedder()
    rows = []
    for name, lq, hq in sorted(items, key=lambda r: r[0]):
        with torch.no_grad():
            out = restore_fn(lq).clamp(-1, 1)
            pd = float(perceptual_distance(out.float(), hq.float(), embedder))
        rows.append({"file": name, "psnr": psnr(to_unit(out), to_unit(hq)),
                     "ssim": ssim(to_unit(out), to_unit(hq)), "pdist": pd})
    mean = {k: float(np.mean([r[k] for r in rows])) for k in CSV_COLUMNS[1:]}
    report = {"rows": rows, "mean": mean, "count": len(rows)}
    if out_csv:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if out_json:
        Path(out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(out_json).write_text(json.dumps({"mean": mean, "count": len(rows)}, indent=2, sort_keys=True))
    return report
