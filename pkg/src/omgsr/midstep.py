"""Data-driven mid-timestep selection and the trajectory-gap probe."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import torch

from .config import ScheduleConfig, ScheduleKind
from .errors import NumericalFailureError, ShapeMismatchError
from .scheduler import add_noise, alpha_bar_table, sigma_table


@dataclass
class MidTimestepReport:
    per_t_mse: dict[int, float]
    t_star: int
    dataset_size: int

    def to_dict(self) -> dict:
        return {
            "t_star": self.t_star,
            "dataset_size": self.dataset_size,
            "per_t_mse": {str(t): v for t, v in sorted(self.per_t_mse.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mse"])
        for t, v in sorted(self.per_t_mse.items()):
            w.writerow([t, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MidTimestepReport":
        return cls({int(k): float(v) for k, v in d["per_t_mse"].items()}, int(d["t_star"]), int(d["dataset_size"]))


def candidate_grid(config: ScheduleConfig, stride: int = 5, full: bool = False) -> list[int]:
    if full:
        stride = 1
    return list(range(0, config.num_steps + 1, stride))


# gaps within this relative distance of the minimum count as tied, so summation-order rounding cannot flip the choice
TIE_RTOL = 1e-12


def argmin_smallest(values: dict[int, float]) -> int:
    """Key of the minimum value; ties (within ``TIE_RTOL``) go to the smaller key."""
    best = min(values.values())
    return min(t for t, v in values.items() if v - best <= TIE_RTOL * abs(best))


def precompute_mid_timestep(pairs, config: ScheduleConfig, eps_source=0, candidate_ts=None) -> MidTimestepReport:
    """Pick the step whose noised HQ latents are closest on average to the LQ latents.

    One noise draw per pair (from ``eps_source``, a ``torch.Generator`` or a
    seed) is reused for every candidate step.  Gaps are per-element mean
    squared errors, averaged over pairs in pair order.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("precompute_mid_timestep needs at least one (z_L, z_H) pair")
    shape = pairs[0][0].shape
    for z_l, z_h in pairs:
        if z_l.shape != shape or z_h.shape != shape:
            raise ShapeMismatchError(f"all latents must share shape {tuple(shape)}")
    cands = sorted(set(int(t) for t in (candidate_ts if candidate_ts is not None else candidate_grid(config))))
    if not cands:
        raise ValueError("candidate step set is empty")
    gen = eps_source if isinstance(eps_source, torch.Generator) else torch.Generator().manual_seed(int(eps_source))
    eps = [torch.randn(shape, generator=gen, dtype=torch.float64) for _ in pairs]
    totals = {t: 0.0 for t in cands}
    with torch.no_grad():
        for (z_l, z_h), e in zip(pairs, eps):
            z_l = z_l.detach().to(torch.float64)
            z_h = z_h.detach().to(torch.float64)
            for t in cands:
                totals[t] += float(torch.mean((z_l - add_noise(config, z_h, e, t)) ** 2))
    per_t = {t: v / len(pairs) for t, v in totals.items()}
    return MidTimestepReport(per_t, argmin_smallest(per_t), len(pairs))


@dataclass
class GapProbeReport:
    step_mse: list[tuple[int, float]]
    injection_step: int | None = None
    injection_level: float = 0.0
    timesteps: list[int] = field(default_factory=list)

    @property
    def final_mse(self) -> float:
        return self.step_mse[-1][1]

    def to_dict(self) -> dict:
        return {
            "injection_step": self.injection_step,
            "injection_level": self.injection_level,
            "timesteps": self.timesteps,
            "step_mse": [[i, v] for i, v in self.step_mse],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t", "mse"])
        for (i, v), t in zip(self.step_mse, self.timesteps):
            w.writerow([i, t, repr(v)])
        return buf.getvalue()


def rollout_timesteps(config: ScheduleConfig, steps: int) -> list[int]:
    """``steps`` evenly spaced indices from ``num_steps`` downward, excluding 0."""
    T = config.num_steps
    return [int(round(T - i * T / steps)) for i in range(steps)]


def gap_probe(denoiser, vae, config: ScheduleConfig, steps: int = 20, injection_step: int | None = None,
              injection_level: float = 0.0, seed: int = 0, latent_hw: tuple[int, int] = (16, 16),
              cond=None) -> GapProbeReport:
    """Deterministic sampler rollout recording how far it drifts from the training interpolation.

    At rollout step ``i`` (timestep ``t_i``) the current latent ``zbar`` gives a
    clean estimate ``x0``; the reference ``z_t`` interpolates ``x0`` with the
    initial noise, and the mean squared ``zbar - z_t`` is recorded.  With
    injection enabled, ``injection_level * N(0, I)`` is added to ``zbar`` at
    the start of step ``injection_step``.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if injection_step is not None and not 1 <= injection_step <= steps - 1:
        raise ValueError(f"injection_step must be in [1, {steps - 1}]")
    if injection_level < 0:
        raise ValueError("injection_level must be non-negative")
    gen = torch.Generator().manual_seed(seed)
    shape = (1, vae.latent_channels, *latent_hw)
    eps0 = torch.randn(shape, generator=gen)
    # drawn unconditionally so the run with injection_level=0 matches a run without injection
    inject = torch.randn(shape, generator=gen)
    ts = rollout_timesteps(config, steps)
    ddpm = config.kind is ScheduleKind.DDPM
    table = alpha_bar_table(config) if ddpm else sigma_table(config)
    zbar = eps0.clone()
    records = []
    with torch.no_grad():
        for i, t in enumerate(ts):
            if injection_step is not None and i == injection_step:
                zbar = zbar + injection_level * inject
            pred = denoiser(zbar, t, cond)
            t_next = ts[i + 1] if i + 1 < steps else 0
            if ddpm:
                ab, ab_next = float(table[t]), float(table[t_next])
                x0 = (zbar - (1 - ab) ** 0.5 * pred) / ab ** 0.5
                ref = ab ** 0.5 * x0 + (1 - ab) ** 0.5 * eps0
                nxt = ab_next ** 0.5 * x0 + (1 - ab_next) ** 0.5 * pred
            else:
                s, s_next = float(table[t]), float(table[t_next])
                x0 = zbar - s * pred
                ref = (1 - s) * x0 + s * eps0
                nxt = zbar + (s_next - s) * pred
            mse = float(torch.mean((zbar - ref) ** 2))
            if not (torch.isfinite(nxt).all() and mse == mse and abs(mse) != float("inf")):
                raise NumericalFailureError(f"non-finite latent at rollout step {i} (t={t})")
            records.append((i, mse))
            zbar = nxt
    return GapProbeReport(records, injection_step, float(injection_level), ts)
