"""Toy pre-training and one mid-timestep fine-tuning with alternating G/D updates."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import CheckpointBundle, load_optimizer, optimizer_snapshot
from .chunking import loss_layout
from .config import OMGConfig
from .data import PairSet, save_png
from .errors import ConfigError, NumericalFailureError
from .losses import (LOG_COLUMNS, LossBreakdown, LossWeights, combine, lan_loss, mse_loss, oc_gan_d_loss,
                     oc_gan_g_loss, oc_lpips)
from .midstep import MidTimestepReport, candidate_grid, precompute_mid_timestep
from .models import PerceptualEmbedder, lora_parameters
from .predict import predict_one_step
from .scheduler import add_noise, training_target
from .seeding import generator

log = logging.getLogger(__name__)


def random_crops(images: torch.Tensor, crop: int, batch: int, gen: torch.Generator, *others: torch.Tensor):
    """Same random ``crop``-sized windows from ``images`` and each aligned tensor in ``others``."""
    n, _, h, w = images.shape
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than images {h}x{w}")
    idx = torch.randint(0, n, (batch,), generator=gen)
    ys = torch.randint(0, h - crop + 1, (batch,), generator=gen)
    xs = torch.randint(0, w - crop + 1, (batch,), generator=gen)
    outs = []
    for src in (images, *others):
        outs.append(torch.stack([src[i, :, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)]))
    return outs[0] if not others else tuple(outs)


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value).all():
        raise NumericalFailureError(f"non-finite {what} at step {step}")


def _check_grads(params, what: str, step: int) -> None:
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalFailureError(f"non-finite gradient in {what} at step {step}")


# ---------------------------------------------------------------------------
# pre-training


def _vae_loss(vae, x):
    z = vae.encoder(x)
    rec = vae.decoder(z)
    return torch.mean((rec - x) ** 2) + 1e-4 * torch.mean(z ** 2)


def _denoiser_loss(bundle, x, gen):
    cfg = bundle.config.scheduler
    with torch.no_grad():
        z0 = bundle.vae.encode(x)
    t = torch.randint(1, cfg.num_steps + 1, (x.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    zt = add_noise(cfg, z0, eps, t)
    return torch.mean((bundle.denoiser(zt, t) - training_target(cfg, z0, eps, t)) ** 2)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` to zero; a pure function of the step so resumed runs match."""
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(1, total)))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


@torch.no_grad()
def calibrate_latent_scale(bundle: CheckpointBundle, images: torch.Tensor, n: int = 64) -> float:
    vae = bundle.vae
    vae.latent_scale.fill_(1.0)
    crops = random_crops(images, bundle.config.pretrain.crop, n, generator(bundle.config.seed, "latent-scale"))
    std = float(vae.encoder(crops).std())
    vae.latent_scale.fill_(bundle.config.vae.latent_std / max(std, 1e-8))
    return float(vae.latent_scale)


def pretrain(bundle: CheckpointBundle, dataset: torch.Tensor, config: OMGConfig | None = None,
             vae_steps: int | None = None, denoiser_steps: int | None = None,
             history: list | None = None, budget: int | None = None) -> CheckpointBundle:
    """Train the toy VAE on reconstruction, then the denoiser on the schedule's objective.

    Resumes from ``bundle.stage``/``bundle.step``; batches and noise for a step
    come from generators keyed by ``(seed, stage, step)`` so a resumed run
    replays exactly.  ``history`` (if given) receives ``(stage, step, loss)``.
    ``budget`` caps the optimiser steps taken by this call, which is how an
    interrupted run is simulated.
    """
    config = config or bundle.config
    if len(dataset) == 0:
        raise ConfigError("pre-training dataset is empty")
    pc = config.pretrain
    vae_steps = pc.vae_steps if vae_steps is None else vae_steps
    denoiser_steps = pc.denoiser_steps if denoiser_steps is None else denoiser_steps
    seed = config.seed
    names = bundle.param_names()
    remaining = [float("inf") if budget is None else budget]

    def spend() -> bool:
        if remaining[0] <= 0:
            return False
        remaining[0] -= 1
        return True

    if bundle.stage in ("init", "vae"):
        params = list(bundle.vae.encoder.parameters()) + list(bundle.vae.decoder.parameters())
        opt = torch.optim.AdamW(params, lr=pc.lr, weight_decay=0.0)
        if bundle.stage == "vae" and "vae" in bundle.optim_state:
            load_optimizer(opt, bundle.optim_state["vae"], names)
        start = bundle.step if bundle.stage == "vae" else 0
        bundle.stage = "vae"
        for step in range(start, vae_steps):
            if not spend():
                break
            _set_lr(opt, cosine_lr(pc.lr, step, vae_steps))
            gen = generator(seed, "pretrain-vae", step)
            x = random_crops(dataset, pc.crop, pc.batch_size, gen)
            loss = _vae_loss(bundle.vae, x)
            _check_finite(loss, "VAE loss", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _check_grads(params, "VAE", step)
            opt.step()
            bundle.step = step + 1
            if history is not None:
                history.append(("vae", step, loss.item()))
        bundle.optim_state["vae"] = optimizer_snapshot(opt, names)
        if bundle.step >= vae_steps:
            bundle.extra["latent_scale"] = calibrate_latent_scale(bundle, dataset)
            bundle.stage, bundle.step = "denoiser", 0
            bundle.optim_state.pop("vae", None)

    if bundle.stage == "denoiser":
        params = list(bundle.denoiser.parameters())
        opt = torch.optim.AdamW(params, lr=pc.lr, weight_decay=0.0)
        if "denoiser" in bundle.optim_state:
            load_optimizer(opt, bundle.optim_state["denoiser"], names)
        for step in range(bundle.step, denoiser_steps):
            if not spend():
                break
            _set_lr(opt, cosine_lr(pc.lr, step, denoiser_steps))
            gen = generator(seed, "pretrain-denoiser", step)
            x = random_crops(dataset, pc.crop, pc.batch_size, gen)
            loss = _denoiser_loss(bundle, x, gen)
            _check_finite(loss, "denoiser loss", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _check_grads(params, "denoiser", step)
            opt.step()
            bundle.step = step + 1
            if history is not None:
                history.append(("denoiser", step, loss.item()))
        bundle.optim_state["denoiser"] = optimizer_snapshot(opt, names)
        if bundle.step >= denoiser_steps:
            bundle.stage, bundle.step = "pretrained", 0
            bundle.optim_state.pop("denoiser", None)
    return bundle


# ---------------------------------------------------------------------------
# mid-timestep selection


@torch.no_grad()
def select_t_star(bundle: CheckpointBundle, pairs: PairSet, config: OMGConfig | None = None,
                  batch: int = 16) -> MidTimestepReport:
    """Encode every (upsampled LQ, HQ) pair with the frozen encoder and run the argmin."""
    config = config or bundle.config
    zs = []
    for i in range(0, len(pairs), batch):
        z_l = bundle.vae.encode(pairs.lq_up[i:i + batch]).double()
        z_h = bundle.vae.encode(pairs.hq[i:i + batch]).double()
        zs.extend(zip(z_l, z_h))
    fc = config.finetune
    cands = candidate_grid(config.scheduler, fc.t_stride, fc.full_grid)
    return precompute_mid_timestep(zs, config.scheduler, generator(config.seed, "t-star-eps"), cands)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneState:
    bundle: CheckpointBundle
    t_star: int
    embedder: PerceptualEmbedder
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    gen_params: list
    weights: LossWeights = field(default_factory=LossWeights)
    step: int = 0

    @property
    def config(self) -> OMGConfig:
        return self.bundle.config

    def snapshot_into_bundle(self) -> CheckpointBundle:
        names = self.bundle.param_names()
        self.bundle.optim_state["gen"] = optimizer_snapshot(self.gen_opt, names)
        self.bundle.optim_state["disc"] = optimizer_snapshot(self.disc_opt, names)
        self.bundle.step = self.step
        self.bundle.t_star = self.t_star
        self.bundle.stage = "finetune"
        return self.bundle


def build_finetune_state(bundle: CheckpointBundle, t_star: int, weights: LossWeights | None = None) -> FinetuneState:
    cfg = bundle.config
    if not 0 <= t_star <= cfg.scheduler.num_steps:
        raise ConfigError(f"t_star {t_star} outside 0..{cfg.scheduler.num_steps}")
    if not bundle.adapters_injected:
        bundle.inject_adapters()
    lc = cfg.losses
    weights = weights or LossWeights(lc.lambda1, lc.lambda2, lc.lambda3, lc.lambda4)
    gen_params = lora_parameters(bundle.vae.lq_encoder) + lora_parameters(bundle.denoiser)
    fc = cfg.finetune
    gen_opt = torch.optim.AdamW(gen_params, lr=fc.lr, weight_decay=fc.weight_decay)
    disc_opt = torch.optim.AdamW(list(bundle.discriminator.parameters()), lr=fc.disc_lr, weight_decay=fc.weight_decay)
    names = bundle.param_names()
    step = 0
    if bundle.stage == "finetune":
        load_optimizer(gen_opt, bundle.optim_state["gen"], names)
        load_optimizer(disc_opt, bundle.optim_state["disc"], names)
        step = bundle.step
    embedder = PerceptualEmbedder(seed=lc.embedder_seed)
    bundle.t_star = t_star
    return FinetuneState(bundle, t_star, embedder, gen_opt, disc_opt, gen_params, weights, step)


@contextlib.contextmanager
def _frozen(module: torch.nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def generate(bundle: CheckpointBundle, x_L: torch.Tensor, t_star: int):
    """Encode with the adapter, predict once at ``t_star`` and decode; returns ``(z_L, x_P)``."""
    z_L = bundle.vae.encode(x_L, use_adapter=bundle.adapters_injected)
    eps_pred = bundle.denoiser(z_L, t_star)
    z_P = predict_one_step(bundle.config.scheduler, z_L, eps_pred, t_star)
    return z_L, bundle.vae.decode(z_P)


def finetune_step(state: FinetuneState, batch, weights: LossWeights | None = None) -> LossBreakdown:
    """One generator pass/update followed by one discriminator pass/update.

    Updates are applied every ``finetune.grad_accum`` calls; gradients are
    averaged over the accumulation window.
    """
    weights = weights or state.weights
    x_L, x_H = batch
    bundle, cfg = state.bundle, state.config
    step = state.step
    accum = max(1, cfg.finetune.grad_accum)
    h, w = x_H.shape[-2:]
    lpips_layout = loss_layout(h, w, cfg.losses.lpips_patch, cfg.losses.lpips_overlap)
    gan_layout = loss_layout(h, w, bundle.discriminator.native_input, cfg.losses.gan_overlap)
    disc = bundle.discriminator

    if step % accum == 0:
        state.gen_opt.zero_grad(set_to_none=True)
        state.disc_opt.zero_grad(set_to_none=True)

    with torch.no_grad():
        z_H = bundle.vae.encode(x_H)
    eps = torch.randn(z_H.shape, generator=generator(cfg.seed, "finetune-eps", step))
    z_L, x_P = generate(bundle, x_L, state.t_star)
    comps = {
        "lan": lan_loss(z_L, z_H, eps, cfg.scheduler, state.t_star),
        "mse": mse_loss(x_P, x_H),
        "oc_lpips": oc_lpips(x_P, x_H, state.embedder, lpips_layout),
    }
    with _frozen(disc):
        comps["gan_g"] = oc_gan_g_loss(x_P, disc, gan_layout)
    total = combine(comps, weights)
    _check_finite(total, "generator loss", step)
    (total / accum).backward()

    gan_d = oc_gan_d_loss(x_H, x_P, disc, gan_layout)
    _check_finite(gan_d, "discriminator loss", step)
    (gan_d / accum).backward()

    if (step + 1) % accum == 0:
        _check_grads(state.gen_params, "generator", step)
        _check_grads(disc.parameters(), "discriminator", step)
        state.gen_opt.step()
        state.disc_opt.step()
    state.step = step + 1
    vals = {k: v.item() for k, v in comps.items()}
    return LossBreakdown(total=total.item(), gan_d=gan_d.item(), **vals)


def finetune(state: FinetuneState, pairs: PairSet, steps: int | None = None, log_path=None,
             checkpoint_dir=None, sample_dir=None, history: list | None = None) -> FinetuneState:
    """Run fine-tuning steps on random aligned crops of ``pairs``, logging the breakdown as CSV."""
    cfg = state.config
    fc = cfg.finetune
    steps = fc.steps if steps is None else steps
    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
    try:
        while state.step < steps:
            step = state.step
            gen = generator(cfg.seed, "finetune-batch", step)
            x_L, x_H = random_crops(pairs.lq_up, fc.crop, fc.batch_size, gen, pairs.hq)
            br = finetune_step(state, (x_L, x_H))
            if history is not None:
                history.append(br)
            if writer is not None and step % max(1, fc.log_every) == 0:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in br.row(step).items()})
            if checkpoint_dir and fc.checkpoint_every and state.step % fc.checkpoint_every == 0 \
                    and state.step % max(1, fc.grad_accum) == 0:
                state.snapshot_into_bundle().save(Path(checkpoint_dir) / f"step_{state.step:06d}")
            if sample_dir and fc.sample_every and state.step % fc.sample_every == 0:
                with torch.no_grad():
                    _, x_P = generate(state.bundle, pairs.lq_up[:1], state.t_star)
                grid = torch.cat([pairs.lq_up[0], x_P[0], pairs.hq[0]], dim=-1)
                save_png(grid, Path(sample_dir) / f"sample_{state.step:06d}.png")
    finally:
        if fh is not None:
            fh.close()
    return state


def param_digest(module: torch.nn.Module, trainable: bool | None = None) -> str:
    """Hash of parameter bytes, optionally restricted to (non-)trainable ones."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        if trainable is not None and p.requires_grad != trainable:
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()

