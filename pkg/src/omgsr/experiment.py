"""End-to-end toy experiment: 64 -> 256 restoration on procedural textures.

One shared pre-trained base (the stand-in for a public pre-trained model)
is fine-tuned per seed twice: at the data-selected mid-timestep and at
``t = num_steps`` (LQ latent fed as if it were pure noise).
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointBundle
from .config import (DataConfig, DegradationConfig, DenoiserConfig, DiscConfig, FinetuneConfig, LossConfig,
                     OMGConfig, PretrainConfig, VaeConfig)
from .data import PairSet, make_corpus, make_pairs, to_unit
from .infer import restore
from .metrics import psnr
from .midstep import MidTimestepReport
from .trainer import build_finetune_state, finetune, pretrain, select_t_star

log = logging.getLogger(__name__)


def toy_config(seed: int = 0) -> OMGConfig:
    """Settings sized for a single CPU core."""
    return OMGConfig(
        seed=seed,
        vae=VaeConfig(channels=16),
        denoiser=DenoiserConfig(channels=32),
        disc=DiscConfig(channels=16, native_input=224),
        losses=LossConfig(lpips_patch=224),
        pretrain=PretrainConfig(vae_steps=1500, denoiser_steps=1500, batch_size=8, crop=64),
        finetune=FinetuneConfig(steps=3000, crop=48),
        data=DataConfig(n_train=200, n_val=50, hq_size=256, scale=4),
    )


@dataclass
class Corpus:
    train: PairSet
    val: PairSet


def build_corpus(config: OMGConfig) -> Corpus:
    dc = config.data
    hq = make_corpus(dc.n_train + dc.n_val, dc.hq_size, config.seed)
    deg = dataclasses.replace(config.degrade, downscale_factor=dc.scale)
    pairs = make_pairs(hq, deg, config.seed)
    n = dc.n_train
    cut = lambda s: PairSet(pairs.hq[s], pairs.lq[s], pairs.lq_up[s])  # noqa: E731
    return Corpus(cut(slice(0, n)), cut(slice(n, None)))


def val_psnr(bundle: CheckpointBundle, val: PairSet, batch: int = 10) -> list[float]:
    out = []
    for i in range(0, len(val), batch):
        restored = restore(bundle, val.lq[i:i + batch])
        out.extend(psnr(to_unit(r), to_unit(h)) for r, h in zip(restored, val.hq[i:i + batch]))
    return out


def bicubic_psnr(val: PairSet) -> list[float]:
    return [psnr(to_unit(u), to_unit(h)) for u, h in zip(val.lq_up, val.hq)]


def pretrain_base(config: OMGConfig, corpus: Corpus, history: list | None = None) -> CheckpointBundle:
    bundle = CheckpointBundle.fresh(config)
    return pretrain(bundle, corpus.train.hq, config, history=history)


def finetune_variant(base: CheckpointBundle, corpus: Corpus, seed: int, t_star: int,
                     steps: int | None = None, log_path=None) -> CheckpointBundle:
    bundle = copy.deepcopy(base)
    bundle.config = base.config.with_seed(seed)
    state = build_finetune_state(bundle, t_star)
    finetune(state, corpus.train, steps, log_path=log_path)
    return state.snapshot_into_bundle()


@dataclass
class SeedResult:
    seed: int
    t_star: int
    psnr_mid: float
    psnr_endpoint: float
    psnr_bicubic: float
    psnr_pre: float
    seconds: float

    @property
    def beats_bicubic_by(self) -> float:
        return self.psnr_mid - self.psnr_bicubic

    @property
    def beats_endpoint(self) -> bool:
        return self.psnr_mid > self.psnr_endpoint


@dataclass
class ExperimentResult:
    t_star: int
    report: MidTimestepReport
    seeds: list[SeedResult] = field(default_factory=list)
    pretrain_seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "t_star": self.t_star,
            "pretrain_seconds": self.pretrain_seconds,
            "seeds": [dataclasses.asdict(s) for s in self.seeds],
        }


def prepare(config: OMGConfig | None = None):
    """Build the corpus, pre-train the shared base and select ``t_star`` on the training pairs."""
    config = config or toy_config()
    torch.set_num_threads(1)
    corpus = build_corpus(config)
    t0 = time.time()
    base = pretrain_base(config, corpus)
    pre_s = time.time() - t0
    report = select_t_star(base, corpus.train)
    base.t_star = report.t_star
    log.info("pre-training took %.1fs, selected t_star=%d", pre_s, report.t_star)
    return corpus, base, ExperimentResult(report.t_star, report, pretrain_seconds=pre_s)


def run_seeds(base: CheckpointBundle, corpus: Corpus, result: ExperimentResult, seeds=(0, 1, 2, 3, 4),
              steps: int | None = None, out_dir=None, keep_bundles: bool = False) -> dict:
    """Fine-tune each seed at ``result.t_star`` and at ``t = num_steps``; append to ``result.seeds``."""
    t_star = result.t_star
    bic = float(np.mean(bicubic_psnr(corpus.val)))
    pre = copy.deepcopy(base)
    pre.t_star = t_star
    psnr_pre = float(np.mean(val_psnr(pre, corpus.val)))
    endpoint = base.config.scheduler.num_steps
    logdir = Path(out_dir) if out_dir else None
    bundles = {}
    for seed in seeds:
        t1 = time.time()
        mid = finetune_variant(base, corpus, seed, t_star, steps,
                               log_path=logdir / f"seed{seed}_mid.csv" if logdir else None)
        end = finetune_variant(base, corpus, seed, endpoint, steps,
                               log_path=logdir / f"seed{seed}_endpoint.csv" if logdir else None)
        res = SeedResult(seed, t_star, float(np.mean(val_psnr(mid, corpus.val))),
                         float(np.mean(val_psnr(end, corpus.val))), bic, psnr_pre, time.time() - t1)
        log.info("seed %d: mid %.2f dB, endpoint %.2f dB, bicubic %.2f dB, pre-finetune %.2f dB",
                 seed, res.psnr_mid, res.psnr_endpoint, bic, psnr_pre)
        result.seeds.append(res)
        if keep_bundles:
            bundles[(seed, "mid")] = mid
            bundles[(seed, "endpoint")] = end
    return bundles


def run(config: OMGConfig | None = None, seeds=(0, 1, 2, 3, 4), steps: int | None = None,
        out_dir=None, keep_bundles: bool = False):
    """Pre-train once, select ``t_star`` from the training pairs, then fine-tune each seed twice.

    Returns ``(result, base_bundle, corpus, bundles)`` where ``bundles`` maps
    ``(seed, "mid" | "endpoint")`` to fine-tuned bundles when ``keep_bundles``.
    """
    corpus, base, result = prepare(config)
    bundles = run_seeds(base, corpus, result, seeds, steps, out_dir, keep_bundles)
    return result, base, corpus, bundles
