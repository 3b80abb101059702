import copy
import dataclasses

import pytest
import torch
from hypothesis import HealthCheck, settings

from omgsr.checkpoint import CheckpointBundle
from omgsr.config import (DataConfig, DenoiserConfig, DiscConfig, FinetuneConfig, InferConfig, LossConfig, OMGConfig,
                          PretrainConfig, ScheduleConfig, ScheduleKind, VaeConfig)
from omgsr.data import make_corpus, make_pairs
from omgsr.trainer import pretrain

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def tiny_config(kind: str = "ddpm", seed: int = 0) -> OMGConfig:
    """Very small models for fast plumbing tests."""
    return OMGConfig(
        seed=seed,
        scheduler=ScheduleConfig(kind=ScheduleKind(kind)),
        vae=VaeConfig(channels=8, latent_channels=4),
        denoiser=DenoiserConfig(channels=16, cond_dim=8, temb_dim=16),
        disc=DiscConfig(channels=8, patch=4, native_input=16),
        losses=LossConfig(lpips_patch=16, lpips_overlap=4, gan_overlap=4),
        pretrain=PretrainConfig(vae_steps=6, denoiser_steps=6, batch_size=2, crop=16),
        finetune=FinetuneConfig(steps=8, lr=1e-3, disc_lr=1e-3, grad_accum=2, crop=32),
        data=DataConfig(n_train=6, n_val=2, hq_size=32, scale=4),
        infer=InferConfig(tile=32, overlap=8, stage2_scale=2),
    )


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_pairs():
    c = tiny_config()
    hq = make_corpus(c.data.n_train, c.data.hq_size, 0)
    return make_pairs(hq, c.degrade, 0)


@pytest.fixture(scope="session")
def _pretrained_tiny(tiny_pairs):
    out = {}
    for kind in ("ddpm", "fm"):
        b = CheckpointBundle.fresh(tiny_config(kind))
        pretrain(b, tiny_pairs.hq)
        out[kind] = b
    return out


@pytest.fixture
def pretrained_tiny(_pretrained_tiny):
    """Fresh copy per test of a briefly pre-trained tiny DDPM bundle."""
    return copy.deepcopy(_pretrained_tiny["ddpm"])


@pytest.fixture
def pretrained_tiny_fm(_pretrained_tiny):
    return copy.deepcopy(_pretrained_tiny["fm"])


def with_t_star(bundle, t):
    bundle.t_star = t
    return bundle


def replace_cfg(config, **sections):
    return dataclasses.replace(config, **sections)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
