"""Dataclass configs and the flat ``section.key = value`` config file format.

The on-disk format is plain INI read through :mod:`configparser`; every field
of a sub-config is addressed by its dotted name, e.g. ``scheduler.kind``.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


class ScheduleKind(str, enum.Enum):
    DDPM = "ddpm"
    FM = "fm"


# Mid-timesteps reported for SD-Turbo (DDPM) and FLUX.1-dev (FM).
DEFAULT_T_STAR = {ScheduleKind.DDPM: 195, ScheduleKind.FM: 295}


@dataclass(frozen=True)
class ScheduleConfig:
    kind: ScheduleKind = ScheduleKind.DDPM
    num_steps: int = 999
    beta_start: float = 1e-4
    beta_end: float = 0.02
    shift: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be positive, got {self.num_steps}")
        if self.kind is ScheduleKind.DDPM:
            for name in ("beta_start", "beta_end"):
                v = getattr(self, name)
                if not 0.0 < v < 1.0:
                    raise ConfigError(f"{name} must lie in (0, 1), got {v}")
            if self.beta_start > self.beta_end:
                raise ConfigError("beta_start must not exceed beta_end")
        elif self.shift <= 0:
            raise ConfigError(f"shift must be positive, got {self.shift}")


@dataclass
class VaeConfig:
    channels: int = 32
    latent_channels: int = 4
    downsample_factor: int = 4
    # latents are rescaled to this standard deviation after VAE pre-training
    latent_std: float = 1.0


@dataclass
class DenoiserConfig:
    channels: int = 64
    cond_dim: int = 32
    temb_dim: int = 64


@dataclass
class DiscConfig:
    channels: int = 32
    patch: int = 4
    native_input: int = 224


@dataclass
class LoraConfig:
    vae_rank: int = 4
    denoiser_rank: int = 8
    scale: float = 1.0
    seed_offset: int = 17


@dataclass
class LossConfig:
    lambda1: float = 5.0
    lambda2: float = 2.0
    lambda3: float = 5.0
    lambda4: float = 0.5
    lpips_patch: int = 224
    lpips_overlap: int = 32
    gan_overlap: int = 32
    embedder_seed: int = 0


@dataclass
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.2, 3.0)
    downscale_factor: int = 4
    # in 8-bit intensity levels
    noise_sigma_range: tuple[float, float] = (1.0, 25.0)
    compression_quality_range: tuple[int, int] = (30, 95)
    second_order: bool = False


@dataclass
class PretrainConfig:
    vae_steps: int = 1500
    denoiser_steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 8
    crop: int = 64


@dataclass
class FinetuneConfig:
    steps: int = 3000
    lr: float = 2e-5
    disc_lr: float = 2e-5
    weight_decay: float = 1e-2
    grad_accum: int = 4
    batch_size: int = 1
    crop: int = 64
    # -1 means: select from data by the mid-timestep argmin
    t_star: int = -1
    t_stride: int = 5
    full_grid: bool = False
    log_every: int = 1
    checkpoint_every: int = 0
    sample_every: int = 0


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 50
    hq_size: int = 256
    scale: int = 4
    data_dir: str = ""


@dataclass
class InferConfig:
    tile: int = 128
    overlap: int = 8
    stage2_scale: int = 2


@dataclass
class OMGConfig:
    seed: int = 0
    scheduler: ScheduleConfig = field(default_factory=ScheduleConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    degrade: DegradationConfig = field(default_factory=DegradationConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_flat(self) -> dict[str, str]:
        out = {"run.seed": str(self.seed)}
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            sub = getattr(self, f.name)
            for sf in dataclasses.fields(sub):
                out[f"{f.name}.{sf.name}"] = _format(getattr(sub, sf.name))
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "OMGConfig":
        sections: dict[str, dict] = {}
        seed = 0
        for key, raw in flat.items():
            if key == "run.seed":
                seed = int(raw)
                continue
            sec, _, name = key.partition(".")
            sections.setdefault(sec, {})[name] = raw
        known = {f.name: f for f in dataclasses.fields(cls) if f.name != "seed"}
        kwargs = {}
        for sec, values in sections.items():
            if sec not in known:
                raise ConfigError(f"unknown config section {sec!r}")
            sub_cls = typing.get_type_hints(cls)[sec]
            hints = typing.get_type_hints(sub_cls)
            sub_kwargs = {}
            for name, raw in values.items():
                if name not in hints:
                    raise ConfigError(f"unknown config key {sec}.{name}")
                sub_kwargs[name] = _parse(raw, hints[name], f"{sec}.{name}")
            kwargs[sec] = sub_cls(**sub_kwargs)
        return cls(seed=seed, **kwargs)

    def dumps(self) -> str:
        parser = configparser.ConfigParser()
        for key, value in self.to_flat().items():
            sec, _, name = key.partition(".")
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, name, value)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "OMGConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        flat = {f"{sec}.{k}": v for sec in parser.sections() for k, v in parser[sec].items()}
        return cls.from_flat(flat)

    @classmethod
    def load(cls, path) -> "OMGConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.loads(p.read_text())

    def with_seed(self, seed: int) -> "OMGConfig":
        return dataclasses.replace(self, seed=seed)

    def resolved_t_star(self) -> int | None:
        t = self.finetune.t_star
        return None if t < 0 else t


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, tp, key: str):
    raw = raw.strip()
    try:
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(raw.lower())
        if tp is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
        if typing.get_origin(tp) is tuple:
            item_types = typing.get_args(tp)
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(item_types):
                raise ValueError(raw)
            return tuple(t(p) for t, p in zip(item_types, parts))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    raise ConfigError(f"unsupported type for {key}: {tp}")
