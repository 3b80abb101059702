"""CheckpointBundle: models, schedule config, selected mid-timestep and training state.

On disk a bundle is a directory holding ``manifest.json`` and one raw
little-endian float32 blob per tensor.  Blob names are the tensor's dotted
path plus ``.f32``: ``vae.encoder.conv_in.weight.f32``,
``denoiser.block1.conv1.base.weight.f32``, ``discriminator.head.bias.f32``,
and for optimizer moments ``optim.<opt>.<param path>.<moment>.f32``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import OMGConfig
from .models import DenoiserModel, PatchDiscriminator, VaeModel, inject_lora
from .seeding import derive_seed, seeded

FORMAT = "omgsr-bundle"
VERSION = 1
MODEL_KEYS = ("vae", "denoiser", "discriminator")


@dataclass
class CheckpointBundle:
    config: OMGConfig
    vae: VaeModel
    denoiser: DenoiserModel
    discriminator: PatchDiscriminator
    t_star: int | None = None
    step: int = 0
    stage: str = "init"
    # optimizer snapshots keyed by optimizer name, see optimizer_snapshot()
    optim_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: OMGConfig) -> "CheckpointBundle":
        with seeded(config.seed, "init", "vae"):
            vae = VaeModel(config.vae)
        with seeded(config.seed, "init", "denoiser"):
            den = DenoiserModel(config.denoiser, config.vae.latent_channels, config.scheduler.num_steps)
        with seeded(config.seed, "init", "discriminator"):
            disc = PatchDiscriminator(config.disc)
        return cls(config, vae, den, disc)

    @property
    def adapters_injected(self) -> bool:
        return self.vae.lq_encoder is not None

    def inject_adapters(self) -> None:
        lc = self.config.lora
        self.vae.inject_encoder_lora(lc.vae_rank, lc.scale, seed=derive_seed(self.config.seed, "lora", "vae"))
        inject_lora(self.denoiser, None, lc.denoiser_rank, lc.scale,
                    seed=derive_seed(self.config.seed, "lora", "denoiser"))

    def models(self) -> dict[str, torch.nn.Module]:
        return {"vae": self.vae, "denoiser": self.denoiser, "discriminator": self.discriminator}

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for key, m in self.models().items():
            for name, t in m.state_dict().items():
                out[f"{key}.{name}"] = t
        return out

    def param_names(self) -> dict[int, str]:
        return {id(p): f"{key}.{n}" for key, m in self.models().items() for n, p in m.named_parameters()}

    def save(self, path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        tensors = []
        for name, t in sorted(self.named_tensors().items()):
            tensors.append(_write_blob(root, name, t))
        optim = {}
        for opt_name, snap in sorted(self.optim_state.items()):
            entry = {"param_groups": snap["param_groups"], "params": snap["params"], "steps": {}, "moments": {}}
            for pname, st in snap["state"].items():
                entry["steps"][pname] = st["step"]
                for moment in ("exp_avg", "exp_avg_sq"):
                    blob = _write_blob(root, f"optim.{opt_name}.{pname}.{moment}", st[moment])
                    entry["moments"].setdefault(pname, {})[moment] = blob
            optim[opt_name] = entry
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "stage": self.stage,
            "step": self.step,
            "t_star": self.t_star,
            "schedule": {"kind": self.config.scheduler.kind.value, "num_steps": self.config.scheduler.num_steps},
            "adapters": self.adapters_injected,
            "config": self.config.to_flat(),
            "tensors": tensors,
            "optimizers": optim,
            "extra": self.extra,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return root

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        root = Path(path)
        mf = root / "manifest.json"
        if not mf.is_file():
            raise FileNotFoundError(f"no manifest.json in {root}")
        manifest = json.loads(mf.read_text())
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{mf} is not an {FORMAT} manifest")
        config = OMGConfig.from_flat(manifest["config"])
        bundle = cls.fresh(config)
        if manifest["adapters"]:
            bundle.inject_adapters()
        state = {e["name"]: _read_blob(root, e) for e in manifest["tensors"]}
        for key, m in bundle.models().items():
            prefix = key + "."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            m.load_state_dict(sub, strict=True)
        bundle.t_star = manifest["t_star"]
        bundle.step = manifest["step"]
        bundle.stage = manifest["stage"]
        bundle.extra = manifest.get("extra", {})
        for opt_name, entry in manifest["optimizers"].items():
            st = {}
            for pname, moments in entry["moments"].items():
                st[pname] = {"step": entry["steps"][pname],
                             **{k: _read_blob(root, e) for k, e in moments.items()}}
            bundle.optim_state[opt_name] = {"param_groups": entry["param_groups"], "params": entry["params"], "state": st}
        return bundle


def _write_blob(root: Path, name: str, t: torch.Tensor) -> dict:
    fname = f"{name}.f32"
    np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tofile(root / fname)
    return {"name": name, "file": fname, "shape": list(t.shape), "dtype": "<f4"}


def _read_blob(root: Path, entry: dict) -> torch.Tensor:
    arr = np.fromfile(root / entry["file"], dtype="<f4")
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"blob {entry['file']} has {arr.size} values, manifest says {shape}")
    return torch.from_numpy(arr.astype(np.float32).reshape(shape))


def optimizer_snapshot(opt: torch.optim.Optimizer, names: dict[int, str]) -> dict:
    """Name-keyed copy of an Adam-family optimizer's state."""
    groups, params = [], []
    for g in opt.param_groups:
        groups.append({k: v for k, v in g.items() if k != "params" and isinstance(v, (int, float, bool, tuple, list))})
        params.extend(names[id(p)] for p in g["params"])
    state = {}
    for p, st in opt.state.items():
        if "exp_avg" in st:
            state[names[id(p)]] = {"step": int(st["step"]), "exp_avg": st["exp_avg"].clone(),
                                   "exp_avg_sq": st["exp_avg_sq"].clone()}
    return {"param_groups": groups, "params": params, "state": state}


def load_optimizer(opt: torch.optim.Optimizer, snap: dict, names: dict[int, str]) -> None:
    current = [names[id(p)] for g in opt.param_groups for p in g["params"]]
    if current != list(snap["params"]):
        raise ValueError("optimizer parameter list does not match the checkpoint")
    for g, saved in zip(opt.param_groups, snap["param_groups"]):
        for k, v in saved.items():
            g[k] = tuple(v) if isinstance(g.get(k), tuple) else v
    by_name = {names[id(p)]: p for g in opt.param_groups for p in g["params"]}
    for pname, st in snap["state"].items():
        p = by_name[pname]
        opt.state[p] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": st["exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": st["exp_avg_sq"].to(p.dtype).clone(),
        }
