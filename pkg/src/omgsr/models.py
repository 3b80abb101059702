"""Small trainable stand-ins for the VAE, denoiser backbone and discriminator, plus LoRA.

All image tensors are ``(B, 3, H, W)`` in ``[-1, 1]``; unbatched ``(3, H, W)``
inputs are accepted by the module-level helpers and returned unbatched.
"""
from __future__ import annotations

import copy
import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import DenoiserConfig, DiscConfig, VaeConfig
from .errors import ShapeMismatchError

PROB_EPS = 1e-6


# ---------------------------------------------------------------------------
# VAE


class Encoder(nn.Module):
    def __init__(self, channels: int, latent_channels: int, n_down: int):
        super().__init__()
        c = channels
        self.conv_in = nn.Conv2d(3, c, 3, padding=1)
        self.down = nn.ModuleList()
        self.mix = nn.ModuleList()
        ch = c
        for _ in range(n_down):
            self.down.append(nn.Conv2d(ch, 2 * c, 3, stride=2, padding=1))
            self.mix.append(nn.Conv2d(2 * c, 2 * c, 3, padding=1))
            ch = 2 * c
        self.conv_out = nn.Conv2d(ch, latent_channels, 3, padding=1)

    def forward(self, x):
        h = F.silu(self.conv_in(x))
        for down, mix in zip(self.down, self.mix):
            h = F.silu(down(h))
            h = h + F.silu(mix(h))
        return self.conv_out(h)


class Decoder(nn.Module):
    def __init__(self, channels: int, latent_channels: int, n_up: int):
        super().__init__()
        c = channels
        self.conv_in = nn.Conv2d(latent_channels, 2 * c, 3, padding=1)
        self.mix = nn.ModuleList()
        self.up = nn.ModuleList()
        ch = 2 * c
        for i in range(n_up):
            out = c if i == n_up - 1 else 2 * c
            self.mix.append(nn.Conv2d(ch, ch, 3, padding=1))
            self.up.append(nn.Conv2d(ch, out, 3, padding=1))
            ch = out
        self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, z):
        h = F.silu(self.conv_in(z))
        for mix, up in zip(self.mix, self.up):
            h = h + F.silu(mix(h))
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(up(h))
        return torch.tanh(self.conv_out(h))


class VaeModel(nn.Module):
    """Deterministic autoencoder (mean head only).

    ``encoder`` is the frozen image encoder; ``lq_encoder`` is the copy that
    receives LoRA adapters for low-quality inputs (``None`` until injected).
    """

    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        cfg = cfg or VaeConfig()
        f = cfg.downsample_factor
        n = int(round(math.log2(f)))
        if f < 1 or 2 ** n != f:
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        self.downsample_factor = f
        self.latent_channels = cfg.latent_channels
        self.encoder = Encoder(cfg.channels, cfg.latent_channels, n)
        self.decoder = Decoder(cfg.channels, cfg.latent_channels, n)
        self.lq_encoder: nn.Module | None = None
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor, use_adapter: bool = False) -> torch.Tensor:
        f = self.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeMismatchError(f"image {tuple(x.shape[-2:])} not divisible by {f}")
        if x.shape[-3] != 3:
            raise ShapeMismatchError(f"expected 3 image channels, got {x.shape[-3]}")
        if use_adapter:
            if self.lq_encoder is None:
                raise RuntimeError("no LQ encoder adapter injected")
            enc = self.lq_encoder
        else:
            enc = self.encoder
        return enc(x) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] != self.latent_channels:
            raise ShapeMismatchError(f"latent has {z.shape[-3]} channels, expected {self.latent_channels}")
        return self.decoder(z / self.latent_scale)

    def forward(self, x):
        return self.decode(self.encode(x))

    def inject_encoder_lora(self, rank: int, scale: float = 1.0, seed: int = 0) -> nn.Module:
        self.lq_encoder = copy.deepcopy(self.encoder)
        inject_lora(self.lq_encoder, None, rank, scale, seed=seed)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        return self.lq_encoder


def _batched(fn, x, *args, **kwargs):
    if x.ndim == 3:
        return fn(x.unsqueeze(0), *args, **kwargs).squeeze(0)
    return fn(x, *args, **kwargs)


def encode(vae: VaeModel, image: torch.Tensor, use_adapter: bool = False) -> torch.Tensor:
    return _batched(vae.encode, image, use_adapter=use_adapter)


def decode(vae: VaeModel, latent: torch.Tensor) -> torch.Tensor:
    return _batched(vae.decode, latent)


# ---------------------------------------------------------------------------
# Denoiser


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DenoiserModel(nn.Module):
    """Two-level residual U-net predicting noise (DDPM) or velocity (FM)."""

    def __init__(self, cfg: DenoiserConfig | None = None, latent_channels: int = 4, num_steps: int = 999):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        c = cfg.channels
        self.num_steps = num_steps
        self.temb_dim = cfg.temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.temb_dim, c), nn.SiLU(), nn.Linear(c, c))
        # fixed-prompt stand-in: one learned condition vector
        self.cond = nn.Parameter(torch.zeros(cfg.cond_dim))
        self.cond_proj = nn.Linear(cfg.cond_dim, c)
        self.conv_in = nn.Conv2d(latent_channels, c, 3, padding=1)
        self.block1 = ResBlock(c, c, c)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.block2 = ResBlock(2 * c, 2 * c, c)
        self.mid = ResBlock(2 * c, 2 * c, c)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.block3 = ResBlock(2 * c, c, c)
        self.norm_out = nn.GroupNorm(8, c)
        self.conv_out = nn.Conv2d(c, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z: torch.Tensor, t, c: torch.Tensor | None = None) -> torch.Tensor:
        b = z.shape[0]
        t = torch.as_tensor(t, device=z.device)
        if t.ndim == 0:
            t = t.expand(b)
        if int(t.min()) < 0 or int(t.max()) > self.num_steps:
            raise ValueError(f"step index out of range 0..{self.num_steps}")
        emb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(z.dtype))
        cond = self.cond if c is None else c
        emb = emb + self.cond_proj(cond.to(z.dtype)).expand(b, -1)
        h1 = self.block1(self.conv_in(z), emb)
        h = self.block2(self.down(h1), emb)
        h = self.mid(h, emb)
        h = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        h = self.block3(torch.cat([self.up(h), h1], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def denoise(model: nn.Module, z: torch.Tensor, t, c: torch.Tensor | None = None) -> torch.Tensor:
    return _batched(model, z, t, c)


# ---------------------------------------------------------------------------
# Discriminator and perceptual embedder


class PatchDiscriminator(nn.Module):
    """Patch-embedding network mapping an image to a realness probability.

    Probabilities are squashed into ``[1e-6, 1 - 1e-6]`` so they never reach 0 or 1.
    """

    def __init__(self, cfg: DiscConfig | None = None):
        super().__init__()
        cfg = cfg or DiscConfig()
        c = cfg.channels
        self.native_input = cfg.native_input
        self.patch = cfg.patch
        self.embed = nn.Conv2d(3, c, cfg.patch, stride=cfg.patch)
        self.block1 = nn.Conv2d(c, c, 3, padding=1)
        self.block2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * c, 1)

    def logits(self, x):
        if x.shape[-1] < self.patch or x.shape[-2] < self.patch:
            raise ShapeMismatchError(f"input {tuple(x.shape[-2:])} smaller than patch {self.patch}")
        h = F.silu(self.embed(x))
        h = h + F.silu(self.block1(h))
        h = F.silu(self.block2(h))
        return self.head(h.mean(dim=(-2, -1))).squeeze(-1)

    def forward(self, x):
        return PROB_EPS + (1.0 - 2 * PROB_EPS) * torch.sigmoid(self.logits(x))


class PerceptualEmbedder(nn.Module):
    """Fixed random-weight convolutional feature pyramid.

    Weights are drawn from ``torch.Generator().manual_seed(seed)`` and never trained.
    """

    def __init__(self, widths=(16, 32, 64), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            bound = 1.0 / math.sqrt(cin * 9)
            with torch.no_grad():
                conv.weight.uniform_(-math.sqrt(3) * bound, math.sqrt(3) * bound, generator=g)
                conv.bias.uniform_(-bound, bound, generator=g)
            layers.append(conv)
            cin = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.layers:
            h = F.gelu(conv(h))
            feats.append(h)
        return feats


# ---------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float, generator: torch.Generator):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ValueError(f"rank {rank} exceeds map dimension {base.in_features}x{base.out_features}")
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        bound = 1.0 / math.sqrt(base.in_features)
        with torch.no_grad():
            self.lora_A.uniform_(-bound, bound, generator=generator)
        for p in base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        # one matmul with the merged weight; gradients still reach A and B only
        return F.linear(x, self.merged_weight(), self.base.bias)

    def merged_weight(self):
        return self.base.weight + self.scale * self.lora_B @ self.lora_A


class LoraConv2d(nn.Module):
    """``base(x) + scale * B(A(x))``: ``A`` shares the base kernel geometry, ``B`` is 1x1."""

    def __init__(self, base: nn.Conv2d, rank: int, scale: float, generator: torch.Generator):
        super().__init__()
        if base.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
        if rank > min(fan_in, base.out_channels):
            raise ValueError(f"rank {rank} exceeds map dimension {fan_in}x{base.out_channels}")
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_channels, *base.kernel_size))
        self.lora_B = nn.Parameter(torch.zeros(base.out_channels, rank, 1, 1))
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.lora_A.uniform_(-bound, bound, generator=generator)
        for p in base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        b = self.base
        return F.conv2d(x, self.merged_weight(), b.bias, b.stride, b.padding, b.dilation)

    def merged_weight(self):
        b = self.base
        delta = self.lora_B.flatten(1) @ self.lora_A.flatten(1)
        return b.weight + self.scale * delta.view_as(b.weight)


def lora_targets(model: nn.Module) -> list[str]:
    """Dotted names of every plain Linear/Conv2d map inside ``model``."""
    return [
        name for name, m in model.named_modules()
        if isinstance(m, (nn.Linear, nn.Conv2d)) and not _inside_lora(model, name)
    ]


def _map_dims(m) -> int:
    if isinstance(m, nn.Linear):
        return min(m.in_features, m.out_features)
    return min(m.in_channels * m.kernel_size[0] * m.kernel_size[1], m.out_channels)


def _inside_lora(model, name):
    parts = name.split(".")
    for i in range(1, len(parts)):
        if isinstance(model.get_submodule(".".join(parts[:i])), (LoraLinear, LoraConv2d)):
            return True
    return False


def inject_lora(model: nn.Module, targets, rank: int, scale: float = 1.0, seed: int = 0) -> nn.Module:
    """Wrap ``targets`` with LoRA adapters, in place.

    ``targets`` are dotted module names; ``None`` selects every Linear/Conv2d
    map whose smaller dimension is at least ``rank``.

    Every pre-existing parameter of ``model`` is frozen; only adapter factors train.
    """
    available = lora_targets(model)
    if targets is None:
        targets = [n for n in available if rank <= _map_dims(model.get_submodule(n))]
    else:
        targets = list(targets)
    for name in targets:
        if name not in available:
            raise KeyError(f"unknown LoRA target {name!r}")
    for p in model.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    for name in targets:
        parent_name, _, child = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        base = getattr(parent, child)
        wrap = LoraLinear if isinstance(base, nn.Linear) else LoraConv2d
        setattr(parent, child, wrap(base, rank, scale, g))
    return model


def lora_modules(model: nn.Module):
    return [m for m in model.modules() if isinstance(m, (LoraLinear, LoraConv2d))]


def lora_parameters(model: nn.Module):
    return [p for n, p in model.named_parameters() if "lora_" in n]


def merge_lora(model: nn.Module) -> nn.Module:
    """Deep copy of ``model`` with every adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    for name, m in list(merged.named_modules()):
        if isinstance(m, (LoraLinear, LoraConv2d)):
            base = m.base
            with torch.no_grad():
                base.weight.copy_(m.merged_weight())
            parent_name, _, child = name.rpartition(".")
            parent = merged.get_submodule(parent_name) if parent_name else merged
            setattr(parent, child, base)
    return merged
