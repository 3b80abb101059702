import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from omgsr.config import DenoiserConfig, DiscConfig, VaeConfig
from omgsr.errors import ShapeMismatchError
from omgsr.models import (DenoiserModel, LoraConv2d, LoraLinear, PatchDiscriminator, PerceptualEmbedder, VaeModel,
                          decode, denoise, encode, inject_lora, lora_modules, lora_parameters, lora_targets,
                          merge_lora)


def _vae(**kw):
    torch.manual_seed(0)
    return VaeModel(VaeConfig(channels=8, **kw))


def test_vae_shapes_and_range():
    vae = _vae()
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    z = vae.encode(x)
    assert z.shape == (2, 4, 8, 8)
    y = vae.decode(z)
    assert y.shape == x.shape and y.abs().max() <= 1
    assert encode(vae, x[0]).shape == (4, 8, 8)
    assert decode(vae, z[0]).shape == (3, 32, 32)


def test_vae_errors():
    vae = _vae()
    with pytest.raises(ShapeMismatchError):
        vae.encode(torch.zeros(1, 3, 30, 32))
    with pytest.raises(ShapeMismatchError):
        vae.encode(torch.zeros(1, 1, 32, 32))
    with pytest.raises(ShapeMismatchError):
        vae.decode(torch.zeros(1, 3, 8, 8))
    with pytest.raises(RuntimeError):
        vae.encode(torch.zeros(1, 3, 32, 32), use_adapter=True)
    with pytest.raises(ValueError):
        VaeModel(VaeConfig(downsample_factor=3))


def test_latent_scale_round_trip():
    vae = _vae()
    x = torch.rand(1, 3, 16, 16)
    before = vae.decode(vae.encode(x))
    vae.latent_scale.fill_(3.0)
    assert torch.allclose(vae.decode(vae.encode(x)), before, atol=1e-6)


def test_encoder_adapter_is_output_preserving_and_freezes_base():
    vae = _vae()
    x = torch.rand(1, 3, 16, 16)
    vae.inject_encoder_lora(rank=4, seed=1)
    assert torch.allclose(vae.encode(x, use_adapter=True), vae.encode(x), atol=1e-6)
    assert not any(p.requires_grad for p in vae.encoder.parameters())
    assert not any(p.requires_grad for p in vae.decoder.parameters())
    trainable = [n for n, p in vae.lq_encoder.named_parameters() if p.requires_grad]
    assert trainable and all("lora_" in n for n in trainable)


def test_denoiser_shapes_and_step_range():
    torch.manual_seed(0)
    d = DenoiserModel(DenoiserConfig(channels=16, cond_dim=8, temb_dim=16), latent_channels=4)
    z = torch.randn(3, 4, 8, 8)
    assert d(z, 195).shape == z.shape
    assert d(z, torch.tensor([0, 5, 999])).shape == z.shape
    assert denoise(d, z[0], 5).shape == (4, 8, 8)
    # zero-initialised output layer
    assert torch.equal(d(z, 10), torch.zeros_like(z))
    with pytest.raises(ValueError):
        d(z, 1000)
    with pytest.raises(ValueError):
        d(z, -1)


def test_odd_latent_size_supported():
    torch.manual_seed(0)
    d = DenoiserModel(DenoiserConfig(channels=16, cond_dim=8, temb_dim=16))
    nn.init.normal_(d.conv_out.weight)
    assert d(torch.randn(1, 4, 7, 9), 3).shape == (1, 4, 7, 9)


def test_discriminator_probabilities():
    torch.manual_seed(0)
    d = PatchDiscriminator(DiscConfig(channels=8, patch=4, native_input=16))
    p = d(torch.rand(5, 3, 16, 16))
    assert p.shape == (5,) and bool(((p > 0) & (p < 1)).all())
    with torch.no_grad():
        d.head.bias.fill_(1e4)
    assert float(d(torch.rand(1, 3, 16, 16)).detach()) < 1.0
    with pytest.raises(ShapeMismatchError):
        d(torch.rand(1, 3, 2, 2))


def test_embedder_fixed_and_seeded():
    a, b = PerceptualEmbedder(seed=3), PerceptualEmbedder(seed=3)
    x = torch.rand(1, 3, 16, 16)
    assert all(torch.equal(u, v) for u, v in zip(a(x), b(x)))
    assert not any(p.requires_grad for p in a.parameters())
    assert [f.shape[1] for f in a(x)] == [16, 32, 64]


# ---------------------------------------------------------------------------
# LoRA


class Toy(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(12, 10)
        self.conv = nn.Conv2d(3, 6, 3, padding=1)
        self.head = nn.Linear(10, 2)


@given(st.integers(1, 10), st.floats(0.1, 4.0))
def test_linear_lora_parameter_count(rank, scale):
    torch.manual_seed(0)
    m = Toy()
    inject_lora(m, ["fc"], rank, scale, seed=0)
    assert sum(p.numel() for p in lora_parameters(m)) == rank * (12 + 10)


@given(st.integers(1, 6))
def test_conv_lora_parameter_count(rank):
    torch.manual_seed(0)
    m = Toy()
    inject_lora(m, ["conv"], rank, seed=0)
    assert sum(p.numel() for p in lora_parameters(m)) == rank * (3 * 3 * 3 + 6)


def test_injection_preserves_output_and_freezes():
    torch.manual_seed(0)
    m = Toy()
    x = torch.randn(4, 12)
    ref = m.head(m.fc(x))
    inject_lora(m, None, 2, seed=0)
    assert torch.allclose(m.head(m.fc(x)), ref)
    assert {n for n, p in m.named_parameters() if p.requires_grad} == {
        f"{k}.lora_{ab}" for k in ("fc", "conv", "head") for ab in "AB"}
    assert len(lora_modules(m)) == 3


def test_default_targets_skip_maps_below_rank():
    torch.manual_seed(0)
    m = Toy()
    inject_lora(m, None, 4, seed=0)
    assert isinstance(m.fc, LoraLinear) and isinstance(m.conv, LoraConv2d)
    assert isinstance(m.head, nn.Linear)


def test_unknown_target_and_bad_rank():
    with pytest.raises(KeyError):
        inject_lora(Toy(), ["nope"], 2)
    with pytest.raises(ValueError):
        inject_lora(Toy(), ["head"], 3)


def test_merge_matches_adapted_forward():
    torch.manual_seed(0)
    m = Toy()
    inject_lora(m, ["fc", "conv"], 3, scale=0.7, seed=5)
    with torch.no_grad():
        for p in lora_parameters(m):
            p.normal_()
    merged = merge_lora(m)
    x = torch.randn(2, 12)
    img = torch.randn(2, 3, 5, 5)
    assert torch.allclose(merged.fc(x), m.fc(x), atol=1e-5)
    assert torch.allclose(merged.conv(img), m.conv(img), atol=1e-5)
    assert not lora_modules(merged)
    w = m.fc.base.weight + 0.7 * m.fc.lora_B @ m.fc.lora_A
    assert torch.allclose(merged.fc.weight, w)


def test_injection_is_seeded():
    torch.manual_seed(0)
    a = inject_lora(Toy(), ["fc"], 2, seed=9)
    torch.manual_seed(1)
    b = inject_lora(Toy(), ["fc"], 2, seed=9)
    assert torch.equal(a.fc.lora_A, b.fc.lora_A)
    assert torch.equal(a.fc.lora_B, torch.zeros_like(a.fc.lora_B))


def test_targets_listing_excludes_adapter_internals():
    m = inject_lora(Toy(), ["fc"], 2)
    assert "fc.base" not in lora_targets(m)
    assert set(lora_targets(m)) == {"conv", "head"}
