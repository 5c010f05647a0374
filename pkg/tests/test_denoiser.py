import subprocess
import sys

import pytest
import torch

from ouro.core import TaskToken
from ouro.denoiser import (
    ModelConfig, PseudoConv, build_model, hash_words, inflate_temporal, param_count, token_for,
)
from ouro.diffusion import X_CONDITION_PLANES, ConfigurationError
from tests.conftest import TINY_MODEL


def _inputs(direction, b=2, hw=16, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    c = 3 if direction == "rgb2x" else X_CONDITION_PLANES
    return (torch.randn(b, 3, hw, hw, generator=g, dtype=dtype),
            torch.rand(b, c, hw, hw, generator=g, dtype=dtype))


@pytest.fixture(scope="module")
def rgb2x():
    return build_model(ModelConfig(direction="rgb2x", **TINY_MODEL), seed=0).eval()


@pytest.fixture(scope="module")
def x2rgb():
    return build_model(ModelConfig(direction="x2rgb", **TINY_MODEL), seed=0).eval()


def test_output_shape_and_counter(rgb2x):
    z, c = _inputs("rgb2x")
    before = rgb2x.eval_count
    with torch.no_grad():
        out = rgb2x(z, c, [TaskToken.ALBEDO, TaskToken.NORMAL])
    assert out.shape == z.shape
    assert rgb2x.eval_count == before + 1


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(direction="both")
    with pytest.raises(ConfigurationError):
        ModelConfig(depth=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(base_width=12, groups=8)
    cfg = ModelConfig(direction="x2rgb", **TINY_MODEL)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert cfg.in_channels == 3 + 11


def test_input_checks(rgb2x):
    z, c = _inputs("rgb2x")
    with pytest.raises(ConfigurationError, match="planes"):
        rgb2x(z, torch.zeros(2, 11, 16, 16), TaskToken.ALBEDO)
    with pytest.raises(ConfigurationError, match="divisible"):
        rgb2x(torch.zeros(1, 3, 18, 18), torch.zeros(1, 3, 18, 18), TaskToken.ALBEDO)
    with pytest.raises(ConfigurationError, match="4-D"):
        rgb2x(z[:, :, None], c[:, :, None], TaskToken.ALBEDO)
    with pytest.raises(ConfigurationError, match="tokens"):
        rgb2x(z, c, [TaskToken.ALBEDO] * 3)


def test_token_switches_output(rgb2x):
    z, c = _inputs("rgb2x", b=1)
    with torch.no_grad():
        outs = [rgb2x(z, c, t) for t in TaskToken]
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            assert not torch.allclose(outs[i], outs[j])
    with torch.no_grad():
        assert torch.equal(rgb2x(z, c, TaskToken.ALBEDO), rgb2x(z, c, "albedo"))


def test_caption_conditioning(x2rgb):
    z, c = _inputs("x2rgb", b=1)
    with torch.no_grad():
        a = x2rgb(z, c, "a red sphere under 1 lights")
        b = x2rgb(z, c, "a blue box under 2 lights")
        a2 = x2rgb(z, c, "a red sphere under 1 lights")
    assert torch.equal(a, a2) and not torch.allclose(a, b)


def test_caption_hash_is_stable_across_processes():
    code = "from ouro.denoiser import hash_words; print(hash_words('a red sphere, a box', 256))"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert out.strip() == str(hash_words("a red sphere, a box", 256))


def test_build_model_is_seeded_and_isolated():
    cfg = ModelConfig(**TINY_MODEL)
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(cfg, seed=4)
    after = torch.rand(1)
    b = build_model(cfg, seed=4)
    assert torch.equal(before, after)
    for (n1, p1), (_, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p1, p2), n1
    assert param_count(a) > 0


def test_inflation_extent_one_equivalence(rgb2x):
    video = inflate_temporal(rgb2x)
    assert video.mode == "video" and rgb2x.mode == "image"
    for layer in video.modules():
        if isinstance(layer, PseudoConv):
            assert layer.weight.dim() == 5 and layer.weight.shape[2] == 1
    z, c = _inputs("rgb2x", b=2)
    with torch.no_grad():
        img = rgb2x(z, c, TaskToken.NORMAL)
        vid = video(z[:, :, None], c[:, :, None], TaskToken.NORMAL)
    assert torch.max(torch.abs(vid[:, :, 0] - img)) < 1e-6


def test_inflation_preserves_per_frame_convolutions():
    conv = PseudoConv(3, 4)
    x = torch.randn(2, 3, 5, 8, 8)
    ref = torch.stack([conv(x[:, :, f]) for f in range(5)], dim=2)
    conv.inflate()
    assert torch.allclose(conv(x), ref, atol=1e-6)
    with pytest.raises(ConfigurationError):
        conv.inflate()


def test_video_attention_mixes_frames(rgb2x):
    video = inflate_temporal(rgb2x)
    z, c = _inputs("rgb2x", b=1)
    z2 = torch.stack([z, torch.randn_like(z)], dim=2)
    c2 = torch.stack([c, c], dim=2)
    with torch.no_grad():
        joint = video(z2, c2, TaskToken.NORMAL)[:, :, 0]
        alone = rgb2x(z, c, TaskToken.NORMAL)
    assert not torch.allclose(joint, alone, atol=1e-6)


def test_double_inflation_rejected(rgb2x):
    with pytest.raises(ConfigurationError):
        inflate_temporal(inflate_temporal(rgb2x))


def test_gradients_match_finite_differences():
    cfg = ModelConfig(direction="x2rgb", base_width=4, depth=2, groups=2, embed_dim=4, heads=1, max_mult=2)
    m = build_model(cfg, seed=1).double()
    z, c = _inputs("x2rgb", b=1, hw=4, dtype=torch.float64)
    z.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda zz: m(zz, c, "a photo"), (z,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_token_for():
    assert token_for("rgb2x", "n") is TaskToken.NORMAL
    assert token_for("x2rgb") == "a photo"
