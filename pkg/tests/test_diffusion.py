import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ouro import sceneforge as sf
from ouro.core import CHANNELS, ChannelMask, TaskToken
from ouro.denoiser import ModelConfig, build_model
from ouro.diffusion import (
    X_CONDITION_PLANES, Codec, ConfigurationError, DiffusionSchedule, NoiseSpec, assemble_condition,
    batch_noise, condition_from_planes, image_condition, make_schedule, multires_noise, noise_target,
    single_step_infer, v_target, v_to_z0,
)
from tests.conftest import TINY_MODEL

SCHED = make_schedule()


def test_schedule_matches_brute_force_product():
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - betas[t - 1]
        assert abs(SCHED.at(t) - prod) < 1e-12
    assert SCHED.at(0) == 1.0
    assert SCHED.T == 1000
    assert np.all(np.diff(SCHED.alpha_bar) < 0)
    assert SCHED.at(SCHED.T) < 0.01


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        DiffusionSchedule(2, (1.0, 0.5, 0.6))
    with pytest.raises(ConfigurationError):
        DiffusionSchedule(2, (1.0, 0.5, 0.2))  # terminal step too clean
    with pytest.raises(ConfigurationError):
        make_schedule(T=0)
    with pytest.raises(IndexError):
        SCHED.at(1001)
    assert DiffusionSchedule.from_json(SCHED.to_json()) == SCHED


finite = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6), st.integers(1, 1000))
def test_v_round_trip_any_t(vals, t):
    z0, eps = np.array(vals[:3]), np.array(vals[3:])
    zt = noise_target(z0, eps, t, SCHED)
    v = v_target(z0, eps, t, SCHED)
    ab = SCHED.at(t)
    # generic inversion at step t: z0 = sqrt(ab) zt - sqrt(1 - ab) v
    np.testing.assert_allclose(math.sqrt(ab) * zt - math.sqrt(1 - ab) * v, z0, atol=1e-9)
    np.testing.assert_allclose(math.sqrt(1 - ab) * zt + math.sqrt(ab) * v, eps, atol=1e-9)


def test_terminal_round_trip_torch():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    zT = noise_target(z0, eps, SCHED.T, SCHED)
    assert torch.allclose(v_to_z0(zT, v_target(z0, eps, SCHED.T, SCHED), SCHED), z0, atol=1e-10)


def test_multires_noise_statistics():
    draws = np.stack([multires_noise((32, 32, 3), NoiseSpec(seed=s)) for s in range(300)])
    assert abs(draws.mean()) < 0.02
    assert abs(draws.std() - 1.0) < 0.02
    # per-pixel variance is 1 by construction
    assert np.allclose(draws.var(axis=0).mean(), 1.0, atol=0.03)


def test_multires_noise_structure():
    spec = NoiseSpec(seed=3)
    a = multires_noise((16, 16, 3), spec)
    np.testing.assert_array_equal(a, multires_noise((16, 16, 3), spec))
    assert a.dtype == np.float32 and a.shape == (16, 16, 3)
    # single scale reduces to plain unit Gaussian
    plain = multires_noise((5, 7, 2), NoiseSpec((1,), 0.5, 4))
    np.testing.assert_allclose(plain, np.random.default_rng(4).standard_normal((5, 7, 2)), rtol=1e-6)
    # odd sizes are covered by ceil-sized coarse grids
    assert multires_noise((9, 11, 1), spec).shape == (9, 11, 1)
    # neighbouring pixels correlate through the coarse levels
    d = np.stack([multires_noise((16, 16, 1), NoiseSpec(seed=s))[..., 0] for s in range(200)])
    corr = np.corrcoef(d[:, 0, 0], d[:, 0, 1])[0, 1]
    assert corr > 0.1


def test_noise_spec_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec((2, 4))
    with pytest.raises(ConfigurationError):
        NoiseSpec(discount=0.0)


def test_batch_noise_layout():
    b = batch_noise(2, 3, 8, 8, NoiseSpec(), [5, 6])
    assert b.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(b[1].permute(1, 2, 0).numpy(), multires_noise((8, 8, 3), NoiseSpec(seed=6)))


def test_codec():
    x = torch.arange(64.0).reshape(1, 1, 8, 8)
    assert Codec().encode(x) is x
    c = Codec(4)
    z = c.encode(x)
    assert z.shape == (1, 1, 2, 2) and float(z[0, 0, 0, 0]) == pytest.approx(x[0, 0, :4, :4].mean().item())
    assert c.decode(z).shape == x.shape
    with pytest.raises(ConfigurationError):
        Codec(0)


def _planes(b=2, h=8, w=8):
    g = torch.Generator().manual_seed(1)
    return {c: torch.rand(b, 3 if c in ("normal", "albedo", "irradiance") else 1, h, w, generator=g)
            for c in CHANNELS}


def test_condition_layout_and_absent_slots():
    planes = _planes()
    masks = torch.tensor([[True, True, False, False, True], [False, True, True, True, False]])
    cond = condition_from_planes(planes, masks, 0.0, None)
    assert cond.planes.shape == (2, X_CONDITION_PLANES, 8, 8)
    assert cond.kind == "x2rgb"
    for i, c in enumerate(CHANNELS):
        for k in range(2):
            if masks[k, i]:
                assert torch.equal(cond.slot(c)[k], planes[c][k])
            else:
                assert not cond.slot(c)[k].any()


def test_dropout_marginals():
    planes = _planes(b=1, h=8, w=8)
    masks = torch.tensor([[True, True, True, False, True]])
    rng = np.random.default_rng(0)
    kept = np.zeros(5)
    n = 10_000
    for _ in range(n):
        kept += condition_from_planes(planes, masks, 0.3, rng).keep[0].numpy()
    rates = kept / n
    for i, c in enumerate(CHANNELS):
        expected = 0.7 if masks[0, i] else 0.0
        assert abs(rates[i] - expected) <= 0.02, c


def test_dropout_requires_rng_and_valid_p():
    with pytest.raises(ValueError):
        condition_from_planes(_planes(), torch.ones(2, 5, dtype=torch.bool), 0.5, None)
    with pytest.raises(ValueError):
        condition_from_planes(_planes(), torch.ones(2, 5, dtype=torch.bool), 1.5, np.random.default_rng())


def test_codec_irradiance_bypasses_encoder():
    x = sf.render_gbuffer(sf.sample_scene(4), 16).intrinsics
    cond = assemble_condition(x, codec=Codec(4))
    assert cond.planes.shape == (1, X_CONDITION_PLANES, 4, 4)
    e = torch.from_numpy(x.irradiance).permute(2, 0, 1)[None].double()
    block_mean = e.reshape(1, 3, 4, 4, 4, 4).mean(dim=(3, 5))
    assert torch.allclose(cond.slot("irradiance").double(), block_mean, atol=1e-6)


def test_assemble_condition_respects_mask():
    x = sf.render_gbuffer(sf.sample_scene(4), 16).intrinsics
    cond = assemble_condition(x, ChannelMask.of("aE"))
    assert not cond.slot("normal").any() and cond.slot("albedo").any()
    assert cond.keep.tolist() == [[False, True, False, False, True]]


def _model(direction):
    return build_model(ModelConfig(direction=direction, **TINY_MODEL), seed=0).eval()


def test_single_step_infer_one_evaluation_and_determinism():
    m = _model("rgb2x")
    cond = image_condition(torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(2)))
    with torch.no_grad():
        a = single_step_infer(m, cond, TaskToken.ALBEDO, seed=5)
        b = single_step_infer(m, cond, TaskToken.ALBEDO, seed=5)
        c = single_step_infer(m, cond, TaskToken.ALBEDO, seed=6)
    assert m.eval_count == 3
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert a.shape == (1, 3, 16, 16)


def test_single_step_infer_matches_manual_formula():
    m = _model("x2rgb")
    x = sf.render_gbuffer(sf.sample_scene(1), 16).intrinsics
    cond = assemble_condition(x)
    with torch.no_grad():
        out = single_step_infer(m, cond, "a photo", seed=9)
        zT = batch_noise(1, 3, 16, 16, NoiseSpec(), [9])
        ref = v_to_z0(zT, m(zT, cond.planes, "a photo"), SCHED)
    assert torch.allclose(out, ref)


def test_single_step_infer_direction_mismatch():
    m = _model("rgb2x")
    cond = image_condition(torch.rand(1, 3, 16, 16))
    with pytest.raises(ConfigurationError):
        single_step_infer(m, cond, "a caption", seed=0)
    x = sf.render_gbuffer(sf.sample_scene(1), 16).intrinsics
    with pytest.raises(ConfigurationError):
        single_step_infer(_model("x2rgb"), assemble_condition(x), TaskToken.NORMAL, seed=0)
