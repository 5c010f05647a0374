import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ouro import sceneforge as sf
from ouro.core import TaskToken
from ouro.denoiser import ModelConfig, build_model
from ouro.diffusion import ConfigurationError, image_condition, make_schedule, noise_target, single_step_infer
from ouro.inference import hwc_to_tensor, postprocess
from ouro.temporal import (
    VideoConfig, blend_init, infer_frames_independently, infer_video, mean_adjacent_difference, plan_windows,
)
from tests.conftest import TINY_MODEL


@pytest.mark.parametrize("n, w, s, expected", [
    (10, 4, 2, [(0, 3), (2, 5), (4, 7), (6, 9)]),
    (9, 4, 3, [(0, 3), (3, 6), (5, 8)]),
    (8, 8, 4, [(0, 7)]),
])
def test_plan_examples(n, w, s, expected):
    assert list(plan_windows(n, w, s).windows) == expected


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 12).flatmap(lambda w: st.tuples(
    st.just(w), st.integers(1, max(1, w - 1)), st.integers(w, 60))))
def test_plan_properties(args):
    w, s, n = args
    if n > w and s >= w:
        return
    plan = plan_windows(n, w, s)
    covered = set()
    for a, b in plan.windows:
        assert b - a + 1 == w
        covered.update(range(a, b + 1))
    assert covered == set(range(n))
    assert plan.windows[0][0] == 0 and plan.windows[-1][1] == n - 1
    starts = [a for a, _ in plan.windows]
    assert starts == sorted(starts) and len(set(starts)) == len(starts)
    assert all(starts[i] == i * s for i in range(len(starts) - 1))
    assert all(o >= w - s and o >= 1 for o in plan.overlaps)
    for f in range(n):
        k = plan.owner(f)
        a, b = plan.windows[k]
        assert a <= f <= b and all(not (x <= f <= y) for x, y in plan.windows[k + 1:])


def test_plan_errors():
    with pytest.raises(ConfigurationError):
        plan_windows(5, 8, 4)
    with pytest.raises(ConfigurationError):
        plan_windows(10, 4, 4)
    with pytest.raises(ConfigurationError):
        VideoConfig(window_size=4, stride=4)
    with pytest.raises(ConfigurationError):
        VideoConfig(gamma=1.5)


def test_blend_endpoints():
    z, e = torch.randn(3, 4, 4), torch.randn(3, 4, 4)
    assert torch.equal(blend_init(z, e, 1.0), z)
    assert torch.equal(blend_init(z, e, 0.0), e)
    assert blend_init(1.0, 0.0, 0.1) == pytest.approx(0.1)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(direction="rgb2x", **TINY_MODEL), seed=3).eval()


@pytest.fixture(scope="module")
def pan():
    return [f.rgb.data for f in sf.pan_frames(sf.sample_scene(12), 10, step=0.05, resolution=16)]


def test_one_frame_video_equals_single_step(model, pan):
    res = infer_video(model, pan[:1], TaskToken.ALBEDO, VideoConfig(seed=7))
    with torch.no_grad():
        z = single_step_infer(model, image_condition(hwc_to_tensor(pan[0])), TaskToken.ALBEDO, 7)
    assert np.max(np.abs(res.outputs[0] - postprocess("albedo", z))) < 1e-6
    assert model.mode == "image"


def test_constant_video_gives_identical_frames(model, pan):
    res = infer_video(model, [pan[0]] * 6, TaskToken.NORMAL, VideoConfig(window_size=8, stride=4))
    for out in res.outputs[1:]:
        assert np.max(np.abs(out - res.outputs[0])) < 1e-6


class IdentityStub:
    """Returns its latent input as the velocity."""

    def __call__(self, zT, cond, token):
        return zT


def test_gamma_one_hands_off_previous_latents(pan):
    sched = make_schedule()
    res = infer_video(IdentityStub(), pan, TaskToken.ALBEDO, VideoConfig(4, 2, gamma=1.0, seed=1),
                      keep_trace=True)
    for prev, cur in zip(res.trace, res.trace[1:]):
        (ps, pe), (cs, ce) = prev["window"], cur["window"]
        for f in range(cs, pe + 1):
            i, j = f - ps, f - cs
            expected = noise_target(prev["z0_hat"][:, i], prev["z_init"][:, i], sched.T, sched)
            assert torch.equal(cur["z_init"][:, j], expected)
        for f in range(pe + 1, ce + 1):
            assert torch.equal(cur["z_init"][:, f - cs], cur["eps"])


def test_gamma_blend_in_trace(pan):
    sched = make_schedule()
    res = infer_video(IdentityStub(), pan, TaskToken.ALBEDO, VideoConfig(4, 2, gamma=0.1), keep_trace=True)
    prev, cur = res.trace[0], res.trace[1]
    z_prev = noise_target(prev["z0_hat"][:, 2], prev["z_init"][:, 2], sched.T, sched)
    assert torch.allclose(cur["z_init"][:, 0], 0.1 * z_prev + 0.9 * cur["eps"])


def test_overlapped_frames_come_from_later_window(model, pan):
    vcfg = VideoConfig(4, 2, seed=2)
    res = infer_video(model, pan, TaskToken.ALBEDO, vcfg, keep_trace=True)
    last = res.trace[-1]
    s, _ = last["window"]
    expected = postprocess("albedo", last["z0_hat"][:, 0][None])
    np.testing.assert_allclose(res.outputs[s], expected, atol=1e-6)


def test_video_is_deterministic(model, pan):
    a = infer_video(model, pan, TaskToken.ALBEDO, VideoConfig(4, 2, seed=5)).outputs
    b = infer_video(model, pan, TaskToken.ALBEDO, VideoConfig(4, 2, seed=5)).outputs
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_resolution_mismatch(model, pan):
    small = sf.render_gbuffer(sf.sample_scene(1), 32).rgb.data
    with pytest.raises(ConfigurationError):
        infer_video(model, [pan[0], small], TaskToken.ALBEDO)


def test_independent_baseline_and_statistic(model, pan):
    outs = infer_frames_independently(model, pan[:3], TaskToken.NORMAL, seed=0)
    assert len(outs) == 3 and outs[0].shape == (16, 16, 3)
    assert mean_adjacent_difference([np.zeros(2), np.ones(2), np.ones(2)]) == pytest.approx(0.5)
