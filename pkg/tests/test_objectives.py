import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ouro.core import CHANNELS, ChannelMask
from ouro.objectives import (
    LossBreakdown, angular_error, fit_affine, loss_cycle, loss_irradiance, loss_mse, loss_normal, task_loss,
)


def _unit(x):
    return x / x.norm(dim=-3, keepdim=True)


def _grid_residual(p, g, n=200):
    """Brute-force min over an n×n (s, t) grid, per channel, summed."""
    s = np.linspace(-3, 3, n)[:, None, None]
    t = np.linspace(-3, 3, n)[None, :, None]
    total = 0.0
    for c in range(p.shape[0]):
        pc, gc = p[c].ravel()[None, None], g[c].ravel()[None, None]
        total += float(((gc - s * pc - t) ** 2).sum(-1).min())
    return total


def test_fit_affine_beats_grid_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.random((3, 8, 8))
        g = rng.uniform(0.2, 1.5) * p + rng.uniform(-0.5, 0.5) + 0.1 * rng.standard_normal((3, 8, 8))
        fit = fit_affine(torch.from_numpy(p), torch.from_numpy(g))
        grid = _grid_residual(p, g)
        assert float(fit.residual) <= grid * (1 + 1e-6)
        for c in range(3):
            A = np.stack([p[c].ravel(), np.ones(64)], 1)
            sol, *_ = np.linalg.lstsq(A, g[c].ravel(), rcond=None)
            assert abs(float(fit.scale[c]) - sol[0]) < 1e-10 and abs(float(fit.shift[c]) - sol[1]) < 1e-10


def test_fit_affine_degenerate_prediction():
    g = torch.rand(3, 4, 4, dtype=torch.float64)
    fit = fit_affine(torch.full((3, 4, 4), 0.7, dtype=torch.float64), g)
    assert torch.all(fit.scale == 0)
    assert torch.allclose(fit.shift, g.mean(dim=(1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 20), st.floats(-5, 5), st.integers(0, 10_000))
def test_irradiance_loss_affine_invariance(s, t, seed):
    g = torch.Generator().manual_seed(seed)
    e_gt = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    e_pred = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    base = loss_irradiance(e_gt, e_pred)
    assert abs(float(loss_irradiance(e_gt, s * e_pred + t)) - float(base)) < 1e-8
    assert float(loss_irradiance(e_gt, s * e_gt + t)) < 1e-20


def test_irradiance_loss_normalization():
    e_gt = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]], dtype=torch.float64)
    e_pred = torch.tensor([[[0.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    A = np.stack([e_pred.numpy().ravel(), np.ones(4)], 1)
    _, res, *_ = np.linalg.lstsq(A, e_gt.numpy().ravel(), rcond=None)
    assert float(loss_irradiance(e_gt, e_pred)) == pytest.approx(res[0] / 4)


def test_normal_loss_canonical_values():
    n = torch.zeros(3, 4, 4, dtype=torch.float64)
    n[2] = 1
    ortho = torch.zeros_like(n)
    ortho[0] = 1
    assert float(loss_normal(n, n)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_normal(n, ortho)) == pytest.approx(math.pi / 2, abs=1e-12)
    assert float(loss_normal(n, -n)) == pytest.approx(math.pi, abs=1e-12)
    assert float(loss_normal(n, 5 * n)) == pytest.approx(0.0, abs=1e-12)


def test_normal_loss_degenerate_prediction_is_flagged():
    n = torch.zeros(3, 2, 2, dtype=torch.float64)
    n[2] = 1
    pred = n.clone()
    pred[:, 0, 0] = 0
    loss, flags = loss_normal(n, pred, return_flags=True)
    assert flags["degenerate_pixels"] == 1
    assert float(loss) == pytest.approx(math.pi / 8)


def test_normal_loss_gradient_finite_at_extremes():
    n = torch.zeros(3, 2, 2, dtype=torch.float64)
    n[2] = 1
    for pred in (n.clone(), -n.clone()):
        pred.requires_grad_(True)
        loss_normal(n, pred).backward()
        assert torch.all(torch.isfinite(pred.grad))


def test_mse_semantics():
    a = torch.zeros(2, 3, 4, 4)
    b = torch.ones(2, 3, 4, 4)
    assert float(loss_mse(a, b)) == pytest.approx(3.0)  # summed over channels, mean over pixels
    with pytest.raises(ValueError):
        loss_mse(a, b[:, :1])


@pytest.mark.parametrize("fn, make", [
    (loss_mse, lambda g: (torch.rand(3, 5, 5, generator=g, dtype=torch.float64),) * 2),
    (loss_irradiance, lambda g: (torch.rand(3, 5, 5, generator=g, dtype=torch.float64),) * 2),
    (loss_normal, lambda g: (_unit(torch.randn(3, 5, 5, generator=g, dtype=torch.float64)),) * 2),
])
def test_loss_gradients_match_central_differences(fn, make):
    g = torch.Generator().manual_seed(7)
    gt, _ = make(g)
    pred = make(g)[0].clone().requires_grad_(True)
    fn(gt, pred).backward()
    h = 1e-6
    x = pred.detach().clone()
    for idx in [(0, 0, 0), (1, 2, 3), (2, 4, 4), (0, 3, 1)]:
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (float(fn(gt, xp)) - float(fn(gt, xm))) / (2 * h)
        an = float(pred.grad[idx])
        assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-6), (idx, fd, an)


def _intrinsics_batch(b=2, hw=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = {}
    for c in CHANNELS:
        w = 1 if c in ("roughness", "metallicity") else 3
        x = torch.rand(b, w, hw, hw, generator=g)
        out[c] = _unit(x - 0.5) if c == "normal" else x
    return out


def test_task_loss_respects_mask():
    gt = _intrinsics_batch()
    pred = _intrinsics_batch(seed=1)
    mask = torch.tensor([[True, True, False, False, False], [False, True, False, False, True]])
    lb = task_loss(pred, gt, mask)
    assert set(lb.components) == {"normal", "albedo", "irradiance"}
    assert float(lb["albedo"]) == pytest.approx(float(loss_mse(gt["albedo"], pred["albedo"])))
    assert float(lb["normal"]) == pytest.approx(float(loss_normal(gt["normal"][:1], pred["normal"][:1])))
    assert float(lb["roughness"]) == 0.0
    full = task_loss(pred, gt, ChannelMask.full())
    assert set(full.components) == set(CHANNELS)


def test_loss_breakdown_weights_and_dict():
    lb = LossBreakdown({"rgb": torch.tensor(2.0), "cycle_i": torch.tensor(1.0)}, {"cycle_i": 0.5})
    assert float(lb.total) == pytest.approx(2.5)
    d = lb.as_dict()
    assert d["rgb"] == 2.0 and d["albedo"] == 0.0 and d["total"] == 2.5


def test_loss_cycle():
    gt = _intrinsics_batch()
    same = {c: v.clone() for c, v in gt.items()}
    rgb = torch.rand(2, 3, 4, 4)
    cx, ci = loss_cycle(gt, same, rgb, rgb, torch.ones(2, 5, dtype=torch.bool))
    assert float(cx) == 0.0 and float(ci) == 0.0
    off = {c: v + 0.1 for c, v in gt.items()}
    cx, _ = loss_cycle(gt, off, None, None, torch.tensor([[True] * 5, [False] * 5]))
    widths = [3, 3, 1, 1, 3]
    assert float(cx) == pytest.approx(np.mean([w * 0.01 for w in widths]), rel=1e-5)
    cx, ci = loss_cycle(gt, off, rgb, rgb + 0.2, torch.zeros(2, 5, dtype=torch.bool))
    assert float(cx) == 0.0 and float(ci) == pytest.approx(3 * 0.04, rel=1e-5)


def test_angular_error_dtype_follows_input():
    n = _unit(torch.randn(1, 3, 4, 4))
    angle, _ = angular_error(n, n)
    assert angle.dtype == torch.float32 and float(angle.max()) < 1e-3
