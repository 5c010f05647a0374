"""Training losses.

All functions take torch tensors with the channel axis at ``-3`` (``C×H×W`` or
``B×C×H×W``) and return differentiable scalars. ``N`` is the pixel count
(batch × H × W); squared-norm losses sum over channels and average over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ouro.core import CHANNELS, ChannelMask, IntrinsicSet, encode_normal

COS_CLAMP = 1.0 - 1e-7
DEGENERATE_VAR = 1e-12
LOSS_KEYS = ("normal", "albedo", "roughness", "metallicity", "irradiance", "rgb", "cycle_x", "cycle_i")


def _pixels(x: torch.Tensor) -> int:
    return x.numel() // x.shape[-3]


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def angular_error(n_gt: torch.Tensor, n_pred: torch.Tensor):
    """Per-pixel angle (radians) and a mask of zero-length predictions.

    The forward value is ``arccos`` of the exact cosine; gradients come from a
    cosine clamped to ``±(1 - 1e-7)`` so they stay finite at 0 and π.
    Zero-length predictions count as orthogonal (π/2).
    """
    gt = n_gt.double()
    pred = n_pred.double()
    dot = (gt * pred).sum(-3)
    ng = gt.norm(dim=-3)
    np_ = pred.norm(dim=-3)
    degenerate = np_ < 1e-12
    cos = dot / (ng * torch.where(degenerate, torch.ones_like(np_), np_))
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    soft = torch.acos(cos.clamp(-COS_CLAMP, COS_CLAMP))
    exact = torch.acos(cos.detach().clamp(-1.0, 1.0))
    angle = soft + (exact - soft.detach())
    return angle.to(n_pred.dtype), degenerate


def loss_normal(n_gt: torch.Tensor, n_pred: torch.Tensor, return_flags: bool = False):
    """Mean angular error in radians, in ``[0, π]``."""
    angle, degenerate = angular_error(n_gt, n_pred)
    loss = angle.mean()
    if return_flags:
        return loss, {"degenerate_pixels": int(degenerate.sum())}
    return loss


@dataclass
class AffineFit:
    scale: torch.Tensor     # (..., C) diagonal of S
    shift: torch.Tensor     # (..., C)
    residual: torch.Tensor  # minimized sum of squares

    def apply(self, e_pred: torch.Tensor) -> torch.Tensor:
        return self.scale[..., None, None] * e_pred + self.shift[..., None, None]


def fit_affine(e_pred: torch.Tensor, e_gt: torch.Tensor) -> AffineFit:
    """Per-channel least squares ``min_{s,t} sum (E - s Ê - t)^2`` in closed form.

    ``s = cov(Ê, E) / var(Ê)``, ``t = mean(E) - s mean(Ê)``; when
    ``var(Ê) < 1e-12`` the fit degenerates to ``s = 0, t = mean(E)``.
    Fits are independent per item for batched input.
    """
    p = e_pred.flatten(-2)
    g = e_gt.flatten(-2)
    pm = p.mean(-1, keepdim=True)
    gm = g.mean(-1, keepdim=True)
    pc, gc = p - pm, g - gm
    var = (pc * pc).mean(-1)
    cov = (pc * gc).mean(-1)
    ok = var >= DEGENERATE_VAR
    scale = torch.where(ok, cov / torch.where(ok, var, torch.ones_like(var)), torch.zeros_like(var))
    shift = gm[..., 0] - scale * pm[..., 0]
    r = g - scale[..., None] * p - shift[..., None]
    return AffineFit(scale, shift, (r * r).sum())


def loss_irradiance(e_gt: torch.Tensor, e_pred: torch.Tensor) -> torch.Tensor:
    """Affine-invariant loss: the per-channel least-squares residual divided by N."""
    return fit_affine(e_pred, e_gt).residual / _pixels(e_pred)


def loss_mse(y_gt: torch.Tensor, y_pred: torch.Tensor) -> torch.Tensor:
    if y_gt.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {tuple(y_gt.shape)} vs {tuple(y_pred.shape)}")
    return ((y_gt - y_pred) ** 2).sum() / _pixels(y_pred)


CHANNEL_LOSSES = {
    "normal": loss_normal,
    "albedo": loss_mse,
    "roughness": loss_mse,
    "metallicity": loss_mse,
    "irradiance": loss_irradiance,
}


@dataclass
class LossBreakdown:
    components: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.components.get(key, torch.zeros(()))

    @property
    def total(self) -> torch.Tensor:
        total = torch.zeros(())
        for k, v in self.components.items():
            total = total + self.weights.get(k, 1.0) * v
        return total

    def merge(self, other: "LossBreakdown", weight: float = 1.0) -> "LossBreakdown":
        out = LossBreakdown(dict(self.components), dict(self.weights))
        for k, v in other.components.items():
            out.components[k] = out.components.get(k, torch.zeros(())) + v
            out.weights[k] = other.weights.get(k, 1.0) * weight
        return out

    def as_dict(self) -> dict[str, float]:
        d = {k: float(self[k].detach()) for k in LOSS_KEYS}
        d["total"] = float(self.total.detach())
        return d


def _mask_matrix(mask, batch: int) -> torch.Tensor:
    if isinstance(mask, ChannelMask):
        return torch.tensor([[c in mask for c in CHANNELS]] * batch)
    m = torch.as_tensor(mask, dtype=torch.bool)
    return m.expand(batch, -1) if m.dim() == 1 else m


def intrinsics_tensors(x: IntrinsicSet, encoded_normals: bool = False) -> dict[str, torch.Tensor]:
    out = {}
    for c in CHANNELS:
        arr = x.channel(c)
        if c == "normal" and encoded_normals:
            arr = encode_normal(arr) if c in x.mask else np.zeros_like(arr)
        out[c] = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    return out


def task_loss(pred, gt, mask=None, weights: dict[str, float] | None = None) -> LossBreakdown:
    """Sum of per-channel losses over present channels.

    ``pred``/``gt`` are IntrinsicSets or dicts of ``B×C×H×W`` tensors in decoded
    form (normals as vectors). ``mask`` is a ChannelMask or ``B×5`` bool tensor;
    a channel's loss averages over the batch items that have it.
    """
    if isinstance(gt, IntrinsicSet):
        mask = gt.mask if mask is None else mask
        gt = intrinsics_tensors(gt)
    if isinstance(pred, IntrinsicSet):
        pred = intrinsics_tensors(pred)
    batch = _as_batch(next(iter(gt.values()))).shape[0]
    m = _mask_matrix(mask, batch)
    out = LossBreakdown(weights=dict(weights or {}))
    for i, c in enumerate(CHANNELS):
        rows = m[:, i]
        if not bool(rows.any()) or c not in pred:
            continue
        g = _as_batch(gt[c])[rows]
        p = _as_batch(pred[c])[rows]
        if c == "irradiance":
            # affine fit per item, then average
            out.components[c] = torch.stack([loss_irradiance(g[k], p[k]) for k in range(len(g))]).mean()
        else:
            out.components[c] = CHANNEL_LOSSES[c](g, p)
    return out


def loss_cycle(x_gt, x_cycled, i_gt, i_cycled, masks) -> tuple[torch.Tensor, torch.Tensor]:
    """Cycle terms ``(|X - X~|^2, |I - I~|^2)``.

    X is compared in network/storage space (normals encoded); ``cycle_x`` is
    the mean over present channels of :func:`loss_mse`, averaged over items with
    a non-empty mask. Items with an empty mask (wild data) contribute nothing.
    """
    cycle_i = loss_mse(i_gt, i_cycled) if i_gt is not None else torch.zeros(())
    if x_gt is None or x_cycled is None:
        return torch.zeros(()), cycle_i
    batch = _as_batch(next(iter(x_gt.values()))).shape[0]
    m = _mask_matrix(masks, batch)
    per_item = []
    for k in range(batch):
        present = [c for i, c in enumerate(CHANNELS) if bool(m[k, i])]
        if not present:
            continue
        terms = [loss_mse(_as_batch(x_gt[c])[k], _as_batch(x_cycled[c])[k]) for c in present]
        per_item.append(torch.stack(terms).mean())
    cycle_x = torch.stack(per_item).mean() if per_item else torch.zeros(())
    return cycle_x, cycle_i
