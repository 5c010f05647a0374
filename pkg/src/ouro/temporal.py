"""Training-free video inference with an inflated image model.

Frames are processed in overlapping windows; all frames of a window share one
noise draw. Each window after the first starts its overlap frames from ``gamma * z_prev + (1 - gamma) * eps``, where
``z_prev`` re-noises the previous window's clean prediction with the noise that
window started from. Overlapped frames take their final output from the later
window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ouro.core import IntrinsicSet, TaskToken
from ouro.denoiser import inflate_temporal
from ouro.diffusion import (
    Codec,
    ConfigurationError,
    DiffusionSchedule,
    NoiseSpec,
    assemble_condition,
    image_condition,
    make_schedule,
    multires_noise,
    ConditionStack,
    noise_target,
    single_step_infer,
    v_to_z0,
)
from ouro.inference import hwc_to_tensor, postprocess


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[tuple[int, int], ...]  # inclusive (start, end)
    window_size: int
    stride: int

    @property
    def overlaps(self) -> list[int]:
        return [a_end - b_start + 1 for (_, a_end), (b_start, _) in zip(self.windows, self.windows[1:])]

    def owner(self, frame: int) -> int:
        """Index of the window whose output a frame keeps (the last one covering it)."""
        return max(k for k, (s, e) in enumerate(self.windows) if s <= frame <= e)


def plan_windows(n_frames: int, window_size: int, stride: int) -> WindowPlan:
    if window_size < 1 or not 1 <= stride:
        raise ConfigurationError("window_size and stride must be >= 1")
    if n_frames > window_size and stride >= window_size:
        raise ConfigurationError("stride must be smaller than window_size")
    if n_frames < window_size:
        raise ConfigurationError(f"{n_frames} frames is fewer than window size {window_size}")
    windows = []
    start = 0
    while True:
        end = start + window_size - 1
        if end >= n_frames - 1:
            start = n_frames - window_size
            windows.append((start, n_frames - 1))
            break
        windows.append((start, end))
        start += stride
    return WindowPlan(tuple(windows), window_size, stride)


@dataclass
class VideoConfig:
    window_size: int = 8
    stride: int = 4
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.stride < self.window_size:
            raise ConfigurationError("need 1 <= stride < window_size")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")


def blend_init(z_prev, eps, gamma: float):
    """Convex hand-off ``gamma * z_prev + (1 - gamma) * eps``."""
    return gamma * z_prev + (1.0 - gamma) * eps


def window_seed(seed: int, window: int) -> int:
    """Noise seed of ``window``. Window 0 uses ``seed`` itself, so a one-window
    video draws the same noise as :func:`single_step_infer` with ``seed``."""
    if window == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), int(window)]).generate_state(1)[0])


def _channel_of(task) -> str | None:
    """Channel name for task tokens, None for captions (X->RGB)."""
    if isinstance(task, TaskToken):
        return task.value
    if isinstance(task, str) and task in {t.value for t in TaskToken}:
        return task
    return None


@dataclass
class VideoResult:
    outputs: list[np.ndarray]
    plan: WindowPlan
    trace: list[dict] = field(default_factory=list)


def _frame_conditions(frames, codec: Codec) -> torch.Tensor:
    conds = []
    for f in frames:
        if isinstance(f, IntrinsicSet):
            conds.append(assemble_condition(f, codec=codec).planes)
        else:
            conds.append(image_condition(hwc_to_tensor(f), codec).planes)
    shapes = {tuple(c.shape) for c in conds}
    if len(shapes) != 1:
        raise ConfigurationError(f"frames disagree in resolution: {sorted(shapes)}")
    return torch.stack(conds, dim=2)  # 1×C×F×H×W


@torch.no_grad()
def infer_video(model_image, frames, task, vcfg: VideoConfig = VideoConfig(),
                schedule: DiffusionSchedule | None = None, noise: NoiseSpec | None = None,
                codec: Codec = Codec(), keep_trace: bool = False) -> VideoResult:
    """Windowed single-step inference over ``frames``.

    ``frames`` are H×W×3 RGB arrays (RGB->X, ``task`` a TaskToken) or
    IntrinsicSets (X->RGB, ``task`` a caption). A video shorter than the window
    is processed as one window.
    """
    schedule = schedule or make_schedule()
    noise = noise or NoiseSpec()
    model = model_image
    if getattr(model, "mode", None) == "image":
        model = inflate_temporal(model_image)
    cond_all = _frame_conditions(frames, codec)
    n = cond_all.shape[2]
    h, w = cond_all.shape[-2:]
    window = min(vcfg.window_size, n)
    plan = plan_windows(n, window, min(vcfg.stride, max(window - 1, 1)))
    channel = _channel_of(task)

    outputs: list[np.ndarray | None] = [None] * n
    prev: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}  # frame -> (z_init, z0_hat)
    trace = []
    for k, (s, e) in enumerate(plan.windows):
        # one noise draw per window, shared by its frames
        eps = torch.from_numpy(multires_noise((h, w, 3), noise.with_seed(window_seed(vcfg.seed, k))))
        eps = eps.permute(2, 0, 1).to(cond_all.dtype)
        z_init = []
        for f in range(s, e + 1):
            if f in prev:
                start, z0_hat = prev[f]
                z_prev = noise_target(z0_hat, start, schedule.T, schedule)
                z_init.append(blend_init(z_prev, eps, vcfg.gamma))
            else:
                z_init.append(eps)
        zT = torch.stack(z_init, dim=1)[None]  # 1×3×F×H×W
        v = model(zT, cond_all[:, :, s:e + 1], task)
        z0 = v_to_z0(zT, v, schedule)
        prev = {f: (zT[0, :, i], z0[0, :, i]) for i, f in enumerate(range(s, e + 1))}
        for i, f in enumerate(range(s, e + 1)):
            zf = codec.decode(z0[:, :, i])
            outputs[f] = postprocess(channel, zf) if channel else np.clip(
                zf[0].permute(1, 2, 0).numpy(), 0.0, 1.0)
        if keep_trace:
            trace.append({"window": (s, e), "z_init": zT[0].clone(), "z0_hat": z0[0].clone(), "eps": eps})
    return VideoResult(outputs, plan, trace)


@torch.no_grad()
def infer_frames_independently(model_image, frames, task, seed: int = 0,
                               schedule: DiffusionSchedule | None = None, noise: NoiseSpec | None = None,
                               codec: Codec = Codec(), vary_seed: bool = True) -> list[np.ndarray]:
    """Per-frame baseline: image-mode single-step inference, frame ``i`` seeded
    with ``seed + i`` (or ``seed`` for every frame when ``vary_seed`` is off)."""
    cond_all = _frame_conditions(frames, codec)
    channel = _channel_of(task)
    out = []
    for i in range(cond_all.shape[2]):
        cond = ConditionStack(cond_all[:, :, i], None if isinstance(frames[i], np.ndarray) else
                              torch.ones(1, 5, dtype=torch.bool))
        z = single_step_infer(model_image, cond, task, seed + i if vary_seed else seed, schedule, noise, codec)
        out.append(postprocess(channel, z) if channel else np.clip(z[0].permute(1, 2, 0).numpy(), 0.0, 1.0))
    return out


def mean_adjacent_difference(outputs) -> float:
    arr = np.stack([np.asarray(o, dtype=np.float64) for o in outputs])
    return float(np.mean(np.abs(np.diff(arr, axis=0))))
