"""Noise schedule, multi-resolution noise, v-parameterization and the
single-step sampler.

Latent-space arithmetic (``noise_target``, ``v_target``, ``v_to_z0``) is written
with plain operators so it works on numpy arrays and torch tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ouro.core import CHANNEL_WIDTH, CHANNELS, ChannelMask, IntrinsicSet, TaskToken, encode_normal


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1 or len(ab) != self.T + 1:
            raise ConfigurationError(f"alpha_bar must have T+1={self.T + 1} entries, got {len(ab)}")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ConfigurationError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        if ab[0] < 0.999:
            raise ConfigurationError(f"alpha_bar[0]={ab[0]:.6f} < 0.999")
        if ab[-1] > 0.01:
            raise ConfigurationError(f"alpha_bar[T]={ab[-1]:.6f} > 0.01; the terminal step is not noisy enough")

    def at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T}]")
        return self.alpha_bar[t]

    def to_json(self) -> dict:
        return {"T": self.T, "alpha_bar": list(self.alpha_bar)}

    @classmethod
    def from_json(cls, d: dict) -> "DiffusionSchedule":
        return cls(int(d["T"]), tuple(float(a) for a in d["alpha_bar"]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear-beta schedule with ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``, ``alpha_bar[0] = 1``."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T, tuple(float(a) for a in alpha_bar))


# --- multi-resolution noise -----------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    scales: tuple[int, ...] = (1, 2, 4, 8)
    discount: float = 0.5
    seed: int = 0

    def __post_init__(self):
        s = tuple(int(v) for v in self.scales)
        object.__setattr__(self, "scales", s)
        if not s or s[0] != 1 or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigurationError("scales must start at 1 and strictly increase")
        if not 0 < self.discount <= 1:
            raise ConfigurationError("discount must lie in (0, 1]")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.scales, self.discount, int(seed))

    def to_json(self) -> dict:
        return asdict(self)


def multires_noise(shape, spec: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Pyramid noise for an ``H×W×...`` shape: level ``k`` is a unit Gaussian at
    ``ceil(H/s_k)×ceil(W/s_k)``, nearest-upsampled and weighted ``discount**k``;
    the sum is divided by its analytic standard deviation."""
    shape = tuple(int(v) for v in shape)
    h, w, rest = shape[0], shape[1], shape[2:]
    rng = np.random.default_rng(spec.seed)
    total = np.zeros(shape, dtype=np.float64)
    var = 0.0
    for k, s in enumerate(spec.scales):
        g = rng.standard_normal((math.ceil(h / s), math.ceil(w / s)) + rest)
        rows = np.arange(h) // s
        cols = np.arange(w) // s
        weight = spec.discount ** k
        total += weight * g[rows][:, cols]
        var += weight * weight
    return (total / math.sqrt(var)).astype(np.float32)


def batch_noise(batch: int, channels: int, h: int, w: int, spec: NoiseSpec, seeds) -> torch.Tensor:
    """Stack of ``multires_noise`` draws as a ``B×C×H×W`` tensor, one seed per item."""
    arrs = [multires_noise((h, w, channels), spec.with_seed(int(s))) for s in seeds]
    assert len(arrs) == batch
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


# --- v-parameterization -----------------------------------------------------

def _ab(t: int, sched: DiffusionSchedule) -> float:
    return sched.at(t)


def noise_target(z0, eps, t: int, sched: DiffusionSchedule):
    """Forward-noised latent ``sqrt(ab) z0 + sqrt(1 - ab) eps``."""
    ab = _ab(t, sched)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def v_target(z0, eps, t: int, sched: DiffusionSchedule):
    """Velocity target ``sqrt(ab) eps - sqrt(1 - ab) z0``."""
    ab = _ab(t, sched)
    return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * z0


def v_to_z0(zT, v, sched: DiffusionSchedule):
    """Clean-latent estimate from a velocity prediction at the terminal step."""
    ab = sched.alpha_bar[sched.T]
    return math.sqrt(ab) * zT - math.sqrt(1.0 - ab) * v


# --- codec ----------------------------------------------------------------

@dataclass(frozen=True)
class Codec:
    """Stand-in for the VAE. ``factor == 1`` is the identity; larger factors
    average-pool on encode and nearest-upsample on decode."""

    factor: int = 1

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigurationError("codec factor must be >= 1")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.factor == 1 else F.avg_pool2d(x, self.factor)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z if self.factor == 1 else F.interpolate(z, scale_factor=self.factor, mode="nearest")

    def downsample(self, x: torch.Tensor) -> torch.Tensor:
        """Direct resize to latent resolution, bypassing the encoder (irradiance path)."""
        return x if self.factor == 1 else F.interpolate(x, scale_factor=1.0 / self.factor, mode="area")


# --- condition assembly ---------------------------------------------------

SLOT_WIDTH = tuple(CHANNEL_WIDTH[c] for c in CHANNELS)
X_CONDITION_PLANES = sum(SLOT_WIDTH)


@dataclass
class ConditionStack:
    """Model conditioning. For X->RGB ``planes`` holds the five slots in fixed
    order ``(n, a, r, m, E)``; ``keep`` records which slots carry content. For
    RGB->X ``planes`` is the encoded image and ``keep`` is None."""

    planes: torch.Tensor
    keep: torch.Tensor | None = None

    @property
    def kind(self) -> str:
        return "rgb2x" if self.keep is None else "x2rgb"

    def slot(self, name: str) -> torch.Tensor:
        i = CHANNELS.index(name)
        start = sum(SLOT_WIDTH[:i])
        return self.planes[:, start:start + SLOT_WIDTH[i]]


def image_condition(rgb: torch.Tensor, codec: Codec = Codec()) -> ConditionStack:
    return ConditionStack(codec.encode(rgb))


def condition_from_planes(channels: dict[str, torch.Tensor], masks: torch.Tensor, dropout_p: float,
                          rng: np.random.Generator | None, codec: Codec = Codec()) -> ConditionStack:
    """Batched condition assembly.

    ``channels`` maps channel name to ``B×C×H×W`` tensors in network form
    (normals encoded to [0, 1]); ``masks`` is a ``B×5`` bool tensor of available
    channels. Absent channels are always zero; present ones are zeroed
    independently with probability ``dropout_p``.
    """
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError("dropout_p must lie in [0, 1]")
    masks = torch.as_tensor(masks, dtype=torch.bool)
    b = masks.shape[0]
    if dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        drop = torch.from_numpy(rng.random((b, len(CHANNELS))) < dropout_p)
        keep = masks & ~drop
    else:
        keep = masks.clone()
    slots = []
    for i, c in enumerate(CHANNELS):
        x = channels[c]
        z = codec.downsample(x) if c == "irradiance" else codec.encode(x)
        slots.append(z * keep[:, i].to(z.dtype).view(b, 1, 1, 1))
    return ConditionStack(torch.cat(slots, dim=1), keep)


def intrinsics_to_planes(x: IntrinsicSet) -> dict[str, torch.Tensor]:
    """Network-form ``1×C×H×W`` tensors; absent normals stay zero instead of encoding."""
    out = {}
    for c in CHANNELS:
        arr = x.channel(c)
        if c == "normal":
            arr = encode_normal(arr) if c in x.mask else np.zeros_like(arr)
        out[c] = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    return out


def assemble_condition(x: IntrinsicSet, mask: ChannelMask | None = None, dropout_p: float = 0.0,
                       rng: np.random.Generator | None = None, codec: Codec = Codec()) -> ConditionStack:
    mask = x.mask if mask is None else mask
    m = torch.tensor([[c in mask for c in CHANNELS]])
    return condition_from_planes(intrinsics_to_planes(x), m, dropout_p, rng, codec)


# --- single-step inference --------------------------------------------------

def single_step_infer(model, cond: ConditionStack, token, seed: int,
                      schedule: DiffusionSchedule | None = None, noise: NoiseSpec | None = None,
                      codec: Codec = Codec()) -> torch.Tensor:
    """One network evaluation from pure noise at ``t = T``; returns the decoded
    ``B×3×H×W`` prediction."""
    schedule = schedule or make_schedule()
    noise = noise or NoiseSpec()
    direction = getattr(getattr(model, "config", None), "direction", None)
    if direction is not None:
        expects = "rgb2x" if _is_task_token(token) else "x2rgb"
        if direction != expects or cond.kind != direction:
            raise ConfigurationError(f"model direction {direction!r} does not match token/condition kind")
    b, _, h, w = cond.planes.shape
    zT = batch_noise(b, 3, h, w, noise, _item_seeds(seed, b)).to(cond.planes.dtype)
    v = model(zT, cond.planes, token)
    if v.shape != zT.shape:
        raise ConfigurationError(f"model output {tuple(v.shape)} does not match latent {tuple(zT.shape)}")
    return codec.decode(v_to_z0(zT, v, schedule))


def _item_seeds(seed: int, b: int) -> list[int]:
    if b == 1:
        return [int(seed)]
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(b)]


def _is_task_token(token) -> bool:
    if isinstance(token, TaskToken):
        return True
    if isinstance(token, (list, tuple)) and token and isinstance(token[0], TaskToken):
        return True
    if isinstance(token, torch.Tensor):
        return True
    if isinstance(token, str):
        return token in {t.value for t in TaskToken}
    return False
