"""Image-level entry points over trained checkpoints: one network evaluation per
requested output map."""

from __future__ import annotations

import numpy as np
import torch

from ouro.core import CHANNELS, IntrinsicSet, TaskToken, ValidationError, decode_normal
from ouro.diffusion import ConfigurationError, assemble_condition, image_condition, single_step_infer
from ouro.trainer import Checkpoint, from_latent


def hwc_to_tensor(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]


def tensor_to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def postprocess(channel: str, z: torch.Tensor) -> np.ndarray:
    """Decoded ``1×3×H×W`` latent -> H×W×C map in the channel's natural range.

    Normals come back as unit vectors; bounded channels are clipped to [0, 1],
    irradiance to >= 0.
    """
    if channel == "normal":
        return decode_normal(np.clip(tensor_to_hwc(z), 0.0, 1.0))
    x = tensor_to_hwc(from_latent(channel, z))
    if channel == "irradiance":
        return np.maximum(x, 0.0)
    return np.clip(x, 0.0, 1.0)


@torch.no_grad()
def infer_channels(ckpt: Checkpoint, rgb: np.ndarray, tokens, seed: int = 0) -> dict[str, np.ndarray]:
    """RGB->X: one single-step evaluation per requested task token."""
    if ckpt.direction != "rgb2x":
        raise ConfigurationError(f"checkpoint is {ckpt.direction}, task tokens need an rgb2x model")
    cond = image_condition(hwc_to_tensor(rgb), ckpt.codec)
    out = {}
    for tok in tokens:
        tok = TaskToken.parse(tok) if isinstance(tok, str) else TaskToken(tok)
        z = single_step_infer(ckpt.model, cond, tok, seed, ckpt.schedule, ckpt.noise, ckpt.codec)
        out[tok.value] = postprocess(tok.value, z)
    return out


@torch.no_grad()
def infer_rgb(ckpt: Checkpoint, intrinsics: IntrinsicSet, caption: str, seed: int = 0) -> np.ndarray:
    """X->RGB from whatever channels ``intrinsics.mask`` marks present."""
    if ckpt.direction != "x2rgb":
        raise ConfigurationError(f"checkpoint is {ckpt.direction}, captions need an x2rgb model")
    cond = assemble_condition(intrinsics, codec=ckpt.codec)
    z = single_step_infer(ckpt.model, cond, str(caption), seed, ckpt.schedule, ckpt.noise, ckpt.codec)
    return np.clip(tensor_to_hwc(z), 0.0, 1.0)


def channel_list(spec: str) -> list[str]:
    from ouro.core import SHORT_NAMES

    names = [SHORT_NAMES.get(s.strip(), s.strip()) for s in spec.split(",") if s.strip()]
    unknown = [n for n in names if n not in CHANNELS and n != "rgb"]
    if unknown:
        raise ValidationError(f"unknown channels {unknown}")
    return names
