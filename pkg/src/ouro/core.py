"""Domain types, channel encodings and the on-disk dataset layout."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ouro import otns

CHANNELS = ("normal", "albedo", "roughness", "metallicity", "irradiance")
CHANNEL_WIDTH = {"normal": 3, "albedo": 3, "roughness": 1, "metallicity": 1, "irradiance": 3}
SHORT_NAMES = {"n": "normal", "a": "albedo", "r": "roughness", "m": "metallicity", "E": "irradiance"}
UNIT_TOL = 1e-4


class ValidationError(ValueError):
    pass


class Colorspace(str, enum.Enum):
    LINEAR = "linear"
    UNIT = "unit-encoded"


class TaskToken(str, enum.Enum):
    NORMAL = "normal"
    ALBEDO = "albedo"
    ROUGHNESS = "roughness"
    METALLICITY = "metallicity"
    IRRADIANCE = "irradiance"

    @property
    def index(self) -> int:
        return CHANNELS.index(self.value)

    @classmethod
    def parse(cls, name: str) -> "TaskToken":
        try:
            return cls(SHORT_NAMES.get(name, name))
        except ValueError:
            raise ValidationError(f"unknown task token {name!r}; choose from {[t.value for t in cls]}") from None


class Profile(str, enum.Enum):
    INDOOR = "indoor-like"
    CITY = "city-like"
    WILD = "wild"


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray
    colorspace: Colorspace = Colorspace.LINEAR

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[..., None]
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "colorspace", Colorspace(self.colorspace))
        problems = check_image(data, self.colorspace)
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def check_image(data: np.ndarray, colorspace: Colorspace = Colorspace.LINEAR) -> list[str]:
    problems = []
    if data.ndim != 3:
        return [f"expected H×W×C array, got shape {data.shape}"]
    h, w, c = data.shape
    if h < 8 or w < 8:
        problems.append(f"image {h}×{w} smaller than 8×8")
    if c not in (1, 3):
        problems.append(f"channel count {c} not in {{1, 3}}")
    if not np.all(np.isfinite(data)):
        problems.append("non-finite values")
    elif Colorspace(colorspace) is Colorspace.UNIT and (data.min() < 0.0 or data.max() > 1.0):
        problems.append(f"unit-encoded values outside [0, 1]: [{data.min():.4g}, {data.max():.4g}]")
    return problems


@dataclass(frozen=True)
class ChannelMask:
    normal: bool = True
    albedo: bool = True
    roughness: bool = True
    metallicity: bool = True
    irradiance: bool = True

    @classmethod
    def full(cls) -> "ChannelMask":
        return cls()

    @classmethod
    def empty(cls) -> "ChannelMask":
        return cls(False, False, False, False, False)

    @classmethod
    def of(cls, names) -> "ChannelMask":
        names = {SHORT_NAMES.get(n, n) for n in names}
        unknown = names - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")
        return cls(**{c: c in names for c in CHANNELS})

    def present(self) -> list[str]:
        return [c for c in CHANNELS if getattr(self, c)]

    def __contains__(self, name: str) -> bool:
        return bool(getattr(self, SHORT_NAMES.get(name, name)))

    def __len__(self) -> int:
        return len(self.present())

    def to_json(self) -> list[str]:
        return self.present()


PROFILE_MASKS = {
    Profile.INDOOR: ChannelMask.of("anE"),
    Profile.CITY: ChannelMask.of("anrm"),
    Profile.WILD: ChannelMask.empty(),
}


@dataclass(frozen=True)
class Caption:
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text:
            raise ValidationError("caption must be a non-empty string")
        if len(self.text) > 256:
            raise ValidationError(f"caption longer than 256 chars ({len(self.text)})")

    def __str__(self) -> str:
        return self.text


@dataclass
class IntrinsicSet:
    """Per-pixel G-buffers. Normals hold unit vectors (decoded form); absent
    channels are stored as zeros."""

    normal: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallicity: np.ndarray
    irradiance: np.ndarray
    mask: ChannelMask = field(default_factory=ChannelMask.full)

    def __post_init__(self):
        for name in CHANNELS:
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim == 2:
                arr = arr[..., None]
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, h: int, w: int, mask: ChannelMask | None = None) -> "IntrinsicSet":
        return cls(**{c: np.zeros((h, w, CHANNEL_WIDTH[c]), np.float32) for c in CHANNELS},
                   mask=mask if mask is not None else ChannelMask.empty())

    @property
    def hw(self) -> tuple[int, int]:
        return self.albedo.shape[:2]

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, SHORT_NAMES.get(name, name))

    def masked(self, mask: ChannelMask) -> "IntrinsicSet":
        """Copy restricted to ``mask``; dropped channels become zeros."""
        out = {}
        for c in CHANNELS:
            arr = self.channel(c)
            out[c] = arr.copy() if c in mask else np.zeros_like(arr)
        return IntrinsicSet(**out, mask=mask)


@dataclass
class DatasetRecord:
    id: str
    rgb: ImageTensor
    intrinsics: IntrinsicSet
    caption: Caption
    profile: Profile
    meta: dict[str, Any] = field(default_factory=dict)


# --- normal encoding ------------------------------------------------------

def encode_normal(n: np.ndarray) -> np.ndarray:
    """Map unit normals to the [0, 1] storage range via (n + 1) / 2."""
    n = np.asarray(n, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    bad = np.argwhere(np.abs(norms - 1.0) > UNIT_TOL)
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise ValidationError(
            f"non-unit normal at pixel {idx}: length {norms[idx]:.6f} ({len(bad)} offending pixels)")
    return np.clip((n + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


def decode_normal(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_normal`; zero-length vectors decode to +z."""
    v = 2.0 * np.asarray(img, dtype=np.float64) - 1.0
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < 1e-12
    out = v / np.where(norms < 1e-12, 1.0, norms)
    out[degenerate] = (0.0, 0.0, 1.0)
    return out.astype(np.float32)


# --- validation -----------------------------------------------------------

def validate_record(r: DatasetRecord) -> list[str]:
    """Return every violated invariant of ``r``; an empty list means valid."""
    report = []
    x = r.intrinsics
    mask = x.mask
    report += [f"rgb: {p}" for p in check_image(r.rgb.data, r.rgb.colorspace)]
    h, w = r.rgb.data.shape[:2]
    expected = PROFILE_MASKS.get(Profile(r.profile))
    if expected is not None and mask != expected:
        report.append(f"profile/mask mismatch: profile {Profile(r.profile).value} expects "
                      f"{expected.present()}, got {mask.present()}")
    for c in CHANNELS:
        arr = x.channel(c)
        if arr.shape != (h, w, CHANNEL_WIDTH[c]):
            report.append(f"{c}: shape {arr.shape} != {(h, w, CHANNEL_WIDTH[c])}")
            continue
        if not np.all(np.isfinite(arr)):
            report.append(f"{c}: non-finite values")
            continue
        if c not in mask:
            if np.any(arr != 0):
                report.append(f"{c}: absent channel is not all-zero")
            continue
        if c == "normal":
            lengths = np.linalg.norm(arr.astype(np.float64), axis=-1)
            bad = np.argwhere(np.abs(lengths - 1.0) > UNIT_TOL)
            if len(bad):
                i, j = (int(v) for v in bad[0])
                report.append(f"normal: unit-norm violation at pixel ({i}, {j}), "
                              f"length {lengths[i, j]:.4f} ({len(bad)} pixels)")
        elif c == "irradiance":
            if arr.min() < 0:
                report.append("irradiance: negative values")
        elif arr.min() < 0 or arr.max() > 1:
            report.append(f"{c}: values outside [0, 1]")
    if Profile(r.profile) is not Profile.WILD and len(mask) == 0:
        report.append("annotated record has an empty channel mask")
    return report


# --- dataset layout -------------------------------------------------------

def record_dir(root: str | os.PathLike, split: str, rid: str) -> Path:
    return Path(root) / split / rid


def write_record(directory: str | os.PathLike, r: DatasetRecord, previews: bool = False) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    otns.write_tensor(d / "rgb.otns", r.rgb.data, "rgb")
    x = r.intrinsics
    for c in CHANNELS:
        arr = x.channel(c)
        if c == "normal":
            arr = encode_normal(arr) if c in x.mask else np.zeros_like(arr)
        otns.write_tensor(d / f"{c}.otns", arr, c)
    meta = {"id": r.id, "profile": Profile(r.profile).value, "mask": x.mask.to_json(),
            "caption": r.caption.text, **r.meta}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if previews:
        write_previews(d, r)
    return d


def read_record(directory: str | os.PathLike) -> DatasetRecord:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    mask = ChannelMask.of(meta["mask"])
    rgb, _ = otns.read_tensor(d / "rgb.otns")
    chans = {}
    for c in CHANNELS:
        arr, _ = otns.read_tensor(d / f"{c}.otns")
        if c == "normal":
            arr = decode_normal(arr) if c in mask else np.zeros_like(arr)
        chans[c] = arr
    extra = {k: v for k, v in meta.items() if k not in ("id", "profile", "mask", "caption")}
    return DatasetRecord(id=meta["id"], rgb=ImageTensor(rgb, Colorspace.LINEAR),
                         intrinsics=IntrinsicSet(**chans, mask=mask), caption=Caption(meta["caption"]),
                         profile=Profile(meta["profile"]), meta=extra)


def list_records(root: str | os.PathLike, split: str | None = None) -> list[Path]:
    root = Path(root)
    base = root / split if split else root
    return sorted(p.parent for p in base.rglob("meta.json"))


def to_png(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_previews(d: Path, r: DatasetRecord) -> None:
    from PIL import Image

    Image.fromarray(to_png(r.rgb.data)).save(d / "rgb.png")
    x = r.intrinsics
    for c in x.mask.present():
        arr = encode_normal(x.normal) if c == "normal" else x.channel(c)
        Image.fromarray(to_png(arr)).save(d / f"{c}.png")
