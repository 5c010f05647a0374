"""Image-quality metrics and the prediction-vs-ground-truth report.

All metrics take H×W or H×W×C numpy arrays. Perceptual metrics are
pluggable: with no backend registered they report ``"unavailable"``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from ouro.core import CHANNELS, SHORT_NAMES, decode_normal

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
ANGLE_THRESHOLD = 11.25
UNAVAILABLE = "unavailable"


class MetricError(ValueError):
    pass


class PairingError(MetricError):
    def __init__(self, only_pred, only_gt):
        self.only_pred, self.only_gt = list(only_pred), list(only_gt)
        super().__init__(f"ids do not pair up: only in predictions {self.only_pred}, only in ground truth "
                         f"{self.only_gt} (pass allow_unpaired to pair by sorted order)")


def _pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise MetricError(f"shape mismatch {gt.shape} vs {pred.shape}")
    return gt, pred


def psnr(gt, pred, peak: float = 1.0) -> float:
    gt, pred = _pair(gt, pred)
    mse = float(np.mean((gt - pred) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(peak) - 10.0 * math.log10(mse))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    win = _gaussian_window()

    def blur(a):
        return ndimage.correlate(a, win, mode="reflect")

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    p = SSIM_WINDOW // 2
    return float(s[p:-p, p:-p].mean())


def ssim(gt, pred) -> float:
    """Mean SSIM over window positions fully inside the image, averaged over channels."""
    gt, pred = _pair(gt, pred)
    if gt.ndim == 2:
        gt, pred = gt[..., None], pred[..., None]
    if gt.ndim != 3 or gt.shape[2] not in (1, 3):
        raise MetricError(f"ssim expects H×W, H×W×1 or H×W×3, got {gt.shape}")
    if min(gt.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"image {gt.shape[:2]} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")
    return float(np.mean([_ssim_plane(gt[..., c], pred[..., c]) for c in range(gt.shape[2])]))


def si_rmse(gt, pred, per_channel: bool = False) -> float:
    """``min_{alpha >= 0} RMSE(gt, alpha * pred)``; one alpha for the whole image
    unless ``per_channel``."""
    gt, pred = _pair(gt, pred)
    if per_channel and gt.ndim == 3:
        g = gt.reshape(-1, gt.shape[-1])
        p = pred.reshape(-1, pred.shape[-1])
        den = (p * p).sum(0)
        alpha = np.where(den > 0, (g * p).sum(0) / np.where(den > 0, den, 1.0), 0.0)
        alpha = np.maximum(alpha, 0.0)
        return float(np.sqrt(np.mean((g - alpha * p) ** 2)))
    den = float((pred * pred).sum())
    alpha = max(0.0, float((gt * pred).sum()) / den) if den > 0 else 0.0
    return float(np.sqrt(np.mean((gt - alpha * pred) ** 2)))


def angular_errors_deg(n_gt, n_pred) -> np.ndarray:
    gt, pred = _pair(n_gt, n_pred)
    norm = np.linalg.norm(pred, axis=-1, keepdims=True)
    pred = np.where(norm > 1e-12, pred / np.where(norm > 1e-12, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    cos = np.clip((gt * pred).sum(-1) / np.linalg.norm(gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def angular_stats(n_gt, n_pred) -> dict[str, float]:
    err = angular_errors_deg(n_gt, n_pred)
    return {"mean_deg": float(err.mean()), "pct_below_11_25": float(100.0 * np.mean(err < ANGLE_THRESHOLD))}


# --- perceptual backends ----------------------------------------------------

_BACKENDS: dict[str, Callable] = {}


def register_backend(name: str, fn: Callable) -> None:
    _BACKENDS[name] = fn


def unregister_backend(name: str) -> None:
    _BACKENDS.pop(name, None)


def perceptual(gt, pred, backend: str | None = None):
    """Delegate to a registered perceptual metric; ``"unavailable"`` when none is chosen."""
    if backend is None:
        return UNAVAILABLE
    if backend not in _BACKENDS:
        raise MetricError(f"unknown perceptual backend {backend!r}; registered: {sorted(_BACKENDS)}")
    value = float(_BACKENDS[backend](gt, pred))
    if not math.isfinite(value):
        raise MetricError(f"perceptual backend {backend!r} returned a non-finite value")
    return value


# --- directory evaluation ---------------------------------------------------

CHANNEL_METRICS = {
    "albedo": ("psnr", "lpips", "ssim", "si_rmse"),
    "normal": ("mean_deg", "pct_below_11_25"),
    "roughness": ("psnr", "lpips"),
    "metallicity": ("psnr", "lpips"),
    "irradiance": ("psnr", "psnr_raw", "lpips"),
    "rgb": ("psnr", "lpips", "ssim"),
}
EVAL_ORDER = ("albedo", "normal", "roughness", "metallicity", "irradiance", "rgb")


@dataclass
class MetricReport:
    dataset: str
    model: str
    tables: dict[str, dict[str, float | str]] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for ch, row in self.tables.items():
            for k, v in row.items():
                if not isinstance(v, str) and not math.isfinite(v):
                    raise MetricError(f"{ch}/{k} is not finite")

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "tables": self.tables, "counts": self.counts,
                "excluded": self.excluded, "warnings": self.warnings}

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(d["dataset"], d["model"], d["tables"], d["counts"], d.get("excluded", []), d.get("warnings", []))


def _record_dirs(root: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(root.rglob("*.otns")):
        rid = p.parent.relative_to(root).as_posix()
        out.setdefault(rid, p.parent)
    return out


def _load(d: Path, channel: str) -> np.ndarray | None:
    from ouro.otns import read_tensor

    p = d / f"{channel}.otns"
    if not p.exists():
        return None
    arr, _ = read_tensor(p)
    return decode_normal(arr) if channel == "normal" else arr


def _gt_mask(d: Path) -> set[str] | None:
    meta = d / "meta.json"
    if not meta.exists():
        return None
    mask = json.loads(meta.read_text()).get("mask")
    return None if mask is None else set(mask)


def _aligned(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    import torch

    from ouro.objectives import fit_affine

    g = torch.from_numpy(np.ascontiguousarray(gt, dtype=np.float64)).permute(2, 0, 1)
    p = torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float64)).permute(2, 0, 1)
    return fit_affine(p, g).apply(p).permute(1, 2, 0).numpy()


def _record_metrics(channel: str, gt: np.ndarray, pred: np.ndarray, backend: str | None) -> dict:
    if channel == "normal":
        err = angular_errors_deg(gt, pred)
        return {"_angles": err}
    m = {}
    if channel == "irradiance":
        m["psnr_raw"] = psnr(gt, pred)
        pred = _aligned(gt, pred)
    m["psnr"] = psnr(gt, pred)
    if "ssim" in CHANNEL_METRICS[channel]:
        m["ssim"] = ssim(gt, pred)
    if "si_rmse" in CHANNEL_METRICS[channel]:
        m["si_rmse"] = si_rmse(gt, pred)
    m["lpips"] = perceptual(gt, pred, backend)
    return m


def parse_channels(spec) -> list[str]:
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [SHORT_NAMES.get(s.strip(), s.strip()) for s in items if s.strip()]
    bad = [n for n in names if n not in CHANNEL_METRICS]
    if bad:
        raise MetricError(f"unknown channels {bad}; choose from {list(CHANNEL_METRICS)} or a,n,r,m,E,rgb")
    return names


def evaluate(pred_root, gt_root, channels=EVAL_ORDER, allow_unpaired: bool = False,
             backend: str | None = None) -> MetricReport:
    """Compare every prediction directory with its ground-truth twin.

    Records pair by relative path. Ground-truth records with no prediction are
    excluded with a warning; predictions with no ground truth are refused unless
    ``allow_unpaired``, which pairs both sides in sorted order instead.
    """
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    channels = parse_channels(channels)
    gt_dirs, pred_dirs = _record_dirs(gt_root), _record_dirs(pred_root)
    if not gt_dirs:
        raise MetricError(f"no records under {gt_root}")
    report = MetricReport(dataset=str(gt_root), model=str(pred_root))
    only_pred = sorted(set(pred_dirs) - set(gt_dirs))
    if only_pred:
        if not allow_unpaired:
            raise PairingError(only_pred, sorted(set(gt_dirs) - set(pred_dirs)))
        pairs = list(zip(sorted(gt_dirs), sorted(pred_dirs)))
        report.warnings.append(f"unpaired mode: {len(pairs)} records paired by sorted order")
    else:
        pairs = [(rid, rid) for rid in sorted(gt_dirs) if rid in pred_dirs]
        for rid in sorted(set(gt_dirs) - set(pred_dirs)):
            report.excluded.append(rid)
            report.warnings.append(f"no prediction for {rid}; excluded")

    for channel in channels:
        rows, images, pixels = [], 0, 0
        for gid, pid in pairs:
            mask = _gt_mask(gt_dirs[gid])
            if channel != "rgb" and mask is not None and channel not in mask:
                continue
            fname = "rgb" if channel == "rgb" else channel
            gt = _load(gt_dirs[gid], fname)
            pred = _load(pred_dirs[pid], fname)
            if gt is None:
                continue
            if pred is None:
                report.warnings.append(f"{pid} has no {channel} prediction; excluded")
                continue
            rows.append(_record_metrics(channel, gt, pred, backend))
            images += 1
            pixels += gt.shape[0] * gt.shape[1]
        if not rows:
            report.warnings.append(f"no evaluable pairs for {channel}")
            continue
        if channel == "normal":
            err = np.concatenate([r["_angles"].ravel() for r in rows])
            table = {"mean_deg": float(err.mean()),
                     "pct_below_11_25": float(100.0 * np.mean(err < ANGLE_THRESHOLD))}
        else:
            table = {}
            for k in CHANNEL_METRICS[channel]:
                vals = [r[k] for r in rows]
                table[k] = UNAVAILABLE if any(isinstance(v, str) for v in vals) else float(np.mean(vals))
        report.tables[channel] = table
        report.counts[channel] = {"images": images, "pixels": pixels}
    for w in report.warnings:
        warnings.warn(w, stacklevel=2)
    report.__post_init__()
    return report


def format_table(report: MetricReport) -> str:
    lines = [f"dataset: {report.dataset}", f"model:   {report.model}", ""]
    header = f"{'channel':<12}{'metric':<18}{'value':>12}{'images':>8}"
    lines += [header, "-" * len(header)]
    for ch, row in report.tables.items():
        n = report.counts.get(ch, {}).get("images", 0)
        for k, v in row.items():
            val = v if isinstance(v, str) else f"{v:.4f}"
            lines.append(f"{ch:<12}{k:<18}{val:>12}{n:>8}")
    if report.excluded:
        lines += ["", "excluded: " + ", ".join(report.excluded)]
    return "\n".join(lines) + "\n"


def render_report(report: MetricReport, plots_dir=None) -> str:
    """Plain-text table; with ``plots_dir`` also writes report.json, table.txt
    and one bar chart per metric."""
    text = format_table(report)
    if plots_dir is None:
        return text
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(plots_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(text, encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    metrics: dict[str, dict[str, float]] = {}
    for ch, row in report.tables.items():
        for k, v in row.items():
            if not isinstance(v, str):
                metrics.setdefault(k, {})[ch] = v
    for k, vals in metrics.items():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(list(vals), list(vals.values()), color="#4a7ab5")
        ax.set_title(k)
        ax.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        fig.savefig(out / f"{k}.png", dpi=80)
        plt.close(fig)
    return text


__all__ = [
    "CHANNELS", "MetricError", "MetricReport", "PairingError", "angular_stats", "evaluate", "format_table",
    "perceptual", "psnr", "register_backend", "render_report", "si_rmse", "ssim",
]
