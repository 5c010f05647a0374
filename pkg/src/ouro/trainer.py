"""Stage-1 single-direction fine-tuning, stage-2 joint cycle training, and
checkpoint I/O.

Every random draw in step ``k`` comes from ``default_rng([seed, k])``, so a run
resumed from a checkpoint at step ``k`` replays the uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from ouro import otns
from ouro.core import CHANNELS, DatasetRecord, Profile, TaskToken, list_records, read_record
from ouro.denoiser import Denoiser, ModelConfig, build_model
from ouro.diffusion import (
    Codec,
    ConfigurationError,
    DiffusionSchedule,
    NoiseSpec,
    batch_noise,
    condition_from_planes,
    image_condition,
    make_schedule,
    noise_target,
    v_to_z0,
)
from ouro.objectives import LossBreakdown, loss_cycle, loss_mse, task_loss

log = logging.getLogger(__name__)

WILD_CAPTION = "a photo"


class TrainingError(RuntimeError):
    pass


class CheckpointIntegrityError(RuntimeError):
    pass


# --- data -----------------------------------------------------------------

@dataclass
class TensorDataset:
    """Records stacked as ``N×C×H×W`` float32 tensors (normals as unit vectors)."""

    ids: list[str]
    rgb: torch.Tensor
    channels: dict[str, torch.Tensor]
    masks: torch.Tensor
    captions: list[str]
    profiles: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def wild(self) -> bool:
        return not bool(self.masks.any())

    @classmethod
    def from_records(cls, records: Iterable[DatasetRecord]) -> "TensorDataset":
        records = list(records)
        if not records:
            raise ValueError("empty dataset")

        def stack(arrs):
            return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()

        return cls(
            ids=[r.id for r in records],
            rgb=stack([r.rgb.data for r in records]),
            channels={c: stack([r.intrinsics.channel(c) for r in records]) for c in CHANNELS},
            masks=torch.tensor([[c in r.intrinsics.mask for c in CHANNELS] for r in records]),
            captions=[r.caption.text for r in records],
            profiles=[Profile(r.profile).value for r in records],
        )

    @classmethod
    def from_root(cls, root: str | os.PathLike, split: str | None = "train") -> "TensorDataset":
        paths = list_records(root, split)
        if not paths:
            raise FileNotFoundError(f"no records under {Path(root) / (split or '')}")
        return cls.from_records(read_record(p) for p in paths)

    def subset(self, idx) -> "TensorDataset":
        idx = [int(i) for i in idx]
        return TensorDataset([self.ids[i] for i in idx], self.rgb[idx],
                             {c: v[idx] for c, v in self.channels.items()}, self.masks[idx],
                             [self.captions[i] for i in idx], [self.profiles[i] for i in idx])


def to_latent(channel: str, x: torch.Tensor) -> torch.Tensor:
    """Decoded channel -> 3-plane latent target (normals encoded, scalars replicated)."""
    if channel == "normal":
        return (x + 1.0) * 0.5
    if x.shape[1] == 1:
        return x.expand(-1, 3, -1, -1)
    return x


def from_latent(channel: str, z: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`to_latent`; normals come back unnormalized."""
    if channel == "normal":
        return 2.0 * z - 1.0
    if channel in ("roughness", "metallicity"):
        return z.mean(1, keepdim=True)
    return z


def network_planes(channel: str, x: torch.Tensor) -> torch.Tensor:
    """Decoded channel -> X->RGB condition slot content."""
    return (x + 1.0) * 0.5 if channel == "normal" else x


def latent_to_planes(channel: str, z: torch.Tensor) -> torch.Tensor:
    """Predicted RGB->X latent -> X->RGB condition slot content (no re-quantization)."""
    return z.mean(1, keepdim=True) if channel in ("roughness", "metallicity") else z


# --- configuration --------------------------------------------------------

@dataclass
class DataSource:
    root: str
    split: str | None = "train"
    ratio: float = 1.0


@dataclass
class TrainConfig:
    direction: str = "rgb2x"  # rgb2x | x2rgb | joint
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    grad_clip: float = 1.0
    dropout_p: float = 0.3
    lambda_cyc: float = 1.0
    use_task_loss_in_cycle: bool = True
    detach_cycle: bool = False
    second_chain_input: str = "gt"  # gt | pred
    seed: int = 0
    datasets: list[DataSource] = field(default_factory=list)
    checkpoint_every: int = 0
    out_dir: str | None = None
    model: dict = field(default_factory=lambda: {"base_width": 16, "depth": 3})
    schedule: dict = field(default_factory=lambda: {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    noise: dict = field(default_factory=lambda: {"scales": [1, 2, 4, 8], "discount": 0.5})
    codec_factor: int = 1

    def __post_init__(self):
        self.datasets = [d if isinstance(d, DataSource) else DataSource(**d) for d in self.datasets]

    def validate(self, wild_flags: list[bool] | None = None) -> None:
        if self.direction not in ("rgb2x", "x2rgb", "joint"):
            raise ConfigurationError(f"unknown direction {self.direction!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1]")
        if self.second_chain_input not in ("gt", "pred"):
            raise ConfigurationError("second_chain_input must be 'gt' or 'pred'")
        if self.datasets:
            total = sum(d.ratio for d in self.datasets)
            if abs(total - 1.0) > 1e-6:
                raise ConfigurationError(f"dataset mixing ratios sum to {total}, expected 1")
        if wild_flags and any(wild_flags) and self.direction != "joint":
            raise ConfigurationError("wild (unannotated) data is only allowed in joint training")

    def to_json(self) -> dict:
        return asdict(self)

    def build_schedule(self) -> DiffusionSchedule:
        return make_schedule(**self.schedule)

    def build_noise(self) -> NoiseSpec:
        return NoiseSpec(tuple(self.noise["scales"]), float(self.noise["discount"]))


# --- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    model: Denoiser
    schedule: DiffusionSchedule
    noise: NoiseSpec
    codec: Codec = field(default_factory=Codec)
    optimizer_state: dict | None = None
    step: int = 0
    train_config: dict = field(default_factory=dict)
    log: list = field(default_factory=list, repr=False)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def direction(self) -> str:
        return self.model.config.direction

    def config_hash(self) -> str:
        blob = json.dumps({"model": self.config.to_json(), "schedule": self.schedule.to_json(),
                           "noise": {"scales": list(self.noise.scales), "discount": self.noise.discount},
                           "codec": self.codec.factor}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _param_files(directory: Path) -> list[Path]:
    return sorted((directory / "params").glob("*.otns"))


def _digest(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def save_checkpoint(c: Checkpoint, path: str | os.PathLike) -> Path:
    d = Path(path)
    (d / "params").mkdir(parents=True, exist_ok=True)
    for old in _param_files(d):
        old.unlink()
    for name, p in c.model.state_dict().items():
        otns.write_tensor(d / "params" / f"{name}.otns", p.detach().cpu().numpy(), name)
    buf = io.BytesIO()
    torch.save(c.optimizer_state or {}, buf)
    (d / "optim.bin").write_bytes(buf.getvalue())
    meta = {
        "format": "ouro-checkpoint/1",
        "direction": c.direction,
        "model_config": c.config.to_json(),
        "schedule": c.schedule.to_json(),
        "noise": c.noise.to_json(),
        "codec_factor": c.codec.factor,
        "step": c.step,
        "train_config": c.train_config,
        "optimizer": {"name": "Adam", "lr": c.train_config.get("lr"), "grad_clip": c.train_config.get("grad_clip")},
        "config_hash": c.config_hash(),
        "params_sha256": _digest(_param_files(d)),
        "optim_sha256": hashlib.sha256(buf.getvalue()).hexdigest(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_checkpoint(path: str | os.PathLike, allow_mismatch: bool = False) -> Checkpoint:
    d = Path(path)
    if not (d / "meta.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {d}")
    meta = json.loads((d / "meta.json").read_text())
    model = build_model(ModelConfig.from_json(meta["model_config"]))
    ns = meta["noise"]
    ckpt = Checkpoint(model, DiffusionSchedule.from_json(meta["schedule"]),
                      NoiseSpec(tuple(ns["scales"]), ns["discount"], ns.get("seed", 0)),
                      Codec(meta.get("codec_factor", 1)), None, int(meta["step"]), meta.get("train_config", {}))
    problems = []
    if ckpt.config_hash() != meta["config_hash"]:
        problems.append("config hash mismatch")
    if _digest(_param_files(d)) != meta["params_sha256"]:
        problems.append("parameter digest mismatch")
    optim_bytes = (d / "optim.bin").read_bytes()
    if hashlib.sha256(optim_bytes).hexdigest() != meta.get("optim_sha256"):
        problems.append("optimizer state digest mismatch")
    if problems and not allow_mismatch:
        raise CheckpointIntegrityError(f"{d}: {', '.join(problems)} (pass allow_mismatch=True to override)")
    state = {}
    for p in _param_files(d):
        arr, name = otns.read_tensor(p)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    ckpt.optimizer_state = torch.load(io.BytesIO(optim_bytes), weights_only=False) or None
    return ckpt


def new_checkpoint(cfg: TrainConfig, direction: str) -> Checkpoint:
    model = build_model(ModelConfig(direction=direction, **cfg.model), seed=cfg.seed)
    return Checkpoint(model, cfg.build_schedule(), cfg.build_noise(), Codec(cfg.codec_factor),
                      None, 0, cfg.to_json())


# --- per-step machinery ---------------------------------------------------

class _Logger:
    def __init__(self, path: Path | None):
        self.fh = open(path, "a") if path else None
        self.rows: list[dict] = []

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.fh:
            self.fh.write(json.dumps(row) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def _noise_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def _pick_source(rng: np.random.Generator, sources: list[TensorDataset], ratios: list[float]) -> int:
    if len(sources) == 1:
        return 0
    return int(rng.choice(len(sources), p=np.asarray(ratios) / np.sum(ratios)))


def _rgb2x_forward(ckpt: Checkpoint, rgb: torch.Tensor, targets: dict[str, torch.Tensor] | None,
                   items: list[tuple[int, str]], rng: np.random.Generator):
    """Run RGB->X on (record, channel) pairs. With ``targets`` the start latent
    is the target noised to ``t = T``; otherwise pure noise."""
    sched = ckpt.schedule
    T = sched.T
    idx = torch.tensor([i for i, _ in items], dtype=torch.long)
    cond = image_condition(rgb[idx], ckpt.codec).planes
    tokens = torch.tensor([TaskToken(c).index for _, c in items], dtype=torch.long)
    h, w = cond.shape[-2:]
    eps = batch_noise(len(items), 3, h, w, ckpt.noise, _noise_seeds(rng, len(items)))
    if targets is not None:
        z0 = torch.stack([ckpt.codec.encode(to_latent(c, targets[c][i:i + 1]))[0] for i, c in items])
        t = T
        assert t == sched.T, "single-step regime: training always uses t = T"
        zT = noise_target(z0, eps, t, sched)
    else:
        zT = eps
    v = ckpt.model(zT, cond, tokens)
    return ckpt.codec.decode(v_to_z0(zT, v, sched))


def _group(items, latents) -> dict[str, tuple[list[int], torch.Tensor]]:
    out: dict[str, tuple[list[int], list[torch.Tensor]]] = {}
    for k, (i, c) in enumerate(items):
        rows, zs = out.setdefault(c, ([], []))
        rows.append(i)
        zs.append(latents[k])
    return {c: (rows, torch.stack(zs)) for c, (rows, zs) in out.items()}


def _rgb2x_task_loss(ckpt, batch: TensorDataset, rng) -> tuple[LossBreakdown, dict]:
    items = [(i, c) for i in range(len(batch)) for j, c in enumerate(CHANNELS) if bool(batch.masks[i, j])]
    if not items:
        return LossBreakdown(), {}
    z0 = _rgb2x_forward(ckpt, batch.rgb, batch.channels, items, rng)
    out = LossBreakdown()
    preds = {}
    for c, (rows, z) in _group(items, z0).items():
        pred = from_latent(c, z)
        preds[c] = (rows, z)
        part = task_loss({c: pred}, {c: batch.channels[c][rows]}, torch.tensor([c == x for x in CHANNELS]))
        out = out.merge(part)
    return out, preds


def _x2rgb_forward(ckpt: Checkpoint, planes: dict[str, torch.Tensor], masks: torch.Tensor, captions: list[str],
                   dropout_p: float, rng, target_rgb: torch.Tensor | None):
    cond = condition_from_planes(planes, masks, dropout_p, rng, ckpt.codec)
    b, _, h, w = cond.planes.shape
    eps = batch_noise(b, 3, h, w, ckpt.noise, _noise_seeds(rng, b))
    if target_rgb is not None:
        zT = noise_target(ckpt.codec.encode(target_rgb), eps, ckpt.schedule.T, ckpt.schedule)
    else:
        zT = eps
    v = ckpt.model(zT, cond.planes, captions)
    return ckpt.codec.decode(v_to_z0(zT, v, ckpt.schedule))


def _x2rgb_loss(ckpt, batch: TensorDataset, dropout_p: float, rng) -> LossBreakdown:
    planes = {c: network_planes(c, batch.channels[c]) for c in CHANNELS}
    pred = _x2rgb_forward(ckpt, planes, batch.masks, batch.captions, dropout_p, rng, batch.rgb)
    return LossBreakdown({"rgb": loss_mse(batch.rgb, pred)})


def _check_finite(loss: torch.Tensor, step: int, last_good: str | None) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {last_good or 'none'}")


def _make_optimizer(ckpt: Checkpoint, lr: float) -> torch.optim.Optimizer:
    opt = torch.optim.Adam(ckpt.model.parameters(), lr=lr)
    if ckpt.optimizer_state:
        opt.load_state_dict(ckpt.optimizer_state)
        for g in opt.param_groups:
            g["lr"] = lr
    return opt


def _apply(opt, model, clip: float) -> None:
    if clip and clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    opt.step()


def _sample(ds: TensorDataset, rng, batch_size: int) -> TensorDataset:
    return ds.subset(rng.choice(len(ds), size=batch_size, replace=len(ds) < batch_size))


def _load_sources(cfg: TrainConfig, data) -> tuple[list[TensorDataset], list[float]]:
    if data is None:
        data = [TensorDataset.from_root(d.root, d.split) for d in cfg.datasets]
        ratios = [d.ratio for d in cfg.datasets]
    elif isinstance(data, TensorDataset):
        data, ratios = [data], [1.0]
    else:
        data = list(data)
        ratios = [d.ratio for d in cfg.datasets] if cfg.datasets else [1.0 / len(data)] * len(data)
    return data, ratios


# --- stage 1 --------------------------------------------------------------

def train_stage1(cfg: TrainConfig, data=None, resume: Checkpoint | None = None,
                 log_path: str | os.PathLike | None = None) -> Checkpoint:
    """Fine-tune one direction at the fixed terminal timestep.

    ``data`` is a TensorDataset, a list of them (mixed by ``cfg.datasets``
    ratios, else uniformly), or None to load ``cfg.datasets`` from disk.
    """
    sources, ratios = _load_sources(cfg, data)
    cfg.validate([s.wild for s in sources])
    if cfg.direction == "joint":
        raise ConfigurationError("train_stage1 needs direction rgb2x or x2rgb")
    ckpt = resume if resume is not None else new_checkpoint(cfg, cfg.direction)
    if ckpt.direction != cfg.direction:
        raise ConfigurationError(f"checkpoint direction {ckpt.direction} != {cfg.direction}")
    ckpt.train_config = cfg.to_json()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = _Logger(Path(log_path) if log_path else (out_dir / "train_log.jsonl" if out_dir else None))
    opt = _make_optimizer(ckpt, cfg.lr)
    model = ckpt.model.train()
    last_good = None
    try:
        for step in range(ckpt.step, cfg.steps):
            rng = step_rng(cfg.seed, step)
            batch = _sample(sources[_pick_source(rng, sources, ratios)], rng, cfg.batch_size)
            if cfg.direction == "rgb2x":
                losses, _ = _rgb2x_task_loss(ckpt, batch, rng)
            else:
                losses = _x2rgb_loss(ckpt, batch, cfg.dropout_p, rng)
            total = losses.total
            _check_finite(total, step + 1, last_good)
            opt.zero_grad(set_to_none=True)
            total.backward()
            _apply(opt, model, cfg.grad_clip)
            ckpt.step = step + 1
            logger.write({"step": ckpt.step, "direction": cfg.direction, "t": ckpt.schedule.T,
                          **losses.as_dict()})
            if cfg.checkpoint_every and out_dir and ckpt.step % cfg.checkpoint_every == 0:
                ckpt.optimizer_state = opt.state_dict()
                last_good = str(save_checkpoint(ckpt, out_dir / f"ckpt-{ckpt.step:06d}"))
    finally:
        logger.close()
    ckpt.optimizer_state = opt.state_dict()
    ckpt.model.eval()
    if out_dir:
        save_checkpoint(ckpt, out_dir / "final")
    ckpt.log = logger.rows
    return ckpt


# --- stage 2 --------------------------------------------------------------

def _full_planes(latents: dict[str, torch.Tensor], detach: bool) -> dict[str, torch.Tensor]:
    out = {c: latent_to_planes(c, z) for c, z in latents.items()}
    return {c: v.detach() for c, v in out.items()} if detach else out


def image_cycle(inv: Checkpoint, fwd: Checkpoint, rgb: torch.Tensor, rng, detach: bool = False):
    """``I -> X^ -> I~``: all five channels predicted, fed with a full mask and
    the generic wild caption. Returns ``(I~, X^ latents)``."""
    b = rgb.shape[0]
    items = [(i, c) for i in range(b) for c in CHANNELS]
    z = _rgb2x_forward(inv, rgb, None, items, rng)
    latents = {c: zs for c, (rows, zs) in _group(items, z).items()}
    full = torch.ones(b, len(CHANNELS), dtype=torch.bool)
    recon = _x2rgb_forward(fwd, _full_planes(latents, detach), full, [WILD_CAPTION] * b, 0.0, rng, None)
    return recon, latents


def train_cycle(cfg: TrainConfig, ckpt_rgb2x: Checkpoint, ckpt_x2rgb: Checkpoint,
                annotated=None, wild=None, log_path: str | os.PathLike | None = None):
    """Joint optimization of both directions with task and cycle losses.

    Annotated batches use both chains ``I -> X^ -> I~`` and ``X -> I^ -> X~``;
    wild batches only the image chain. Batches are drawn from annotated and
    wild pools by ``cfg.datasets`` ratios (default 2:1).
    """
    inv, fwd = ckpt_rgb2x, ckpt_x2rgb
    if inv.direction != "rgb2x" or fwd.direction != "x2rgb":
        raise ConfigurationError("train_cycle expects (rgb2x, x2rgb) checkpoints")
    if inv.schedule != fwd.schedule or inv.codec != fwd.codec or inv.noise != fwd.noise:
        raise ConfigurationError("checkpoints disagree on schedule, noise or codec")
    if annotated is None and wild is None:
        sources, ratios = _load_sources(cfg, None)
    else:
        sources, ratios = [], []
        ann = [annotated] if isinstance(annotated, TensorDataset) else list(annotated or [])
        wl = [wild] if isinstance(wild, TensorDataset) else list(wild or [])
        if cfg.datasets and len(cfg.datasets) == len(ann) + len(wl):
            ratios = [d.ratio for d in cfg.datasets]
        else:
            share_a = (2.0 / 3.0 if wl else 1.0) if ann else 0.0
            ratios = [share_a / max(len(ann), 1)] * len(ann) + [(1.0 - share_a) / max(len(wl), 1)] * len(wl)
        sources = ann + wl
    cfg.validate([s.wild for s in sources])
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = _Logger(Path(log_path) if log_path else (out_dir / "cycle_log.jsonl" if out_dir else None))
    opt_inv = _make_optimizer(inv, cfg.lr)
    opt_fwd = _make_optimizer(fwd, cfg.lr)
    inv.model.train()
    fwd.model.train()
    start = max(inv.step, fwd.step)
    stage2_step = 0
    last_good = None
    try:
        for stage2_step in range(cfg.steps):
            global_step = start + stage2_step
            rng = step_rng(cfg.seed, global_step)
            src = sources[_pick_source(rng, sources, ratios)]
            batch = _sample(src, rng, cfg.batch_size)
            losses = cycle_losses(inv, fwd, batch, cfg, rng)
            total = losses.total
            _check_finite(total, global_step + 1, last_good)
            opt_inv.zero_grad(set_to_none=True)
            opt_fwd.zero_grad(set_to_none=True)
            total.backward()
            _apply(opt_inv, inv.model, cfg.grad_clip)
            _apply(opt_fwd, fwd.model, cfg.grad_clip)
            inv.step = fwd.step = global_step + 1
            logger.write({"step": global_step + 1, "direction": "joint",
                          "source": "wild" if src.wild else "annotated", **losses.as_dict()})
            if cfg.checkpoint_every and out_dir and (stage2_step + 1) % cfg.checkpoint_every == 0:
                inv.optimizer_state, fwd.optimizer_state = opt_inv.state_dict(), opt_fwd.state_dict()
                save_checkpoint(inv, out_dir / f"rgb2x-{inv.step:06d}")
                last_good = str(save_checkpoint(fwd, out_dir / f"x2rgb-{fwd.step:06d}"))
    finally:
        logger.close()
    inv.optimizer_state, fwd.optimizer_state = opt_inv.state_dict(), opt_fwd.state_dict()
    inv.train_config = fwd.train_config = cfg.to_json()
    inv.model.eval()
    fwd.model.eval()
    if out_dir:
        save_checkpoint(inv, out_dir / "rgb2x-final")
        save_checkpoint(fwd, out_dir / "x2rgb-final")
    inv.log = fwd.log = logger.rows
    return inv, fwd


def cycle_losses(inv: Checkpoint, fwd: Checkpoint, batch: TensorDataset, cfg: TrainConfig, rng) -> LossBreakdown:
    lam = cfg.lambda_cyc
    weights = {"cycle_x": lam, "cycle_i": lam}
    out = LossBreakdown(weights=dict(weights))
    if batch.wild:
        if lam > 0:
            recon, _ = image_cycle(inv, fwd, batch.rgb, rng, cfg.detach_cycle)
            _, cycle_i = loss_cycle(None, None, batch.rgb, recon, batch.masks)
            out.components["cycle_i"] = cycle_i
        return out

    # I -> X^ -> I~ ; X^ also carries the RGB->X task loss on annotated channels
    latents = None
    if lam > 0 or cfg.use_task_loss_in_cycle or cfg.second_chain_input == "pred":
        recon, latents = image_cycle(inv, fwd, batch.rgb, rng, cfg.detach_cycle)
        if cfg.use_task_loss_in_cycle:
            for i, c in enumerate(CHANNELS):
                rows = batch.masks[:, i]
                if bool(rows.any()):
                    part = task_loss({c: from_latent(c, latents[c][rows])}, {c: batch.channels[c][rows]},
                                     torch.tensor([c == x for x in CHANNELS]))
                    out = out.merge(part)
        if lam > 0:
            out.components["cycle_i"] = loss_mse(batch.rgb, recon)
    if lam <= 0 and not cfg.use_task_loss_in_cycle:
        return out

    # X -> I^ -> X~
    if cfg.second_chain_input == "gt":
        planes = {c: network_planes(c, batch.channels[c]) for c in CHANNELS}
    else:
        planes = _full_planes(latents, cfg.detach_cycle)
    target = batch.rgb if cfg.use_task_loss_in_cycle else None
    i_hat = _x2rgb_forward(fwd, planes, batch.masks, batch.captions, cfg.dropout_p, rng, target)
    if cfg.use_task_loss_in_cycle:
        out.components["rgb"] = loss_mse(batch.rgb, i_hat)
    if lam > 0:
        items = [(i, c) for i in range(len(batch)) for j, c in enumerate(CHANNELS) if bool(batch.masks[i, j])]
        src = i_hat.detach() if cfg.detach_cycle else i_hat
        z = _rgb2x_forward(inv, src, None, items, rng)
        x_cyc = {c: torch.zeros_like(to_latent(c, batch.channels[c])) for c in CHANNELS}
        x_gt = {c: to_latent(c, batch.channels[c]) for c in CHANNELS}
        for k, (i, c) in enumerate(items):
            x_cyc[c] = x_cyc[c].index_put((torch.tensor([i]),), z[k:k + 1])
        cycle_x, _ = loss_cycle(x_gt, x_cyc, None, None, batch.masks)
        out.components["cycle_x"] = cycle_x
    return out


# --- evaluation helpers ---------------------------------------------------

@torch.no_grad()
def cycle_errors(inv: Checkpoint, fwd: Checkpoint, rgb: torch.Tensor, seed: int = 0) -> np.ndarray:
    """Per-image ``cycle_i`` of the composition ``I -> X^ -> I~`` with fixed noise."""
    errs = []
    for k in range(rgb.shape[0]):
        recon, _ = image_cycle(inv, fwd, rgb[k:k + 1], step_rng(seed, k))
        errs.append(float(loss_mse(rgb[k:k + 1], recon)))
    return np.asarray(errs)


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")

