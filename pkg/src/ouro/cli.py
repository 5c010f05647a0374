"""``ouro`` command line: data generation, training, inference, evaluation.

Exit codes: 0 success, 1 invalid input (bad flags, config, pairing), 2 runtime
failure (missing files, training divergence). Every command writes a
``provenance.json`` recording argv, resolved config, seed, versions and wall
time; re-running its argv reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
import time
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

log = logging.getLogger("ouro")

# --- config schema --------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "seed": _INT,
    "out": _STR,
    "quiet": _BOOL,
    "sceneforge": _obj({"profile": {"enum": ["indoor-like", "city-like", "wild"]}, "count": _INT, "res": _INT,
                        "split": _STR, "previews": _BOOL, "workers": _INT}),
    "trainer": _obj({
        "direction": {"enum": ["rgb2x", "x2rgb", "joint"]}, "steps": _INT, "batch_size": _INT, "lr": _NUM,
        "grad_clip": _NUM, "dropout_p": _NUM, "lambda_cyc": _NUM, "use_task_loss_in_cycle": _BOOL,
        "detach_cycle": _BOOL, "second_chain_input": {"enum": ["gt", "pred"]}, "seed": _INT,
        "datasets": {"type": "array", "items": {**_obj({"root": _STR, "split": {"type": ["string", "null"]},
                                                        "ratio": _NUM}), "required": ["root"]}},
        "checkpoint_every": _INT, "out_dir": {"type": ["string", "null"]},
        "model": _obj({"base_width": _INT, "depth": _INT, "attention_at": {"type": ["array", "null"], "items": _INT},
                       "embed_dim": _INT, "heads": _INT, "groups": _INT, "caption_buckets": _INT,
                       "max_mult": _INT}),
        "schedule": _obj({"T": _INT, "beta_start": _NUM, "beta_end": _NUM}),
        "noise": _obj({"scales": {"type": "array", "items": _INT}, "discount": _NUM}),
        "codec_factor": _INT,
    }),
    "temporal": _obj({"window_size": _INT, "stride": _INT, "gamma": _NUM}),
    "evalkit": _obj({"channels": _STR, "allow_unpaired": _BOOL}),
})


class UsageError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise UsageError(f"{p}: {where}: {exc.message}") from exc
    return cfg


# --- parser ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="global seed", **({"default": None} if not suppress else d))
    p.add_argument("--config", help="JSON run config", **({"default": None} if not suppress else d))
    p.add_argument("--out", help="output directory (or file for eval)", **({"default": None} if not suppress else d))
    p.add_argument("--quiet", action="store_true", help="warnings only", **({"default": False} if not suppress else d))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ouro", description="Cycle-consistent single-step diffusion for inverse and forward rendering.")
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a procedural dataset")
    g.add_argument("--profile", choices=["indoor-like", "city-like", "wild"])
    g.add_argument("--count", type=int)
    g.add_argument("--res", type=int)
    g.add_argument("--split")
    g.add_argument("--previews", action="store_true", default=None)
    g.add_argument("--workers", type=int)

    t = sub.add_parser("train", help="stage-1 training of one direction")
    t.add_argument("--direction", choices=["rgb2x", "x2rgb"])
    t.add_argument("--data", action="append", help="dataset root (repeatable; mixed uniformly)")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")

    c = sub.add_parser("train-cycle", help="joint cycle-consistency training")
    c.add_argument("--inv", required=True, help="rgb2x checkpoint")
    c.add_argument("--fwd", required=True, help="x2rgb checkpoint")
    c.add_argument("--annotated", action="append", help="annotated dataset root")
    c.add_argument("--wild", action="append", help="unannotated dataset root")
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--lambda-cyc", type=float)

    i = sub.add_parser("infer", help="single-step inference")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True, help="image file, record directory or dataset root")
    i.add_argument("--tokens", help="rgb2x: comma-separated channels (default: all five)")
    i.add_argument("--caption", help="x2rgb: caption (default: the record's own)")
    i.add_argument("--use", help="x2rgb: restrict conditioning to these channels")

    v = sub.add_parser("infer-video", help="windowed video inference")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--frames", required=True, help="directory of numbered PNG/OTNS frames")
    v.add_argument("--task", required=True)
    v.add_argument("--window", type=int)
    v.add_argument("--stride", type=int)
    v.add_argument("--gamma", type=float)

    e = sub.add_parser("eval", help="metrics of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--channels")
    e.add_argument("--allow-unpaired", action="store_true", default=None)

    r = sub.add_parser("report", help="render a report to text and plots")
    r.add_argument("report")
    r.add_argument("--plots")

    for p in (g, t, c, i, v, e, r):
        _globals(p, suppress=True)
    return ap


# --- helpers --------------------------------------------------------------

def _pick(flag, block: dict, key: str, default):
    if flag is not None:
        return flag
    return block.get(key, default)


def _versions() -> dict:
    import torch

    from ouro import __version__

    return {"ouro": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def _write_provenance(path: Path, argv: list[str], command: str, config: dict, seed, started: float,
                      extra: dict | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "argv": list(argv), "config": config, "seed": seed, "versions": _versions(),
              "wall_time_s": round(time.time() - started, 4), **(extra or {})}
    path.write_text(json.dumps(record, indent=2, default=str))
    return path


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def read_image(path: Path) -> np.ndarray:
    from ouro.otns import read_tensor

    if path.suffix.lower() == ".otns":
        arr, _ = read_tensor(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise UsageError(f"{path}: expected an H×W×3 image, got {arr.shape}")
    return arr


def _save_map(d: Path, stem: str, channel: str, arr: np.ndarray) -> None:
    from PIL import Image

    from ouro.core import encode_normal, to_png
    from ouro.otns import write_tensor

    stored = encode_normal(arr) if channel == "normal" else arr
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / f"{stem}.otns", stored, channel)
    preview = stored if channel != "irradiance" else stored / max(float(stored.max()), 1e-6)
    Image.fromarray(to_png(preview)).save(d / f"{stem}.png")


def _numeric_key(p: Path):
    nums = re.findall(r"\d+", p.stem)
    return (int(nums[-1]) if nums else float("inf"), p.name)


# --- commands -------------------------------------------------------------

def cmd_gen_data(args, cfg: dict) -> dict:
    from ouro.sceneforge import build_dataset

    block = cfg.get("sceneforge", {})
    out = _require_out(args)
    profile = _pick(args.profile, block, "profile", None)
    count = _pick(args.count, block, "count", None)
    if profile is None or count is None:
        raise UsageError("gen-data needs --profile and --count")
    if count < 1:
        raise UsageError("--count must be >= 1")
    resolved = {"profile": profile, "count": count, "seed": args.seed or 0,
                "res": _pick(args.res, block, "res", 64), "split": _pick(args.split, block, "split", "train"),
                "previews": bool(_pick(args.previews, block, "previews", False)),
                "workers": _pick(args.workers, block, "workers", 1)}
    manifest = build_dataset(count, resolved["seed"], out, profile, resolved["res"], resolved["split"],
                             previews=resolved["previews"], workers=resolved["workers"])
    log.info("wrote %d records to %s", len(manifest), out)
    return {"config": resolved, "provenance": out / "provenance.json"}


def _train_config(args, cfg: dict, **overrides):
    from ouro.trainer import TrainConfig

    block = dict(cfg.get("trainer", {}))
    for key, value in overrides.items():
        if value is not None:
            block[key] = value
    if args.seed is not None:
        block["seed"] = args.seed
    if args.out:
        block["out_dir"] = args.out
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(block) - known
    if unknown:
        raise UsageError(f"unknown trainer keys {sorted(unknown)}")
    tc = TrainConfig(**block)
    if not tc.out_dir:
        raise UsageError("training needs --out (or trainer.out_dir)")
    return tc


def cmd_train(args, cfg: dict) -> dict:
    from ouro.trainer import DataSource, load_checkpoint, train_stage1

    datasets = None
    if args.data:
        datasets = [DataSource(root, "train", 1.0 / len(args.data)).__dict__ for root in args.data]
    tc = _train_config(args, cfg, direction=args.direction, steps=args.steps, lr=args.lr,
                       batch_size=args.batch_size, datasets=datasets)
    if tc.direction not in ("rgb2x", "x2rgb"):
        raise UsageError("train needs --direction rgb2x or x2rgb")
    if not tc.datasets:
        raise UsageError("train needs --data or trainer.datasets")
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train_stage1(tc, resume=resume)
    out = Path(tc.out_dir)
    log.info("trained %s for %d steps; checkpoint %s", tc.direction, ckpt.step, out / "final")
    return {"config": tc.to_json(), "provenance": out / "provenance.json",
            "extra": {"checkpoint": str(out / "final"), "final_loss": ckpt.log[-1]["total"] if ckpt.log else None}}


def cmd_train_cycle(args, cfg: dict) -> dict:
    from ouro.trainer import TensorDataset, load_checkpoint, train_cycle

    tc = _train_config(args, cfg, direction="joint", steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                       lambda_cyc=args.lambda_cyc)
    inv, fwd = load_checkpoint(args.inv), load_checkpoint(args.fwd)
    if args.annotated or args.wild:
        ann = [TensorDataset.from_root(r, "train") for r in args.annotated or []]
        wild = [TensorDataset.from_root(r, "train") for r in args.wild or []]
        train_cycle(tc, inv, fwd, ann, wild)
    elif tc.datasets:
        train_cycle(tc, inv, fwd)
    else:
        raise UsageError("train-cycle needs --annotated/--wild or trainer.datasets")
    out = Path(tc.out_dir)
    return {"config": tc.to_json(), "provenance": out / "provenance.json",
            "extra": {"checkpoints": [str(out / "rgb2x-final"), str(out / "x2rgb-final")]}}


def _infer_one(ckpt, src: Path, dst: Path, args, seed: int) -> int:
    from ouro.core import ChannelMask, read_record
    from ouro.inference import channel_list, infer_channels, infer_rgb

    requested = 0
    if ckpt.direction == "rgb2x":
        if args.caption:
            raise UsageError("--caption is for x2rgb checkpoints; rgb2x takes --tokens")
        rgb = read_image(src / "rgb.otns") if src.is_dir() else read_image(src)
        tokens = channel_list(args.tokens or "albedo,normal,roughness,metallicity,irradiance")
        if "rgb" in tokens or not tokens:
            raise UsageError("rgb2x tokens must be intrinsic channels")
        for tok in tokens:
            t0 = time.perf_counter()
            out = infer_channels(ckpt, rgb, [tok], seed)
            _save_map(dst, tok, tok, out[tok])
            log.info("%s: %s in %.1f ms", src.name, tok, 1000 * (time.perf_counter() - t0))
        requested = len(tokens)
    else:
        if not src.is_dir():
            raise UsageError("x2rgb input must be a record directory with intrinsic channels")
        rec = read_record(src)
        x = rec.intrinsics
        if args.use:
            use = set(channel_list(args.use))
            x = x.masked(ChannelMask.of([c for c in x.mask.present() if c in use]))
        t0 = time.perf_counter()
        rgb = infer_rgb(ckpt, x, args.caption or rec.caption.text, seed)
        _save_map(dst, "rgb", "rgb", rgb)
        log.info("%s: rgb in %.1f ms", src.name, 1000 * (time.perf_counter() - t0))
        requested = 1
    return requested


def cmd_infer(args, cfg: dict) -> dict:
    from ouro.core import list_records
    from ouro.trainer import load_checkpoint

    out = _require_out(args)
    ckpt = load_checkpoint(args.ckpt)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    if ckpt.direction == "x2rgb" and args.tokens:
        raise UsageError("--tokens is for rgb2x checkpoints; x2rgb takes --caption")
    seed = args.seed or 0
    if src.is_dir() and not (src / "meta.json").exists() and not (src / "rgb.otns").exists():
        jobs = [(d, out / d.relative_to(src)) for d in list_records(src)]
        if not jobs:
            raise UsageError(f"no records under {src}")
    else:
        jobs = [(src, out)]
    before = ckpt.model.eval_count
    requested = sum(_infer_one(ckpt, s, d, args, seed) for s, d in jobs)
    evaluations = ckpt.model.eval_count - before
    log.info("%d output maps, %d network evaluations", requested, evaluations)
    if evaluations != requested:
        raise RuntimeError(f"expected one network evaluation per output map, got {evaluations} for {requested}")
    return {"config": {"ckpt": args.ckpt, "input": args.input, "tokens": args.tokens, "caption": args.caption,
                       "use": args.use}, "provenance": out / "provenance.json",
            "extra": {"outputs_requested": requested, "network_evaluations": evaluations}}


def cmd_infer_video(args, cfg: dict) -> dict:
    from ouro.core import TaskToken
    from ouro.denoiser import inflate_temporal
    from ouro.temporal import VideoConfig, infer_video
    from ouro.trainer import load_checkpoint

    out = _require_out(args)
    block = cfg.get("temporal", {})
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.direction != "rgb2x":
        raise UsageError("infer-video runs rgb2x checkpoints on RGB frames")
    task = TaskToken.parse(args.task)
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory not found: {frames_dir}")
    paths = sorted([p for p in frames_dir.iterdir() if p.suffix.lower() in (".png", ".otns")], key=_numeric_key)
    if not paths:
        raise UsageError(f"no PNG or OTNS frames in {frames_dir}")
    vcfg = VideoConfig(_pick(args.window, block, "window_size", 8), _pick(args.stride, block, "stride", 4),
                       _pick(args.gamma, block, "gamma", 0.1), args.seed or 0)
    frames = [read_image(p) for p in paths]
    video = inflate_temporal(ckpt.model)
    res = infer_video(video, frames, task, vcfg, ckpt.schedule, ckpt.noise, ckpt.codec)
    for p, arr in zip(paths, res.outputs):
        _save_map(out, p.stem, task.value, arr)
    log.info("%d frames in %d windows", len(paths), len(res.plan.windows))
    return {"config": {"window_size": vcfg.window_size, "stride": vcfg.stride, "gamma": vcfg.gamma,
                       "task": task.value, "frames": str(frames_dir)},
            "provenance": out / "provenance.json",
            "extra": {"windows": [list(w) for w in res.plan.windows],
                      "network_evaluations": video.eval_count}}


def cmd_eval(args, cfg: dict) -> dict:
    from ouro.evalkit import EVAL_ORDER, evaluate, format_table

    block = cfg.get("evalkit", {})
    channels = _pick(args.channels, block, "channels", ",".join(EVAL_ORDER))
    unpaired = bool(_pick(args.allow_unpaired, block, "allow_unpaired", False))
    report = evaluate(args.pred, args.gt, channels, allow_unpaired=unpaired)
    text = format_table(report)
    if not args.quiet:
        print(text, end="")
    prov = None
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_json(), indent=2))
        prov = out.with_name(out.stem + ".provenance.json")
    return {"config": {"pred": args.pred, "gt": args.gt, "channels": channels, "allow_unpaired": unpaired},
            "provenance": prov}


def cmd_report(args, cfg: dict) -> dict:
    from ouro.evalkit import MetricReport, render_report

    p = Path(args.report)
    if not p.is_file():
        raise FileNotFoundError(f"report not found: {p}")
    report = MetricReport.from_json(json.loads(p.read_text()))
    plots = args.plots or args.out
    text = render_report(report, plots)
    if not args.quiet:
        print(text, end="")
    return {"config": {"report": str(p), "plots": plots},
            "provenance": Path(plots) / "provenance.json" if plots else None}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-cycle": cmd_train_cycle,
    "infer": cmd_infer,
    "infer-video": cmd_infer_video,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    from ouro.core import ValidationError
    from ouro.diffusion import ConfigurationError
    from ouro.evalkit import MetricError

    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(message)s", force=True)
        cfg = load_config(args.config)
        if args.seed is None and "seed" in cfg:
            args.seed = cfg["seed"]
        if args.out is None and "out" in cfg:
            args.out = cfg["out"]
        args.quiet = args.quiet or cfg.get("quiet", False)
        result = COMMANDS[args.command](args, cfg)
        if result.get("provenance"):
            _write_provenance(Path(result["provenance"]), argv, args.command, result["config"], args.seed,
                              started, result.get("extra"))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ValidationError, ConfigurationError, MetricError) as exc:
        print(f"ouro: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"ouro: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def replay(provenance_path) -> int:
    """Re-run the command recorded in a provenance file."""
    record = json.loads(Path(provenance_path).read_text())
    return main(record["argv"])


if __name__ == "__main__":
    sys.exit(main())
