"""Command-line interface: ``rdcodec <command> ...``.

Failures exit nonzero and print one JSON object on stderr with ``error``,
``message`` and ``exit_code``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .autoencoder import CodecConfig
from .codec import (
    CheckpointError,
    CompatibilityError,
    ResidualDiffusionCodec,
    compress,
    decompress,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .coding import BitstreamError, VersionMismatchError, read_bitstream
from .evaluation import METRICS, curves_from_csvs, eval_run, write_rd_report
from .io import list_images, load_frames, load_image, save_image, save_png_sequence
from .metrics import LPIPSAdapter, MetricUnavailable
from .sampling import SamplerConfig, SamplingError
from .training import NonFiniteLossError, Trainer, TrainPlan, random_crops
from .video import VIDEO_SAMPLER, enhance_video, load_backbone, load_video_model

RUN_CONFIG_VERSION = 1
RUN_CONFIG_NAME = "run_config.json"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG_MISMATCH = 4
EXIT_VERSION_MISMATCH = 5
EXIT_CORRUPT_STREAM = 6
EXIT_NUMERICAL = 7
EXIT_METRIC_UNAVAILABLE = 8


@dataclass
class RunConfig:
    """Everything a command needs to be rerun; written to each output directory."""

    command: str = ""
    data: str | None = None
    checkpoint: str | None = None
    output: str | None = None
    codec: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    seed: int = 0
    steps: int | None = None
    version: int = RUN_CONFIG_VERSION

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as f:
            d = json.load(f)
        version = d.get("version", RUN_CONFIG_VERSION)
        if version != RUN_CONFIG_VERSION:
            raise VersionMismatchError(f"run config version {version}, expected {RUN_CONFIG_VERSION}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / RUN_CONFIG_NAME
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
        return path


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return path


def _sampler(args, steps: int, gamma: float) -> SamplerConfig:
    """Flags win over the given defaults."""
    return SamplerConfig(num_steps=args.steps if args.steps is not None else steps,
                         gamma=args.gamma if args.gamma is not None else gamma)


def _out_dir(path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> dict:
    cfg = RunConfig.load(_require(args.config)) if args.config else RunConfig()
    cfg.command = "train"
    for name in ("data", "output", "seed", "steps"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if not cfg.data or not cfg.output:
        raise ValueError("training needs a data directory and an output directory")
    out = _out_dir(cfg.output)
    torch.manual_seed(cfg.seed)

    plan = TrainPlan.from_dict(cfg.train)
    ckpt_path = out / "checkpoint.pt"
    resume = args.resume or cfg.checkpoint
    if resume:
        blob = read_checkpoint(_require(resume))
        model = ResidualDiffusionCodec(CodecConfig.from_dict(blob["config"]))
        model.load_state_dict(blob["weights"])
    else:
        model = ResidualDiffusionCodec(CodecConfig.from_dict(cfg.codec))
    cfg.codec = model.config.to_dict()
    cfg.train = plan.to_dict()
    cfg.save(out)

    images = [load_image(p) for p in list_images(_require(cfg.data))]
    trainer = Trainer(model, plan, seed=cfg.seed, log_path=out / "train_log.csv")
    if resume and blob["extra"].get("trainer"):
        trainer.load_state_dict(blob["extra"]["trainer"], blob.get("ema"))
    total = cfg.steps if cfg.steps is not None else plan.scaled(plan.total_steps)
    batches = random_crops(images, plan.crop_size, plan.batch_size, trainer.generator,
                           model.config.hyper_factor)
    remaining = max(0, total - trainer.step)
    history = trainer.fit(batches, remaining)
    trainer.close()
    save_checkpoint(ckpt_path, model, trainer.ema.shadow, {"trainer": trainer.state_dict()})
    last = dataclasses.asdict(history[-1]) if history else {}
    return {"checkpoint": str(ckpt_path), "steps": trainer.step, "last": last}


def cmd_compress(args) -> dict:
    model = load_checkpoint(_require(args.checkpoint))
    out = _out_dir(args.out_dir)
    rows = []
    for src in args.inputs:
        x = load_image(_require(src))
        data = compress(x, model).to_bytes()
        dst = out / (Path(src).stem + ".rdc")
        dst.write_bytes(data)
        pixels = x.shape[1] * x.shape[2]
        rows.append({"input": str(src), "output": str(dst), "width": x.shape[2], "height": x.shape[1],
                     "bytes": len(data), "bpp": 8 * len(data) / pixels})
    with open(out / "compress_report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["input", "output", "width", "height", "bytes", "bpp"])
        w.writeheader()
        w.writerows(rows)
    RunConfig(command="compress", checkpoint=str(args.checkpoint), output=str(out),
              data=",".join(map(str, args.inputs))).save(out)
    return {"files": rows}


def cmd_decompress(args) -> dict:
    model = load_checkpoint(_require(args.checkpoint))
    out = _out_dir(args.out_dir)
    written, used = [], []
    for src in args.inputs:
        bs = read_bitstream(_require(src).read_bytes())
        # flags win; anything not given comes from the stream header
        cfg = _sampler(args, bs.header.steps, bs.header.gamma)
        generator = torch.Generator().manual_seed(args.seed)
        x = decompress(bs, model, cfg, generator)
        dst = out / (Path(src).stem + ".png")
        save_image(x, dst)
        written.append(str(dst))
        used.append(dataclasses.asdict(cfg))
    sampler = used[0] if all(u == used[0] for u in used) else {"per_file": used}
    RunConfig(command="decompress", checkpoint=str(args.checkpoint), output=str(out),
              data=",".join(map(str, args.inputs)), seed=args.seed, sampler=sampler).save(out)
    return {"files": written, "sampler": used}


def _lpips_if_requested(metrics: list[str]):
    if "lpips" not in metrics:
        return None
    return LPIPSAdapter()


def cmd_eval(args) -> dict:
    model = load_checkpoint(_require(args.checkpoint))
    metrics = args.metrics.split(",")
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    cfg = _sampler(args, model.config.default_steps, model.config.default_gamma)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    label = args.label or Path(args.checkpoint).stem
    result = eval_run(model, _require(args.dataset), cfg, out_csv, args.seed, label,
                      lpips=_lpips_if_requested(metrics), workers=args.workers)
    RunConfig(command="eval", data=str(args.dataset), checkpoint=str(args.checkpoint),
              output=str(out_csv), seed=args.seed, sampler=dataclasses.asdict(cfg)).save(out_csv.parent)
    return {"csv": str(out_csv), "aggregate": result.aggregate}


def cmd_rdcurve(args) -> dict:
    curves = curves_from_csvs([_require(p) for p in args.csvs])
    out = _out_dir(args.out_dir)
    written = write_rd_report(curves, args.reference, out, args.metrics.split(","))
    RunConfig(command="rdcurve", data=",".join(args.csvs), output=str(out)).save(out)
    return {k: str(v) for k, v in written.items()}


def cmd_video_enhance(args) -> dict:
    frames = load_frames(_require(args.frames))
    backbone = load_backbone(_require(args.backbone))
    model = load_video_model(_require(args.denoiser))
    cfg = _sampler(args, VIDEO_SAMPLER.num_steps, VIDEO_SAMPLER.gamma)
    out = _out_dir(args.out_dir)
    generator = torch.Generator().manual_seed(args.seed)
    result = enhance_video(frames, backbone, model, cfg, generator)
    save_png_sequence(result.frames, out)
    rows = [dataclasses.asdict(r) for r in result.records]
    with open(out / "frames.csv", "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]))
        w.writeheader()
        w.writerows({k: ("" if v is None else v) for k, v in r.items()} for r in rows)
    RunConfig(command="video-enhance", data=str(args.frames), output=str(out), seed=args.seed,
              checkpoint=f"{args.backbone},{args.denoiser}", sampler=dataclasses.asdict(cfg)).save(out)
    return {"frames": len(rows), "csv": str(out / "frames.csv")}


# ---------------------------------------------------------------------------
# parser


def _sampler_flags(p: argparse.ArgumentParser, steps_help: str, gamma_help: str) -> None:
    p.add_argument("--steps", type=int, default=None, help=steps_help)
    p.add_argument("--gamma", type=float, default=None, help=gamma_help)
    p.add_argument("--seed", type=int, default=0, help="seed for the start noise (default 0)")


class _Parser(argparse.ArgumentParser):
    """Usage errors are reported in the same JSON shape as runtime errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        json.dump({"error": "usage", "message": message, "exit_code": EXIT_USAGE}, sys.stderr)
        sys.stderr.write("\n")
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rdcodec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec from a JSON run config")
    p.add_argument("config", nargs="?", help="run config JSON (flags below override it)")
    p.add_argument("--data", help="directory of training images")
    p.add_argument("--output", help="output directory for checkpoint, log and config")
    p.add_argument("--steps", type=int, help="number of optimizer steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="write one .rdc bitstream per input image")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode .rdc bitstreams to PNG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    _sampler_flags(p, "sampling steps (default: stream header, normally 100)",
                   "start-noise scale (default: stream header, normally 0.8)")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory of images")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="per-image CSV path")
    p.add_argument("--metrics", default="psnr,ms_ssim,grad_perceptual",
                   help=f"comma separated subset of {','.join(METRICS)}; lpips needs the lpips package")
    p.add_argument("--label", help="curve label (default: checkpoint file name)")
    p.add_argument("--workers", type=int, default=1)
    _sampler_flags(p, "sampling steps (default 100)", "start-noise scale (default 0.8)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rdcurve", help="merge eval CSVs into RD curves and a BD-rate table")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--reference", help="label of the anchor curve for BD-rate")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metrics", default="psnr,ms_ssim")
    p.set_defaults(func=cmd_rdcurve)

    p = sub.add_parser("video-enhance", help="code a frame sequence and enhance it")
    p.add_argument("frames", help="directory of PNG frames or a .yuv file with a .json sidecar")
    p.add_argument("--backbone", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--out-dir", required=True)
    _sampler_flags(p, "sampling steps (default 10)", "start-noise scale (default 0.1)")
    p.set_defaults(func=cmd_video_enhance)
    return parser


def _classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, FileNotFoundError):
        return "missing_file", EXIT_MISSING_FILE
    if isinstance(exc, CompatibilityError):
        return "config_mismatch", EXIT_CONFIG_MISMATCH
    if isinstance(exc, VersionMismatchError):
        return "version_mismatch", EXIT_VERSION_MISMATCH
    if isinstance(exc, CheckpointError) and "version" in str(exc):
        return "version_mismatch", EXIT_VERSION_MISMATCH
    if isinstance(exc, (BitstreamError, CheckpointError)):
        return "corrupt_input", EXIT_CORRUPT_STREAM
    if isinstance(exc, (SamplingError, NonFiniteLossError)):
        return "numerical_failure", EXIT_NUMERICAL
    if isinstance(exc, MetricUnavailable):
        return "metric_unavailable", EXIT_METRIC_UNAVAILABLE
    return type(exc).__name__, EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # reported as JSON, never as a traceback
        kind, code = _classify(exc)
        json.dump({"error": kind, "message": str(exc), "exit_code": code}, sys.stderr)
        sys.stderr.write("\n")
        return code
    json.dump(result, sys.stdout, default=str)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
