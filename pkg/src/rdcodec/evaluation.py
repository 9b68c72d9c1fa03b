"""Dataset evaluation and rate-distortion reporting.

Per-image CSV columns are ``EVAL_FIELDS``; the last row of every file is the
mean over images with ``image = "mean"``. Rates are counted from the written
bitstream, header included.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .codec import ResidualDiffusionCodec, compress, decompress
from .coding import read_bitstream
from .io import list_images, load_image
from .metrics import (
    BDRateError,
    GradientPerceptualDistance,
    RDCurve,
    RDPoint,
    bd_rate_report,
    ms_ssim,
    psnr,
)
from .sampling import SamplerConfig

EVAL_FIELDS = ("label", "image", "width", "height", "bytes", "bpp", "payload_bpp",
               "psnr", "ms_ssim", "grad_perceptual", "lpips", "steps", "gamma")
METRICS = ("psnr", "ms_ssim", "grad_perceptual", "lpips")
MEAN_ROW = "mean"


@dataclass
class EvalResult:
    rows: list[dict]
    aggregate: dict
    curve: RDCurve


def _evaluate_one(path: Path, model: ResidualDiffusionCodec, cfg: SamplerConfig, seed: int,
                  perceptual: Callable, lpips: Callable | None, label: str) -> dict:
    x = load_image(path)
    data = compress(x, model).to_bytes()
    bs = read_bitstream(data)
    generator = torch.Generator().manual_seed(seed)
    x_rec = decompress(bs, model, cfg, generator)[0]
    pixels = x.shape[1] * x.shape[2]
    with torch.no_grad():
        perc = float(perceptual(x[None], x_rec[None]))
        lp = float(lpips(x[None], x_rec[None])) if lpips is not None else None
    return {
        "label": label, "image": path.name, "width": x.shape[2], "height": x.shape[1],
        "bytes": len(data), "bpp": 8 * len(data) / pixels, "payload_bpp": bs.payload_bits / pixels,
        "psnr": psnr(x, x_rec), "ms_ssim": ms_ssim(x, x_rec), "grad_perceptual": perc,
        "lpips": lp, "steps": cfg.num_steps, "gamma": cfg.gamma,
    }


def aggregate_rows(rows: Sequence[dict]) -> dict:
    agg = {"label": rows[0]["label"], "image": MEAN_ROW}
    for k in ("width", "height", "bytes", "bpp", "payload_bpp") + METRICS:
        vals = [r[k] for r in rows if r[k] is not None]
        agg[k] = sum(vals) / len(vals) if vals else None
    agg["steps"], agg["gamma"] = rows[0]["steps"], rows[0]["gamma"]
    return agg


def eval_run(model: ResidualDiffusionCodec, dataset: str | os.PathLike, cfg: SamplerConfig | None = None,
             out_csv: str | os.PathLike | None = None, seed: int = 0, label: str = "model",
             perceptual: Callable | None = None, lpips: Callable | None = None,
             workers: int = 1) -> EvalResult:
    """Compress and decompress every image in ``dataset`` and score the result.

    Each image gets its own generator seeded with ``seed``, so results do not
    depend on ``workers`` or on file order.
    """
    paths = list_images(dataset)
    if not paths:
        raise FileNotFoundError(f"no images in {dataset}")
    cfg = cfg or SamplerConfig(model.config.default_steps, model.config.default_gamma)
    perceptual = perceptual or GradientPerceptualDistance()

    def run(p):
        return _evaluate_one(p, model, cfg, seed, perceptual, lpips, label)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, paths))
    else:
        rows = [run(p) for p in paths]
    agg = aggregate_rows(rows)
    if out_csv is not None:
        write_eval_csv(out_csv, rows + [agg])
    point = RDPoint(agg["bpp"], {k: agg[k] for k in METRICS if agg[k] is not None}, label)
    return EvalResult(rows, agg, RDCurve([point], label))


def write_eval_csv(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, EVAL_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in EVAL_FIELDS})


def read_eval_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no rows")
    return rows


def curves_from_csvs(paths: Sequence[str | os.PathLike]) -> dict[str, RDCurve]:
    """Group the mean rows of several eval CSVs into one curve per label."""
    points: dict[str, list[RDPoint]] = {}
    for path in paths:
        for row in read_eval_csv(path):
            if row["image"] != MEAN_ROW:
                continue
            metrics = {k: float(row[k]) for k in METRICS if row.get(k) not in (None, "")}
            points.setdefault(row["label"], []).append(RDPoint(float(row["bpp"]), metrics, row["label"]))
    if not points:
        raise ValueError("no aggregate rows found")
    return {label: RDCurve(pts, label) for label, pts in points.items()}


def bd_rate_table(curves: dict[str, RDCurve], reference: str,
                  metrics: Sequence[str] = ("psnr", "ms_ssim")) -> list[dict]:
    if reference not in curves:
        raise KeyError(f"reference curve {reference!r} not found; have {sorted(curves)}")
    table = []
    for label, curve in curves.items():
        if label == reference:
            continue
        for metric in metrics:
            row = {"label": label, "reference": reference, "metric": metric,
                   "bd_rate": "", "method": "", "flags": ""}
            try:
                res = bd_rate_report(curves[reference], curve, metric)
                row.update(bd_rate=res.percent, method=res.method, flags="; ".join(res.flags))
            except (BDRateError, KeyError) as exc:
                row["flags"] = f"refused: {exc}"
            table.append(row)
    return table


def rd_plot_spec(curves: dict[str, RDCurve], metric: str = "psnr") -> dict:
    """A Vega-Lite line chart of ``metric`` against bpp."""
    values = [{"curve": label, "bpp": p.bpp, metric: p.metrics[metric]}
              for label, c in curves.items() for p in c.points
              if metric in p.metrics and math.isfinite(p.metrics[metric])]
    return {
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "data": {"values": values},
        "mark": {"type": "line", "point": True},
        "encoding": {
            "x": {"field": "bpp", "type": "quantitative", "title": "bits per pixel"},
            "y": {"field": metric, "type": "quantitative", "scale": {"zero": False}},
            "color": {"field": "curve", "type": "nominal"},
        },
    }


def write_rd_report(curves: dict[str, RDCurve], reference: str | None, out_dir: str | os.PathLike,
                    metrics: Sequence[str] = ("psnr", "ms_ssim")) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    agg = out_dir / "rd_points.csv"
    with open(agg, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "bpp"] + list(METRICS))
        for label, curve in curves.items():
            for p in curve.points:
                w.writerow([label, p.bpp] + [p.metrics.get(k, "") for k in METRICS])
    written["points"] = agg
    if reference is not None:
        table = bd_rate_table(curves, reference, metrics)
        path = out_dir / "bd_rate.csv"
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, ["label", "reference", "metric", "bd_rate", "method", "flags"])
            w.writeheader()
            w.writerows(table)
        written["bd_rate"] = path
    for metric in metrics:
        path = out_dir / f"rd_{metric}.vl.json"
        with open(path, "w") as f:
            json.dump(rd_plot_spec(curves, metric), f, indent=2)
        written[f"plot_{metric}"] = path
    return written
