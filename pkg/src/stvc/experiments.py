"""R-D sweeps over checkpoints and matched-seed ablation suites."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import torch

from . import codec
from .models import ModelConfig, build_model
from .plot import write_rd_svg
from .training import RdPoint, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

RD_COLUMNS = ("model", "quality", "bpp", "psnr")


def write_rd_csv(path: str, points: list[RdPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RD_COLUMNS)
        for p in points:
            w.writerow([p.model, p.quality, f"{p.bpp:.6f}", f"{p.psnr:.4f}"])


def read_rd_csv(path: str) -> list[RdPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RdPoint(r["model"], r["quality"], float(r["bpp"]), float(r["psnr"])) for r in rows]


def rd_points_for(name: str, model, clips: torch.Tensor, beta: float | None = None) -> list[RdPoint]:
    """One point for a fixed-rate model, one per quality level for a VBR model."""
    if model.cfg.vbr_levels:
        out = []
        for b in range(model.cfg.vbr_levels):
            r, p = evaluate(model, clips, quality=b)
            out.append(RdPoint(name, f"B={b}", r, p))
        return out
    r, p = evaluate(model, clips)
    return [RdPoint(name, f"beta={beta:g}" if beta is not None else "-", r, p)]


def rd_sweep(entries: list[tuple[str, str]], clips: torch.Tensor, csv_path: str | None = None, svg_path: str | None = None) -> list[RdPoint]:
    """Evaluate ``(name, checkpoint path)`` pairs; missing checkpoints are skipped with a warning."""
    points: list[RdPoint] = []
    for name, path in entries:
        if not os.path.exists(path):
            log.warning("checkpoint %s for %s not found; skipped", path, name)
            continue
        loaded = codec.load_model(path)
        points += rd_points_for(name, loaded.model, clips)
    if csv_path:
        write_rd_csv(csv_path, points)
    if svg_path and points:
        series: dict[str, list] = {}
        for p in points:
            series.setdefault(p.model, []).append((p.bpp, p.psnr))
        write_rd_svg(svg_path, series, title="Rate-distortion")
    return points


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class Arm:
    name: str
    config: ModelConfig


def _suites(base: ModelConfig) -> dict[str, list[Arm]]:
    ssf = base.with_(transform="SSF", prior="factorized")
    return {
        "scale-transform": [Arm("SSF", ssf), Arm("STAT-SSF", ssf.with_(transform="STAT_SSF"))],
        "SP": [Arm("SSF", ssf), Arm("SSF-SP", ssf.with_(prior="SP"))],
        "TP-vs-TP+": [Arm("SSF", ssf), Arm("SSF-TP", ssf.with_(prior="TP")), Arm("SSF-TP+", ssf.with_(prior="TP_PLUS"))],
        "VBR-vs-fixed": [Arm("SSF", ssf), Arm("VBR-SSF", ssf.with_(vbr_levels=7))],
        "pyramid-vs-blur": [Arm("SSF-pyramid", ssf), Arm("SSF-blur", ssf.with_(pyramid=False))],
    }


SUITES = tuple(_suites(ModelConfig()).keys())


def suite_arms(name: str, base: ModelConfig | None = None) -> list[Arm]:
    suites = _suites(base or ModelConfig())
    if name not in suites:
        raise KeyError(f"unknown suite {name!r}; available: {', '.join(SUITES)}")
    return suites[name]


def ablation_run(name: str, data: torch.Tensor, eval_clips: torch.Tensor, train_cfg: TrainConfig,
                 out_dir: str, base: ModelConfig | None = None) -> list[RdPoint]:
    """Train every arm of a suite on the same data and seed and write a comparison CSV."""
    os.makedirs(out_dir, exist_ok=True)
    points: list[RdPoint] = []
    arms = suite_arms(name, base)
    cfg = train_cfg
    if any(a.config.tp for a in arms) and not cfg.frames:
        cfg = TrainConfig(**{**cfg.__dict__, "frames": 4})  # same window for every arm
    for arm in arms:
        arm_dir = os.path.join(out_dir, arm.name)
        ckpt = os.path.join(arm_dir, "final.stck")
        if os.path.exists(ckpt):
            model = codec.load_model(ckpt).model
        else:
            model = build_model(arm.config)
            train(model, data, cfg, arm_dir)
        points += rd_points_for(arm.name, model, eval_clips, None if arm.config.vbr_levels else train_cfg.beta)
    write_rd_csv(os.path.join(out_dir, "summary.csv"), points)
    return points
