"""Rate-distortion losses, the training loop, beta-annealing and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import codec
from . import tensor as T
from .entropy import ContractError, rate_bits_per_sample
from .metrics import psnr
from .models import VideoCodec

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "psnr", "bpp", "lr", "beta")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    beta: float = 1e-3
    steps: int = 30_000
    batch: int = 8
    crop: int = 64
    final_crop: int | None = None
    final_crop_steps: int = 0
    lr: float = 1e-4
    lr_final: float = 1e-5
    lr_boundary: int = 25_000
    frames: int = 0  # 0 selects 3, or 4 when the model uses the temporal prior
    seed: int = 0
    vbr_per_datum: bool = True
    pixel_scale: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 50
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self) -> None:
        if self.frames and self.frames < 3:
            raise ContractError("frames per sample must be >= 3")
        if self.batch < 1 or self.steps < 0:
            raise ContractError("batch must be >= 1 and steps >= 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for the (0-based) optimization step."""
        return self.lr if step < self.lr_boundary else self.lr_final

    def frames_for(self, model_cfg) -> int:
        return self.frames or (4 if model_cfg.tp else 3)

    def crop_at(self, step: int) -> int:
        if self.final_crop and step >= self.steps - self.final_crop_steps:
            return self.final_crop
        return self.crop


def desk_config(**kw) -> TrainConfig:
    """Desk-scale schedule: 30k steps, LR drop by 10x at 25k, 64x64 crops, batch 8."""
    return TrainConfig(**kw)


@dataclass
class LossParts:
    loss: torch.Tensor
    D: torch.Tensor  # mean squared error at ``pixel_scale``
    R: torch.Tensor  # bits per pixel
    D_sample: torch.Tensor
    R_sample: torch.Tensor
    x_hat: list[torch.Tensor] = field(default_factory=list)


def _distortion_rate(frames, results, pixel_scale: float) -> tuple[torch.Tensor, torch.Tensor]:
    n, t, _, h, w = frames.shape
    d = torch.stack([((frames[:, i] - r.x_hat) ** 2).flatten(1).mean(1) for i, r in enumerate(results)], 1).mean(1)
    zero = frames.new_zeros(n)
    bits = torch.stack([rate_bits_per_sample(r.terms) if r.terms else zero for r in results], 1).sum(1)
    return d * pixel_scale**2, bits / (t * h * w)


def rd_loss(frames, model: VideoCodec, beta: float, generator=None, cond=None, pixel_scale: float = 1.0) -> LossParts:
    """``D + beta * R`` over a clip batch ``[N, T, 3, H, W]`` (I-frame included)."""
    results = model(frames, cond, generator, training=True)
    d, r = _distortion_rate(frames, results, pixel_scale)
    D, R = d.mean(), r.mean()
    return LossParts(D + beta * R, D, R, d, r, [res.x_hat for res in results])


def sample_levels(levels: int, batch: int, rng: np.random.Generator, per_datum: bool = True) -> np.ndarray:
    if per_datum:
        return rng.integers(0, levels, size=batch)
    return np.full(batch, rng.integers(0, levels))


def vbr_loss(frames, model: VideoCodec, levels, generator=None, pixel_scale: float = 1.0) -> LossParts:
    """Each sample's ``D + beta_B * R`` with its own quality level ``B``."""
    cfg = model.cfg
    levels = [int(b) for b in levels]
    cond = model.condition(levels, frames.shape[0], frames.dtype)
    results = model(frames, cond, generator, training=True)
    d, r = _distortion_rate(frames, results, pixel_scale)
    betas = torch.tensor([cfg.betas[b] for b in levels], dtype=frames.dtype)
    loss = (d + betas * r).mean()
    return LossParts(loss, d.mean(), r.mean(), d, r, [res.x_hat for res in results])


# ---------------------------------------------------------------- data


def sample_batch(data: torch.Tensor, batch: int, frames: int, crop: int, rng: np.random.Generator) -> torch.Tensor:
    """Random clips, temporal windows and spatial crops from ``[N, T, 3, H, W]``."""
    n, t, _, h, w = data.shape
    if frames > t or crop > h or crop > w:
        raise ValueError("dataset clips are smaller than the requested window")
    out = []
    for _ in range(batch):
        i = int(rng.integers(0, n))
        s = int(rng.integers(0, t - frames + 1))
        y = int(rng.integers(0, h - crop + 1))
        x = int(rng.integers(0, w - crop + 1))
        out.append(data[i, s : s + frames, :, y : y + crop, x : x + crop])
    return torch.stack(out)


def _step_rngs(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    rng = np.random.default_rng([seed, step])
    g = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
    return rng, g


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    store: T.ParameterStore
    history: list[dict]
    checkpoints: list[str]


def _median(x) -> float:
    return float(np.median(np.asarray(x)))


def train_step(model: VideoCodec, store: T.ParameterStore, data: torch.Tensor, cfg: TrainConfig, step: int) -> dict:
    rng, g = _step_rngs(cfg.seed, step)
    batch = sample_batch(data, cfg.batch, cfg.frames_for(model.cfg), cfg.crop_at(step), rng).to(next(model.parameters()).dtype)
    store.zero_grad()
    if model.cfg.vbr_levels:
        levels = sample_levels(model.cfg.vbr_levels, cfg.batch, rng, cfg.vbr_per_datum)
        parts = vbr_loss(batch, model, levels, g, cfg.pixel_scale)
        beta = float(np.mean([model.cfg.betas[b] for b in levels]))
    else:
        parts = rd_loss(batch, model, cfg.beta, g, pixel_scale=cfg.pixel_scale)
        beta = cfg.beta
    loss = parts.loss
    if not bool(torch.isfinite(loss)):
        raise T.NonFiniteError(f"non-finite loss at step {step}: D={float(parts.D.detach())}, R={float(parts.R.detach())}")
    T.backward(loss)
    for n, p in store.params.items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise T.NonFiniteError(f"non-finite gradient for {n} at step {step}")
    lr = cfg.lr_at(step)
    T.adam_step(store, lr)
    mse = float(parts.D.detach()) / cfg.pixel_scale**2
    return {
        "step": step + 1,
        "loss": float(loss.detach()),
        "psnr": 10 * math.log10(1.0 / mse) if mse > 0 else float("inf"),
        "bpp": float(parts.R.detach()),
        "lr": lr,
        "beta": beta,
    }


def _dump_failure(out_dir: str | None, model: VideoCodec, step: int, exc: Exception, history: list[dict]) -> None:
    if not out_dir:
        return
    stats = {}
    for n, p in model.named_parameters():
        stats[n] = {"finite": bool(torch.isfinite(p).all()), "absmax": float(p.detach().abs().nan_to_num().max())}
    report = {"step": step, "error": str(exc), "recent": history[-20:], "params": stats}
    with open(os.path.join(out_dir, "failure.json"), "w") as fh:
        json.dump(report, fh, indent=1)


def train(
    model: VideoCodec,
    data: torch.Tensor,
    cfg: TrainConfig,
    out_dir: str | None = None,
    store: T.ParameterStore | None = None,
    start_step: int | None = None,
) -> TrainResult:
    """Optimize ``model`` on ``data`` for ``cfg.steps`` total steps.

    Each step draws its batch and noise from generators keyed on
    ``(cfg.seed, step)``, so resuming from a checkpoint taken after step
    ``k`` continues exactly as the uninterrupted run.
    """
    if model.cfg.tp and cfg.frames_for(model.cfg) < 4:
        log.warning("temporal prior with 3 frames per sample: its conditional branch sees one transition at most")
    model.train()
    store = store or T.ParameterStore.from_module(model)
    step = store.step if start_step is None else start_step
    history: list[dict] = []
    checkpoints: list[str] = []
    recent = deque(maxlen=1000)
    above = 0
    writer = None
    fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        new = not os.path.exists(log_path) or step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
    try:
        while step < cfg.steps:
            try:
                row = train_step(model, store, data, cfg, step)
            except T.NonFiniteError as exc:
                _dump_failure(out_dir, model, step, exc, history)
                raise
            step += 1
            history.append(row)
            if len(recent) >= 50 and row["loss"] > cfg.divergence_factor * _median(recent):
                above += 1
                if above >= cfg.divergence_patience:
                    exc = DivergenceError(
                        f"loss above {cfg.divergence_factor}x running median for {above} steps (step {step})"
                    )
                    _dump_failure(out_dir, model, step, exc, history)
                    raise exc
            else:
                above = 0
                recent.append(row["loss"])  # flagged losses stay out of the reference median
            if writer and (step % cfg.log_every == 0 or step == cfg.steps):
                writer.writerow(row)
                fh.flush()
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                path = os.path.join(out_dir, f"ckpt_{step:07d}.stck")
                codec.save_model(path, model, store)
                checkpoints.append(path)
        if out_dir:
            path = os.path.join(out_dir, "final.stck")
            codec.save_model(path, model, store)
            checkpoints.append(path)
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(store, history, checkpoints)


def resume(path: str, data: torch.Tensor, cfg: TrainConfig, out_dir: str | None = None) -> tuple[VideoCodec, TrainResult]:
    tensors = T.load_checkpoint(path)
    model = codec.model_from_tensors(tensors)
    store = T.ParameterStore.from_module(model)
    store.load_tensors(tensors)
    return model, train(model, data, cfg, out_dir, store)


def beta_anneal(
    model: VideoCodec,
    data: torch.Tensor,
    chain: list[float],
    base_cfg: TrainConfig,
    finetune_cfg: TrainConfig | None = None,
    out_dir: str | None = None,
    base_trained: bool = False,
) -> list[tuple[float, VideoCodec]]:
    """Train at ``chain[0]`` (smallest beta), then finetune along the chain.

    Each finetune starts from the previous model's weights and optimizer
    state; returns one independent model copy per beta.
    """
    if list(chain) != sorted(chain):
        raise ContractError("beta chain must be increasing (high bitrate first)")
    finetune_cfg = finetune_cfg or base_cfg
    store = T.ParameterStore.from_module(model)
    if not base_trained:
        train(model, data, _with(base_cfg, beta=chain[0]), _sub(out_dir, 0, chain[0]), store, start_step=0)
    out = [(chain[0], copy.deepcopy(model))]
    for i, beta in enumerate(chain[1:], start=1):
        cfg = _with(finetune_cfg, beta=beta, seed=finetune_cfg.seed + i)
        train(model, data, cfg, _sub(out_dir, i, beta), store, start_step=0)
        out.append((beta, copy.deepcopy(model)))
    return out


def _with(cfg: TrainConfig, **kw) -> TrainConfig:
    d = asdict(cfg)
    d.update(kw)
    return TrainConfig(**d)


def _sub(out_dir: str | None, i: int, beta: float) -> str | None:
    return os.path.join(out_dir, f"{i:02d}_beta{beta:g}") if out_dir else None


# ---------------------------------------------------------------- evaluation


@dataclass
class RdPoint:
    model: str
    quality: str
    bpp: float
    psnr: float


def evaluate(model: VideoCodec, clips: torch.Tensor, quality: int | None = None, coded: bool = True) -> tuple[float, float]:
    """Mean ``(bpp, psnr)`` over clips ``[N, T, 3, H, W]``.

    ``coded`` counts actual range-coder payload bytes; otherwise the analytic
    rate of the rounded latents is used.
    """
    model.eval()
    bits, pix, ps = 0.0, 0, []
    for clip in clips:
        t, _, h, w = clip.shape
        if coded:
            payloads, recon = codec.encode_sequence(model, clip, quality)
            bits += 8.0 * sum(len(p) for p in payloads)
        else:
            x = codec.pad_frames(clip, codec.pad_multiple(model.cfg))
            cond = model.condition(quality, 1, x.dtype)
            with torch.no_grad():
                out = model(x[None], cond, training=False)
                bits += sum(float(rate_bits_per_sample(r.terms).sum()) for r in out)
            recon = torch.stack([r.x_hat[0, :, :h, :w] for r in out])
        pix += t * h * w
        ps.append(psnr(clip, recon.clamp(0, 1)))
    return bits / pix, float(np.mean(ps))
