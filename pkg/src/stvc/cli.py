"""Command-line interface: ``stvc <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from . import codec, container, diagnostics, experiments, frames, synthetic, training
from . import tensor as T
from .metrics import psnr
from .models import PRIORS, TRANSFORMS, ModelConfig, build_model

log = logging.getLogger("stvc")


def cache_dir() -> str:
    return os.environ.get("STVC_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "stvc"))


# ---------------------------------------------------------------- argument groups


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--transform", choices=TRANSFORMS, default="STAT_SSF")
    g.add_argument("--prior", choices=PRIORS, default="factorized")
    g.add_argument("--no-hyperprior", dest="hyperprior", action="store_false")
    g.add_argument("--vbr-levels", type=int, default=0)
    g.add_argument("--channels", type=int, default=32)
    g.add_argument("--M", type=int, default=3)
    g.add_argument("--sigma0", type=float, default=1.5)
    g.add_argument("--gop", type=int, default=12)
    g.add_argument("--blur-ssv", dest="pyramid", action="store_false", help="direct Gaussian blur instead of the pyramid")
    g.add_argument("--model-seed", type=int, default=0)


def _model_config(a) -> ModelConfig:
    return ModelConfig(
        transform=a.transform, prior=a.prior, hyperprior=a.hyperprior, vbr_levels=a.vbr_levels,
        channels=a.channels, M=a.M, sigma0=a.sigma0, gop=a.gop, pyramid=a.pyramid, seed=a.model_seed,
    )


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    d = training.TrainConfig()
    g.add_argument("--beta", type=float, default=d.beta)
    g.add_argument("--steps", type=int, default=d.steps)
    g.add_argument("--batch", type=int, default=d.batch)
    g.add_argument("--crop", type=int, default=d.crop)
    g.add_argument("--final-crop", type=int, default=None)
    g.add_argument("--final-crop-steps", type=int, default=0)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--lr-final", type=float, default=d.lr_final)
    g.add_argument("--lr-boundary", type=int, default=d.lr_boundary)
    g.add_argument("--frames", type=int, default=d.frames, help="frames per sample (0: 3, or 4 with TP)")
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--per-batch-vbr", dest="vbr_per_datum", action="store_false")
    g.add_argument("--pixel-scale", type=float, default=d.pixel_scale)
    g.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    g.add_argument("--log-every", type=int, default=d.log_every)


def _train_config(a) -> training.TrainConfig:
    return training.TrainConfig(
        beta=a.beta, steps=a.steps, batch=a.batch, crop=a.crop, final_crop=a.final_crop,
        final_crop_steps=a.final_crop_steps, lr=a.lr, lr_final=a.lr_final, lr_boundary=a.lr_boundary,
        frames=a.frames, seed=a.seed, vbr_per_datum=a.vbr_per_datum, pixel_scale=a.pixel_scale,
        checkpoint_every=a.checkpoint_every, log_every=a.log_every,
    )


def _synth_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    d = synthetic.SynthParams()
    g.add_argument("--clips", type=int, default=64)
    g.add_argument("--clip-frames", type=int, default=d.frames)
    g.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(d.height, d.width))
    g.add_argument("--sprites", type=int, default=d.sprites)
    g.add_argument("--max-velocity", type=float, default=d.max_velocity)
    g.add_argument("--pan", type=float, default=d.pan)
    g.add_argument("--no-occlusion", dest="occlusion", action="store_false")
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--scene-cut-prob", type=float, default=d.scene_cut_prob)
    g.add_argument("--data-seed", type=int, default=1)


def _synth_params(a) -> synthetic.SynthParams:
    return synthetic.SynthParams(
        frames=a.clip_frames, height=a.size[0], width=a.size[1], sprites=a.sprites, max_velocity=a.max_velocity,
        pan=a.pan, occlusion=a.occlusion, noise=a.noise, scene_cut_prob=a.scene_cut_prob,
    )


def _load_data(a) -> torch.Tensor:
    if getattr(a, "data", None):
        return synthetic.load_dataset(a.data)
    return synthetic.clips_tensor(synthetic.generate_set(_synth_params(a), a.clips, a.data_seed))


# ---------------------------------------------------------------- verbs


def cmd_gen_data(a) -> int:
    params = _synth_params(a)
    clips = synthetic.generate_set(params, a.clips, a.data_seed)
    path = synthetic.save_dataset(a.out, clips, params, a.data_seed)
    print(f"wrote {len(clips)} clips to {path}")
    return 0


def cmd_train(a) -> int:
    data = _load_data(a)
    cfg = _train_config(a)
    if a.resume:
        model, res = training.resume(a.resume, data, cfg, a.out)
    elif a.anneal:
        chain = [float(b) for b in a.anneal.split(",")]
        model = build_model(_model_config(a))
        ft = training.TrainConfig(**{**cfg.__dict__, "steps": a.finetune_steps, "lr_boundary": a.finetune_steps})
        outs = training.beta_anneal(model, data, chain, cfg, ft, a.out)
        for i, (beta, m) in enumerate(outs):
            codec.save_model(os.path.join(a.out, f"anneal_{i:02d}.stck"), m)
            print(f"beta={beta:g} -> {os.path.join(a.out, f'anneal_{i:02d}.stck')}")
        return 0
    else:
        model = build_model(_model_config(a))
        res = training.train(model, data, cfg, a.out)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"checkpoints": res.checkpoints, "last": last}))
    return 0


def cmd_compress(a) -> int:
    loaded = codec.load_model(a.checkpoint)
    x = frames.read_frames(a.input)
    t, _, h, w = x.shape
    payloads, recon = codec.encode_sequence(loaded.model, x, a.quality)
    blob = container.write(loaded.model.cfg, loaded.digest, a.quality, h, w, payloads)
    with open(a.output, "wb") as fh:
        fh.write(blob)
    bits = 8 * len(blob)
    print(json.dumps({"bytes": len(blob), "bpp": bits / (t * h * w), "psnr": psnr(x, recon)}))
    return 0


def cmd_decompress(a) -> int:
    loaded = codec.load_model(a.checkpoint)
    with open(a.input, "rb") as fh:
        header, payloads = container.read(fh.read())
    container.check_model(header, loaded.model.cfg, loaded.digest)
    out = codec.decode_sequence(loaded.model, payloads, header.height, header.width, header.quality)
    frames.write_frames(a.output, out.clamp(0, 1))
    print(json.dumps({"frames": header.frames, "height": header.height, "width": header.width}))
    return 0


def cmd_eval(a) -> int:
    loaded = codec.load_model(a.checkpoint)
    clips = frames.read_frames(a.input)[None] if a.input else synthetic.load_dataset(a.data)
    qualities = (range(loaded.model.cfg.vbr_levels) if a.quality is None else [a.quality]) if loaded.model.cfg.vbr_levels else [None]
    for q in qualities:
        r, p = training.evaluate(loaded.model, clips, q)
        print(json.dumps({"quality": q, "bpp": r, "psnr": p}))
    return 0


def cmd_sweep(a) -> int:
    entries = []
    for spec in a.checkpoint:
        name, _, path = spec.partition("=")
        entries.append((name, path) if path else (os.path.basename(name), name))
    clips = synthetic.load_dataset(a.data)
    pts = experiments.rd_sweep(entries, clips, a.out, a.plot)
    print(f"{len(pts)} points -> {a.out}")
    return 0


def cmd_ablate(a) -> int:
    if not a.suite:
        print("available suites: " + ", ".join(experiments.SUITES))
        return 0
    data = _load_data(a)
    ev = synthetic.load_dataset(a.eval_data) if a.eval_data else data[: min(8, len(data))]
    pts = experiments.ablation_run(a.suite, data, ev, _train_config(a), a.out, _model_config(a))
    for p in pts:
        print(f"{p.model:>12s} {p.quality:>12s} bpp={p.bpp:.4f} psnr={p.psnr:.2f}")
    return 0


def cmd_diag(a) -> int:
    loaded = codec.load_model(a.checkpoint)
    clip = frames.read_frames(a.input)
    report = diagnostics.whiteness_diag(loaded.model, clip, a.quality)
    if a.out:
        report["images"] = len(diagnostics.dump_maps(loaded.model, clip, a.out, a.quality))
    print(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stvc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    _synth_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model")
    _model_args(s)
    _train_args(s)
    _synth_args(s)
    s.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--anneal", help="comma-separated increasing beta chain")
    s.add_argument("--finetune-steps", type=int, default=2000)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("compress", help="frames -> STVC container")
    s.add_argument("--input", required=True, help="raw file, PNG glob or directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--quality", type=int, default=None)
    s.set_defaults(fn=cmd_compress)

    s = sub.add_parser("decompress", help="STVC container -> frames")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--output", required=True, help="*.raw file or PNG directory")
    s.set_defaults(fn=cmd_decompress)

    s = sub.add_parser("eval", help="coded bpp and PSNR")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input")
    s.add_argument("--data")
    s.add_argument("--quality", type=int, default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="R-D points for several checkpoints")
    s.add_argument("--checkpoint", action="append", required=True, help="NAME=PATH (repeatable)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--plot", help="SVG path")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", help="matched-seed ablation suites")
    s.add_argument("suite", nargs="?", default="")
    _model_args(s)
    _train_args(s)
    _synth_args(s)
    s.add_argument("--data")
    s.add_argument("--eval-data")
    s.add_argument("--out", default=os.path.join(cache_dir(), "ablations"))
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("diag", help="whiteness statistics and map dumps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", help="directory for PNG dumps")
    s.add_argument("--quality", type=int, default=None)
    s.set_defaults(fn=cmd_diag)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    T.configure()
    try:
        return args.fn(args)
    except (container.ContainerError, T.CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
