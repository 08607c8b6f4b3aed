"""Seeded synthetic video: textured backgrounds, anti-aliased moving sprites,
camera pan, occlusion, sensor noise and scene cuts, with ground-truth motion.

Everything is rendered analytically at continuous coordinates, so sub-pixel
motion is exact and clips are reproducible from ``(params, seed)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class SynthParams:
    frames: int = 8
    height: int = 64
    width: int = 64
    sprites: int = 3
    max_velocity: float = 2.0
    pan: float = 1.0
    occlusion: bool = True
    noise: float = 0.0
    scene_cut_prob: float = 0.0
    radius: tuple[float, float] = (4.0, 12.0)
    velocities: tuple[tuple[float, float], ...] | None = None
    pan_velocity: tuple[float, float] | None = None
    waves: int = 12


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    flow: np.ndarray  # [T, 2, H, W]: x_t(p) ~ x_{t-1}(p + flow_t(p)); zero at t = 0 and at cuts
    occluded: np.ndarray  # [T, H, W] bool: pixels whose content is not visible at t - 1
    velocities: list[tuple[float, float]]  # per sprite, pixels / frame
    pan_velocity: tuple[float, float]
    cuts: list[int] = field(default_factory=list)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.frames)


class _Scene:
    def __init__(self, p: SynthParams, rng: np.random.Generator):
        h, w = p.height, p.width
        k = p.waves
        mag = rng.uniform(1.0 / 48.0, 0.25, size=k)
        ang = rng.uniform(0, 2 * np.pi, size=k)
        self.freq = np.stack([mag * np.cos(ang), mag * np.sin(ang)], 1)  # cycles / pixel
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, k))
        amp = 0.06 / (mag * 16.0) ** 0.8
        self.amp = amp[None] * rng.uniform(0.5, 1.0, size=(3, k))
        self.base = rng.uniform(0.3, 0.7, size=3)
        if p.pan_velocity is not None:
            self.pan = np.asarray(p.pan_velocity, dtype=np.float64)
        elif p.pan > 0:
            self.pan = rng.uniform(-p.pan, p.pan, size=2)
        else:
            self.pan = np.zeros(2)

        n = p.sprites
        if p.velocities is not None:
            if len(p.velocities) != n:
                raise ValueError("need one velocity per sprite")
            self.vel = np.asarray(p.velocities, dtype=np.float64).reshape(n, 2)
        else:
            self.vel = rng.uniform(-p.max_velocity, p.max_velocity, size=(n, 2))
        self.radius = rng.uniform(*p.radius, size=n)
        self.square = rng.random(n) < 0.5
        if p.occlusion:
            self.pos = np.stack([rng.uniform(0, w, n), rng.uniform(0, h, n)], 1)
        else:
            # separate horizontal bands and horizontal motion: sprites never overlap
            band = h / max(n, 1)
            self.radius = np.minimum(self.radius, 0.45 * band)
            self.pos = np.stack([rng.uniform(0, w, n), (np.arange(n) + 0.5) * band], 1)
            self.vel[:, 1] = 0.0
        self.color = rng.uniform(0.05, 0.95, size=(n, 3))
        self.stripe = rng.uniform(0.1, 0.3, size=(n, 2)) * rng.choice([-1, 1], size=(n, 2))

    def render(self, p: SynthParams, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Frame at time ``t``: image ``[3, H, W]``, per-pixel velocity ``[2, H, W]``, owner id map."""
        h, w = p.height, p.width
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        bx, by = xx - self.pan[0] * t, yy - self.pan[1] * t
        arg = 2 * np.pi * (self.freq[:, 0, None, None] * bx + self.freq[:, 1, None, None] * by)
        img = np.empty((3, h, w))
        for c in range(3):
            img[c] = self.base[c] + np.tensordot(self.amp[c], np.cos(arg + self.phase[c][:, None, None]), 1)
        vel = np.broadcast_to(self.pan[:, None, None], (2, h, w)).copy()
        owner = np.full((h, w), -1, dtype=np.int64)
        for i in range(len(self.radius)):
            cx, cy = self.pos[i] + self.vel[i] * t
            dx, dy = xx - cx, yy - cy
            if self.square[i]:
                dist = np.maximum(np.abs(dx), np.abs(dy))
            else:
                dist = np.hypot(dx, dy)
            cover = np.clip(self.radius[i] - dist + 0.5, 0.0, 1.0)
            tex = 0.8 + 0.2 * np.cos(2 * np.pi * (self.stripe[i, 0] * dx + self.stripe[i, 1] * dy))
            sprite = self.color[i][:, None, None] * tex[None]
            img = img * (1 - cover) + sprite * cover
            inside = cover >= 0.5
            vel[:, inside] = self.vel[i][:, None]
            owner[inside] = i
        return np.clip(img, 0.0, 1.0), vel, owner


def generate(params: SynthParams, seed: int) -> SyntheticClip:
    rng = np.random.default_rng(seed)
    scene = _Scene(params, rng)
    t0 = 0
    frames, flows, occl, cuts = [], [], [], []
    prev_owner = None
    for t in range(params.frames):
        if t > 0 and params.scene_cut_prob > 0 and rng.random() < params.scene_cut_prob:
            scene = _Scene(params, rng)
            t0 = t
            cuts.append(t)
            prev_owner = None
        img, vel, owner = scene.render(params, float(t - t0))
        if prev_owner is None:
            flow = np.zeros_like(vel)
            occ = np.zeros(owner.shape, dtype=bool) if t == 0 else np.ones(owner.shape, dtype=bool)
        else:
            flow = -vel
            # content is occluded at t-1 if the source pixel belonged to another layer
            h, w = owner.shape
            yy, xx = np.mgrid[0:h, 0:w]
            sx = np.clip(np.rint(xx + flow[0]).astype(int), 0, w - 1)
            sy = np.clip(np.rint(yy + flow[1]).astype(int), 0, h - 1)
            occ = prev_owner[sy, sx] != owner
        prev_owner = owner
        if params.noise > 0:
            img = np.clip(img + rng.normal(0.0, params.noise, size=img.shape), 0.0, 1.0)
        frames.append(img)
        flows.append(flow)
        occl.append(occ)
    vels = [tuple(float(v) for v in row) for row in scene.vel]
    return SyntheticClip(
        frames=np.stack(frames).astype(np.float32),
        flow=np.stack(flows).astype(np.float32),
        occluded=np.stack(occl),
        velocities=vels,
        pan_velocity=(float(scene.pan[0]), float(scene.pan[1])),
        cuts=cuts,
    )


def generate_set(params: SynthParams, count: int, seed: int) -> list[SyntheticClip]:
    return [generate(params, int(s)) for s in np.random.SeedSequence(seed).generate_state(count)]


def clips_tensor(clips: list[SyntheticClip]) -> torch.Tensor:
    """Stack clip frames to ``[N, T, 3, H, W]``."""
    return torch.from_numpy(np.stack([c.frames for c in clips]))


# ---------------------------------------------------------------- dataset cache


def save_dataset(directory: str | os.PathLike, clips: list[SyntheticClip], params: SynthParams, seed: int) -> str:
    """Write frames as raw little-endian uint8 plus a JSON manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    arr = np.clip(np.floor(np.stack([c.frames for c in clips]) * 255.0 + 0.5), 0, 255).astype("<u1")
    data_path = os.path.join(directory, "frames.u8")
    arr.tofile(data_path)
    manifest = {
        "format": "u8-le",
        "shape": list(arr.shape),
        "layout": "N,T,C,H,W",
        "data": "frames.u8",
        "seed": seed,
        "params": asdict(params),
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_dataset(directory: str | os.PathLike) -> torch.Tensor:
    """Load a cached dataset as float32 frames in [0, 1], ``[N, T, 3, H, W]``."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    shape = tuple(manifest["shape"])
    arr = np.fromfile(os.path.join(directory, manifest["data"]), dtype="<u1")
    if arr.size != int(np.prod(shape)):
        raise ValueError("dataset file size does not match its manifest")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32) / 255.0)
