"""Frame I/O: planar 8-bit RGB raw files and PNG sequences; frames are ``[T, 3, H, W]`` in [0, 1]."""

from __future__ import annotations

import glob
import os
import struct

import numpy as np
import torch

_RAW_HEADER = struct.Struct("<III")  # width, height, frame count


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    return np.clip(np.floor(frames.detach().double().numpy() * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def write_raw(path: str | os.PathLike, frames: torch.Tensor) -> None:
    arr = to_uint8(frames)
    t, _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(w, h, t))
        fh.write(arr.tobytes())


def read_raw(path: str | os.PathLike) -> torch.Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _RAW_HEADER.size:
        raise ValueError("raw file too short for its header")
    w, h, t = _RAW_HEADER.unpack_from(data)
    need = _RAW_HEADER.size + t * 3 * h * w
    if len(data) != need:
        raise ValueError(f"raw file has {len(data)} bytes, header implies {need}")
    arr = np.frombuffer(data, dtype=np.uint8, offset=_RAW_HEADER.size).reshape(t, 3, h, w)
    return from_uint8(arr)


def read_png_sequence(pattern: str) -> torch.Tensor:
    """Load a sorted glob (or a directory of ``*.png``) as RGB frames."""
    from PIL import Image

    if os.path.isdir(pattern):
        pattern = os.path.join(pattern, "*.png")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no images match {pattern!r}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("RGB")).transpose(2, 0, 1))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError("images in a sequence must share one size")
    return from_uint8(np.stack(frames))


def write_png_sequence(directory: str | os.PathLike, frames: torch.Tensor, prefix: str = "frame") -> list[str]:
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    arr = to_uint8(frames)
    out = []
    for i, f in enumerate(arr):
        p = os.path.join(directory, f"{prefix}_{i:04d}.png")
        Image.fromarray(f.transpose(1, 2, 0)).save(p)
        out.append(p)
    return out


def read_frames(path: str) -> torch.Tensor:
    if path.endswith(".png") or os.path.isdir(path) or any(c in path for c in "*?["):
        return read_png_sequence(path)
    return read_raw(path)


def write_frames(path: str, frames: torch.Tensor) -> None:
    if path.endswith(".raw") or path.endswith(".rgb"):
        write_raw(path, frames)
    else:
        write_png_sequence(path, frames)
