"""PSNR, bits per pixel and Bjontegaard rate difference."""

from __future__ import annotations

import math

import numpy as np
import torch


def _to_8bit(x: torch.Tensor | np.ndarray) -> np.ndarray:
    a = x.detach().double().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255)


def psnr_frames(x, x_hat) -> np.ndarray:
    """Per-frame PSNR in dB on 8-bit values of ``[T, 3, H, W]`` inputs in [0, 1]; ``inf`` if identical."""
    a, b = _to_8bit(x), _to_8bit(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10.0 * np.log10(255.0**2 / np.maximum(mse, 1e-300)))


def psnr(x, x_hat) -> float:
    """Mean over frames of per-frame PSNR (``inf`` when every frame matches exactly)."""
    return float(np.mean(psnr_frames(x, x_hat)))


def bpp(bits: float, frames: int, height: int, width: int) -> float:
    return bits / (frames * height * width)


def bd_rate(rate_a, psnr_a, rate_b, psnr_b) -> float:
    """Average rate difference of curve ``b`` relative to ``a`` over their common PSNR range.

    Cubic fits of log-rate against PSNR, integrated over the overlap; a
    negative result means ``b`` needs fewer bits for the same quality.
    """
    ra, pa = np.log(np.asarray(rate_a, float)), np.asarray(psnr_a, float)
    rb, pb = np.log(np.asarray(rate_b, float)), np.asarray(psnr_b, float)
    if min(len(ra), len(rb)) < 4:
        raise ValueError("need at least four points per curve")
    lo, hi = max(pa.min(), pb.min()), min(pa.max(), pb.max())
    if hi <= lo:
        raise ValueError("curves do not overlap in PSNR")
    fa = np.polyint(np.polyfit(pa, ra, 3))
    fb = np.polyint(np.polyfit(pb, rb, 3))
    ia = np.polyval(fa, hi) - np.polyval(fa, lo)
    ib = np.polyval(fb, hi) - np.polyval(fb, lo)
    return float(math.exp((ib - ia) / (hi - lo)) - 1.0)


def count_inversions(bpp_values, psnr_values) -> int:
    """Adjacent pairs (ordered by quality index) that violate a monotone R-D frontier.

    Points are expected in order of decreasing rate; a pair is an inversion
    when the next point has higher bpp or higher PSNR than its predecessor.
    """
    n = 0
    for i in range(1, len(bpp_values)):
        if bpp_values[i] > bpp_values[i - 1] or psnr_values[i] > psnr_values[i - 1]:
            n += 1
    return n
