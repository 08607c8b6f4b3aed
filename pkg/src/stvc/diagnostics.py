"""Decorrelation (whiteness) statistics and visual dumps of predictions, scales and flow."""

from __future__ import annotations

import os

import numpy as np
import torch

from .models import CodecState, VideoCodec


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def temporal_lag1(seq: np.ndarray, pairs) -> float:
    """Mean Pearson correlation between frames ``t-1`` and ``t`` over ``pairs`` of indices."""
    return float(np.mean([_pearson(seq[i], seq[j]) for i, j in pairs]))


def spatial_autocorr(seq: np.ndarray, offsets=(1, 2, 3, 4)) -> list[float]:
    """Correlation at horizontal/vertical pixel offsets, averaged over both axes and frames."""
    out = []
    for d in offsets:
        vals = []
        for f in seq:
            vals.append(_pearson(f[..., :, :-d], f[..., :, d:]))
            vals.append(_pearson(f[..., :-d, :], f[..., d:, :]))
        out.append(float(np.mean(vals)))
    return out


def whiteness_stats(x: np.ndarray, y: np.ndarray, first: int = 1) -> dict:
    """Compare the correlation structure of inputs ``x`` and transformed ``y`` (both ``[T, C, H, W]``).

    Only frames ``first..T-1`` are used for both, so the two sets of numbers
    are computed over identical frame pairs.
    """
    t = x.shape[0]
    pairs = [(i - 1, i) for i in range(first + 1, t)]
    if not pairs:
        raise ValueError("need at least two transformed frames")
    lag_x, lag_y = temporal_lag1(x, pairs), temporal_lag1(y, pairs)
    return {
        "lag1_x": lag_x,
        "lag1_y": lag_y,
        "lag1_reduction": 1.0 - abs(lag_y) / abs(lag_x) if lag_x != 0 else 0.0,
        "spatial_x": spatial_autocorr(x[first:]),
        "spatial_y": spatial_autocorr(y[first:]),
    }


def residuals(model: VideoCodec, clip: torch.Tensor, quality: int | None = None) -> dict[str, np.ndarray]:
    """Run the encoder over ``[T, 3, H, W]`` and collect per-P-frame intermediates."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = clip.to(dtype)
    cond = model.condition(quality, 1, dtype)
    keep: dict[str, list] = {"y_bar": [], "mu": [], "sigma": [], "flow": [], "residual": [], "x_hat": []}
    state = CodecState()
    with torch.no_grad():
        for t in range(x.shape[0]):
            res, state = model.frame(x[t : t + 1], state, cond, training=False)
            keep["x_hat"].append(res.x_hat[0].numpy())
            for k in ("y_bar", "mu", "sigma", "flow", "residual"):
                if k in res.extras:
                    keep[k].append(res.extras[k][0].numpy())
                elif t == 0 and k == "y_bar":
                    keep[k].append(x[0].numpy())  # I-frame has no prediction
    return {k: np.stack(v) for k, v in keep.items() if v}


def whiteness_diag(model: VideoCodec, clip: torch.Tensor, quality: int | None = None) -> dict:
    r = residuals(model, clip, quality)
    return whiteness_stats(clip.double().numpy(), r["y_bar"].astype(np.float64), first=1)


def sigma_occlusion_stat(sigma: np.ndarray, occluded: np.ndarray) -> dict:
    """Mean predicted scale inside vs outside occlusion masks (P-frames only)."""
    s = sigma[:, 0] if sigma.ndim == 4 else sigma
    m = occluded[1 : 1 + s.shape[0]]
    inside = float(s[m].mean()) if m.any() else float("nan")
    outside = float(s[~m].mean()) if (~m).any() else float("nan")
    return {"sigma_occluded": inside, "sigma_background": outside}


def _save_png(path: str, img: np.ndarray) -> None:
    from PIL import Image

    a = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = a[..., 0]
    Image.fromarray(a).save(path)


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def dump_maps(model: VideoCodec, clip: torch.Tensor, out_dir: str, quality: int | None = None) -> list[str]:
    """Write prediction, scale, flow and residual images for each P-frame."""
    os.makedirs(out_dir, exist_ok=True)
    r = residuals(model, clip, quality)
    written = []
    for t in range(r["x_hat"].shape[0]):
        _save_png(p := os.path.join(out_dir, f"xhat_{t:03d}.png"), r["x_hat"][t])
        written.append(p)
    for t in range(len(r.get("mu", []))):
        idx = t + 1
        _save_png(p := os.path.join(out_dir, f"mu_{idx:03d}.png"), r["mu"][t])
        written.append(p)
        _save_png(p := os.path.join(out_dir, f"residual_{idx:03d}.png"), _normalize(r["residual"][t]))
        written.append(p)
        if "sigma" in r:
            _save_png(p := os.path.join(out_dir, f"sigma_{idx:03d}.png"), _normalize(r["sigma"][t]))
            written.append(p)
        if "flow" in r:
            f = r["flow"][t]
            rgb = np.stack([_normalize(f[0]), _normalize(f[1]), f[2] / max(model.cfg.M + 1, 1)])
            _save_png(p := os.path.join(out_dir, f"flow_{idx:03d}.png"), rgb)
            written.append(p)
    return written
