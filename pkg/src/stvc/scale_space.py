"""Scale-space volumes and trilinear scale-space warping.

A volume stacks progressively blurred copies of a frame along a scale axis,
``[N, C, L, H, W]`` with ``L = M + 2``.  Two constructions are provided: a
Gaussian pyramid (small fixed kernel, blur + decimate, then upsample back)
and direct Gaussian blurring with the matching cumulative variances, which
serves as the reference for the pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class ScaleSpaceVolume:
    levels: torch.Tensor  # [N, C, L, H, W]
    sigma0: float
    M: int

    @property
    def num_levels(self) -> int:
        return self.levels.shape[2]

    def level(self, i: int) -> torch.Tensor:
        return self.levels[:, :, i]

    def __add__(self, other: "ScaleSpaceVolume") -> "ScaleSpaceVolume":
        return ScaleSpaceVolume(self.levels + other.levels, self.sigma0, self.M)

    def scaled(self, a: float) -> "ScaleSpaceVolume":
        return ScaleSpaceVolume(a * self.levels, self.sigma0, self.M)


def gaussian_kernel(sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Normalized 1-D Gaussian truncated at ``max(1, ceil(3 sigma))`` taps each side."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return torch.ones(1, dtype=dtype)
    radius = max(1, math.ceil(3.0 * sigma))
    k = torch.arange(-radius, radius + 1, dtype=torch.float64)
    w = torch.exp(-0.5 * (k / sigma) ** 2)
    return (w / w.sum()).to(dtype)


def _mirror_index(n: int, r: int, device) -> torch.Tensor:
    """Indices of a length-n axis padded by r on each side with half-sample symmetry."""
    i = torch.arange(-r, n + r, device=device) % (2 * n)
    return torch.where(i < n, i, 2 * n - 1 - i)


def blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of ``[N, C, H, W]`` with mirrored borders.

    Mirroring (edge sample repeated) makes the blur a convolution of a 2H x 2W periodic
    signal, so total variation cannot grow even when the kernel is wider than the frame.
    """
    if sigma == 0:
        return image
    kernel = gaussian_kernel(sigma, dtype=image.dtype).to(image.device)
    r = kernel.numel() // 2
    n, c, h, w = image.shape
    x = image.reshape(n * c, 1, h, w)
    x = F.conv2d(x.index_select(3, _mirror_index(w, r, x.device)), kernel.view(1, 1, 1, -1))
    x = F.conv2d(x.index_select(2, _mirror_index(h, r, x.device)), kernel.view(1, 1, -1, 1))
    return x.reshape(n, c, h, w)


def downsample2x(image: torch.Tensor) -> torch.Tensor:
    return image[..., ::2, ::2]


def _upsample_axis(x: torch.Tensor, dim: int) -> torch.Tensor:
    # low-res sample j sits at high-res position 2j (matches ::2 decimation)
    nxt = torch.cat([x.narrow(dim, 1, x.shape[dim] - 1), x.narrow(dim, x.shape[dim] - 1, 1)], dim=dim)
    odd = 0.5 * (x + nxt)
    out = torch.stack([x, odd], dim=dim + 1)
    shape = list(x.shape)
    shape[dim] *= 2
    return out.reshape(shape)


def upsample2x(image: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling aligned with :func:`downsample2x`, edges clamped."""
    return _upsample_axis(_upsample_axis(image, image.dim() - 2), image.dim() - 1)


def variance_schedule(sigma0: float, num_levels: int) -> list[float]:
    """Cumulative per-level variances ``0, s0^2, s0^2 + (2 s0)^2, ...``."""
    out = [0.0]
    acc = 0.0
    for i in range(num_levels - 1):
        acc += (2.0**i * sigma0) ** 2
        out.append(acc)
    return out


def independent_variance_schedule(sigma0: float, num_levels: int) -> list[float]:
    """Non-cumulative variances ``0, s0^2, (2 s0)^2, (4 s0)^2, ...``."""
    return [0.0] + [(2.0**i * sigma0) ** 2 for i in range(num_levels - 1)]


def _check_frame(image: torch.Tensor, M: int) -> None:
    if image.dim() != 4:
        raise ValueError(f"expected [N, C, H, W], got {tuple(image.shape)}")
    if M < 0:
        raise ValueError("M must be >= 0")
    h, w = image.shape[-2:]
    f = 2**M
    if h % f or w % f:
        raise ValueError(f"frame {h}x{w} is not divisible by 2^M = {f}; pad first")


def build_ssv_pyramid(image: torch.Tensor, sigma0: float, M: int) -> ScaleSpaceVolume:
    """Pyramid construction: blur with a fixed ``sigma0`` kernel, stash, decimate.

    Level 0 is the input; level ``i + 1`` is the input after ``i + 1`` blurs and
    ``i`` decimations, brought back to full size by ``i`` 2x upsamplings.
    ``M = 0`` yields a single-level volume (plain bilinear warping).
    """
    _check_frame(image, M)
    ssv = [image]
    if M > 0:
        cur = image
        for i in range(M + 1):
            cur = blur(cur, sigma0)
            scaled = cur
            for _ in range(i):
                scaled = upsample2x(scaled)
            ssv.append(scaled)
            if i < M:
                cur = downsample2x(cur)
    return ScaleSpaceVolume(torch.stack(ssv, dim=2), sigma0, M)


def build_ssv_blur(image: torch.Tensor, sigma0: float, M: int, cumulative: bool = True) -> ScaleSpaceVolume:
    """Direct construction: each level is one Gaussian blur of the input."""
    _check_frame(image, M)
    n_levels = M + 2 if M > 0 else 1
    sched = variance_schedule if cumulative else independent_variance_schedule
    levels = [blur(image, math.sqrt(v)) for v in sched(sigma0, n_levels)]
    return ScaleSpaceVolume(torch.stack(levels, dim=2), sigma0, M)


def scale_from_raw(raw: torch.Tensor, M: int) -> torch.Tensor:
    """Map an unbounded network output to a scale coordinate in ``(0, M + 1)``."""
    return (M + 1) * torch.sigmoid(raw)


def scale_space_warp(ssv: ScaleSpaceVolume | torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Sample ``ssv`` at ``(x + dx, y + dy, s)`` with trilinear interpolation.

    ``field`` is ``[N, 3, H, W]`` holding ``dx``, ``dy`` (pixels) and the scale
    coordinate ``s`` (level units).  All three axes are clamped to the volume.
    """
    vol = ssv.levels if isinstance(ssv, ScaleSpaceVolume) else ssv
    n, c, L, h, w = vol.shape
    if field.shape != (n, 3, h, w):
        raise ValueError(f"field shape {tuple(field.shape)} does not match volume {tuple(vol.shape)}")
    dt = vol.dtype
    gy = torch.arange(h, dtype=dt, device=vol.device).view(1, h, 1)
    gx = torch.arange(w, dtype=dt, device=vol.device).view(1, 1, w)
    xs = (gx + field[:, 0]).clamp(0, w - 1)
    ys = (gy + field[:, 1]).clamp(0, h - 1)
    ss = field[:, 2].clamp(0, L - 1)

    def split(coord: torch.Tensor, size: int) -> tuple[torch.Tensor, torch.Tensor]:
        if size == 1:
            return torch.zeros_like(coord, dtype=torch.long), torch.zeros_like(coord)
        i0 = coord.detach().floor().long().clamp(0, size - 2)
        return i0, coord - i0.to(dt)

    x0, fx = split(xs, w)
    y0, fy = split(ys, h)
    z0, fz = split(ss, L)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    z1 = (z0 + 1).clamp(max=L - 1)

    flat = vol.reshape(n, c, L * h * w)

    def tap(zi: torch.Tensor, yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = ((zi * h + yi) * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).reshape(n, c, h, w)

    gx0, gx1 = (1 - fx).unsqueeze(1), fx.unsqueeze(1)
    gy0, gy1 = (1 - fy).unsqueeze(1), fy.unsqueeze(1)
    gz0, gz1 = (1 - fz).unsqueeze(1), fz.unsqueeze(1)
    out = (
        gz0 * (gy0 * (gx0 * tap(z0, y0, x0) + gx1 * tap(z0, y0, x1)) + gy1 * (gx0 * tap(z0, y1, x0) + gx1 * tap(z0, y1, x1)))
        + gz1 * (gy0 * (gx0 * tap(z1, y0, x0) + gx1 * tap(z1, y0, x1)) + gy1 * (gx0 * tap(z1, y1, x0) + gx1 * tap(z1, y1, x1)))
    )
    return out
