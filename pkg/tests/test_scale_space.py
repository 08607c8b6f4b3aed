from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from stvc import scale_space as ss

from .helpers import fd_check


def natural_image(seed: int, size: int = 64, channels: int = 3) -> torch.Tensor:
    """Random image with a 1/f amplitude spectrum, scaled into [0, 1]."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    out = []
    for _ in range(channels):
        spec = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / f
        spec[0, 0] = 0
        img = np.real(np.fft.ifft2(spec))
        out.append((img - img.min()) / (img.max() - img.min()))
    return torch.from_numpy(np.stack(out)[None]).double()


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def test_kernel_delta_and_normalization():
    assert ss.gaussian_kernel(0.0).tolist() == [1.0]
    for s in (0.3, 1.0, 1.5, 4.2):
        k = ss.gaussian_kernel(s, torch.float64)
        assert abs(float(k.sum()) - 1.0) <= 1e-7
        assert torch.equal(k, k.flip(0))
        assert k.numel() == 2 * max(1, math.ceil(3 * s)) + 1
    with pytest.raises(ValueError):
        ss.gaussian_kernel(-1.0)


def test_kernel_closed_form():
    k = ss.gaussian_kernel(1.0, torch.float64).numpy()
    ref = np.exp(-np.arange(-3, 4) ** 2 / 2.0)
    assert np.allclose(k, ref / ref.sum(), atol=1e-12)


def test_pyramid_constant_image():
    x = torch.full((1, 3, 16, 16), 0.37, dtype=torch.float64)
    v = ss.build_ssv_pyramid(x, 1.5, 3)
    assert torch.allclose(v.levels, torch.full_like(v.levels, 0.37), atol=1e-12)


def test_pyramid_shapes():
    v = ss.build_ssv_pyramid(torch.rand(1, 3, 4, 4), 1.0, 1)
    assert v.levels.shape == (1, 3, 3, 4, 4)
    v = ss.build_ssv_pyramid(torch.rand(2, 3, 32, 16), 1.5, 3)
    assert v.num_levels == 5


def test_indivisible_dims_rejected():
    with pytest.raises(ValueError):
        ss.build_ssv_pyramid(torch.rand(1, 3, 20, 20), 1.5, 3)
    with pytest.raises(ValueError):
        ss.build_ssv_blur(torch.rand(1, 3, 20, 20), 1.5, 3)


def test_level_zero_exact():
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(ss.build_ssv_pyramid(x, 1.5, 2).level(0), x)
    assert torch.equal(ss.build_ssv_blur(x, 1.5, 2).level(0), x)


def test_variance_schedule():
    assert ss.variance_schedule(1.0, 6) == [0, 1, 5, 21, 85, 341]
    assert ss.independent_variance_schedule(1.0, 4) == [0, 1, 4, 16]


@pytest.mark.parametrize("seed", range(3))
def test_pyramid_matches_blur(seed):
    x = natural_image(seed)
    a = ss.build_ssv_pyramid(x, 1.5, 3)
    b = ss.build_ssv_blur(x, 1.5, 3)
    for i in range(1, a.num_levels):
        assert psnr(a.level(i), b.level(i)) >= 30.0


def test_white_noise_variance_decreases():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, 64, 64, generator=g, dtype=torch.float64)
    v = ss.build_ssv_blur(x, 1.0, 3)
    var = [float(v.level(i).var()) for i in range(v.num_levels)]
    assert all(a > b for a, b in zip(var, var[1:]))


def _tv(x: torch.Tensor) -> float:
    return float((x[..., 1:, :] - x[..., :-1, :]).abs().sum() + (x[..., :, 1:] - x[..., :, :-1]).abs().sum())


def _laplacian_energy(x: torch.Tensor) -> float:
    k = torch.tensor([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=x.dtype).view(1, 1, 3, 3)
    n, c, h, w = x.shape
    y = F.conv2d(F.pad(x.reshape(n * c, 1, h, w), (1, 1, 1, 1), mode="replicate"), k)
    return float((y**2).sum())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 1.5, 2.0]), st.booleans())
def test_monotone_smoothing(seed, sigma0, pyramid):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 2, 32, 32, generator=g, dtype=torch.float64)
    build = ss.build_ssv_pyramid if pyramid else ss.build_ssv_blur
    v = build(x, sigma0, 3)
    tv = [_tv(v.level(i)) for i in range(v.num_levels)]
    lap = [_laplacian_energy(v.level(i)) for i in range(v.num_levels)]
    assert all(a >= b - 1e-9 for a, b in zip(tv, tv[1:]))
    assert all(a >= b - 1e-9 for a, b in zip(lap, lap[1:]))


def _field(n, h, w, dx=0.0, dy=0.0, s=0.0, dtype=torch.float64):
    f = torch.zeros(n, 3, h, w, dtype=dtype)
    f[:, 0], f[:, 1], f[:, 2] = dx, dy, s
    return f


def test_warp_identity():
    x = torch.rand(2, 3, 16, 16)
    v = ss.build_ssv_pyramid(x, 1.5, 2)
    out = ss.scale_space_warp(v, _field(2, 16, 16, dtype=torch.float32))
    assert float((out - x).abs().max()) <= 1e-6


def test_warp_integer_shift():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    v = ss.build_ssv_pyramid(x, 1.5, 2)
    out = ss.scale_space_warp(v, _field(1, 16, 16, dx=2.0))
    assert torch.equal(out[..., :, :-2], x[..., :, 2:])


def test_warp_top_level():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    v = ss.build_ssv_pyramid(x, 1.5, 3)
    out = ss.scale_space_warp(v, _field(1, 16, 16, s=3 + 1 - 1e-9))
    assert float((out - v.level(4)).abs().max()) <= 1e-6


def test_warp_clamps_out_of_range():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    v = ss.build_ssv_blur(x, 1.0, 1)
    out = ss.scale_space_warp(v, _field(1, 8, 8, dx=100.0, dy=-100.0, s=50.0))
    assert torch.allclose(out, v.level(2)[..., :1, -1:].expand(1, 1, 8, 8))


def test_warp_matches_grid_sample():
    g = torch.Generator().manual_seed(7)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    v = ss.build_ssv_pyramid(x, 1.5, 2)
    fld = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64) * 3
    fld[:, 2] = torch.rand(2, 16, 16, generator=g, dtype=torch.float64) * 3
    out = ss.scale_space_warp(v, fld)
    L, h, w = v.levels.shape[2:]
    gy, gx = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    xs = (gx + fld[:, 0]).clamp(0, w - 1) / (w - 1) * 2 - 1
    ys = (gy + fld[:, 1]).clamp(0, h - 1) / (h - 1) * 2 - 1
    zs = fld[:, 2].clamp(0, L - 1) / (L - 1) * 2 - 1
    grid = torch.stack([xs, ys, zs], -1)[:, None]
    ref = F.grid_sample(v.levels, grid, mode="bilinear", padding_mode="border", align_corners=True)[:, :, 0]
    assert torch.allclose(out, ref, atol=1e-10)


def test_warp_linear_in_volume():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(1, 3, 5, 16, 16, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 5, 16, 16, generator=g, dtype=torch.float64)
    fld = torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
    fld[:, 2] = fld[:, 2].abs() * 2
    lhs = ss.scale_space_warp(2.5 * a - 0.7 * b, fld)
    rhs = 2.5 * ss.scale_space_warp(a, fld) - 0.7 * ss.scale_space_warp(b, fld)
    assert float((lhs - rhs).abs().max()) <= 1e-6


def test_warp_gradients_fd():
    g = torch.Generator().manual_seed(3)
    vol = torch.rand(1, 2, 4, 8, 8, generator=g, dtype=torch.float64)
    fld = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 + 0.25
    fld = fld - fld.floor() + torch.tensor([1.0, 2.0, 1.0], dtype=torch.float64).view(1, 3, 1, 1)
    fld = fld.clamp(1.05, 2.95)  # non-integer interior coordinates
    fd_check(lambda v, f: ss.scale_space_warp(v, f), [vol, fld], tol=1e-5, h=1e-6, coords=80)


def test_warp_gradients_fd_float32():
    g = torch.Generator().manual_seed(4)
    vol = torch.rand(1, 2, 4, 8, 8, generator=g)
    fld = (torch.rand(1, 3, 8, 8, generator=g) * 0.8 + 0.1) + torch.tensor([1.0, 2.0, 1.0]).view(1, 3, 1, 1)
    fd_check(lambda v, f: ss.scale_space_warp(v, f), [vol, fld], tol=1e-3, h=1e-4, coords=60, norm=True)


def test_pyramid_and_blur_differentiable():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    fd_check(lambda x: ss.build_ssv_pyramid(x, 1.2, 2).levels, [x], tol=1e-5)
    fd_check(lambda x: ss.build_ssv_blur(x, 1.2, 2).levels, [x], tol=1e-5)


def test_single_level_volume():
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    v = ss.build_ssv_pyramid(x, 1.5, 0)
    assert v.num_levels == 1
    out = ss.scale_space_warp(v, _field(1, 8, 8, dx=0.5, s=0.7))
    ref = 0.5 * (x[..., :-1] + x[..., 1:])
    assert torch.allclose(out[..., :-1], ref)


def test_scale_from_raw_range():
    s = ss.scale_from_raw(torch.tensor([-50.0, 0.0, 50.0]), 3)
    assert 0 <= float(s[0]) < 1e-6 and float(s[1]) == 2.0 and float(s[2]) == 4.0
