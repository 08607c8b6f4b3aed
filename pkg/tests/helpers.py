from __future__ import annotations

from typing import Callable, Sequence

import torch


def fd_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    tol: float = 1e-5,
    h: float = 1e-4,
    coords: int = 50,
    seed: int = 0,
    norm: bool = False,
) -> float:
    """Compare autograd against central differences of a random projection of ``f``.

    Checks up to ``coords`` randomly chosen input coordinates; the relative
    error uses ``max(|g|, |fd|, 1e-3 * max|g|)`` as denominator so that near-zero
    entries do not dominate. With ``norm`` the error is ``|g - fd| / |g|`` over the
    checked coordinates instead, which suits 32-bit evaluation where each central
    difference carries rounding noise of order eps * |f| / h. Returns the error.
    """
    gen = torch.Generator().manual_seed(seed)
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    (out * proj).sum().backward()
    grads = [torch.zeros_like(x) if x.grad is None else x.grad.detach().clone() for x in leaves]
    scale = max(float(g.abs().max()) for g in grads)
    sizes = [x.numel() for x in leaves]
    total = sum(sizes)
    picks = torch.randperm(total, generator=gen)[: min(coords, total)].tolist()
    worst = 0.0
    gs, fds = [], []
    base = [x.detach().clone() for x in leaves]
    for flat in picks:
        k = 0
        while flat >= sizes[k]:
            flat -= sizes[k]
            k += 1
        outs, pts = [], []
        for sgn in (1.0, -1.0):
            args = [b.clone() for b in base]
            args[k].view(-1)[flat] += sgn * h
            pts.append(float(args[k].view(-1)[flat]))
            with torch.no_grad():
                outs.append(f(*args))
        # actual representable step, and elementwise difference projected in float64,
        # so 32-bit checks stay meaningful at small h
        fd = float(((outs[0] - outs[1]).double() * proj.double()).sum()) / (pts[0] - pts[1])
        g = float(grads[k].view(-1)[flat])
        gs.append(g)
        fds.append(fd)
        den = max(abs(g), abs(fd), 1e-3 * scale, 1e-300)
        worst = max(worst, abs(g - fd) / den)
    if norm:
        gv, fv = torch.tensor(gs, dtype=torch.float64), torch.tensor(fds, dtype=torch.float64)
        worst = float((gv - fv).norm() / gv.norm().clamp_min(1e-300))
    assert worst <= tol, f"finite-difference mismatch: rel err {worst:.3e} > {tol:.1e}"
    return worst
