"""Convolutional building blocks with optional quality-level (VBR) modulation."""

from __future__ import annotations

import zlib

import torch
import torch.nn as nn

from . import tensor as T
from .entropy import ContractError


def check_condition(cond: torch.Tensor | None, levels: int, batch: int) -> None:
    if levels == 0:
        if cond is not None:
            raise ContractError("model is not variable-bitrate; got a quality condition")
        return
    if cond is None:
        raise ContractError("variable-bitrate model needs a one-hot quality condition")
    if cond.shape != (batch, levels):
        raise ContractError(f"quality condition must be [{batch}, {levels}], got {tuple(cond.shape)}")
    ok = ((cond == 0) | (cond == 1)).all() and bool((cond.sum(dim=1) == 1).all())
    if not ok:
        raise ContractError("quality condition must be one-hot per row")


def one_hot(index: torch.Tensor | list[int] | int, levels: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    idx = torch.as_tensor(index, dtype=torch.long).reshape(-1)
    if ((idx < 0) | (idx >= levels)).any():
        raise ContractError(f"quality index out of range for {levels} levels")
    return torch.nn.functional.one_hot(idx, levels).to(dtype)


class Modulation(nn.Module):
    """Per-channel scale and shift selected by a one-hot quality vector."""

    def __init__(self, levels: int, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(levels, channels))
        self.shift = nn.Parameter(torch.zeros(levels, channels))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        s = (cond @ self.scale)[:, :, None, None]
        b = (cond @ self.shift)[:, :, None, None]
        return x * s + b


class Conv(nn.Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 5,
        stride: int = 1,
        transpose: bool = False,
        bias: bool = True,
        zero_init: bool = False,
        levels: int = 0,
    ):
        super().__init__()
        self.stride = stride
        self.transpose = transpose
        self.zero_init = zero_init
        shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
        self.weight = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        self.mod = Modulation(levels, cout) if levels else None

    def reset(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            if self.zero_init:
                self.weight.zero_()
            else:
                w = self.weight
                fan_in = (w.shape[0] if self.transpose else w.shape[1]) * w.shape[2] * w.shape[3]
                T.kaiming_uniform_(w, generator, fan_in=fan_in)
            if self.bias is not None:
                self.bias.zero_()

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        if self.transpose:
            y = T.conv2d_transpose(x, self.weight, self.stride, bias=self.bias)
        else:
            y = T.conv2d(x, self.weight, self.stride, bias=self.bias)
        if self.mod is not None:
            y = self.mod(y, cond)
        return y


class Stack(nn.Module):
    """Convs with SiLU between them (none after the last)."""

    def __init__(self, convs: list[Conv]):
        super().__init__()
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x, cond)
            if i < last:
                x = T.silu(x)
        return x


def analysis(cin: int, ch: int, cout: int | None = None, stages: int = 4, levels: int = 0) -> Stack:
    """``stages`` 5x5 stride-2 convs (downsampling by ``2**stages``)."""
    cout = ch if cout is None else cout
    dims = [cin] + [ch] * (stages - 1) + [cout]
    return Stack([Conv(dims[i], dims[i + 1], 5, 2, levels=levels) for i in range(stages)])


def synthesis(cin: int, ch: int, cout: int, stages: int = 4, levels: int = 0, zero_last: bool = False) -> Stack:
    """``stages`` 5x5 stride-2 transposed convs (upsampling by ``2**stages``)."""
    dims = [cin] + [ch] * (stages - 1) + [cout]
    convs = [Conv(dims[i], dims[i + 1], 5, 2, transpose=True, levels=levels) for i in range(stages)]
    convs[-1].zero_init = zero_last
    return Stack(convs)


def pointwise_net(cin: int, ch: int, cout: int, levels: int = 0, zero_last: bool = False) -> Stack:
    """Three stride-1 3x3 convs at constant resolution."""
    convs = [Conv(cin, ch, 3, levels=levels), Conv(ch, ch, 3, levels=levels), Conv(ch, cout, 3, levels=levels)]
    convs[-1].zero_init = zero_last
    return Stack(convs)


class HyperAnalysis(nn.Module):
    def __init__(self, cin: int, ch: int, levels: int = 0):
        super().__init__()
        self.net = Stack([Conv(cin, ch, 3, levels=levels), Conv(ch, ch, 5, 2, levels=levels)])

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        return self.net(x, cond)


class HyperSynthesis(nn.Module):
    """Hyper latents back to main-latent resolution (cropped to ``size``)."""

    def __init__(self, cin: int, ch: int, cout: int, levels: int = 0):
        super().__init__()
        self.net = Stack([Conv(cin, ch, 5, 2, transpose=True, levels=levels), Conv(ch, cout, 3, levels=levels)])

    def forward(self, x: torch.Tensor, size: tuple[int, int], cond: torch.Tensor | None = None) -> torch.Tensor:
        return self.net(x, cond)[..., : size[0], : size[1]]


def seed_init(module: nn.Module, seed: int) -> None:
    """Initialize every :class:`Conv` from a generator keyed on its module path.

    Submodules with the same path get the same weights in different model
    variants, so matched-seed comparisons start from shared parameters.
    """
    for name, m in module.named_modules():
        if isinstance(m, Conv):
            g = torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63))
            m.reset(g)
