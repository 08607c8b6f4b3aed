"""Numeric core: differentiable ops, parameter storage, Adam and checkpoints.

Tensors are ``torch.Tensor``; this module pins the small surface the codec
relies on (convolutions, elementwise algebra, a hand-written Adam and the
``STCK`` checkpoint format) so that the rest of the package never depends on
optimizer or serialization details of the backend.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def configure(threads: int | None = None, deterministic: bool = True) -> None:
    """Set the thread count (``STVC_THREADS`` overrides) and determinism flags."""
    if threads is None:
        threads = int(os.environ.get("STVC_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    if deterministic:
        torch.use_deterministic_algorithms(True)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------- convolution


def _check_conv_shapes(x: torch.Tensor, weight: torch.Tensor, stride: int, transpose: bool) -> None:
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"expected 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    need = weight.shape[0] if transpose else weight.shape[1]
    if x.shape[1] != need:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {need}")


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    pad: int | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Zero-padded cross-correlation; ``pad`` defaults to ``kernel // 2``.

    ``weight`` is laid out ``[out, in, kh, kw]``.
    """
    _check_conv_shapes(x, weight, stride, transpose=False)
    kh, kw = weight.shape[-2:]
    if pad is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("even kernels need an explicit pad")
        pad = kh // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def conv2d_transpose(
    x: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    pad: int | None = None,
    bias: torch.Tensor | None = None,
    output_padding: int | None = None,
) -> torch.Tensor:
    """Adjoint of :func:`conv2d` using the *same* ``[out, in, kh, kw]`` weight.

    With odd kernels, ``pad = k // 2`` and the default ``output_padding``
    (``stride - 1``) the spatial size is multiplied by ``stride`` exactly.
    """
    _check_conv_shapes(x, weight, stride, transpose=True)
    kh = weight.shape[-2]
    if pad is None:
        pad = kh // 2
    if output_padding is None:
        output_padding = stride - 1
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad, output_padding=output_padding)


# ---------------------------------------------------------------- elementwise


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


_ELEMENTWISE: dict[str, Callable[..., torch.Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "exp": torch.exp,
    "log": torch.log,
    "softplus": softplus,
    "tanh": torch.tanh,
    "sigmoid": sigmoid,
    "clamp": torch.clamp,
}


def _broadcastable(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.dim() == 0 or b.dim() == 0 or a.numel() == 1 or b.numel() == 1:
        return True
    if a.shape == b.shape:
        return True
    # trailing-dimension broadcasting only: the shorter shape must be a suffix
    short, long_ = (a.shape, b.shape) if a.dim() <= b.dim() else (b.shape, a.shape)
    return tuple(long_[len(long_) - len(short):]) == tuple(short)


def elementwise(op: str, *args, **kwargs) -> torch.Tensor:
    """Dispatch one of the supported elementwise ops by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        a, b = (torch.as_tensor(v) for v in args)
        if not _broadcastable(a, b):
            raise ValueError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} are not broadcast-compatible")
    return fn(*args, **kwargs)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def pairwise_sum(values: Iterable[torch.Tensor]) -> torch.Tensor:
    """Sum in a fixed balanced-tree order (keeps reductions reproducible)."""
    items = list(values)
    if not items:
        return torch.zeros(())
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


# ---------------------------------------------------------------- initialization


def kaiming_uniform_(weight: torch.Tensor, generator: torch.Generator, fan_in: int | None = None) -> torch.Tensor:
    if fan_in is None:
        fan_in = weight.shape[1] * weight[0, 0].numel()
    bound = float(np.sqrt(6.0 / fan_in))
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


# ---------------------------------------------------------------- parameters and Adam


class ParameterStore:
    """Named parameters plus Adam moments and a step counter.

    Parameters are shared with the owning ``nn.Module`` (same tensor objects),
    so ``adam_step`` updates the model in place.
    """

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]):
        items = params.items() if isinstance(params, Mapping) else params
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, p in items:
            if name in self.params:
                raise ValueError(f"duplicate parameter id {name!r}")
            self.params[name] = p
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step = 0
        self.warned: set[str] = set()

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterStore":
        return cls(module.named_parameters())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def tensors(self) -> OrderedDict[str, torch.Tensor]:
        """Everything needed to resume: values, moments and the step counter."""
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for n, p in self.params.items():
            out[n] = p.detach()
        for n in self.params:
            out["adam.m/" + n] = self.m[n]
            out["adam.v/" + n] = self.v[n]
        out["adam.step"] = torch.tensor([self.step], dtype=torch.int64)
        return out

    def load_tensors(self, tensors: Mapping[str, torch.Tensor], strict: bool = True) -> None:
        with torch.no_grad():
            for n, p in self.params.items():
                if n not in tensors:
                    if strict:
                        raise KeyError(f"checkpoint lacks parameter {n!r}")
                    continue
                src = tensors[n]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {n!r}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src)
                if "adam.m/" + n in tensors:
                    self.m[n].copy_(tensors["adam.m/" + n])
                    self.v[n].copy_(tensors["adam.v/" + n])
        if "adam.step" in tensors:
            self.step = int(tensors["adam.step"].reshape(-1)[0])


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """One bias-corrected Adam update over every parameter with a gradient."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad
            if g is None:
                if name not in store.warned:
                    log.warning("parameter %s has no gradient; skipped", name)
                    store.warned.add(name)
                continue
            m, v = store.m[name], store.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m / c1, denom, value=-lr)
    return store


# ---------------------------------------------------------------- STCK checkpoints

STCK_MAGIC = b"STCK"
STCK_VERSION = 1

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.int32: 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<i4"}


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(STCK_MAGIC)
    buf.write(struct.pack("<HI", STCK_VERSION, len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        code = _DTYPE_CODES[t.dtype]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_NP_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> OrderedDict[str, torch.Tensor]:
    view = memoryview(data)
    if bytes(view[:4]) != STCK_MAGIC:
        raise CheckpointError("not an STCK checkpoint")
    pos = 4
    try:
        version, count = struct.unpack_from("<HI", view, pos)
        pos += 6
        if version != STCK_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dt = np.dtype(_NP_DTYPES[code])
            n = int(np.prod(shape, dtype=np.int64))
            nbytes = n * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
            pos += nbytes
            out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=False))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return out


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor]) -> bytes:
    data = dumps_checkpoint(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path: str | os.PathLike) -> OrderedDict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


def checkpoint_hash(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
