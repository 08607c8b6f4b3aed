"""``STVC`` bitstream container.

Layout (little-endian)::

    "STVC" | version u16 | config block | model sha256 (32 B) | quality B u8
    | frame count u32 | height u16 | width u16
    | chunk table: (offset u64, length u32) per frame
    | chunks (length u32, crc32 u32, payload) | crc32 u32 over everything before it

The quality byte is 255 for fixed-rate models.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from . import rangecoder as rc
from .models import PRIORS, TRANSFORMS, ModelConfig

MAGIC = b"STVC"
VERSION = 1
NO_QUALITY = 255

_HEAD = struct.Struct("<4sH")
_CONFIG = struct.Struct("<BBBBHBfHB")
_TAIL = struct.Struct("<32sBIHH")
_ENTRY = struct.Struct("<QI")
_CRC = struct.Struct("<I")
MAX_FRAMES = 1 << 20


class ContainerError(rc.CorruptStreamError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class ModelMismatchError(ContainerError):
    pass


@dataclass
class Header:
    config: tuple
    model_hash: bytes
    quality: int | None
    frames: int
    height: int
    width: int


def pack_config(cfg: ModelConfig) -> bytes:
    return _CONFIG.pack(
        TRANSFORMS.index(cfg.transform),
        PRIORS.index(cfg.prior),
        int(cfg.hyperprior),
        cfg.vbr_levels,
        cfg.channels,
        cfg.M,
        cfg.sigma0,
        cfg.gop,
        int(cfg.pyramid),
    )


def config_key(cfg: ModelConfig) -> tuple:
    return _CONFIG.unpack(pack_config(cfg))


def write(cfg: ModelConfig, model_hash: bytes, quality: int | None, height: int, width: int, payloads: list[bytes]) -> bytes:
    if len(model_hash) != 32:
        raise ValueError("model hash must be 32 bytes")
    head = _HEAD.pack(MAGIC, VERSION) + pack_config(cfg)
    head += _TAIL.pack(model_hash, NO_QUALITY if quality is None else quality, len(payloads), height, width)
    chunks = [rc.pack_chunk(p) for p in payloads]
    offset = len(head) + _ENTRY.size * len(chunks)
    table = b""
    for c in chunks:
        table += _ENTRY.pack(offset, len(c))
        offset += len(c)
    body = head + table + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def read(data: bytes) -> tuple[Header, list[bytes]]:
    """Parse and validate a container; raises a :class:`ContainerError` subclass on damage."""
    data = bytes(data)
    fixed = _HEAD.size + _CONFIG.size + _TAIL.size
    if len(data) < fixed + _CRC.size:
        raise TruncatedError("container shorter than its fixed header")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    body = data[: -_CRC.size]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("container checksum mismatch")
    magic, version = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise ContainerError("not an STVC container")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    config = _CONFIG.unpack_from(body, _HEAD.size)
    model_hash, q, frames, height, width = _TAIL.unpack_from(body, _HEAD.size + _CONFIG.size)
    if frames > MAX_FRAMES:
        raise ContainerError("implausible frame count")
    table_end = fixed + _ENTRY.size * frames
    if table_end > len(body):
        raise TruncatedError("chunk table truncated")
    payloads = []
    expect = table_end
    for i in range(frames):
        off, length = _ENTRY.unpack_from(body, fixed + _ENTRY.size * i)
        if off != expect:
            raise ContainerError("chunk offsets are not contiguous and increasing")
        if off + length > len(body):
            raise TruncatedError("chunk extends past the end of the container")
        payload, nxt = rc.unpack_chunk(body, off)
        if nxt != off + length:
            raise ContainerError("chunk length disagrees with the chunk table")
        payloads.append(payload)
        expect = nxt
    if expect != len(body):
        raise ContainerError("trailing bytes after the last chunk")
    header = Header(config, model_hash, None if q == NO_QUALITY else q, frames, height, width)
    return header, payloads


def check_model(header: Header, cfg: ModelConfig, model_hash: bytes) -> None:
    if header.model_hash != model_hash:
        raise ModelMismatchError("container was produced with a different checkpoint")
    if header.config != config_key(cfg):
        raise ModelMismatchError("container configuration does not match the checkpoint")
    if cfg.vbr_levels:
        if header.quality is None or header.quality >= cfg.vbr_levels:
            raise ContainerError("quality index missing or out of range")
    elif header.quality is not None:
        raise ContainerError("fixed-rate model but container carries a quality index")
