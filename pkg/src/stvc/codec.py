"""Frame-level entropy coding and model checkpoints.

Encoding runs the model once to obtain rounded latents and then replays the
decoder-side pass, range-coding each latent as soon as its entropy model is
available.  Decoding runs the same replay with latents pulled from the coder,
so both sides compute reconstructions with identical operations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import rangecoder as rc
from . import tensor as T
from .entropy import CodedTerm
from .models import CodecState, FrameResult, ModelConfig, VideoCodec, build_model

CONFIG_KEY = "meta/config"


# ---------------------------------------------------------------- checkpoints


def model_tensors(model: VideoCodec, store: T.ParameterStore | None = None) -> dict[str, torch.Tensor]:
    out = dict(store.tensors()) if store is not None else {n: p.detach() for n, p in model.named_parameters()}
    out[CONFIG_KEY] = torch.tensor(list(model.cfg.to_json().encode()), dtype=torch.uint8)
    return out


def save_model(path: str | os.PathLike, model: VideoCodec, store: T.ParameterStore | None = None) -> bytes:
    return T.save_checkpoint(path, model_tensors(model, store))


def config_from_tensors(tensors) -> ModelConfig:
    if CONFIG_KEY not in tensors:
        raise T.CheckpointError("checkpoint has no model configuration")
    return ModelConfig.from_json(bytes(tensors[CONFIG_KEY].tolist()).decode())


def model_from_tensors(tensors, dtype: torch.dtype = torch.float32) -> VideoCodec:
    model = build_model(config_from_tensors(tensors), dtype)
    T.ParameterStore.from_module(model).load_tensors(tensors, strict=True)
    model.eval()
    return model


@dataclass
class LoadedModel:
    model: VideoCodec
    digest: bytes
    tensors: dict


def load_model(path_or_bytes: str | os.PathLike | bytes) -> LoadedModel:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    tensors = T.loads_checkpoint(data)
    return LoadedModel(model_from_tensors(tensors), T.checkpoint_hash(data), tensors)


# ---------------------------------------------------------------- frames


# largest magnitude exactly representable in float32 below 2**31
LATENT_LIMIT = float(2**31 - 128)


def _flat_symbols(values: torch.Tensor) -> np.ndarray:
    return values.detach().reshape(-1).to(torch.float64).numpy().astype(np.int64)


def encode_frame(
    model: VideoCodec, x: torch.Tensor, state: CodecState, cond=None, enc: rc.RangeEncoder | None = None
) -> tuple[bytes | None, FrameResult, CodecState]:
    """Code one frame; returns the payload (``None`` if ``enc`` was supplied)."""
    with torch.no_grad():
        ref, _ = model.frame(x, state, cond, training=False)
        latents = {t.name: t.values for t in ref.terms}
        own = enc is None
        enc = rc.RangeEncoder() if own else enc

        def source(name, prior, shape, support):
            v = latents[name]
            if tuple(v.shape) != tuple(shape):
                raise ValueError(f"latent {name} has shape {tuple(v.shape)}, expected {shape}")
            # keep escapes within the raw 32-bit range; the replay then uses what the decoder will see
            v = v.clamp(-LATENT_LIMIT, LATENT_LIMIT)
            table, index = CodedTerm(name, v, prior, support=support).cdf_table()
            rc.encode_into(enc, _flat_symbols(v), table, index)
            return v

        res, new_state = model.replay_frame(tuple(x.shape), state, cond, source)
    return (enc.finish() if own else None), res, new_state


def decode_frame(
    model: VideoCodec, payload: bytes | rc.RangeDecoder, shape, state: CodecState, cond=None
) -> tuple[FrameResult, CodecState]:
    own = not isinstance(payload, rc.RangeDecoder)
    dec = rc.RangeDecoder(payload) if own else payload
    dtype = next(model.parameters()).dtype

    def source(name, prior, shp, support):
        probe = torch.zeros(shp, dtype=dtype)
        table, index = CodedTerm(name, probe, prior, support=support).cdf_table()
        count = int(np.prod(shp))
        sym = rc.decode_from(dec, table, count, index)
        return torch.from_numpy(sym.astype(np.float64)).to(dtype).reshape(shp)

    with torch.no_grad():
        res, new_state = model.replay_frame(tuple(shape), state, cond, source)
    if own:
        dec.finish()
    return res, new_state


def pad_multiple(cfg: ModelConfig) -> int:
    return max(16, 2**cfg.M)


def pad_frames(frames: torch.Tensor, multiple: int) -> torch.Tensor:
    """Replicate-pad ``[..., H, W]`` up to a multiple of ``multiple``."""
    h, w = frames.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return frames
    lead = frames.shape[:-3]
    x = frames.reshape(-1, *frames.shape[-3:])
    x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x.reshape(*lead, *x.shape[-3:])


def encode_sequence(model: VideoCodec, frames: torch.Tensor, quality: int | None = None) -> tuple[list[bytes], torch.Tensor]:
    """Code ``[T, 3, H, W]`` frames; returns per-frame payloads and encoder-side reconstructions."""
    h, w = frames.shape[-2:]
    x = pad_frames(frames, pad_multiple(model.cfg)).to(next(model.parameters()).dtype)
    cond = model.condition(quality, 1, x.dtype)
    payloads, recon = [], []
    state = CodecState()
    for t in range(x.shape[0]):
        if t % model.cfg.gop == 0:
            state = CodecState()
        data, res, state = encode_frame(model, x[t : t + 1], state, cond)
        payloads.append(data)
        recon.append(res.x_hat[0, :, :h, :w])
    return payloads, torch.stack(recon)


def decode_sequence(model: VideoCodec, payloads: list[bytes], height: int, width: int, quality: int | None = None) -> torch.Tensor:
    m = pad_multiple(model.cfg)
    shape = (1, 3, height + (-height) % m, width + (-width) % m)
    dtype = next(model.parameters()).dtype
    cond = model.condition(quality, 1, dtype)
    out = []
    state = CodecState()
    for t, data in enumerate(payloads):
        if t % model.cfg.gop == 0:
            state = CodecState()
        res, state = decode_frame(model, data, shape, state, cond)
        out.append(res.x_hat[0, :, :height, :width])
    return torch.stack(out)


def analytic_bits(model: VideoCodec, frames: torch.Tensor, quality: int | None = None) -> float:
    """Sum of ``-log2 P`` over all latents of a coded sequence (eval-mode rounding)."""
    from .entropy import rate_bits

    x = pad_frames(frames, pad_multiple(model.cfg)).to(next(model.parameters()).dtype)
    cond = model.condition(quality, 1, x.dtype)
    total = 0.0
    state = CodecState()
    with torch.no_grad():
        for t in range(x.shape[0]):
            if t % model.cfg.gop == 0:
                state = CodecState()
            res, state = model.frame(x[t : t + 1], state, cond, training=False)
            total += float(rate_bits(res.terms))
    return total
