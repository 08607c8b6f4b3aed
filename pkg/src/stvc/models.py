"""I-frame and P-frame codecs: TAT, SSF, STAT and STAT-SSF with SP/TP/TP+ priors.

A P-frame reconstruction always has the form ``mu + sigma * r``:

* TAT       ``mu = x' + A(x')``, ``sigma = exp(S(x'))``, ``r = g_v(v)``
* SSF       ``mu = warp(ssv(x'), g_w(w))``, ``sigma = 1``, ``r = g_v(v, w)``
* STAT      ``mu = x' + A(x') + B(w)``, ``sigma = exp(S(x') + U(w))``
* STAT-SSF  ``mu`` as SSF, ``sigma`` as STAT

where ``x'`` is the previous reconstruction.  Branches that only exist in the
richer variants are zero-initialized, so each model starts as (and can be
reduced exactly to) its simpler relative.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import torch
import torch.nn as nn

from . import scale_space as ss
from . import tensor as T
from .entropy import (
    HYPER_SUPPORT,
    MAIN_SUPPORT,
    CodedTerm,
    ContractError,
    FactorizedPrior,
    GaussianParams,
    gaussian_params,
    quantize,
)
from .layers import (
    Conv,
    HyperAnalysis,
    HyperSynthesis,
    analysis,
    check_condition,
    pointwise_net,
    seed_init,
    synthesis,
)

TRANSFORMS = ("TAT", "SSF", "STAT", "STAT_SSF")
PRIORS = ("factorized", "SP", "TP", "TP_PLUS", "SP_TP_PLUS")
VBR_BETAS = (1e-2, 5e-3, 2.5e-3, 1e-3, 5e-4, 2.5e-4, 1e-4)
LOG_SIGMA_BOUND = 8.0
SCALE_INIT_BIAS = -3.0


@dataclass(frozen=True)
class ModelConfig:
    transform: str = "STAT_SSF"
    prior: str = "factorized"
    hyperprior: bool = True
    vbr_levels: int = 0
    betas: tuple[float, ...] = ()
    channels: int = 32
    M: int = 3
    sigma0: float = 1.5
    gop: int = 12
    pyramid: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.transform not in TRANSFORMS:
            raise ContractError(f"unknown transform {self.transform!r}")
        if self.prior not in PRIORS:
            raise ContractError(f"unknown prior {self.prior!r}")
        if self.transform == "TAT" and self.prior != "factorized":
            raise ContractError("TAT has no motion/residual split; only the factorized prior applies")
        if self.vbr_levels and not self.betas:
            object.__setattr__(self, "betas", VBR_BETAS[: self.vbr_levels] if self.vbr_levels <= 7 else ())
        if self.vbr_levels and len(self.betas) != self.vbr_levels:
            raise ContractError("beta table length must equal the number of quality levels")
        if self.gop < 1:
            raise ContractError("GOP length must be >= 1")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def has_w(self) -> bool:
        return self.transform != "TAT"

    @property
    def warps(self) -> bool:
        return self.transform in ("SSF", "STAT_SSF")

    @property
    def has_sigma(self) -> bool:
        return self.transform != "SSF"

    @property
    def sp(self) -> bool:
        return self.prior in ("SP", "SP_TP_PLUS")

    @property
    def tp(self) -> bool:
        return self.prior == "TP"

    @property
    def tp_plus(self) -> bool:
        return self.prior in ("TP_PLUS", "SP_TP_PLUS")

    @property
    def name(self) -> str:
        base = self.transform.replace("_", "-")
        suffix = {"factorized": "", "SP": "-SP", "TP": "-TP", "TP_PLUS": "-TP+", "SP_TP_PLUS": "-SP-TP+"}[self.prior]
        return ("VBR-" if self.vbr_levels else "") + base + suffix

    def to_json(self) -> str:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["betas"] = tuple(d.get("betas", ()))
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class CodecState:
    """Decoder-reproducible state carried between frames of one GOP."""

    x_prev: torch.Tensor | None = None
    v_prev: torch.Tensor | None = None
    t: int = 1


@dataclass
class FrameResult:
    x_hat: torch.Tensor
    terms: list[CodedTerm]
    extras: dict[str, torch.Tensor] = field(default_factory=dict)


Source = Callable[[str, "FactorizedPrior | GaussianParams", tuple[int, ...], tuple[int, int]], torch.Tensor]


def latent_size(h: int, w: int) -> tuple[int, int]:
    return math.ceil(h / 16), math.ceil(w / 16)


def hyper_size(h: int, w: int) -> tuple[int, int]:
    lh, lw = latent_size(h, w)
    return math.ceil(lh / 2), math.ceil(lw / 2)


def _split_params(raw: torch.Tensor) -> GaussianParams:
    mu, s = raw.chunk(2, dim=1)
    return gaussian_params(mu, s)


def _check_frame(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"frames must be [N, 3, H, W], got {tuple(x.shape)}")
    if x.shape[-2] % 16 or x.shape[-1] % 16:
        raise ValueError("frame height and width must be multiples of 16")


class IFrameCodec(nn.Module):
    """Mean-scale hyperprior image codec for the first frame of each GOP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, lv = cfg.channels, cfg.vbr_levels
        self.enc = analysis(3, c, levels=lv)
        self.dec = synthesis(c, c, 3, levels=lv)
        self.hyper_enc = HyperAnalysis(c, c, levels=lv)
        self.hyper_dec = HyperSynthesis(c, c, c, levels=lv)
        self.ctx = pointwise_net(c, c, 2 * c, levels=lv)
        self.hyper_prior = FactorizedPrior(c)

    def params(self, y_h: torch.Tensor, size: tuple[int, int], cond) -> GaussianParams:
        return _split_params(self.ctx(self.hyper_dec(y_h, size, cond), cond))

    def forward(self, x, cond=None, generator=None, training=True) -> FrameResult:
        y = self.enc(x, cond)
        y_h_hat = quantize(self.hyper_enc(y, cond), training, generator)
        y_hat = quantize(y, training, generator)
        params = self.params(y_h_hat, y.shape[-2:], cond)
        terms = [
            CodedTerm("y_h", y_h_hat, self.hyper_prior, support=HYPER_SUPPORT),
            CodedTerm("y", y_hat, params, ("y_h",)),
        ]
        return FrameResult(self.dec(y_hat, cond), terms)

    def replay(self, shape: tuple[int, int, int, int], cond, source: Source) -> FrameResult:
        n, _, h, w = shape
        c = self.hyper_prior.channels
        y_h = source("y_h", self.hyper_prior, (n, c, *hyper_size(h, w)), HYPER_SUPPORT)
        params = self.params(y_h, latent_size(h, w), cond)
        y = source("y", params, (n, c, *latent_size(h, w)), MAIN_SUPPORT)
        terms = [
            CodedTerm("y_h", y_h, self.hyper_prior, support=HYPER_SUPPORT),
            CodedTerm("y", y, params, ("y_h",)),
        ]
        return FrameResult(self.dec(y, cond), terms)


class ResidualDecoder(nn.Module):
    """``g_v(v, w)``: ``w`` joins through its own bias-free layer at latent resolution."""

    def __init__(self, c: int, with_w: bool, levels: int):
        super().__init__()
        self.net = synthesis(c, c, 3, levels=levels)
        self.w_in = Conv(c, c, 5, 2, transpose=True, bias=False) if with_w else None

    def forward(self, v, w, cond) -> torch.Tensor:
        convs = self.net.convs
        x = convs[0](v, cond)
        if self.w_in is not None:
            x = x + self.w_in(w)
        for conv in convs[1:]:
            x = conv(T.silu(x), cond)
        return x


class PFrameCodec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, lv = cfg.channels, cfg.vbr_levels
        if cfg.has_w:
            self.motion_enc = analysis(6, c, levels=lv)
        if cfg.warps:
            self.motion_dec = synthesis(c, c, 3, levels=lv)
        if cfg.transform in ("TAT", "STAT"):
            self.mu_x = pointwise_net(3, 16, 3, levels=lv, zero_last=True)
        if cfg.transform == "STAT":
            self.mu_w = synthesis(c, c, 3, levels=lv, zero_last=True)
        if cfg.has_sigma:
            self.sigma_x = pointwise_net(3, 16, 1, levels=lv, zero_last=True)
        if cfg.has_w and cfg.has_sigma:
            self.sigma_w = synthesis(c, c, 1, levels=lv, zero_last=True)
        self.residual_enc = analysis(3, c, levels=lv)
        self.residual_dec = ResidualDecoder(c, cfg.has_w, lv)

        if cfg.has_w:
            if cfg.hyperprior:
                self.w_hyper_enc = HyperAnalysis(c, c, levels=lv)
                self.w_hyper_dec = HyperSynthesis(c, c, c, levels=lv)
                self.w_ctx = pointwise_net(c, c, 2 * c, levels=lv)
                self.w_hyper_prior = FactorizedPrior(c)
            else:
                self.w_prior = FactorizedPrior(c)

        ctx_in = 0
        if cfg.hyperprior:
            self.v_hyper_enc = HyperAnalysis(c, c, levels=lv)
            self.v_hyper_dec = HyperSynthesis(c * (2 if cfg.sp else 1), c, c, levels=lv)
            self.v_hyper_prior = FactorizedPrior(c)
            ctx_in += c
        if cfg.sp:
            ctx_in += c
        if cfg.tp:
            ctx_in += c
            self.v2_prior = FactorizedPrior(c)
        if cfg.tp_plus:
            self.frame_feat = analysis(3, c, levels=lv)
            ctx_in += c
        if ctx_in:
            self.v_ctx = pointwise_net(ctx_in, c, 2 * c, levels=lv)
        else:
            self.v_prior = FactorizedPrior(c)

    def post_init(self) -> None:
        if self.cfg.warps:
            with torch.no_grad():
                self.motion_dec.convs[-1].bias[2] = SCALE_INIT_BIAS

    # ------------------------------------------------------------ transforms

    def volume(self, x_prev: torch.Tensor) -> ss.ScaleSpaceVolume:
        build = ss.build_ssv_pyramid if self.cfg.pyramid else ss.build_ssv_blur
        return build(x_prev, self.cfg.sigma0, self.cfg.M)

    def flow_field(self, w_hat, cond) -> torch.Tensor:
        raw = self.motion_dec(w_hat, cond)
        return torch.cat([raw[:, :2], ss.scale_from_raw(raw[:, 2:3], self.cfg.M)], dim=1)

    def predict(self, x_prev, w_hat, cond) -> tuple[torch.Tensor, torch.Tensor | None, dict]:
        """Shift ``mu`` and scale ``sigma`` (``None`` for SSF) from the reference and motion."""
        cfg, extras = self.cfg, {}
        if cfg.warps:
            fld = self.flow_field(w_hat, cond)
            mu = ss.scale_space_warp(self.volume(x_prev), fld)
            extras["flow"] = fld
        else:
            mu = x_prev + self.mu_x(x_prev, cond)
            if cfg.transform == "STAT":
                mu = mu + self.mu_w(w_hat, cond)
        sigma = None
        if cfg.has_sigma:
            log_sigma = self.sigma_x(x_prev, cond)
            if cfg.has_w:
                log_sigma = log_sigma + self.sigma_w(w_hat, cond)
            sigma = torch.exp(log_sigma.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND))
            extras["sigma"] = sigma
        return mu, sigma, extras

    def synthesize(self, mu, sigma, v_hat, w_hat, cond) -> tuple[torch.Tensor, torch.Tensor]:
        r = self.residual_dec(v_hat, w_hat, cond)
        x_hat = mu + r if sigma is None else mu + sigma * r
        return x_hat, r

    # ------------------------------------------------------------ priors

    def w_params(self, w_h, size, cond) -> GaussianParams:
        return _split_params(self.w_ctx(self.w_hyper_dec(w_h, size, cond), cond))

    def tp_first(self, state: CodecState) -> bool:
        return self.cfg.tp and (state.t <= 2 or state.v_prev is None)

    def v_model(self, state: CodecState, w_hat, w_h, v_h, size, cond) -> tuple[FactorizedPrior | GaussianParams, tuple[str, ...]]:
        """Entropy model for ``v`` and the terms it reads."""
        cfg = self.cfg
        if self.tp_first(state):
            return self.v2_prior, ()
        if not hasattr(self, "v_ctx"):
            return self.v_prior, ()
        ctx, deps = [], []
        if cfg.hyperprior:
            h_in = torch.cat([v_h, w_h], dim=1) if cfg.sp else v_h
            ctx.append(self.v_hyper_dec(h_in, size, cond))
            deps += ["v_h"] + (["w_h"] if cfg.sp else [])
        if cfg.sp:
            ctx.append(w_hat)
            deps.append("w")
        if cfg.tp:
            ctx.append(state.v_prev)
        if cfg.tp_plus:
            ctx.append(self.frame_feat(state.x_prev, cond))
        raw = self.v_ctx(torch.cat(ctx, dim=1), cond)
        return _split_params(raw), tuple(deps)

    def temporal_prior_params(self, state: CodecState, size, cond) -> FactorizedPrior | GaussianParams:
        """Prior for ``v_t`` driven only by temporal context (TP / TP+ without SP or hyperprior inputs)."""
        return self.v_model(state, None, None, None, size, cond)[0]

    def uses_v_hyper(self, state: CodecState) -> bool:
        return self.cfg.hyperprior and not self.tp_first(state)

    # ------------------------------------------------------------ passes

    def forward(self, x, state: CodecState, cond=None, generator=None, training=True) -> FrameResult:
        """Encoder-side pass: two-stage analysis, quantization, synthesis."""
        cfg = self.cfg
        x_prev = state.x_prev
        terms: list[CodedTerm] = []
        w_hat = w_h = None
        size = x.shape[-2:]
        lat = latent_size(*size)
        if cfg.has_w:
            w_bar = self.motion_enc(torch.cat([x, x_prev], dim=1), cond)
            w_hat = quantize(w_bar, training, generator)
            if cfg.hyperprior:
                w_h = quantize(self.w_hyper_enc(w_bar, cond), training, generator)
                terms.append(CodedTerm("w_h", w_h, self.w_hyper_prior, support=HYPER_SUPPORT))
                terms.append(CodedTerm("w", w_hat, self.w_params(w_h, lat, cond), ("w_h",)))
            else:
                terms.append(CodedTerm("w", w_hat, self.w_prior))
        mu, sigma, extras = self.predict(x_prev, w_hat, cond)
        y_bar = x - mu if sigma is None else (x - mu) / sigma
        v_bar = self.residual_enc(y_bar, cond)
        v_hat = quantize(v_bar, training, generator)
        v_h = None
        if self.uses_v_hyper(state):
            v_h = quantize(self.v_hyper_enc(v_bar, cond), training, generator)
            terms.append(CodedTerm("v_h", v_h, self.v_hyper_prior, support=HYPER_SUPPORT))
        prior, deps = self.v_model(state, w_hat, w_h, v_h, lat, cond)
        terms.append(CodedTerm("v", v_hat, prior, deps))
        x_hat, r = self.synthesize(mu, sigma, v_hat, w_hat, cond)
        extras.update(mu=mu, residual=r, y_bar=y_bar, v_hat=v_hat)
        return FrameResult(x_hat, terms, extras)

    def replay(self, shape, state: CodecState, cond, source: Source) -> FrameResult:
        """Decoder-side pass: pull latents from ``source`` in decode order."""
        cfg = self.cfg
        n, _, h, w = shape
        c = cfg.channels
        lat, hyp = latent_size(h, w), hyper_size(h, w)
        terms: list[CodedTerm] = []
        w_hat = w_h = v_h = None
        if cfg.has_w:
            if cfg.hyperprior:
                w_h = source("w_h", self.w_hyper_prior, (n, c, *hyp), HYPER_SUPPORT)
                terms.append(CodedTerm("w_h", w_h, self.w_hyper_prior, support=HYPER_SUPPORT))
                params = self.w_params(w_h, lat, cond)
                w_hat = source("w", params, (n, c, *lat), MAIN_SUPPORT)
                terms.append(CodedTerm("w", w_hat, params, ("w_h",)))
            else:
                w_hat = source("w", self.w_prior, (n, c, *lat), MAIN_SUPPORT)
                terms.append(CodedTerm("w", w_hat, self.w_prior))
        if self.uses_v_hyper(state):
            v_h = source("v_h", self.v_hyper_prior, (n, c, *hyp), HYPER_SUPPORT)
            terms.append(CodedTerm("v_h", v_h, self.v_hyper_prior, support=HYPER_SUPPORT))
        prior, deps = self.v_model(state, w_hat, w_h, v_h, lat, cond)
        v_hat = source("v", prior, (n, c, *lat), MAIN_SUPPORT)
        terms.append(CodedTerm("v", v_hat, prior, deps))
        mu, sigma, extras = self.predict(state.x_prev, w_hat, cond)
        x_hat, r = self.synthesize(mu, sigma, v_hat, w_hat, cond)
        extras.update(mu=mu, residual=r, v_hat=v_hat)
        return FrameResult(x_hat, terms, extras)


class VideoCodec(nn.Module):
    """I-frame codec plus P-frame codec sharing one configuration."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.iframe = IFrameCodec(cfg)
        self.pframe = PFrameCodec(cfg)
        seed_init(self, cfg.seed)
        self.pframe.post_init()

    def condition(self, quality: int | list[int] | None, batch: int, dtype=torch.float32) -> torch.Tensor | None:
        from .layers import one_hot

        if not self.cfg.vbr_levels:
            if quality is not None:
                raise ContractError("model is not variable-bitrate")
            return None
        if quality is None:
            raise ContractError("variable-bitrate model needs a quality index")
        idx = [quality] * batch if isinstance(quality, int) else list(quality)
        return one_hot(idx, self.cfg.vbr_levels, dtype)

    def frame(self, x, state: CodecState, cond=None, generator=None, training=True) -> tuple[FrameResult, CodecState]:
        """Code one frame (I-frame when the state is fresh) and advance the state."""
        _check_frame(x)
        check_condition(cond, self.cfg.vbr_levels, x.shape[0])
        if state.x_prev is None:
            res = self.iframe(x, cond, generator, training)
            return res, CodecState(res.x_hat, None, 2)
        res = self.pframe(x, state, cond, generator, training)
        return res, CodecState(res.x_hat, res.extras["v_hat"], state.t + 1)

    def replay_frame(self, shape, state: CodecState, cond, source: Source) -> tuple[FrameResult, CodecState]:
        if state.x_prev is None:
            res = self.iframe.replay(shape, cond, source)
            return res, CodecState(res.x_hat, None, 2)
        res = self.pframe.replay(shape, state, cond, source)
        return res, CodecState(res.x_hat, res.extras["v_hat"], state.t + 1)

    def forward(self, frames: torch.Tensor, cond=None, generator=None, training=True) -> list[FrameResult]:
        """Run a clip ``[N, T, 3, H, W]`` with GOP resets."""
        out = []
        state = CodecState()
        for t in range(frames.shape[1]):
            if t % self.cfg.gop == 0:
                state = CodecState()
            res, state = self.frame(frames[:, t], state, cond, generator, training)
            out.append(res)
        return out


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> VideoCodec:
    return VideoCodec(cfg).to(dtype)
