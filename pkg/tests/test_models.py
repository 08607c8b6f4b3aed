from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch
from scipy.stats import norm

from stvc import codec
from stvc import entropy as E
from stvc import synthetic
from stvc.models import PRIORS, TRANSFORMS, VBR_BETAS, CodecState, ModelConfig, build_model, hyper_size, latent_size

SMALL = dict(channels=8, M=2)


def variants():
    out = [ModelConfig("TAT", "factorized", **SMALL), ModelConfig("TAT", "factorized", hyperprior=False, **SMALL)]
    for t, p in itertools.product(TRANSFORMS[1:], PRIORS):
        out.append(ModelConfig(t, p, **SMALL))
    out.append(ModelConfig("STAT_SSF", "SP", hyperprior=False, **SMALL))
    out.append(ModelConfig("SSF", "TP", hyperprior=False, **SMALL))
    out.append(ModelConfig("SSF", "factorized", vbr_levels=7, **SMALL))
    out.append(ModelConfig("STAT_SSF", "SP_TP_PLUS", vbr_levels=3, M=0, channels=8, pyramid=False))
    return out


def perturb(model, scale=0.05, seed=0):
    """Move every parameter off its init so zero-initialized branches carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def clip(frames=30, size=32, seed=0):
    return synthetic.generate(synthetic.SynthParams(frames=frames, height=size, width=size), seed).tensor()


# ---------------------------------------------------------------- configuration


def test_config_validation():
    for p in ("SP", "TP", "TP_PLUS", "SP_TP_PLUS"):
        with pytest.raises(E.ContractError):
            ModelConfig("TAT", p)
    with pytest.raises(E.ContractError):
        ModelConfig("SSF", "factorized", vbr_levels=3, betas=(1e-3, 1e-2))
    with pytest.raises(E.ContractError):
        ModelConfig("BOGUS")
    with pytest.raises(E.ContractError):
        ModelConfig("SSF", "nope")
    with pytest.raises(E.ContractError):
        ModelConfig(gop=0)
    assert ModelConfig("SSF", vbr_levels=7).betas == VBR_BETAS


def test_vbr_beta_table():
    assert VBR_BETAS == (1e-2, 5e-3, 2.5e-3, 1e-3, 5e-4, 2.5e-4, 1e-4)


def test_config_json_roundtrip_and_names():
    for cfg in variants():
        assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert ModelConfig("STAT_SSF", "SP_TP_PLUS").name == "STAT-SSF-SP-TP+"
    assert ModelConfig("SSF", "TP", vbr_levels=7).name == "VBR-SSF-TP"


def test_latent_shapes():
    model = build_model(ModelConfig("STAT_SSF", "SP", **SMALL))
    x = torch.rand(1, 2, 3, 48, 64)
    res = model(x, training=False)
    shapes = {t.name: tuple(t.values.shape) for t in res[1].terms}
    assert shapes["w"] == shapes["v"] == (1, 8, 3, 4) == (1, 8, *latent_size(48, 64))
    assert shapes["w_h"] == shapes["v_h"] == (1, 8, *hyper_size(48, 64))
    assert {t.name: tuple(t.values.shape) for t in res[0].terms}["y"] == (1, 8, 3, 4)


def test_frame_shape_checks():
    model = build_model(ModelConfig("SSF", **SMALL))
    with pytest.raises(ValueError):
        model.frame(torch.rand(1, 3, 20, 32), CodecState(), training=False)
    with pytest.raises(ValueError):
        model.frame(torch.rand(1, 1, 32, 32), CodecState(), training=False)


def test_matched_seed_shares_weights():
    a = dict(build_model(ModelConfig("SSF", "factorized", seed=3, **SMALL)).named_parameters())
    b = dict(build_model(ModelConfig("STAT_SSF", "SP", seed=3, **SMALL)).named_parameters())
    c = dict(build_model(ModelConfig("SSF", "factorized", seed=4, **SMALL)).named_parameters())
    shared = [k for k in a if k in b and a[k].shape == b[k].shape]
    assert len(shared) > 20
    assert all(torch.equal(a[k], b[k]) for k in shared)
    assert not all(torch.equal(a[k], c[k]) for k in a)


# ---------------------------------------------------------------- reductions


def _pair(src_cfg, dst_cfg, seed):
    src = perturb(build_model(src_cfg, torch.float64), seed=seed)
    dst = build_model(dst_cfg, torch.float64)
    missing = dst.load_state_dict(src.state_dict(), strict=False)
    assert not missing.unexpected_keys
    return src, dst


@pytest.mark.parametrize("seed", range(4))
def test_stat_ssf_unit_sigma_equals_ssf(seed):
    ssf, stat = _pair(ModelConfig("SSF", "SP", **SMALL), ModelConfig("STAT_SSF", "SP", **SMALL), seed)
    # sigma branches stay at their zero init, so sigma = exp(0) = 1
    g = torch.Generator().manual_seed(100 + seed)
    for _ in range(25):
        clip_ = torch.rand(2, 3, 3, 32, 32, generator=g, dtype=torch.float64)
        a = ssf(clip_, training=False)
        b = stat(clip_, training=False)
        for ra, rb in zip(a, b):
            assert torch.equal(ra.x_hat, rb.x_hat)
            assert [float(t.bits().detach()) for t in ra.terms] == [float(t.bits().detach()) for t in rb.terms]


def test_stat_reduces_to_tat():
    tat, stat = _pair(ModelConfig("TAT", **SMALL), ModelConfig("STAT", **SMALL), 0)
    with torch.no_grad():
        stat.pframe.sigma_x.convs[-1].weight.zero_()
        stat.pframe.sigma_x.convs[-1].bias.zero_()
        tat.pframe.sigma_x.convs[-1].weight.zero_()
        tat.pframe.sigma_x.convs[-1].bias.zero_()
    # mu_w and sigma_w keep their zero-initialized last layers; w_in is bias-free, so zeroed w channels drop out
    assert float(stat.pframe.residual_dec.w_in.weight.detach().abs().max()) > 0
    g = torch.Generator().manual_seed(9)
    for _ in range(10):
        x_prev = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
        w_hat = torch.zeros(2, 8, 2, 2, dtype=torch.float64)
        v_hat = torch.round(torch.randn(2, 8, 2, 2, generator=g, dtype=torch.float64) * 3)
        mu_a, s_a, _ = tat.pframe.predict(x_prev, None, None)
        mu_b, s_b, _ = stat.pframe.predict(x_prev, w_hat, None)
        assert torch.equal(mu_a, mu_b) and torch.equal(s_a, s_b) and bool((s_a == 1).all())
        xa, _ = tat.pframe.synthesize(mu_a, s_a, v_hat, None, None)
        xb, _ = stat.pframe.synthesize(mu_b, s_b, v_hat, w_hat, None)
        assert torch.equal(xa, xb)


def test_tat_identity_branches_give_plain_residual_coding():
    model = build_model(ModelConfig("TAT", **SMALL), torch.float64)
    x_prev = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    mu, sigma, _ = model.pframe.predict(x_prev, None, None)
    assert torch.equal(mu, x_prev) and bool((sigma == 1).all())


def test_tat_transform_only_inverse():
    model = perturb(build_model(ModelConfig("TAT", **SMALL), torch.float64), 0.3)
    g = torch.Generator().manual_seed(2)
    x_prev = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    mu, sigma, _ = model.pframe.predict(x_prev, None, None)
    assert float(sigma.detach().min()) > 0 and not bool((sigma == 1).all())
    y = (x - mu) / sigma
    assert float((mu + sigma * y - x).detach().abs().max()) <= 1e-5


def test_sigma_clamped():
    model = build_model(ModelConfig("STAT", **SMALL), torch.float64)
    with torch.no_grad():
        model.pframe.sigma_x.convs[-1].bias.fill_(50.0)
    _, sigma, _ = model.pframe.predict(torch.rand(1, 3, 16, 16, dtype=torch.float64), torch.zeros(1, 8, 1, 1, dtype=torch.float64), None)
    assert float(sigma.detach().max()) == pytest.approx(np.exp(8.0))


def test_ssf_zero_residual_returns_prediction():
    model = perturb(build_model(ModelConfig("SSF", **SMALL), torch.float64))
    with torch.no_grad():
        model.pframe.residual_dec.net.convs[-1].weight.zero_()
        model.pframe.residual_dec.net.convs[-1].bias.zero_()
        model.pframe.residual_dec.w_in.weight.zero_()
    res = model(torch.rand(1, 2, 3, 32, 32, dtype=torch.float64), training=False)[1]
    assert torch.equal(res.x_hat, res.extras["mu"])


def test_zero_field_prediction_is_reference():
    model = perturb(build_model(ModelConfig("SSF", **SMALL), torch.float64))
    last = model.pframe.motion_dec.convs[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
        last.bias[2] = -1e4
    x_prev = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    mu, sigma, extras = model.pframe.predict(x_prev, torch.randn(1, 8, 2, 2, dtype=torch.float64), None)
    assert sigma is None
    assert float(extras["flow"].detach().abs().max()) == 0
    assert float((mu - x_prev).detach().abs().max()) <= 1e-6


def test_sp_constant_context_matches_unit_gaussian():
    cfg = ModelConfig("STAT_SSF", "SP", **SMALL)
    model = perturb(build_model(cfg, torch.float64))
    last = model.pframe.v_ctx.convs[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias[:8] = 0.0
        last.bias[8:] = E.raw_sigma_for(1.0)
    res = model(torch.rand(1, 2, 3, 32, 32, dtype=torch.float64), training=False)[1]
    v = next(t for t in res.terms if t.name == "v")
    k = v.values.detach().numpy()
    oracle = -np.log2(norm.cdf(k + 0.5) - norm.cdf(k - 0.5))
    assert abs(float(v.bits().detach()) - oracle.sum()) / k.size <= 1e-6


def test_decode_order_under_sp():
    model = build_model(ModelConfig("SSF", "SP", **SMALL))
    res = model(torch.rand(1, 2, 3, 32, 32), training=False)[1]
    assert [t.name for t in res.terms] == ["w_h", "w", "v_h", "v"]
    v = res.terms[-1]
    assert set(v.depends_on) == {"v_h", "w", "w_h"}
    E.check_order(res.terms)
    for perm in itertools.permutations(res.terms):
        if [t.name for t in perm] != ["w_h", "w", "v_h", "v"] and [t.name for t in perm] != ["v_h", "w_h", "w", "v"]:
            if any(perm.index(t) > perm.index(v) for t in res.terms if t.name in v.depends_on) or perm.index(res.terms[0]) > perm.index(res.terms[1]):
                with pytest.raises(E.ContractError):
                    E.rate_bits(list(perm))


def test_tp_routes_second_frame_to_dedicated_prior():
    model = build_model(ModelConfig("SSF", "TP", **SMALL))
    res = model(torch.rand(1, 4, 3, 32, 32), training=False)
    v2 = [t for t in res[1].terms if t.name == "v"][0]
    v3 = [t for t in res[2].terms if t.name == "v"][0]
    assert v2.prior is model.pframe.v2_prior
    assert "v_h" not in [t.name for t in res[1].terms]
    assert isinstance(v3.prior, E.GaussianParams)


def test_tp_plus_has_no_special_case():
    model = build_model(ModelConfig("SSF", "TP_PLUS", **SMALL))
    res = model(torch.rand(1, 3, 3, 32, 32), training=False)
    assert all(isinstance(t.prior, E.GaussianParams) for r in res[1:] for t in r.terms if t.name == "v")


def test_temporal_params_deterministic():
    model = perturb(build_model(ModelConfig("SSF", "TP_PLUS", hyperprior=False, **SMALL), torch.float64))
    state = CodecState(torch.rand(1, 3, 32, 32, dtype=torch.float64), None, 2)
    a = model.pframe.temporal_prior_params(state, (2, 2), None)
    b = model.pframe.temporal_prior_params(state, (2, 2), None)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.sigma, b.sigma)


def test_gop_reset():
    model = build_model(ModelConfig("SSF", gop=3, **SMALL))
    res = model(torch.rand(1, 7, 3, 32, 32), training=False)
    kinds = ["y" in [t.name for t in r.terms] for r in res]
    assert kinds == [True, False, False, True, False, False, True]


# ---------------------------------------------------------------- VBR conditioning


def test_vbr_condition_errors():
    fixed = build_model(ModelConfig("SSF", **SMALL))
    vbr = build_model(ModelConfig("SSF", vbr_levels=7, **SMALL))
    x = torch.rand(1, 2, 3, 32, 32)
    with pytest.raises(E.ContractError):
        fixed.condition(2, 1)
    with pytest.raises(E.ContractError):
        vbr.condition(None, 1)
    with pytest.raises(E.ContractError):
        vbr.condition(7, 1)
    with pytest.raises(E.ContractError):
        vbr(x, cond=torch.ones(1, 7), training=False)
    with pytest.raises(E.ContractError):
        vbr(x, cond=torch.zeros(1, 5), training=False)
    with pytest.raises(E.ContractError):
        vbr(x, training=False)
    with pytest.raises(E.ContractError):
        fixed(x, cond=vbr.condition(0, 1), training=False)


def test_vbr_levels_change_output():
    model = perturb(build_model(ModelConfig("SSF", vbr_levels=7, **SMALL)), 0.2)
    x = torch.rand(1, 2, 3, 32, 32)
    a = model(x, cond=model.condition(0, 1), training=False)
    b = model(x, cond=model.condition(6, 1), training=False)
    assert not torch.equal(a[1].x_hat, b[1].x_hat)


# ---------------------------------------------------------------- closed loop


@pytest.mark.parametrize("cfg", variants(), ids=lambda c: c.name + ("" if c.hyperprior else "-nohyper") + (f"-M{c.M}"))
def test_closed_loop_30_frames(cfg):
    model = perturb(build_model(cfg), 0.02)
    frames = clip(30, 32, seed=1)
    quality = 1 if cfg.vbr_levels else None
    payloads, recon = codec.encode_sequence(model, frames, quality)
    out = codec.decode_sequence(model, payloads, 32, 32, quality)
    assert len(payloads) == 30
    assert torch.equal(out, recon)
    assert all(len(p) > 0 for p in payloads)


def test_closed_loop_odd_size_padding():
    model = build_model(ModelConfig("STAT_SSF", "SP", **SMALL))
    frames = clip(4, 32)[:, :, :27, :21]
    payloads, recon = codec.encode_sequence(model, frames)
    out = codec.decode_sequence(model, payloads, 27, 21)
    assert out.shape == (4, 3, 27, 21) and torch.equal(out, recon)


def test_encoder_uses_reconstruction_not_source():
    model = perturb(build_model(ModelConfig("SSF", **SMALL)), 0.02)
    frames = clip(3, 32)
    _, recon = codec.encode_sequence(model, frames)
    state = CodecState()
    with torch.no_grad():
        for t in range(3):
            res, state = model.frame(frames[t : t + 1], state, training=False)
            assert torch.equal(state.x_prev[0], recon[t])


def test_decode_wrong_frame_shape_is_typed_error():
    model = build_model(ModelConfig("SSF", **SMALL))
    payloads, _ = codec.encode_sequence(model, clip(2, 32))
    with pytest.raises(Exception) as info:
        codec.decode_sequence(model, payloads, 64, 64)
    assert isinstance(info.value, (ValueError, E.ContractError)) or "Corrupt" in type(info.value).__name__


def test_iframe_rate_positive_and_zero_frame_cheaper():
    model = perturb(build_model(ModelConfig("SSF", **SMALL)), 0.02)
    noise = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    bits_noise = codec.analytic_bits(model, noise)
    bits_zero = codec.analytic_bits(model, torch.zeros(1, 3, 32, 32))
    assert bits_noise > 0 and bits_zero > 0


def test_closed_loop_with_exploding_latents():
    # a strongly perturbed TAT drives reconstructions far past the raw escape range
    model = perturb(build_model(ModelConfig("TAT", "factorized", **SMALL)), 0.05, seed=0)
    frames = synthetic.generate(synthetic.SynthParams(frames=30, height=32, width=32), 0).tensor()
    payloads, recon = codec.encode_sequence(model, frames)
    assert float(recon.abs().max()) > 2**31
    assert torch.equal(codec.decode_sequence(model, payloads, 32, 32), recon)
