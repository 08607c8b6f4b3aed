"""Quantization and discrete entropy models over integer latents."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rangecoder import CdfTable, freeze_pmf

SIGMA_FLOOR = 1e-2
LIKELIHOOD_BOUND = 2.0**-50
MAIN_SUPPORT = (-64, 63)
HYPER_SUPPORT = (-32, 31)
LN2 = math.log(2.0)


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------- quantization


def quantize_train(z: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive ``U(-0.5, 0.5)`` noise; the gradient passes through unchanged."""
    u = torch.rand(z.shape, generator=generator, dtype=z.dtype, device=z.device) - 0.5
    return z + u


def quantize_eval(z: torch.Tensor) -> torch.Tensor:
    """Round half away from zero."""
    return torch.sign(z) * torch.floor(z.abs() + 0.5)


def quantize(z: torch.Tensor, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    return quantize_train(z, generator) if training else quantize_eval(z)


# ---------------------------------------------------------------- factorized prior


def _bin_mass(lower: torch.Tensor, upper: torch.Tensor) -> torch.Tensor:
    """``sigmoid(upper) - sigmoid(lower)``, evaluated on the side where both are small."""
    # a plain sign() is 0 for bins centred on the median, which would zero their mass
    sign = torch.where(lower + upper > 0, -1.0, 1.0).to(lower.dtype).detach()
    return (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF built from monotone affine layers.

    Each channel's cumulative is ``sigmoid(f(x))`` with ``f`` a chain of
    positive (softplus-constrained) matrices, biases, and ``tanh`` gating with
    bounded gain, which keeps ``f`` increasing.  Zero biases at init make the
    density symmetric about 0.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (8, 8, 8), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, K]
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m), x) + b
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def _to_channel_rows(self, z: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
        if z.dim() < 2 or z.shape[1] != self.channels:
            raise ValueError(f"expected [N, {self.channels}, ...], got {tuple(z.shape)}")
        perm = (1, 0, *range(2, z.dim()))
        zt = z.permute(*perm)
        shape = zt.shape
        return zt.reshape(self.channels, 1, -1), shape

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        rows, shape = self._to_channel_rows(z)
        lower = self.logits_cdf(rows - 0.5)
        upper = self.logits_cdf(rows + 0.5)
        p = _bin_mass(lower, upper)
        p = p.reshape(shape)
        perm = (1, 0, *range(2, z.dim()))
        return p.permute(*perm)

    def logp(self, z: torch.Tensor) -> torch.Tensor:
        return torch.log(self.likelihood(z).clamp_min(LIKELIHOOD_BOUND))

    def pmf(self, support: tuple[int, int] = MAIN_SUPPORT) -> torch.Tensor:
        """``[C, K]`` pmf over the integer support."""
        k = torch.arange(support[0], support[1] + 1, dtype=self.matrices[0].dtype)
        k = k.view(1, 1, -1).expand(self.channels, 1, -1)
        lower = self.logits_cdf(k - 0.5)
        upper = self.logits_cdf(k + 0.5)
        return _bin_mass(lower, upper).reshape(self.channels, -1)

    def cdf_table(self, support: tuple[int, int] = MAIN_SUPPORT) -> CdfTable:
        with torch.no_grad():
            pmf = self.pmf(support).double().numpy()
        return freeze_pmf(pmf, support[0])


# ---------------------------------------------------------------- conditional Gaussian


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share a shape")


def gaussian_params(raw_mu: torch.Tensor, raw_sigma: torch.Tensor, floor: float = SIGMA_FLOOR) -> GaussianParams:
    return GaussianParams(raw_mu, floor + F.softplus(raw_sigma))


def raw_sigma_for(sigma: float, floor: float = SIGMA_FLOOR) -> float:
    """Network output that yields a given ``sigma`` after the floor + softplus map."""
    return math.log(math.expm1(sigma - floor))


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(z: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """``P(k) = Phi((k + .5 - mu)/sigma) - Phi((k - .5 - mu)/sigma)``, evaluated in the lower tail."""
    v = (z - params.mu).abs()
    upper = _std_normal_cdf((0.5 - v) / params.sigma)
    lower = _std_normal_cdf((-0.5 - v) / params.sigma)
    return upper - lower


def conditional_gaussian_logp(params: GaussianParams, z: torch.Tensor) -> torch.Tensor:
    return torch.log(gaussian_likelihood(z, params).clamp_min(LIKELIHOOD_BOUND))


def gaussian_pmf_rows(params: GaussianParams, support: tuple[int, int] = MAIN_SUPPORT) -> np.ndarray:
    """One pmf row per element, ``[numel, K]`` in float64."""
    mu = params.mu.detach().reshape(-1, 1).double()
    sigma = params.sigma.detach().reshape(-1, 1).double()
    k = torch.arange(support[0], support[1] + 1, dtype=torch.float64).view(1, -1)
    return gaussian_likelihood(k, GaussianParams(mu.expand(-1, k.shape[1]), sigma.expand(-1, k.shape[1]))).numpy()


def gaussian_cdf_table(params: GaussianParams, support: tuple[int, int] = MAIN_SUPPORT) -> CdfTable:
    return freeze_pmf(gaussian_pmf_rows(params, support), support[0])


# ---------------------------------------------------------------- rate accounting


@dataclass
class CodedTerm:
    """One latent tensor with the entropy model that codes it.

    ``prior`` is a :class:`FactorizedPrior` or :class:`GaussianParams`;
    ``depends_on`` names terms that must be decodable before this one.
    """

    name: str
    values: torch.Tensor
    prior: FactorizedPrior | GaussianParams
    depends_on: tuple[str, ...] = ()
    support: tuple[int, int] = MAIN_SUPPORT

    def logp(self) -> torch.Tensor:
        if isinstance(self.prior, FactorizedPrior):
            return self.prior.logp(self.values)
        return conditional_gaussian_logp(self.prior, self.values)

    def bits(self) -> torch.Tensor:
        return -self.logp().sum() / LN2

    def bits_per_sample(self) -> torch.Tensor:
        """Bits summed per batch element, shape ``[N]``."""
        return -self.logp().flatten(1).sum(1) / LN2

    def cdf_table(self) -> tuple[CdfTable, np.ndarray]:
        """Return frozen table rows and the row index for each element (C-order)."""
        if isinstance(self.prior, FactorizedPrior):
            table = self.prior.cdf_table(self.support)
            n, c = self.values.shape[:2]
            per = int(np.prod(self.values.shape[2:]))
            index = np.broadcast_to(np.arange(c)[None, :, None], (n, c, per)).reshape(-1)
            return table, np.ascontiguousarray(index)
        table = gaussian_cdf_table(self.prior, self.support)
        return table, np.arange(table.rows)


@dataclass
class LatentBundle:
    """Terms of one frame in decode order."""

    terms: list[CodedTerm] = field(default_factory=list)

    def add(self, term: CodedTerm) -> None:
        self.terms.append(term)

    def __iter__(self):
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def names(self) -> list[str]:
        return [t.name for t in self.terms]


def check_order(terms: Sequence[CodedTerm]) -> None:
    seen: set[str] = set()
    for t in terms:
        missing = [d for d in t.depends_on if d not in seen]
        if missing:
            raise ContractError(f"{t.name} depends on {missing}, which are not decoded before it")
        seen.add(t.name)


def rate_bits(terms: Sequence[CodedTerm] | LatentBundle) -> torch.Tensor:
    """Total ``-log2 P`` over every coded element, after checking decode order."""
    terms = list(terms)
    check_order(terms)
    if not terms:
        return torch.zeros(())
    return sum((t.bits() for t in terms), torch.zeros((), dtype=terms[0].values.dtype))


def rate_bits_per_sample(terms: Sequence[CodedTerm] | LatentBundle) -> torch.Tensor:
    terms = list(terms)
    check_order(terms)
    if not terms:
        return torch.zeros(())
    total = terms[0].bits_per_sample()
    for t in terms[1:]:
        total = total + t.bits_per_sample()
    return total
