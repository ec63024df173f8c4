"""Kernel functions mapping Gram matrices to kernel matrices.

Specs are small frozen-ish dataclasses; parameter fields may be python floats
or 0-dim torch tensors, so the same code path serves both fixed kernels and
kernels whose hyperparameters are being optimized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .matrices import DTYPE, DegenerateInputError, InvalidInputError, sqdist

# Correlations are clamped to [-1 + CORR_EPS, 1 - CORR_EPS] before arccos so
# gradients stay finite for (near-)duplicate points.
CORR_EPS = 1e-12


def _val(x) -> float:
    if torch.is_tensor(x):
        return float(x.detach())
    return float(x)


@dataclass(frozen=True)
class Linear:
    """Identity kernel: K(G) = G."""


@dataclass(frozen=True)
class SqExp:
    """Squared-exponential kernel ``K_ij = exp(-R_ij / (2 l^2))``."""

    lengthscale: object = 1.0

    def __post_init__(self):
        if _val(self.lengthscale) <= 0:
            raise InvalidInputError("SqExp lengthscale must be positive")


@dataclass(frozen=True)
class ArcCosRelu:
    """Order-1 arccos kernel of the sqrt(2)-scaled relu; preserves the diagonal."""


@dataclass(frozen=True)
class LeakyRelu:
    """Mixture kernel ``p * ArcCosRelu(G) + (1 - p) * G`` with p in (0, 1]."""

    p: object = 1.0

    def __post_init__(self):
        if not 0 < _val(self.p) <= 1:
            raise InvalidInputError("LeakyRelu p must lie in (0, 1]")


@dataclass(frozen=True)
class Skip:
    """Residual-style kernel ``w1 * G + w2 * SqExp(G)``."""

    w1: object = 1.0
    w2: object = 1.0
    lengthscale: object = 1.0

    def __post_init__(self):
        if _val(self.w1) < 0 or _val(self.w2) < 0:
            raise InvalidInputError("Skip weights must be non-negative")
        if _val(self.w1) + _val(self.w2) <= 0:
            raise InvalidInputError("Skip requires w1 + w2 > 0")
        if _val(self.lengthscale) <= 0:
            raise InvalidInputError("Skip lengthscale must be positive")


KernelSpec = Linear | SqExp | ArcCosRelu | LeakyRelu | Skip

_VARIANTS = {cls.__name__.lower(): cls for cls in (Linear, SqExp, ArcCosRelu, LeakyRelu, Skip)}


def spec_to_dict(spec: KernelSpec) -> dict:
    d = {"variant": type(spec).__name__.lower()}
    for f in fields(spec):
        d[f.name] = _val(getattr(spec, f.name))
    return d


def spec_from_dict(d: dict) -> KernelSpec:
    d = dict(d)
    try:
        cls = _VARIANTS[str(d.pop("variant")).lower()]
    except KeyError as exc:
        raise InvalidInputError(f"unknown kernel variant: {exc}") from None
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise InvalidInputError(f"unknown kernel parameters {sorted(unknown)} for {cls.__name__}")
    return cls(**d)


def _sqexp(g: torch.Tensor, lengthscale) -> torch.Tensor:
    r = sqdist(g)
    ls = torch.as_tensor(lengthscale, dtype=DTYPE)
    return torch.exp(-r / (2 * ls**2))


def _arccos_relu(g: torch.Tensor) -> torch.Tensor:
    d = g.diagonal(dim1=-2, dim2=-1)
    if (d <= 0).any():
        raise DegenerateInputError("ArcCosRelu requires strictly positive diagonal entries")
    norm = torch.sqrt(d.unsqueeze(-1) * d.unsqueeze(-2))
    c = (g / norm).clamp(-1 + CORR_EPS, 1 - CORR_EPS)
    theta = torch.arccos(c)
    k = norm / math.pi * (torch.sqrt(1 - c**2) + (math.pi - theta) * c)
    # exact diagonal: E[phi(x)^2] = G_ii for the sqrt(2)-scaled relu
    eye = torch.eye(g.shape[-1], dtype=torch.bool)
    k = torch.where(eye, g, k)
    return (k + k.transpose(-1, -2)) / 2


def kernel_apply(spec: KernelSpec, g) -> torch.Tensor:
    """Apply a kernel to a Gram matrix, returning the kernel matrix."""
    g = torch.as_tensor(g, dtype=DTYPE)
    if isinstance(spec, Linear):
        return g
    if isinstance(spec, SqExp):
        return _sqexp(g, spec.lengthscale)
    if isinstance(spec, ArcCosRelu):
        return _arccos_relu(g)
    if isinstance(spec, LeakyRelu):
        p = torch.as_tensor(spec.p, dtype=DTYPE)
        return p * _arccos_relu(g) + (1 - p) * g
    if isinstance(spec, Skip):
        w1 = torch.as_tensor(spec.w1, dtype=DTYPE)
        w2 = torch.as_tensor(spec.w2, dtype=DTYPE)
        return w1 * g + w2 * _sqexp(g, spec.lengthscale)
    raise InvalidInputError(f"unknown kernel spec {spec!r}")


def kernel_apply_blocks(spec: KernelSpec, g_ii, g_ti, g_tt_diag):
    """Apply a kernel to a two-block Gram matrix keeping only diag(K_tt).

    ``g_ii`` is the square block for the reference points, ``g_ti`` the
    cross block (rows index the other point set) and ``g_tt_diag`` the
    marginal second moments of the other point set.  Returns
    ``(k_ii, k_ti, k_tt_diag)``.  Cost is linear in the number of rows of
    ``g_ti``.
    """
    g_ii = torch.as_tensor(g_ii, dtype=DTYPE)
    g_ti = torch.as_tensor(g_ti, dtype=DTYPE)
    d_t = torch.as_tensor(g_tt_diag, dtype=DTYPE)
    d_i = g_ii.diagonal()
    if isinstance(spec, Linear):
        return g_ii, g_ti, d_t
    if isinstance(spec, SqExp):
        ls = torch.as_tensor(spec.lengthscale, dtype=DTYPE)
        r_ti = (d_t.unsqueeze(-1) - 2 * g_ti + d_i.unsqueeze(0)).clamp(min=0.0)
        return _sqexp(g_ii, ls), torch.exp(-r_ti / (2 * ls**2)), torch.ones_like(d_t)
    if isinstance(spec, ArcCosRelu):
        if (d_i <= 0).any() or (d_t <= 0).any():
            raise DegenerateInputError("ArcCosRelu requires strictly positive variances")
        norm = torch.sqrt(d_t.unsqueeze(-1) * d_i.unsqueeze(0))
        c = (g_ti / norm).clamp(-1 + CORR_EPS, 1 - CORR_EPS)
        theta = torch.arccos(c)
        k_ti = norm / math.pi * (torch.sqrt(1 - c**2) + (math.pi - theta) * c)
        return _arccos_relu(g_ii), k_ti, d_t
    if isinstance(spec, LeakyRelu):
        p = torch.as_tensor(spec.p, dtype=DTYPE)
        a_ii, a_ti, a_tt = kernel_apply_blocks(ArcCosRelu(), g_ii, g_ti, d_t)
        return (p * a_ii + (1 - p) * g_ii,
                p * a_ti + (1 - p) * g_ti,
                p * a_tt + (1 - p) * d_t)
    if isinstance(spec, Skip):
        w1 = torch.as_tensor(spec.w1, dtype=DTYPE)
        w2 = torch.as_tensor(spec.w2, dtype=DTYPE)
        s_ii, s_ti, s_tt = kernel_apply_blocks(SqExp(spec.lengthscale), g_ii, g_ti, d_t)
        return w1 * g_ii + w2 * s_ii, w1 * g_ti + w2 * s_ti, w1 * d_t + w2 * s_tt
    raise InvalidInputError(f"unknown kernel spec {spec!r}")


def scaled_relu(x):
    """The sqrt(2)-scaled relu whose second moment matches its Gaussian input."""
    x = torch.as_tensor(x, dtype=DTYPE)
    return math.sqrt(2.0) * torch.clamp(x, min=0.0)


def leaky_relu_pointwise(x, p):
    """Pointwise nonlinearity whose kernel is the LeakyRelu mixture.

    ``phi(x) = sqrt(p) * scaled_relu(x) + (sqrt(1 - p/2) - sqrt(p/2)) * x``
    """
    if not 0 < _val(p) <= 1:
        raise InvalidInputError("p must lie in (0, 1]")
    x = torch.as_tensor(x, dtype=DTYPE)
    a = math.sqrt(_val(p))
    b = math.sqrt(1 - _val(p) / 2) - math.sqrt(_val(p) / 2)
    return a * scaled_relu(x) + b * x
