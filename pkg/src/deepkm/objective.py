"""The representation-learning objective and its building blocks.

Everything here is a pure function of torch tensors and differentiable,
except the Wishart density helpers which are analysis-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import multigammaln

from .kernels import KernelSpec, kernel_apply
from .matrices import DTYPE, InvalidInputError, chol, validate_gram

LOG_2PI = math.log(2 * math.pi)


@dataclass
class WidthProfile:
    """Relative layer widths ``nu_0 .. nu_{L+1}`` for a depth-L model."""

    nus: list[float]

    def __post_init__(self):
        if len(self.nus) < 2:
            raise InvalidInputError("need at least nu_0 and nu_out")
        if any(nu <= 0 for nu in self.nus):
            raise InvalidInputError("all width ratios must be positive")

    @property
    def depth(self) -> int:
        return len(self.nus) - 2

    @property
    def hidden(self) -> list[float]:
        return list(self.nus[1:-1])

    @property
    def nu_out(self) -> float:
        return float(self.nus[-1])


@dataclass
class DkmState:
    """Per-layer Gram matrices plus the model configuration they belong to.

    ``kernels`` has L+1 entries: the kernel into each hidden layer followed
    by the output kernel.
    """

    grams: list[torch.Tensor]
    widths: WidthProfile
    kernels: list[KernelSpec]
    noise_var: float = 0.0

    def __post_init__(self):
        if len(self.grams) != self.widths.depth:
            raise InvalidInputError("number of Gram matrices must equal depth")
        if len(self.kernels) != self.widths.depth + 1:
            raise InvalidInputError("need depth + 1 kernel specs (hidden layers + output)")
        if float(self.noise_var) < 0:
            raise InvalidInputError("noise variance must be non-negative")

    def validate(self):
        for g in self.grams:
            validate_gram(g)
        return self


def _chol_logdet(factor: torch.Tensor) -> torch.Tensor:
    return 2 * factor.diagonal(dim1=-2, dim2=-1).log().sum(-1)


def kl_gaussian(g, k, mean=None) -> torch.Tensor:
    """KL divergence between N(mean, g) and N(0, k) for PD covariances.

    With the default zero mean this is
    ``0.5 * [tr(K^-1 G) - P + log|K| - log|G|]``.
    """
    g = torch.as_tensor(g, dtype=DTYPE)
    k = torch.as_tensor(k, dtype=DTYPE)
    p = g.shape[-1]
    lk = chol(k)
    lg = chol(g)
    trace = torch.cholesky_solve(g, lk).diagonal(dim1=-2, dim2=-1).sum(-1)
    out = 0.5 * (trace - p + _chol_logdet(lk) - _chol_logdet(lg))
    if mean is not None:
        m = torch.as_tensor(mean, dtype=DTYPE).reshape(-1, 1)
        out = out + 0.5 * (m * torch.cholesky_solve(m, lk)).sum()
    return out


def gaussian_loglik(y, cov) -> torch.Tensor:
    """Sum over columns of ``log N(y_col; 0, cov)`` for a P x M target matrix."""
    y = torch.as_tensor(y, dtype=DTYPE)
    if y.ndim == 1:
        y = y.unsqueeze(-1)
    p, m = y.shape
    factor = chol(cov)
    alpha = torch.cholesky_solve(y, factor)
    return -0.5 * (m * p * LOG_2PI + m * _chol_logdet(factor) + (y * alpha).sum())


def log_lik_regression(y, g_last, spec: KernelSpec, noise_var) -> torch.Tensor:
    """Regression log-likelihood ``sum_col log N(y_col; 0, K(G_L) + s2 I)``."""
    g_last = torch.as_tensor(g_last, dtype=DTYPE)
    cov = kernel_apply(spec, g_last)
    nv = torch.as_tensor(noise_var, dtype=DTYPE)
    cov = cov + nv * torch.eye(cov.shape[-1], dtype=DTYPE)
    return gaussian_loglik(y, cov)


def batched_kl(gs: torch.Tensor, ks: torch.Tensor) -> torch.Tensor:
    """Zero-mean Gaussian KL for a stack of (G, K) pairs; one batched solve."""
    p = gs.shape[-1]
    lk = chol(ks)
    lg = chol(gs)
    trace = torch.cholesky_solve(gs, lk).diagonal(dim1=-2, dim2=-1).sum(-1)
    return 0.5 * (trace - p + _chol_logdet(lk) - _chol_logdet(lg))


def layer_kls(grams, g0, kernels, nus) -> list[torch.Tensor]:
    """Width-weighted KL of each layer's Gram against the kernel of the previous one."""
    if not grams:
        return []
    prev = torch.as_tensor(g0, dtype=DTYPE)
    gs, ks = [], []
    for g, spec in zip(grams, kernels):
        g = torch.as_tensor(g, dtype=DTYPE)
        ks.append(kernel_apply(spec, prev))
        gs.append(g)
        prev = g
    kls = batched_kl(torch.stack(gs), torch.stack(ks))
    return [nu * kl for nu, kl in zip(nus, kls.unbind())]


def dkm_objective(state: DkmState, g0, y, like_weight: float = 1.0) -> torch.Tensor:
    """Log-likelihood minus the width-weighted chain of layer KLs.

    ``like_weight`` scales only the log-likelihood term; it exists so the
    prior-recursion fixed point can be probed with weight 0.
    """
    kls = layer_kls(state.grams, g0, state.kernels[:-1], state.widths.hidden)
    g_last = state.grams[-1] if state.grams else torch.as_tensor(g0, dtype=DTYPE)
    lik = log_lik_regression(y, g_last, state.kernels[-1], state.noise_var)
    return like_weight * lik - sum(kls, torch.zeros((), dtype=DTYPE))


def likelihood_as_kl(y, g_last, spec: KernelSpec, noise_var, nu_out: float,
                     target_jitter: float | None = None) -> torch.Tensor:
    """The regression log-likelihood written as a KL divergence.

    Returns ``-nu_out * KL(N(0, Y Y^T / nu_out) || N(0, K(G_L) + s2 I))``,
    which differs from :func:`log_lik_regression` by a constant independent
    of ``g_last``.  ``Y Y^T / nu_out`` is typically rank-deficient, so its
    diagonal is jittered by ``target_jitter`` (default
    ``1e-6 * mean(diag)``; pass 0 to disable).
    """
    y = torch.as_tensor(y, dtype=DTYPE)
    if y.ndim == 1:
        y = y.unsqueeze(-1)
    g_out = y @ y.T / nu_out
    if target_jitter is None:
        target_jitter = 1e-6 * float(g_out.diagonal().mean())
    g_out = g_out + target_jitter * torch.eye(g_out.shape[-1], dtype=DTYPE)
    cov = kernel_apply(spec, torch.as_tensor(g_last, dtype=DTYPE))
    cov = cov + torch.as_tensor(noise_var, dtype=DTYPE) * torch.eye(cov.shape[-1], dtype=DTYPE)
    return -nu_out * kl_gaussian(g_out, cov)


def map_objective(state: DkmState, g0, y, like_weight: float = 1.0) -> torch.Tensor:
    """Feature-space MAP objective: width-independent Gram-matrix analogue.

    ``log P(Y | G_L) - 0.5 * sum_l nu_l [log|K(G_{l-1})| + tr(K(G_{l-1})^-1 G_l)]``.
    """
    prev = torch.as_tensor(g0, dtype=DTYPE)
    penalty = torch.zeros((), dtype=DTYPE)
    for g, spec, nu in zip(state.grams, state.kernels[:-1], state.widths.hidden):
        g = torch.as_tensor(g, dtype=DTYPE)
        k = kernel_apply(spec, prev)
        factor = chol(k)
        trace = torch.cholesky_solve(g, factor).diagonal(dim1=-2, dim2=-1).sum(-1)
        penalty = penalty + 0.5 * nu * (_chol_logdet(factor) + trace)
        prev = g
    g_last = state.grams[-1] if state.grams else torch.as_tensor(g0, dtype=DTYPE)
    lik = log_lik_regression(y, g_last, state.kernels[-1], state.noise_var)
    return like_weight * lik - penalty


def dkm_objective_klform(state: DkmState, g0, y, like_weight: float = 1.0) -> torch.Tensor:
    """The objective with the likelihood in its KL form.

    Identical optimum to :func:`dkm_objective` up to the output-Gram jitter;
    better conditioned when ``Y Y^T`` is rank-deficient and noise-free.
    """
    prev = torch.as_tensor(g0, dtype=DTYPE)
    gs, ks = [], []
    for g, spec in zip(state.grams, state.kernels[:-1]):
        g = torch.as_tensor(g, dtype=DTYPE)
        ks.append(kernel_apply(spec, prev))
        gs.append(g)
        prev = g
    y = torch.as_tensor(y, dtype=DTYPE)
    if y.ndim == 1:
        y = y.unsqueeze(-1)
    nu_out = state.widths.nu_out
    g_out = y @ y.T / nu_out
    g_out = g_out + 1e-6 * g_out.diagonal().mean() * torch.eye(g_out.shape[-1], dtype=DTYPE)
    cov = kernel_apply(state.kernels[-1], prev)
    cov = cov + torch.as_tensor(state.noise_var, dtype=DTYPE) * torch.eye(
        cov.shape[-1], dtype=DTYPE)
    # one batched solve covers the layer KLs and the likelihood KL
    kls = batched_kl(torch.stack(gs + [g_out]), torch.stack(ks + [cov]))
    weights = torch.as_tensor(list(state.widths.hidden) + [like_weight * nu_out],
                              dtype=DTYPE)
    return -(weights * kls).sum()


OBJECTIVES = {"dkm": dkm_objective, "map": map_objective,
              "dkm-kl": dkm_objective_klform}


def objective_gradient(state: DkmState, g0, y, which: str = "dkm",
                       like_weight: float = 1.0) -> list[torch.Tensor]:
    """Gradient of the chosen objective wrt each layer Gram matrix.

    Gradients are symmetrized, i.e. they match central finite differences
    under symmetric perturbations ``(E_ij + E_ji)/2`` of the matrix entries.
    """
    if which not in OBJECTIVES:
        raise InvalidInputError(f"unknown objective {which!r}")
    grams = [torch.as_tensor(g, dtype=DTYPE).clone().requires_grad_(True)
             for g in state.grams]
    probe = DkmState(grams, state.widths, state.kernels, state.noise_var)
    value = OBJECTIVES[which](probe, g0, y, like_weight=like_weight)
    if not torch.isfinite(value):
        raise InvalidInputError("objective is non-finite at the given state")
    grads = torch.autograd.grad(value, grams)
    return [(g + g.T) / 2 for g in grads]


# ---------------------------------------------------------------------------
# Finite-width Wishart density and its infinite-width limit
# ---------------------------------------------------------------------------

def wishart_logpdf(g, k, n: int) -> float:
    """Log density of ``Wishart(G; K/n, n)``, the law of (1/n) F F^T.

    Requires ``n >= P`` (full-rank regime).
    """
    g = np.asarray(torch.as_tensor(g, dtype=DTYPE))
    k = np.asarray(torch.as_tensor(k, dtype=DTYPE))
    p = g.shape[-1]
    if n < p:
        raise InvalidInputError(f"Wishart degrees of freedom n={n} < P={p} is out of scope")
    sign_g, logdet_g = np.linalg.slogdet(g)
    sign_k, logdet_k = np.linalg.slogdet(k)
    if sign_g <= 0 or sign_k <= 0:
        raise InvalidInputError("wishart_logpdf requires positive-definite inputs")
    trace = float(np.trace(np.linalg.solve(k, g)))
    const = (-n * p / 2 * math.log(2) + n * p / 2 * math.log(n)
             - multigammaln(n / 2, p))
    return ((n - p - 1) / 2 * logdet_g - n / 2 * logdet_k - n / 2 * trace + const)


def wishart_limit_check(g, k, n_list, nu: float = 1.0) -> list[float]:
    """Evaluate ``(1/N) log Wishart + nu * KL`` along increasing widths.

    ``n_list`` holds layer widths ``N_l = N * nu``; the returned sequence
    converges to a constant as the width grows.
    """
    kl = float(kl_gaussian(g, k))
    out = []
    for n_l in n_list:
        big_n = n_l / nu
        out.append(wishart_logpdf(g, k, int(n_l)) / big_n + nu * kl)
    return out
