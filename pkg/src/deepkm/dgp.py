"""Finite-width deep-GP machinery used to validate the infinite-width model.

Includes prior sampling, unadjusted Langevin posterior sampling in
white-noise coordinates, MAP training directly over features, Monte-Carlo
Gram estimation and the Gaussian variational objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .kernels import KernelSpec, kernel_apply, leaky_relu_pointwise, scaled_relu
from .matrices import DTYPE, InvalidInputError, NumericalError, chol
from .objective import LOG_2PI, WidthProfile, kl_gaussian, log_lik_regression

DIVERGENCE_LIMIT = 1e12


@dataclass
class DgpConfig:
    """Finite-width model and sampler settings.

    ``widths`` lists the hidden-layer feature counts ``N_1 .. N_L``; the
    likelihood replication factor is ``N = N_l / nu_l`` (constant across
    layers by construction).
    """

    widths: list[int]
    kernels: list[KernelSpec]
    nus: list[float] = field(default_factory=list)
    noise_var: float = 0.0
    step_size: float = 1e-3
    chains: int = 10
    steps: int = 10000
    burn_in: int = 10000
    thin: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.widths or any(n < 1 for n in self.widths):
            raise InvalidInputError("all layer widths must be >= 1")
        if not self.nus:
            self.nus = [5.0] * len(self.widths)
        if len(self.nus) != len(self.widths):
            raise InvalidInputError("need one width ratio per hidden layer")
        if len(self.kernels) != len(self.widths) + 1:
            raise InvalidInputError("need one kernel per hidden layer plus the output kernel")
        if self.step_size <= 0 or self.chains < 1:
            raise InvalidInputError("step size must be positive and chains >= 1")
        ratios = [n / nu for n, nu in zip(self.widths, self.nus)]
        if max(ratios) - min(ratios) > 1e-9 * max(ratios):
            raise InvalidInputError("widths must share a common base N = N_l / nu_l")

    @property
    def base_width(self) -> float:
        return self.widths[0] / self.nus[0]


def dgp_sample_prior(g0, config: DgpConfig, seed: int | None = None) -> list[torch.Tensor]:
    """Layerwise prior features ``F_l = chol(K(G_{l-1})) Xi_l``.

    ``G_{l-1}`` is the empirical second moment of the previous sampled layer.
    """
    gen = torch.Generator().manual_seed(config.seed if seed is None else seed)
    prev = torch.as_tensor(g0, dtype=DTYPE)
    p = prev.shape[0]
    features = []
    for spec, n in zip(config.kernels[:-1], config.widths):
        k = kernel_apply(spec, prev)
        xi = torch.randn(p, n, generator=gen, dtype=DTYPE)
        f = chol(k) @ xi
        features.append(f)
        prev = f @ f.T / n
    return features


@dataclass
class WhiteNoiseState:
    """Per-layer standard-Gaussian-prior coordinates ``V_l``; ``F_l = L_{l-1} V_l``."""

    vs: list[torch.Tensor]


def features_from_white(g0, kernels: list[KernelSpec], vs: list[torch.Tensor]):
    """Deterministic map from white-noise coordinates to features and Grams.

    Returns ``(features, grams)`` with one entry per hidden layer; supports a
    leading chain dimension on every ``V_l``.
    """
    prev = torch.as_tensor(g0, dtype=DTYPE)
    if vs and vs[0].ndim == 3:
        prev = prev.expand(vs[0].shape[0], -1, -1)
    features, grams = [], []
    for spec, v in zip(kernels[:-1], vs):
        k = kernel_apply(spec, prev)
        f = chol(k) @ v
        g = f @ f.transpose(-1, -2) / v.shape[-1]
        features.append(f)
        grams.append((g + g.transpose(-1, -2)) / 2)
        prev = grams[-1]
    return features, grams


def _log_joint(g0, y, config: DgpConfig, vs: list[torch.Tensor]) -> torch.Tensor:
    """Per-chain unnormalized log posterior in white-noise coordinates.

    The data term is the base-width-replicated likelihood
    ``N * log P(Y | G_L)``; the prior term is standard normal on each ``V_l``.
    """
    _, grams = features_from_white(g0, config.kernels, vs)
    chains = vs[0].shape[0]
    prior = torch.stack([-0.5 * (v**2).sum(dim=(-2, -1)) for v in vs]).sum(dim=0)
    lik = torch.stack([
        log_lik_regression(y, grams[-1][c], config.kernels[-1], config.noise_var)
        for c in range(chains)
    ])
    return prior + config.base_width * lik


@dataclass
class LangevinResult:
    samples: list[WhiteNoiseState]
    running_grams: list[torch.Tensor]
    final: WhiteNoiseState
    sample_count: int


def langevin_posterior(g0, y, config: DgpConfig,
                       keep_samples: bool = False) -> LangevinResult:
    """Unadjusted Langevin sampling of the white-noise coordinates.

    Runs ``config.chains`` chains in one batched state initialized from the
    master seed.  ``running_grams`` accumulates, per layer, the
    chain-and-sample average of ``(1/N_l) F_l F_l^T`` over thinned post
    burn-in snapshots (memory-light); the snapshots themselves are kept only
    when ``keep_samples`` is set.
    """
    g0 = torch.as_tensor(g0, dtype=DTYPE)
    p = g0.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    vs = [torch.randn(config.chains, p, n, generator=gen, dtype=DTYPE)
          for n in config.widths]

    eps = config.step_size
    sqrt_eps = math.sqrt(eps)
    samples: list[WhiteNoiseState] = []
    sums = [torch.zeros(p, p, dtype=DTYPE) for _ in config.widths]
    count = 0
    total = config.burn_in + config.steps
    for step in range(total):
        leaves = [v.detach().requires_grad_(True) for v in vs]
        logp = _log_joint(g0, y, config, leaves)
        if not torch.isfinite(logp).all() or float(logp.detach().abs().max()) > DIVERGENCE_LIMIT:
            bad = int(torch.nonzero(~torch.isfinite(logp) | (logp.abs() > DIVERGENCE_LIMIT))[0])
            raise NumericalError(f"Langevin chain {bad} diverged at step {step}")
        grads = torch.autograd.grad(logp.sum(), leaves)
        vs = [
            (v + 0.5 * eps * g + sqrt_eps * torch.randn(v.shape, generator=gen, dtype=DTYPE)).detach()
            for v, g in zip(leaves, grads)
        ]
        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            with torch.no_grad():
                _, grams = features_from_white(g0, config.kernels, vs)
                for acc, g in zip(sums, grams):
                    acc += g.sum(dim=0)
                count += config.chains
            if keep_samples:
                samples.append(WhiteNoiseState([v.clone() for v in vs]))
    running = [acc / max(count, 1) for acc in sums]
    return LangevinResult(samples=samples, running_grams=running,
                          final=WhiteNoiseState([v.clone() for v in vs]),
                          sample_count=count)


def posterior_gram_estimate(g0, kernels: list[KernelSpec],
                            samples: list[WhiteNoiseState], layer: int) -> torch.Tensor:
    """Average ``(1/N_l) F_l F_l^T`` over chains and thinned samples."""
    if not samples:
        raise InvalidInputError("need at least one sample")
    total = None
    count = 0
    for state in samples:
        _, grams = features_from_white(g0, kernels, state.vs)
        g = grams[layer].sum(dim=0)
        total = g if total is None else total + g
        count += grams[layer].shape[0]
    return total / count


def gram_rmse(a, b) -> float:
    """Element-wise root-mean-square difference of two same-size matrices."""
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.sqrt(torch.mean((a - b) ** 2)))


def map_features_train(g0, y, config: DgpConfig, learning_rate: float = 1e-3,
                       iterations: int = 2000, seed: int = 0):
    """Adam maximization of the feature-space log joint.

    The objective is ``N * log P(Y|G_L) + sum_l log N(F_l; 0, K(G_{l-1}))``
    with independent standard-normal columns; the induced Gram matrices
    approach the width-independent MAP solution when ``N_l >= P``.
    """
    g0 = torch.as_tensor(g0, dtype=DTYPE)
    p = g0.shape[0]
    if any(n < p for n in config.widths):
        raise InvalidInputError("feature MAP requires every layer width >= P")
    gen = torch.Generator().manual_seed(seed)
    fs = [torch.randn(p, n, generator=gen, dtype=DTYPE).requires_grad_(True)
          for n in config.widths]
    opt = torch.optim.Adam(fs, lr=learning_rate)
    trace = []
    for it in range(iterations):
        opt.zero_grad()
        prev = g0
        logp = torch.zeros((), dtype=DTYPE)
        for spec, f in zip(config.kernels[:-1], fs):
            n = f.shape[1]
            k = kernel_apply(spec, prev)
            factor = chol(k)
            alpha = torch.cholesky_solve(f, factor)
            logdet = 2 * factor.diagonal().log().sum()
            logp = logp - 0.5 * (n * p * LOG_2PI + n * logdet + (f * alpha).sum())
            prev = f @ f.T / n
        lik = log_lik_regression(y, prev, config.kernels[-1], config.noise_var)
        logp = logp + config.base_width * lik
        if not torch.isfinite(logp):
            raise NumericalError(f"feature MAP objective became non-finite at iteration {it}")
        (-logp).backward()
        opt.step()
        trace.append(float(logp.detach()))
    return [f.detach() for f in fs], trace


# ---------------------------------------------------------------------------
# Monte-Carlo Gram estimation and the Gaussian variational objective
# ---------------------------------------------------------------------------

def _nonlinearity(phi):
    if callable(phi):
        return phi
    if phi == "identity":
        return lambda x: x
    if phi == "relu":
        return scaled_relu
    raise InvalidInputError(f"unknown nonlinearity {phi!r}")


def mc_gram_estimate(mean, cov_factor, phi, samples: int, seed: int = 0) -> torch.Tensor:
    """Monte-Carlo estimate of ``E[phi(f) phi(f)^T]`` for ``f ~ N(mean, L L^T)``.

    ``cov_factor`` is a lower-triangular factor ``L``; sampling is
    reparameterized as ``mean + L xi`` so the estimate is differentiable in
    both arguments.
    """
    if samples < 1:
        raise InvalidInputError("need at least one sample")
    func = _nonlinearity(phi)
    mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1, 1)
    factor = torch.as_tensor(cov_factor, dtype=DTYPE)
    gen = torch.Generator().manual_seed(seed)
    p = mean.shape[0]
    out = torch.zeros(p, p, dtype=DTYPE)
    block = 65536
    done = 0
    while done < samples:
        k = min(block, samples - done)
        xi = torch.randn(p, k, generator=gen, dtype=DTYPE)
        h = func(mean + factor @ xi)
        out = out + h @ h.T
        done += k
    return out / samples


def vdkm_objective_gaussian(params, g0, y, kernels: list[KernelSpec],
                            widths: WidthProfile, noise_var: float = 0.0,
                            phi="identity", mc_samples: int = 1024,
                            seed: int = 0):
    """Gaussian variational objective and the Gram matrices it induces.

    ``params`` is a list of ``(mean, cov_factor)`` per hidden layer.  Each
    layer's Gram is ``E_q[phi(f) phi(f)^T]``, closed form for the identity
    and Monte-Carlo otherwise; the penalty is the general-mean Gaussian KL
    against ``N(0, K(G_{l-1}))``.  Returns ``(value, grams)``.
    """
    if len(params) != widths.depth:
        raise InvalidInputError("need one (mean, factor) pair per hidden layer")
    prev = torch.as_tensor(g0, dtype=DTYPE)
    value = torch.zeros((), dtype=DTYPE)
    grams = []
    identity = (phi == "identity")
    for layer, ((mean, factor), spec, nu) in enumerate(
            zip(params, kernels[:-1], widths.hidden)):
        mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
        factor = torch.as_tensor(factor, dtype=DTYPE)
        s = factor @ factor.T
        k = kernel_apply(spec, prev)
        value = value - nu * kl_gaussian(s, k, mean=mean)
        if identity:
            g = s + torch.outer(mean, mean)
        else:
            g = mc_gram_estimate(mean, factor, phi, mc_samples, seed=seed + 7919 * layer)
        g = (g + g.T) / 2
        grams.append(g)
        prev = g
    lik = log_lik_regression(y, prev, kernels[-1], noise_var)
    return value + lik, grams
