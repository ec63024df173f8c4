"""Factor parameterization of Gram matrices and Adam-based training.

Each layer Gram matrix is represented as ``G_l = (1/P) R_l R_l^T`` with a
dense unconstrained square factor ``R_l``, so positive semidefiniteness
holds by construction at every iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import invgamma

from .kernels import KernelSpec, kernel_apply
from .matrices import DTYPE, InvalidInputError, NumericalError, chol
from .objective import OBJECTIVES, DkmState, WidthProfile, layer_kls, log_lik_regression


@dataclass
class FactorParams:
    """Unconstrained square factors, one per hidden layer."""

    factors: list[torch.Tensor]

    def grams(self) -> list[torch.Tensor]:
        p = self.factors[0].shape[0] if self.factors else 0
        return [(r @ r.T) / p for r in self.factors]

    def detach(self) -> "FactorParams":
        return FactorParams([r.detach().clone() for r in self.factors])


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    iterations: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    # optional escape hatches beyond the fixed-budget protocol
    early_stop_delta: float = 0.0
    early_stop_window: int = 200
    final_learning_rate: float | None = None

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInputError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.iterations <= 0:
            raise InvalidInputError("learning rate and iteration count must be positive")


@dataclass
class TraceRow:
    iteration: int
    objective: float
    layer_kls: list[float]
    log_lik: float


def write_trace_csv(rows: list[TraceRow], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        depth = len(rows[0].layer_kls) if rows else 0
        writer.writerow(["iteration", "objective", "log_lik"]
                        + [f"kl_layer_{i + 1}" for i in range(depth)])
        for row in rows:
            writer.writerow([row.iteration, row.objective, row.log_lik] + row.layer_kls)


def prior_recursion(g0, kernels: list[KernelSpec]) -> list[torch.Tensor]:
    """The kernel recursion ``G_l = K(G_{l-1})`` for the hidden-layer kernels."""
    grams = []
    prev = torch.as_tensor(g0, dtype=DTYPE)
    for spec in kernels:
        prev = kernel_apply(spec, prev)
        grams.append(prev)
    return grams


def init_prior(g0, kernels: list[KernelSpec]) -> FactorParams:
    """Factors reproducing the kernel recursion exactly (the no-data fixed point)."""
    factors = []
    for g in prior_recursion(g0, kernels):
        p = g.shape[0]
        factors.append(np.sqrt(p) * chol(g))
    return FactorParams(factors)


def inverse_gamma_params(mean: float, variance: float) -> tuple[float, float]:
    """Shape/rate of an inverse-Gamma with the given mean and variance."""
    shape = mean**2 / variance + 2
    rate = mean * (shape - 1)
    return shape, rate


def init_random_scaled(g0, kernels: list[KernelSpec], seed: int,
                       scale_variance: float = 100.0,
                       mean_range: tuple[float, float] = (0.5, 3.0)) -> FactorParams:
    """Broad randomized initialization for probing multimodality.

    Per layer the factor is ``chol(K(G_{l-1})) Xi D^(1/2)`` with standard
    normal ``Xi`` and inverse-Gamma diagonal scalings ``D``; the
    inverse-Gamma mean is drawn once per seed from ``U[mean_range]`` and its
    variance is fixed.  ``G_{l-1}`` is the Gram induced by the previous
    layer's sampled factor.
    """
    rng = np.random.default_rng(seed)
    mean = rng.uniform(*mean_range)
    shape, rate = inverse_gamma_params(mean, scale_variance)
    p = torch.as_tensor(g0, dtype=DTYPE).shape[0]
    factors = []
    prev = torch.as_tensor(g0, dtype=DTYPE)
    for spec in kernels:
        k = kernel_apply(spec, prev)
        factor = chol(k)
        xi = torch.as_tensor(rng.standard_normal((p, p)), dtype=DTYPE)
        d = invgamma.rvs(shape, scale=rate, size=p, random_state=rng)
        v = factor @ xi * torch.as_tensor(np.sqrt(d), dtype=DTYPE)
        factors.append(v)  # G_l = (1/P) V V^T
        prev = (v @ v.T) / p
    return FactorParams(factors)


@dataclass
class Problem:
    """A full-batch training problem for the dense objective."""

    g0: torch.Tensor
    kernels: list[KernelSpec]
    y: torch.Tensor
    widths: WidthProfile
    noise_var: float = 0.0
    like_weight: float = 1.0


def _evaluate(grams, problem: Problem, which: str):
    state = DkmState(grams, problem.widths, problem.kernels, problem.noise_var)
    return OBJECTIVES[which](state, problem.g0, problem.y, like_weight=problem.like_weight)


def optimize(params: FactorParams, which: str, config: OptimizerConfig,
             problem: Problem, trace_every: int = 1) -> tuple[FactorParams, list[TraceRow]]:
    """Maximize the chosen objective over the Gram factors with Adam.

    Deterministic given the config seed and a single thread.  Raises
    :class:`NumericalError` naming the iteration and layer if the objective
    or a gradient goes non-finite.
    """
    if which not in OBJECTIVES:
        raise InvalidInputError(f"unknown objective {which!r}")
    torch.manual_seed(config.seed)
    factors = [r.detach().clone().requires_grad_(True) for r in params.factors]
    opt = torch.optim.Adam(factors, lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.epsilon)
    decay = None
    if config.final_learning_rate is not None and config.iterations > 1:
        decay = (config.final_learning_rate / config.learning_rate) ** (1 / (config.iterations - 1))

    trace: list[TraceRow] = []
    recent: list[float] = []
    for it in range(config.iterations):
        opt.zero_grad()
        grams = [(r @ r.T) / r.shape[0] for r in factors]
        value = _evaluate(grams, problem, which)
        if not torch.isfinite(value):
            raise NumericalError(f"objective became non-finite at iteration {it}")
        (-value).backward()
        for layer, r in enumerate(factors, start=1):
            if r.grad is None or not torch.isfinite(r.grad).all():
                raise NumericalError(
                    f"non-finite gradient at iteration {it}, layer {layer}")
        opt.step()
        if decay is not None:
            for group in opt.param_groups:
                group["lr"] *= decay
        if it % trace_every == 0 or it == config.iterations - 1:
            with torch.no_grad():
                grams_now = [(r @ r.T) / r.shape[0] for r in factors]
                kls = layer_kls(grams_now, problem.g0, problem.kernels[:-1],
                                problem.widths.hidden)
                lik = log_lik_regression(problem.y, grams_now[-1] if grams_now else problem.g0,
                                         problem.kernels[-1], problem.noise_var)
                obj = float(problem.like_weight * lik - sum(kls))
            trace.append(TraceRow(it, obj, [float(k) for k in kls], float(lik)))
        if config.early_stop_delta > 0:
            recent.append(float(value))
            if len(recent) > config.early_stop_window:
                recent.pop(0)
                if max(recent) - min(recent) < config.early_stop_delta:
                    break
    return FactorParams([r.detach() for r in factors]), trace


def save_factor_state(params: FactorParams, path):
    """Plain-text dump: header line ``P L`` then each factor row-major."""
    factors = [np.asarray(r.detach()) for r in params.factors]
    p = factors[0].shape[0] if factors else 0
    with open(path, "w") as fh:
        fh.write(f"{p} {len(factors)}\n")
        for r in factors:
            for row in r:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_factor_state(path) -> FactorParams:
    with open(path) as fh:
        header = fh.readline().split()
        p, depth = int(header[0]), int(header[1])
        factors = []
        for _ in range(depth):
            rows = [[float(v) for v in fh.readline().split()] for _ in range(p)]
            factors.append(torch.as_tensor(rows, dtype=DTYPE))
    return FactorParams(factors)
