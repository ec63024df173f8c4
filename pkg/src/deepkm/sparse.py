"""Inducing-point model: sparse objective, Gram propagation, prediction.

The learned parameters are the inducing Gram factors, the top-layer inducing
outputs, the kernel hyperparameters (in log space) and the observation noise.
Training-time propagation keeps only the marginal variances of the
non-inducing points, so the per-iteration cost is linear in the batch size.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .kernels import (KernelSpec, LeakyRelu, Linear, Skip, SqExp, kernel_apply,
                      kernel_apply_blocks, spec_from_dict, spec_to_dict)
from .matrices import DTYPE, InvalidInputError, NumericalError, chol
from .objective import WidthProfile, kl_gaussian, LOG_2PI
from .optimizer import TraceRow, prior_recursion

VARIANCE_TOL = 1e-8


@dataclass
class SparseState:
    """Inducing inputs, per-layer inducing Gram factors, and inducing outputs."""

    inducing_inputs: torch.Tensor
    inducing_factors: list[torch.Tensor]
    inducing_outputs: torch.Tensor
    kernels: list[KernelSpec]
    widths: WidthProfile
    noise_var: object = 0.1

    def __post_init__(self):
        self.inducing_inputs = torch.as_tensor(self.inducing_inputs, dtype=DTYPE)
        self.inducing_outputs = torch.as_tensor(self.inducing_outputs, dtype=DTYPE)
        self.inducing_factors = [torch.as_tensor(r, dtype=DTYPE) for r in self.inducing_factors]
        if self.inducing_inputs.shape[0] < 1:
            raise InvalidInputError("need at least one inducing point")
        if len(self.kernels) != len(self.inducing_factors) + 1:
            raise InvalidInputError("need one kernel per hidden layer plus the output kernel")
        if len(self.inducing_factors) != self.widths.depth:
            raise InvalidInputError("factor count must equal depth")
        nv = self.noise_var
        if isinstance(nv, torch.Tensor):
            nv = nv.detach()
        if float(nv) < 0:
            raise InvalidInputError("noise variance must be non-negative")

    @property
    def num_inducing(self) -> int:
        return self.inducing_inputs.shape[0]

    def inducing_grams(self) -> list[torch.Tensor]:
        p = self.num_inducing
        return [(r @ r.T) / p for r in self.inducing_factors]

    def inducing_g0(self) -> torch.Tensor:
        x = self.inducing_inputs
        return x @ x.T / x.shape[1]


@dataclass
class PropagatedBlocks:
    """Output-layer kernel blocks for a set of non-inducing points.

    ``k_tt`` is the length-P_t vector of marginal variances when propagated
    diagonal-only, or the full P_t x P_t matrix otherwise.
    """

    k_ii: torch.Tensor
    k_ti: torch.Tensor
    k_tt: torch.Tensor
    full: bool


def _cross_gram(x_t: torch.Tensor, x_i: torch.Tensor) -> torch.Tensor:
    return x_t @ x_i.T / x_i.shape[1]


def propagate(state: SparseState, x_t, full_cov: bool = False) -> PropagatedBlocks:
    """Push test points through the layer stack conditioned on the inducing Grams.

    Per layer: ``G_ti = K_ti K_ii^-1 G_ii`` and
    ``G_tt = K_ti K_ii^-1 G_ii K_ii^-1 K_ti^T + (K_tt - K_ti K_ii^-1 K_ti^T)``.
    Returns the output-layer kernel blocks.
    """
    x_t = torch.as_tensor(x_t, dtype=DTYPE)
    x_i = state.inducing_inputs
    g_ii = state.inducing_g0()
    g_ti = _cross_gram(x_t, x_i)
    if full_cov:
        g_tt = x_t @ x_t.T / x_t.shape[1]
    else:
        g_tt = (x_t * x_t).sum(dim=1) / x_t.shape[1]

    grams = state.inducing_grams()
    for layer, spec in enumerate(state.kernels, start=1):
        if full_cov:
            k_ii = kernel_apply(spec, g_ii)
            joint = torch.cat([torch.cat([g_ii, g_ti.T], dim=1),
                               torch.cat([g_ti, g_tt], dim=1)], dim=0)
            k_joint = kernel_apply(spec, joint)
            p_i = state.num_inducing
            k_ti = k_joint[p_i:, :p_i]
            k_tt = k_joint[p_i:, p_i:]
        else:
            k_ii, k_ti, k_tt = kernel_apply_blocks(spec, g_ii, g_ti, g_tt)
        if layer == len(state.kernels):
            return PropagatedBlocks(k_ii=k_ii, k_ti=k_ti, k_tt=k_tt, full=full_cov)
        try:
            factor = chol(k_ii)
        except NumericalError as exc:
            raise NumericalError(
                f"inducing kernel block singular at layer {layer}: {exc}",
                jitter=exc.jitter) from exc
        g_next = grams[layer - 1]
        a = torch.cholesky_solve(k_ti.T, factor).T  # K_ti K_ii^-1
        g_ti = a @ g_next
        if full_cov:
            schur = k_tt - a @ k_ti.T
            g_tt = a @ g_next @ a.T + schur
            g_tt = (g_tt + g_tt.T) / 2
        else:
            schur = (k_tt - (a * k_ti).sum(dim=1)).clamp(min=0.0)
            g_tt = (a @ g_next * a).sum(dim=1).clamp(min=0.0) + schur
        g_ii = g_next
    raise AssertionError("unreachable")


def _predictive_moments(state: SparseState, blocks: PropagatedBlocks):
    factor = chol(blocks.k_ii)
    a = torch.cholesky_solve(blocks.k_ti.T, factor).T
    mean = a @ state.inducing_outputs
    if blocks.full:
        schur = blocks.k_tt - a @ blocks.k_ti.T
        schur = (schur + schur.T) / 2
    else:
        schur = (blocks.k_tt - (a * blocks.k_ti).sum(dim=1)).clamp(min=-VARIANCE_TOL)
    return mean, schur


def predict(state: SparseState, x_t, full_cov: bool = True):
    """Predictive mean and covariance at new inputs.

    ``mean = K_ti K_ii^-1 F_i``; ``cov = K_tt - K_ti K_ii^-1 K_ti^T + s2 I``.
    With ``full_cov=False`` the covariance is returned as its diagonal.
    """
    blocks = propagate(state, x_t, full_cov=full_cov)
    mean, schur = _predictive_moments(state, blocks)
    nv = torch.as_tensor(state.noise_var, dtype=DTYPE)
    if full_cov:
        cov = schur + nv * torch.eye(schur.shape[0], dtype=DTYPE)
    else:
        cov = schur.clamp(min=0.0) + nv
    return mean, cov


def sparse_objective(state: SparseState, x_batch, y_batch, total_train: int,
                     flip_kl: bool = False) -> torch.Tensor:
    """Scaled expected log-likelihood minus the inducing-layer KL chain.

    The per-point expected likelihood is closed form:
    ``log N(y; m, s2) - v / (2 s2)`` with ``m`` the predictive mean and ``v``
    the marginal conditional variance at the output layer.
    """
    y = torch.as_tensor(y_batch, dtype=DTYPE)
    if y.ndim == 1:
        y = y.unsqueeze(-1)
    if y.shape[0] == 0:
        raise InvalidInputError("batch must be nonempty")
    blocks = propagate(state, x_batch, full_cov=False)
    mean, v = _predictive_moments(state, blocks)
    v = v.clamp(min=0.0)
    nv = torch.as_tensor(state.noise_var, dtype=DTYPE)
    if float(nv.detach()) <= 0:
        if float(v.max()) > VARIANCE_TOL:
            raise InvalidInputError(
                "noise variance 0 with nonzero conditional variance: "
                "expected likelihood is undefined")
        nv = nv + torch.as_tensor(1e-12, dtype=DTYPE)
    m_out = y.shape[1]
    loglik = (-0.5 * (LOG_2PI + torch.log(nv)) * y.numel()
              - ((y - mean) ** 2).sum() / (2 * nv)
              - m_out * v.sum() / (2 * nv))
    loglik = loglik * (total_train / y.shape[0])

    kls = []
    prev = state.inducing_g0()
    for g, spec, nu in zip(state.inducing_grams(), state.kernels[:-1], state.widths.hidden):
        k = kernel_apply(spec, prev)
        if flip_kl:
            kls.append(nu * kl_gaussian(k, g))
        else:
            kls.append(nu * kl_gaussian(g, k))
        prev = g
    return loglik - sum(kls, torch.zeros((), dtype=DTYPE))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SparseConfig:
    num_inducing: int = 300
    learning_rate: float = 1e-3
    iterations: int = 5000
    seed: int = 0
    train_hyperparams: bool = True
    train_noise: bool = True
    flip_kl: bool = False
    noise_var_init: float = 0.1
    trace_every: int = 50

    def __post_init__(self):
        if self.num_inducing < 1 or self.iterations < 1 or self.learning_rate <= 0:
            raise InvalidInputError("invalid sparse training configuration")


class _HyperParams:
    """Log-space kernel hyperparameters shared across the layer stack."""

    def __init__(self, kernels: list[KernelSpec], trainable: bool):
        self.templates = kernels
        self.params: list[torch.Tensor] = []
        self._slots: list[dict] = []
        for spec in kernels:
            slot = {}
            if trainable:
                if isinstance(spec, SqExp):
                    slot["lengthscale"] = self._log_param(spec.lengthscale)
                elif isinstance(spec, Skip):
                    slot["w1"] = self._log_param(spec.w1)
                    slot["w2"] = self._log_param(spec.w2)
                    slot["lengthscale"] = self._log_param(spec.lengthscale)
            self._slots.append(slot)

    def _log_param(self, value) -> torch.Tensor:
        t = torch.tensor(float(np.log(float(value))), dtype=DTYPE, requires_grad=True)
        self.params.append(t)
        return t

    def specs(self) -> list[KernelSpec]:
        out = []
        for spec, slot in zip(self.templates, self._slots):
            if not slot:
                out.append(spec)
            elif isinstance(spec, SqExp):
                out.append(SqExp(lengthscale=slot["lengthscale"].exp()))
            else:
                out.append(Skip(w1=slot["w1"].exp(), w2=slot["w2"].exp(),
                                lengthscale=slot["lengthscale"].exp()))
        return out


def init_sparse_state(x_train, y_train, kernels: list[KernelSpec],
                      widths: WidthProfile, config: SparseConfig) -> SparseState:
    """Seeded inducing subset of the training inputs, prior-recursion Grams,
    inducing outputs initialized to the training targets at those rows."""
    x_train = torch.as_tensor(np.asarray(x_train), dtype=DTYPE)
    y_train = torch.as_tensor(np.asarray(y_train), dtype=DTYPE)
    if y_train.ndim == 1:
        y_train = y_train.unsqueeze(-1)
    p = x_train.shape[0]
    m = min(config.num_inducing, p)
    idx = np.sort(np.random.default_rng(config.seed).choice(p, size=m, replace=False))
    x_i = x_train[idx]
    y_i = y_train[idx]
    g0 = x_i @ x_i.T / x_i.shape[1]
    factors = []
    for g in prior_recursion(g0, kernels[:-1]):
        factors.append(float(np.sqrt(m)) * chol(g))
    return SparseState(inducing_inputs=x_i, inducing_factors=factors,
                       inducing_outputs=y_i.clone(), kernels=kernels,
                       widths=widths, noise_var=config.noise_var_init)


def train_sparse(state: SparseState, x_train, y_train, config: SparseConfig,
                 train_grams: bool = True) -> tuple[SparseState, list[TraceRow]]:
    """Adam ascent of the sparse objective over all learned parameters.

    ``train_grams=False`` pins the inducing Gram matrices to the kernel
    recursion (recomputed from the current hyperparameters every step), which
    is the infinite-width baseline whose only flexibility is the kernel
    hyperparameters and the noise.
    """
    torch.manual_seed(config.seed)
    x_train = torch.as_tensor(np.asarray(x_train), dtype=DTYPE)
    y_train = torch.as_tensor(np.asarray(y_train), dtype=DTYPE)
    if y_train.ndim == 1:
        y_train = y_train.unsqueeze(-1)
    total = x_train.shape[0]

    hyper = _HyperParams(state.kernels, config.train_hyperparams)
    log_noise = torch.tensor(float(np.log(max(float(state.noise_var), 1e-8))),
                             dtype=DTYPE, requires_grad=config.train_noise)
    factors = [r.clone().requires_grad_(train_grams) for r in state.inducing_factors]
    outputs = state.inducing_outputs.clone().requires_grad_(True)

    params = [outputs] + hyper.params
    if train_grams:
        params += factors
    if config.train_noise:
        params.append(log_noise)
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    x_i = state.inducing_inputs
    g0_i = state.inducing_g0()
    trace: list[TraceRow] = []
    for it in range(config.iterations):
        opt.zero_grad()
        specs = hyper.specs()
        if train_grams:
            step_factors = factors
        else:
            p_i = x_i.shape[0]
            step_factors = [float(np.sqrt(p_i)) * chol(g)
                            for g in prior_recursion(g0_i, specs[:-1])]
        probe = SparseState(inducing_inputs=x_i, inducing_factors=step_factors,
                            inducing_outputs=outputs, kernels=specs,
                            widths=state.widths, noise_var=log_noise.exp())
        value = sparse_objective(probe, x_train, y_train, total, flip_kl=config.flip_kl)
        if not torch.isfinite(value):
            raise NumericalError(f"sparse objective became non-finite at iteration {it}")
        (-value).backward()
        for i, p in enumerate(params):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient at iteration {it}, parameter {i}")
        opt.step()
        if it % config.trace_every == 0 or it == config.iterations - 1:
            v = float(value.detach())
            trace.append(TraceRow(it, v, [], v))

    specs = hyper.specs()
    final_specs = [spec_from_dict(spec_to_dict(s)) for s in specs]  # detach to floats
    if train_grams:
        final_factors = [r.detach() for r in factors]
    else:
        p_i = x_i.shape[0]
        final_factors = [(float(np.sqrt(p_i)) * chol(g)).detach()
                         for g in prior_recursion(g0_i, final_specs[:-1])]
    final = SparseState(inducing_inputs=x_i, inducing_factors=final_factors,
                        inducing_outputs=outputs.detach(), kernels=final_specs,
                        widths=state.widths, noise_var=float(log_noise.exp().detach()))
    return final, trace


def nngp_baseline(state: SparseState, x_train, y_train, x_test, y_test,
                  config: SparseConfig) -> tuple[float, SparseState]:
    """Infinite-width baseline: Grams pinned to the kernel recursion.

    Only the kernel hyperparameters, the noise and the inducing outputs are
    trained; returns the test RMSE in the units of ``y_test``.
    """
    trained, _ = train_sparse(state, x_train, y_train, config, train_grams=False)
    mean, _ = predict(trained, torch.as_tensor(np.asarray(x_test), dtype=DTYPE),
                      full_cov=False)
    y_test = np.asarray(y_test, dtype=float).reshape(np.asarray(mean).shape)
    return float(np.sqrt(np.mean((np.asarray(mean) - y_test) ** 2))), trained


# ---------------------------------------------------------------------------
# Plain-text checkpoints
# ---------------------------------------------------------------------------

def _write_matrix(fh, name: str, mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
    for row in mat:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(fh, expect: str) -> np.ndarray:
    header = fh.readline().split()
    if not header or header[0] != expect:
        raise InvalidInputError(f"checkpoint: expected matrix {expect!r}, got {header}")
    rows, cols = int(header[1]), int(header[2])
    out = np.empty((rows, cols))
    for i in range(rows):
        vals = fh.readline().split()
        if len(vals) != cols:
            raise InvalidInputError(f"checkpoint: ragged row in matrix {expect!r}")
        out[i] = [float(v) for v in vals]
    return out


def save_checkpoint(state: SparseState, path):
    """One JSON header line, then labeled row-major matrices."""
    header = {
        "format": "sparse-dkm-checkpoint-v1",
        "num_inducing": state.num_inducing,
        "depth": state.widths.depth,
        "nus": list(map(float, state.widths.nus)),
        "noise_var": float(state.noise_var),
        "kernels": [spec_to_dict(s) for s in state.kernels],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        _write_matrix(fh, "inducing_inputs", state.inducing_inputs)
        for i, r in enumerate(state.inducing_factors):
            _write_matrix(fh, f"factor_{i}", r)
        _write_matrix(fh, "inducing_outputs", state.inducing_outputs)


def load_checkpoint(path) -> SparseState:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "sparse-dkm-checkpoint-v1":
            raise InvalidInputError(f"{path}: not a recognized checkpoint")
        x_i = _read_matrix(fh, "inducing_inputs")
        factors = [_read_matrix(fh, f"factor_{i}") for i in range(header["depth"])]
        outputs = _read_matrix(fh, "inducing_outputs")
    return SparseState(
        inducing_inputs=x_i,
        inducing_factors=[torch.as_tensor(r, dtype=DTYPE) for r in factors],
        inducing_outputs=outputs,
        kernels=[spec_from_dict(d) for d in header["kernels"]],
        widths=WidthProfile(header["nus"]),
        noise_var=header["noise_var"],
    )
