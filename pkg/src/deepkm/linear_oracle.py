"""Closed-form optimal Gram matrices for the linear kernel.

With a linear kernel and no output noise the optimum of the objective is
available analytically: for equal widths it geometrically interpolates
between the input and output Gram matrices; for arbitrary widths the
per-eigenvalue transfer factors solve a polynomial with a unique admissible
root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .matrices import InvalidInputError, NumericalError

EIG_FLOOR = 1e-14


@dataclass
class LinearSolution:
    """Optimal Gram matrices plus the layer-to-layer transfer matrix ``G_{l-1}^-1 G_l``."""

    grams: list[np.ndarray]
    transfer: np.ndarray


def _sym_pencil_eig(g0: np.ndarray, gout: np.ndarray):
    """Eigendecompose ``G_0^-1 G_out`` via the symmetric similarity transform.

    Returns ``(eigvals, v)`` with ``G_0^-1 G_out = V diag(eigvals) V^-1`` and
    real positive eigenvalues guaranteed for PD inputs.
    """
    l0 = scipy.linalg.cholesky(g0, lower=True)
    m = scipy.linalg.solve_triangular(l0, gout, lower=True)
    m = scipy.linalg.solve_triangular(l0, m.T, lower=True)
    m = (m + m.T) / 2
    vals, q = np.linalg.eigh(m)
    v = scipy.linalg.solve_triangular(l0, q, lower=True, trans="T")
    return vals, v, l0, q


def linear_equal_width(g0, gout, depth: int) -> LinearSolution:
    """Geometric interpolation ``G_l = G_0 (G_0^-1 G_out)^(l/(L+1))``.

    Both endpoints must be positive definite.
    """
    g0 = np.asarray(g0, dtype=float)
    gout = np.asarray(gout, dtype=float)
    if depth < 1:
        raise InvalidInputError("depth must be >= 1")
    vals, _, l0, q = _sym_pencil_eig(g0, gout)
    if np.min(vals) <= EIG_FLOOR:
        raise InvalidInputError(
            f"G_0^-1 G_out has a non-positive eigenvalue ({np.min(vals):.3e})"
        )
    grams = []
    for layer in range(1, depth + 1):
        t = layer / (depth + 1)
        # G_l = L0 M^t L0^T, with M the symmetrized pencil
        root = (q * vals**t) @ q.T
        g = l0 @ root @ l0.T
        grams.append((g + g.T) / 2)
    transfer = np.linalg.solve(g0, grams[0])
    return LinearSolution(grams=grams, transfer=transfer)


def _solve_transfer_root(lam: float, offsets: np.ndarray, tol: float = 1e-12,
                         max_iter: int = 200) -> float:
    """Unique root ``d' >= 0`` of ``prod(d' + offsets) = lam``.

    The product is strictly increasing on ``d' >= 0`` and zero at the origin
    (the smallest offset vanishes), so bisection with bracket doubling always
    converges; a Newton polish sharpens the result.
    """

    def f(d):
        return np.prod(d + offsets) - lam

    lo, hi = 0.0, 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > 1e30:
            raise NumericalError(f"no admissible transfer root for eigenvalue {lam:.3e}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    d = 0.5 * (lo + hi)
    for _ in range(50):
        val = np.prod(d + offsets)
        grad = val * np.sum(1.0 / (d + offsets)) if d > 0 or np.all(offsets > 0) else None
        if not grad:
            break
        step = (val - lam) / grad
        d_new = d - step
        if d_new < lo or d_new > hi:
            break
        d = d_new
        if abs(step) <= tol * max(1.0, d):
            break
    return float(d)


def linear_general_width(g0, gout, nus) -> LinearSolution:
    """Optimal Gram matrices for the linear kernel with arbitrary layer widths.

    ``nus`` lists the L+1 width ratios ``nu_1 .. nu_{L+1}``; the returned
    solution has L Gram matrices.
    """
    g0 = np.asarray(g0, dtype=float)
    gout = np.asarray(gout, dtype=float)
    nus = np.asarray(list(nus), dtype=float)
    if nus.ndim != 1 or len(nus) < 2:
        raise InvalidInputError("need at least two width ratios (one hidden layer)")
    if np.any(nus <= 0):
        raise InvalidInputError("width ratios must be positive")
    depth = len(nus) - 1
    nu_min = float(np.min(nus))
    scale = float(np.prod(nus))

    vals, v, _, _ = _sym_pencil_eig(g0, gout)
    lam = scale * vals
    if np.min(lam) <= EIG_FLOOR:
        raise InvalidInputError("scaled G_0^-1 G_out has a non-positive eigenvalue")

    offsets = nus - nu_min
    d_diag = np.empty_like(lam)
    for i, lam_i in enumerate(lam):
        try:
            d_prime = _solve_transfer_root(lam_i, offsets)
        except NumericalError as exc:
            raise NumericalError(f"eigenvalue index {i}: {exc}") from exc
        d_diag[i] = d_prime + nus[0] - nu_min

    # nu_1 G_0^-1 G_1 = V D V^-1
    v_inv = np.linalg.inv(v)
    t1 = (v * d_diag) @ v_inv
    grams = []
    prev = g0
    for layer in range(1, depth + 1):
        ratio = (t1 + (nus[layer - 1] - nus[0]) * np.eye(len(g0))) / nus[layer - 1]
        g = prev @ ratio
        g = (g + g.T) / 2
        grams.append(g)
        prev = g
    transfer = np.linalg.solve(g0, grams[0])
    return LinearSolution(grams=grams, transfer=transfer)
