"""Dense symmetric-matrix utilities shared by every other module.

All numerical code works on ``torch.Tensor`` in float64; plain numpy arrays
(or nested lists) are accepted everywhere and converted on entry.  Gram
matrices are represented as bare P x P tensors, with :func:`validate_gram`
available to check the symmetry / positive-semidefiniteness contract.
"""

from __future__ import annotations

import torch

DTYPE = torch.float64

# Diagonal jitter schedule used before Cholesky factorizations.  The first
# attempt is unjittered so that exactly-representable factorizations (e.g.
# identity) come back exact.
JITTER_SCHEDULE = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

SYMMETRY_RTOL = 1e-10
PSD_EIG_TOL = 1e-8


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a linear-algebra routine fails beyond recovery.

    ``jitter`` carries the largest diagonal jitter that was attempted, when
    the failure came from a factorization.
    """

    def __init__(self, message: str, jitter: float | None = None):
        super().__init__(message)
        self.jitter = jitter


class DegenerateInputError(InvalidInputError):
    """Raised for inputs that make an operation undefined (e.g. zero variance)."""


def as_matrix(values) -> torch.Tensor:
    """Convert array-like input to a float64 tensor, rejecting non-finite entries."""
    t = torch.as_tensor(values, dtype=DTYPE)
    if not torch.isfinite(t).all():
        raise InvalidInputError("matrix contains NaN or Inf entries")
    return t


def validate_gram(g, sym_rtol: float = SYMMETRY_RTOL, eig_tol: float = PSD_EIG_TOL) -> torch.Tensor:
    """Check the Gram-matrix contract (square, symmetric, PSD) and return the tensor.

    Symmetry is relative: ``|G_ij - G_ji| <= sym_rtol * max(1, |G_ij|)``.
    The smallest eigenvalue must be ``>= -eig_tol * mean(diag(G))``.
    """
    g = as_matrix(g)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {tuple(g.shape)}")
    asym = (g - g.T).abs()
    scale = torch.maximum(torch.ones_like(g), g.abs())
    if (asym > sym_rtol * scale).any():
        raise InvalidInputError("matrix is not symmetric within tolerance")
    eigs = torch.linalg.eigvalsh(g)
    floor = -eig_tol * float(g.diagonal().mean().clamp(min=0.0))
    if float(eigs.min()) < floor:
        raise InvalidInputError(
            f"matrix is not PSD: min eigenvalue {float(eigs.min()):.3e} < {floor:.3e}"
        )
    return g


def gram_from_features(f, n: int | None = None) -> torch.Tensor:
    """Second-moment matrix ``(1/N) F F^T`` of a P x N feature matrix."""
    f = as_matrix(f)
    if f.ndim != 2:
        raise InvalidInputError(f"expected a 2-d feature matrix, got shape {tuple(f.shape)}")
    if n is None:
        n = f.shape[1]
    if n < 1:
        raise InvalidInputError("feature count must be >= 1")
    g = f @ f.T / n
    return (g + g.T) / 2


def sqdist(g) -> torch.Tensor:
    """Pairwise squared-distance matrix ``R_ij = G_ii - 2 G_ij + G_jj``.

    The diagonal is exactly zero; small negative round-off is clamped.
    """
    g = torch.as_tensor(g, dtype=DTYPE)
    d = g.diagonal(dim1=-2, dim2=-1)
    r = d.unsqueeze(-1) - 2 * g + d.unsqueeze(-2)
    r = r.clamp(min=0.0)
    eye = torch.eye(g.shape[-1], dtype=torch.bool)
    return r.masked_fill(eye, 0.0)


def chol(g, jitter_schedule=JITTER_SCHEDULE) -> torch.Tensor:
    """Lower Cholesky factor of ``g``, escalating diagonal jitter on failure.

    Jitter is ``eps * mean(diag(g))`` with ``eps`` walked through
    ``jitter_schedule``; a :class:`NumericalError` carrying the final jitter
    level is raised if every attempt fails.
    """
    g = torch.as_tensor(g, dtype=DTYPE)
    scale = float(g.diagonal(dim1=-2, dim2=-1).mean().detach())
    if scale <= 0:
        scale = 1.0
    eye = torch.eye(g.shape[-1], dtype=DTYPE)
    last = 0.0
    for eps in jitter_schedule:
        last = eps * scale
        try:
            factor, info = torch.linalg.cholesky_ex(g + last * eye)
        except RuntimeError:
            continue
        if int(info.max()) == 0 and torch.isfinite(factor).all():
            return factor
    raise NumericalError(
        f"Cholesky factorization failed up to jitter {last:.3e}", jitter=last
    )


def sym_eig(g) -> tuple[torch.Tensor, torch.Tensor]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    """
    g = as_matrix(g)
    try:
        vals, vecs = torch.linalg.eigh(g)
    except RuntimeError as exc:
        raise NumericalError(f"symmetric eigendecomposition failed: {exc}") from exc
    return vals, vecs


def solve_psd(g, rhs, jitter_schedule=JITTER_SCHEDULE) -> torch.Tensor:
    """Solve ``g x = rhs`` via jittered Cholesky."""
    factor = chol(g, jitter_schedule)
    return torch.cholesky_solve(torch.as_tensor(rhs, dtype=DTYPE), factor)


def logdet_psd(g, jitter_schedule=JITTER_SCHEDULE) -> torch.Tensor:
    """Log-determinant of a (jittered) positive-definite matrix."""
    factor = chol(g, jitter_schedule)
    return 2 * factor.diagonal(dim1=-2, dim2=-1).log().sum(-1)
