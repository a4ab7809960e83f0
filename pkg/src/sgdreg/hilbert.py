"""Weighted finite-dimensional Hilbert-space arithmetic.

Discretized space elements carry explicit quadrature weights, and every inner
product, norm, adjoint and spectral decomposition in this package is taken
with respect to those weights, not the Euclidean ones.  Data vectors for a
system of n equations live in a product space whose squared norm averages the
per-equation squared norms (the 1/n factor makes a system residual equal the
mean per-equation residual).

Spectral utilities (fractional powers, norms of step polynomials of a
positive semidefinite operator) are evaluated on a cached eigendecomposition,
so they are exact up to the eigensolver's accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "HVector",
    "StackedData",
    "SymOperator",
    "trapezoid_weights",
    "uniform_weights",
    "inner",
    "norm",
    "stacked_norm",
    "stacked_sq_norm",
    "stacked_sub",
    "frac_power",
    "op_poly",
    "contraction_power_bound",
    "rescaled_to_unit_norm",
]


def trapezoid_weights(m: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Composite trapezoid weights on m equispaced nodes spanning [a, b]."""
    if m < 1 or b <= a:
        raise ValueError("need m >= 1 and b > a")
    if m == 1:
        w = np.array([b - a])
    else:
        h = (b - a) / (m - 1)
        w = np.full(m, h)
        w[0] = w[-1] = h / 2.0
    w.setflags(write=False)
    return w


def uniform_weights(m: int, total: float = 1.0) -> np.ndarray:
    """Uniform weights summing to `total`."""
    if m < 1 or total <= 0:
        raise ValueError("need m >= 1 and total > 0")
    w = np.full(m, total / m)
    w.setflags(write=False)
    return w


def _check_weights(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise ValueError("weights must be a nonempty 1-d array")
    if weights.min() <= 0.0:
        raise ValueError("quadrature weights must be strictly positive")
    return weights


@dataclass(frozen=True)
class HVector:
    """Element of a weighted discrete Hilbert space.

    `weights` is shared by reference among all vectors of the same space;
    instances are treated as immutable after construction.
    """

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValueError("values must be 1-d")
        if values.shape != np.shape(self.weights):
            raise ValueError(
                f"values (len {values.size}) and weights "
                f"(len {np.size(self.weights)}) do not match"
            )

    @property
    def dim(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "HVector":
        return HVector(values, self.weights)

    def __add__(self, other: "HVector") -> "HVector":
        _check_compatible(self, other)
        return HVector(self.values + other.values, self.weights)

    def __sub__(self, other: "HVector") -> "HVector":
        _check_compatible(self, other)
        return HVector(self.values - other.values, self.weights)

    def __rmul__(self, a: float) -> "HVector":
        return HVector(float(a) * self.values, self.weights)


def _check_compatible(u: HVector, v: HVector) -> None:
    if u.values.shape != v.values.shape:
        raise ValueError("dimension mismatch between vectors")
    if u.weights is not v.weights and not np.array_equal(u.weights, v.weights):
        raise ValueError("vectors do not share the same quadrature weights")


def inner(u: HVector, v: HVector) -> float:
    """Weighted inner product sum_j w_j u_j v_j."""
    _check_compatible(u, v)
    return float(np.dot(u.weights * u.values, v.values))


def norm(u: HVector) -> float:
    return math.sqrt(max(inner(u, u), 0.0))


@dataclass(frozen=True)
class StackedData:
    """Element of the n-fold data product space.

    All blocks share one weight vector for the underlying data space; the
    squared product norm is the mean of the blockwise squared norms.
    """

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if len(blocks) == 0:
            raise ValueError("stacked data needs at least one block")
        w0 = blocks[0].weights
        for b in blocks[1:]:
            if b.weights is not w0 and not np.array_equal(b.weights, w0):
                raise ValueError("all blocks must share one weight vector")

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def block_weights(self) -> np.ndarray:
        return self.blocks[0].weights


def stacked_sq_norm(y: StackedData) -> float:
    total = 0.0
    for b in y.blocks:
        total += inner(b, b)
    return total / y.n


def stacked_norm(y: StackedData) -> float:
    """Product norm ((1/n) sum_i ||y_i||^2)^(1/2)."""
    return math.sqrt(max(stacked_sq_norm(y), 0.0))


def stacked_sub(a: StackedData, b: StackedData) -> StackedData:
    if a.n != b.n:
        raise ValueError("block count mismatch")
    return StackedData(tuple(ba - bb for ba, bb in zip(a.blocks, b.blocks)))


@dataclass(frozen=True)
class SymOperator:
    """Self-adjoint operator on a weighted space, with cached spectrum.

    Self-adjointness is with respect to the weighted inner product.  The
    eigendecomposition (descending eigenvalues, eigenvectors orthonormal in
    the weighted inner product) is computed once at construction.
    """

    matrix: np.ndarray
    weights: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, matrix, weights, sym_tol: float = 1e-10) -> "SymOperator":
        weights = _check_weights(weights)
        matrix = np.asarray(matrix, dtype=float)
        m = weights.size
        if matrix.shape != (m, m):
            raise ValueError("matrix shape does not match weights")
        wa = weights[:, None] * matrix
        defect = float(np.abs(wa - wa.T).max())
        scale = float(np.abs(wa).max())
        if defect > sym_tol * max(scale, 1e-300):
            raise ValueError(
                f"matrix is not self-adjoint in the weighted inner product "
                f"(defect {defect:.3e}, scale {scale:.3e})"
            )
        sq = np.sqrt(weights)
        sim = (sq[:, None] * matrix) / sq[None, :]
        sim = 0.5 * (sim + sim.T)
        lam, q = np.linalg.eigh(sim)
        order = np.argsort(lam)[::-1]
        lam = lam[order]
        vecs = q[:, order] / sq[:, None]
        return cls(matrix=matrix, weights=weights, eigenvalues=lam, eigenvectors=vecs)

    @classmethod
    def from_eigenpairs(cls, eigenvalues, eigenvectors, weights) -> "SymOperator":
        """Rebuild an operator from weighted-orthonormal eigenpairs (no new
        decomposition; used for spectral functions of an existing operator)."""
        weights = _check_weights(weights)
        lam = np.asarray(eigenvalues, dtype=float)
        vecs = np.asarray(eigenvectors, dtype=float)
        order = np.argsort(lam)[::-1]
        lam = lam[order]
        vecs = vecs[:, order]
        matrix = (vecs * lam[None, :]) @ (vecs.T * weights[None, :])
        return cls(matrix=matrix, weights=weights, eigenvalues=lam, eigenvectors=vecs)

    @classmethod
    def diagonal(cls, diag, weights) -> "SymOperator":
        """Operator acting coordinatewise; exact spectrum, no eigensolver."""
        weights = _check_weights(weights)
        diag = np.asarray(diag, dtype=float)
        if diag.shape != weights.shape:
            raise ValueError("diagonal length does not match weights")
        vecs = np.eye(diag.size) / np.sqrt(weights)[:, None]
        op = cls.from_eigenpairs(diag, vecs, weights)
        return SymOperator(
            matrix=np.diag(diag),
            weights=weights,
            eigenvalues=op.eigenvalues,
            eigenvectors=op.eigenvectors,
        )

    @property
    def dim(self) -> int:
        return self.weights.size

    def norm(self) -> float:
        return float(np.abs(self.eigenvalues).max()) if self.dim else 0.0

    def apply(self, u: HVector) -> HVector:
        if u.dim != self.dim:
            raise ValueError("dimension mismatch")
        return HVector(self.matrix @ u.values, u.weights)

    def quad_form(self, u: HVector) -> float:
        """<Au, u> in the weighted inner product (= ||A^(1/2) u||^2 for PSD A)."""
        return max(inner(self.apply(u), u), 0.0)


def _clamped_psd_eigs(B: SymOperator) -> np.ndarray:
    lam = B.eigenvalues
    lam_max = float(lam.max()) if lam.size else 0.0
    neg_tol = 1e-12 * max(1.0, lam_max)
    if lam.size and float(lam.min()) < -neg_tol:
        raise ValueError(
            f"operator is not positive semidefinite (min eigenvalue {lam.min():.3e})"
        )
    cut = 1e-12 * max(lam_max, 0.0)
    return np.where(lam > cut, lam, 0.0)


def frac_power(B: SymOperator, nu: float) -> SymOperator:
    """Fractional power B^nu of a positive semidefinite operator.

    Defined spectrally; eigenvalues below 1e-12 * lambda_max are clamped to
    zero first, and 0^nu := 0, so nu = 0 yields the orthogonal projector onto
    the range of B.
    """
    if nu < 0:
        raise ValueError("exponent must be nonnegative")
    lam = _clamped_psd_eigs(B)
    powered = np.where(lam > 0.0, lam, 1.0) ** nu
    powered = np.where(lam > 0.0, powered, 0.0)
    return SymOperator.from_eigenpairs(powered, B.eigenvectors, B.weights)


def op_poly(B: SymOperator, etas: Sequence[float], p: float) -> float:
    """Spectral norm of prod_i (I - eta_i B) * B^p.

    Evaluated on the eigenvalues (max over lambda of |prod(1 - eta_i lambda)|
    * lambda^p), which avoids accumulation error from repeated matrix
    products.  The empty product is the identity.  Step sizes must lie in
    (0, 1/||B||]; for p = 0 the factor lambda^p is read as the projector onto
    the range of B (1 on lambda > 0, 0 on lambda = 0).
    """
    if p < 0:
        raise ValueError("power p must be nonnegative")
    lam = _clamped_psd_eigs(B)
    etas = np.asarray(list(etas), dtype=float)
    nrm = float(lam.max()) if lam.size else 0.0
    if etas.size:
        if etas.min() <= 0.0:
            raise ValueError("step sizes must be positive")
        if nrm > 0.0 and etas.max() > (1.0 / nrm) * (1.0 + 1e-12):
            raise ValueError(
                f"step size {etas.max():.6g} exceeds 1/||B|| = {1.0 / nrm:.6g}"
            )
    if etas.size:
        factors = np.prod(1.0 - etas[:, None] * lam[None, :], axis=0)
    else:
        factors = np.ones_like(lam)
    if p == 0:
        weight = np.where(lam > 0.0, 1.0, 0.0)
    else:
        weight = lam**p
    return float(np.max(np.abs(factors) * weight)) if lam.size else 0.0


def contraction_power_bound(etas: Sequence[float], p: float) -> float:
    """Closed-form bound p^p / (e^p (sum eta_i)^p) on op_poly, with 0^0 := 1."""
    if p == 0:
        return 1.0
    s = float(np.sum(np.asarray(list(etas), dtype=float)))
    if s <= 0:
        raise ValueError("bound needs a positive step-size sum")
    return (p / (math.e * s)) ** p


def rescaled_to_unit_norm(B: SymOperator) -> tuple:
    """Return (B', tau) with B' = tau * B and ||B'|| <= 1.

    tau = 1 when ||B|| <= 1 already.  Callers that rescale the operator this
    way must rescale forward maps and data consistently (by sqrt(tau));
    nothing in this package rescales silently.
    """
    nrm = B.norm()
    if nrm <= 1.0:
        return B, 1.0
    tau = 1.0 / nrm
    return SymOperator.from_eigenpairs(B.eigenvalues * tau, B.eigenvectors, B.weights), tau
