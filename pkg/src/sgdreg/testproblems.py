"""Built-in systems with known ground truth.

TP1 is a diagonal map with power-law singular values and an optional
componentwise quadratic perturbation; every quantity of the convergence
theory is analytically available, which makes it the instance of choice for
rate experiments.  TP2 identifies the potential c in -u'' + c u = f on (0,1)
with homogeneous Dirichlet data from pointwise observations of u, a standard
parameter-identification model discretized with second-order finite
differences so derivatives and adjoints are exact at the discrete level.

Blocks of a stacked evaluation are kept at full data length with zeros off
the block's own coordinates; that way all blocks share one data-space weight
vector for any partition of the coordinates, while norms and adjoints are
unchanged.

The low-level kernels here operate on (paths, dim) arrays and are shared by
the single-path methods (one row) and the Monte Carlo batch engines, so both
execution paths produce bitwise-identical iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import NumericalFailure
from .hilbert import HVector, trapezoid_weights
from .problems import NonlinearSystem, SourceSpec, make_representer

__all__ = [
    "TP1Diagonal",
    "TP2PotentialBVP",
    "TP1Bundle",
    "tp1_build",
    "tp2_build",
    "tp2_forward_solve",
    "split_groups",
]


def split_groups(count: int, n: int, layout: str = "contiguous") -> list:
    """Partition range(count) into n groups, contiguous or round-robin."""
    if n < 1 or n > count:
        raise ValueError(f"need 1 <= n <= {count} groups, got {n}")
    idx = np.arange(count)
    if layout == "contiguous":
        return [np.array(g, dtype=np.intp) for g in np.array_split(idx, n)]
    if layout == "roundrobin":
        return [idx[idx % n == i] for i in range(n)]
    raise ValueError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------
# TP1: diagonal map with quadratic perturbation
# ---------------------------------------------------------------------------


def _tp1_apply_vals(sigma, kappa, x):
    return sigma * x + kappa * (sigma * x * x)


def _tp1_deriv_factor(sigma, kappa, x):
    return sigma + (2.0 * kappa) * (sigma * x)


class TP1Diagonal(NonlinearSystem):
    """F_i(x) = restriction to coordinate block i of sigma*x + kappa*sigma*x^2,
    with sigma_j = j^(-s).  kappa = 0 is exactly linear."""

    def __init__(self, m, s, n, kappa, layout="contiguous"):
        if m < 1 or s <= 0 or kappa < 0:
            raise ValueError("need m >= 1, s > 0, kappa >= 0")
        if n > m:
            raise ValueError(f"cannot split {m} coordinates into {n} blocks")
        self.m = int(m)
        self.s = float(s)
        self.n = int(n)
        self.kappa = float(kappa)
        self.layout = layout
        self.sigma = np.arange(1, m + 1, dtype=float) ** (-self.s)
        self.sigma.setflags(write=False)
        self.groups = split_groups(m, n, layout)
        self.dim_x = self.dim_y = self.m
        self.x_weights = trapezoid_weights(m) if m > 1 else np.array([1.0])
        self.y_weights = self.x_weights
        self.domain_box = None

    def apply_i(self, i, x):
        full = _tp1_apply_vals(self.sigma, self.kappa, x.values)
        out = np.zeros(self.m)
        g = self.groups[i]
        out[g] = full[g]
        return HVector(out, self.y_weights)

    def deriv_apply_i(self, i, x, h):
        full = _tp1_deriv_factor(self.sigma, self.kappa, x.values) * h.values
        out = np.zeros(self.m)
        g = self.groups[i]
        out[g] = full[g]
        return HVector(out, self.y_weights)

    def deriv_adjoint_apply_i(self, i, x, g):
        factor = _tp1_deriv_factor(self.sigma, self.kappa, x.values)
        out = np.zeros(self.m)
        grp = self.groups[i]
        out[grp] = factor[grp] * g.values[grp]
        return HVector(out, self.x_weights)


@dataclass(frozen=True)
class TP1Bundle:
    """A built system plus the pieces needed to manufacture ground truth."""

    system: TP1Diagonal
    x1: HVector
    seed: int

    def source(self, nu, pattern="invsqrt", w_norm=None) -> SourceSpec:
        w = make_representer(self.system.x_weights, pattern, w_norm)
        return SourceSpec(nu=nu, w=w)


def tp1_build(m, s, n, kappa, seed, layout="contiguous") -> TP1Bundle:
    system = TP1Diagonal(m, s, n, kappa, layout)
    x1 = HVector(np.zeros(m), system.x_weights)
    return TP1Bundle(system=system, x1=x1, seed=int(seed))


# ---------------------------------------------------------------------------
# TP2: potential identification in a two-point boundary value problem
# ---------------------------------------------------------------------------


@njit(cache=True)
def _thomas_const_offdiag(offd, diag, rhs, piv_tol):  # pragma: no cover (jit)
    """Thomas solve of tridiag(offd, diag_j, offd) x = rhs, batched over rows.

    Returns (solution, index of first row with a near-zero pivot, or -1).
    """
    nb, m = diag.shape
    out = np.empty_like(rhs)
    gam = np.empty(m)
    bad = -1
    for b in range(nb):
        beta = diag[b, 0]
        if abs(beta) <= piv_tol:
            bad = b
            break
        out[b, 0] = rhs[b, 0] / beta
        ok = True
        for j in range(1, m):
            gam[j] = offd / beta
            beta = diag[b, j] - offd * gam[j]
            if abs(beta) <= piv_tol:
                bad = b
                ok = False
                break
            out[b, j] = (rhs[b, j] - offd * out[b, j - 1]) / beta
        if not ok:
            break
        for j in range(m - 2, -1, -1):
            out[b, j] = out[b, j] - gam[j + 1] * out[b, j + 1]
    return out, bad


_FORCINGS = {
    "sine": lambda t: (math.pi**2) * np.sin(math.pi * t),
    "constant": lambda t: np.ones_like(t),
    "ramp": lambda t: t,
}


class TP2PotentialBVP(NonlinearSystem):
    """Identify the potential c >= 0 in -u'' + c u = f, u(0) = u(1) = 0.

    Interior grid t_j = j h, h = 1/(m+1); the forward solve is tridiagonal
    (Thomas, O(m)); observations are pointwise values of u at grid nodes,
    partitioned into n equation groups.
    """

    def __init__(
        self,
        m,
        n,
        c_background=1.0,
        f_choice="sine",
        observation_layout="contiguous",
        domain_box=None,
    ):
        if m < 8:
            raise ValueError("need at least 8 interior nodes")
        if c_background < 0:
            raise ValueError(
                "background potential must keep the system diagonally dominant (c >= 0)"
            )
        self.m = int(m)
        self.n = int(n)
        self.h = 1.0 / (self.m + 1)
        self.nodes = self.h * np.arange(1, self.m + 1)
        try:
            self.f = np.ascontiguousarray(_FORCINGS[f_choice](self.nodes))
        except KeyError:
            raise ValueError(
                f"unknown forcing {f_choice!r}; choose from {sorted(_FORCINGS)}"
            ) from None
        self.f_choice = f_choice
        self.c_background = float(c_background)
        self.obs_nodes = np.arange(self.m)
        self.groups = split_groups(self.obs_nodes.size, n, observation_layout)
        self.layout = observation_layout
        self.dim_x = self.m
        self.dim_y = self.obs_nodes.size
        wx = np.full(self.m, self.h)
        wx.setflags(write=False)
        self.x_weights = wx
        wy = np.full(self.dim_y, self.h)
        wy.setflags(write=False)
        self.y_weights = wy
        self.domain_box = domain_box

    # -- raw batched kernels (rows = paths) --------------------------------

    def solve_batch(self, c_rows, rhs_rows):
        """L_c u = rhs for each row; raises on a near-zero pivot."""
        diag = (2.0 / self.h**2) + c_rows
        piv_tol = 1e-14 * float(np.abs(diag).max())
        out, bad = _thomas_const_offdiag(
            -1.0 / self.h**2,
            np.ascontiguousarray(diag),
            np.ascontiguousarray(rhs_rows),
            piv_tol,
        )
        if bad >= 0:
            raise NumericalFailure(
                f"zero pivot in tridiagonal solve (row {bad}); the potential has "
                f"left the invertible region"
            )
        return out

    def state_batch(self, c_rows):
        """u(c) for each row of potentials."""
        rhs = np.broadcast_to(self.f, c_rows.shape)
        return self.solve_batch(c_rows, np.ascontiguousarray(rhs))

    def adjoint_batch(self, c_rows, u_rows, rhs_rows):
        """-(u * L_c^{-1} rhs) / w_x for each row (rhs already scattered)."""
        v = self.solve_batch(c_rows, rhs_rows)
        return -(u_rows * v) / self.x_weights

    def scatter_group(self, i, g_active):
        """P_i^T W_Y g for group i; g_active holds the group's components."""
        rhs = np.zeros(self.m)
        grp = self.groups[i]
        rhs[self.obs_nodes[grp]] = self.y_weights[grp] * g_active
        return rhs

    # -- NonlinearSystem interface ------------------------------------------

    def _state(self, x):
        return self.state_batch(x.values[None, :])[0]

    def apply_i(self, i, x):
        u = self._state(x)
        out = np.zeros(self.dim_y)
        grp = self.groups[i]
        out[grp] = u[self.obs_nodes[grp]]
        return HVector(out, self.y_weights)

    def deriv_apply_i(self, i, x, h):
        u = self._state(x)
        v = self.solve_batch(x.values[None, :], (h.values * u)[None, :])[0]
        out = np.zeros(self.dim_y)
        grp = self.groups[i]
        out[grp] = -v[self.obs_nodes[grp]]
        return HVector(out, self.y_weights)

    def deriv_adjoint_apply_i(self, i, x, g):
        u = self._state(x)
        rhs = self.scatter_group(i, g.values[self.groups[i]])
        vals = self.adjoint_batch(x.values[None, :], u[None, :], rhs[None, :])[0]
        return HVector(vals, self.x_weights)


def tp2_build(
    m,
    n,
    c_background=1.0,
    f_choice="sine",
    observation_layout="contiguous",
    domain_box=None,
) -> TP2PotentialBVP:
    return TP2PotentialBVP(
        m, n, c_background, f_choice, observation_layout, domain_box
    )


def tp2_forward_solve(c: HVector, f) -> HVector:
    """Solve -u'' + c u = f on the interior grid of c (Dirichlet boundary).

    Standalone entry for the forward solve; works for any interior node
    count >= 1.  Raises on a zero pivot.
    """
    cvals = np.asarray(c.values, dtype=float)
    fvals = np.asarray(f.values if isinstance(f, HVector) else f, dtype=float)
    if fvals.shape != cvals.shape:
        raise ValueError("forcing length does not match grid")
    m = cvals.size
    h = 1.0 / (m + 1)
    diag = (2.0 / h**2) + cvals
    piv_tol = 1e-14 * float(np.abs(diag).max())
    out, bad = _thomas_const_offdiag(
        -1.0 / h**2, diag[None, :].copy(), fvals[None, :].copy(), piv_tol
    )
    if bad >= 0:
        raise NumericalFailure("zero pivot in tridiagonal solve")
    return HVector(out[0], c.weights)
