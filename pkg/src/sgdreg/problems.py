"""Nonlinear system abstraction, data generation, and assumption verifiers.

A system consists of n maps F_i from the parameter space X into one shared
data space Y, each with a derivative and its weighted adjoint.  This module
also manufactures consistent test instances: exact data, noisy data with an
exactly prescribed noise level, and reference solutions built from a
smoothness representer, plus sampling-based estimators for the nonlinearity
and derivative-structure constants that the convergence theory assumes.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalFailure
from .hilbert import (
    HVector,
    StackedData,
    SymOperator,
    frac_power,
    inner,
    norm,
    stacked_norm,
    stacked_sq_norm,
    stacked_sub,
)

__all__ = [
    "NonlinearSystem",
    "ScaledSystem",
    "CountingSystem",
    "NoiseModel",
    "SourceSpec",
    "ConeEstimate",
    "RangeInvRecord",
    "apply_full",
    "stacked_residual_sq",
    "make_noisy",
    "make_representer",
    "assemble_normal_operator",
    "build_source_truth",
    "estimate_deriv_bound",
    "estimate_cone_constant",
    "check_range_invariance",
    "adjoint_defect",
    "deriv_linearity_defect",
    "finite_difference_order",
]


class NonlinearSystem(abc.ABC):
    """A system of n maps F_i: X -> Y with derivatives and weighted adjoints.

    Implementations must be immutable after construction; all evaluation
    methods are pure and safe to call concurrently.  `domain_box`, when not
    None, is a pair (lo, hi) of componentwise bounds on admissible arguments.
    """

    n: int
    dim_x: int
    dim_y: int
    x_weights: np.ndarray
    y_weights: np.ndarray
    domain_box: Optional[tuple] = None

    @abc.abstractmethod
    def apply_i(self, i: int, x: HVector) -> HVector:
        """F_i(x)."""

    @abc.abstractmethod
    def deriv_apply_i(self, i: int, x: HVector, h: HVector) -> HVector:
        """F_i'(x) h."""

    @abc.abstractmethod
    def deriv_adjoint_apply_i(self, i: int, x: HVector, g: HVector) -> HVector:
        """F_i'(x)^* g, adjoint taken in the weighted inner products."""

    def in_domain(self, x: HVector) -> bool:
        if self.domain_box is None:
            return True
        lo, hi = self.domain_box
        return bool(np.all(x.values >= lo) and np.all(x.values <= hi))

    def x_vector(self, values) -> HVector:
        return HVector(np.asarray(values, dtype=float), self.x_weights)

    def y_vector(self, values) -> HVector:
        return HVector(np.asarray(values, dtype=float), self.y_weights)


def apply_full(sys: NonlinearSystem, x: HVector) -> StackedData:
    """Evaluate every equation; block i holds the raw F_i(x) (the 1/n product
    scaling lives in the stacked norm, not in the blocks)."""
    if not sys.in_domain(x):
        raise ValueError("argument lies outside the declared domain box")
    return StackedData(tuple(sys.apply_i(i, x) for i in range(sys.n)))


def stacked_residual_sq(sys: NonlinearSystem, x: HVector, y: StackedData) -> float:
    """||F(x) - y||^2 in the product norm."""
    return stacked_sq_norm(stacked_sub(apply_full(sys, x), y))


class ScaledSystem(NonlinearSystem):
    """The system tau * F (all equations scaled by one factor).

    Scaling the forward maps by tau scales derivative norms by tau and the
    normal operator by tau^2; used to bring ||B|| <= 1 explicitly when a
    caller wants the rescaled regime (data must be scaled consistently).
    """

    def __init__(self, base: NonlinearSystem, tau: float):
        if tau <= 0:
            raise ValueError("scale factor must be positive")
        self.base = base
        self.tau = float(tau)
        self.n = base.n
        self.dim_x = base.dim_x
        self.dim_y = base.dim_y
        self.x_weights = base.x_weights
        self.y_weights = base.y_weights
        self.domain_box = base.domain_box

    def apply_i(self, i, x):
        return self.tau * self.base.apply_i(i, x)

    def deriv_apply_i(self, i, x, h):
        return self.tau * self.base.deriv_apply_i(i, x, h)

    def deriv_adjoint_apply_i(self, i, x, g):
        return self.tau * self.base.deriv_adjoint_apply_i(i, x, g)


class CountingSystem(NonlinearSystem):
    """Delegating wrapper that counts block evaluations (a test instrument;
    the counters make it stateful, so do not share across threads)."""

    def __init__(self, base: NonlinearSystem):
        self.base = base
        self.n = base.n
        self.dim_x = base.dim_x
        self.dim_y = base.dim_y
        self.x_weights = base.x_weights
        self.y_weights = base.y_weights
        self.domain_box = base.domain_box
        self.apply_counts = np.zeros(base.n, dtype=int)
        self.adjoint_counts = np.zeros(base.n, dtype=int)

    def apply_i(self, i, x):
        self.apply_counts[i] += 1
        return self.base.apply_i(i, x)

    def deriv_apply_i(self, i, x, h):
        return self.base.deriv_apply_i(i, x, h)

    def deriv_adjoint_apply_i(self, i, x, g):
        self.adjoint_counts[i] += 1
        return self.base.deriv_adjoint_apply_i(i, x, g)


@dataclass(frozen=True)
class NoiseModel:
    """Noise level (in product-norm units) plus the seed fixing the noise
    direction."""

    delta: float
    direction_seed: int

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("noise level must be nonnegative")


def make_noisy(y_true: StackedData, noise: NoiseModel) -> StackedData:
    """Perturb exact data so the product-norm distance equals delta.

    The direction is componentwise standard normal (seeded), normalized in
    the product norm; one correction pass re-normalizes the actually
    representable difference so the measured distance matches delta to
    rounding.  delta = 0 returns the input unchanged.
    """
    if noise.delta == 0.0:
        return y_true
    rng = np.random.default_rng(np.random.SeedSequence(noise.direction_seed))
    w = y_true.block_weights
    g = rng.standard_normal((y_true.n, w.size))
    direction = StackedData(tuple(HVector(g[i], w) for i in range(y_true.n)))
    scale = noise.delta / stacked_norm(direction)
    noisy = StackedData(
        tuple(b + scale * d for b, d in zip(y_true.blocks, direction.blocks))
    )
    achieved = stacked_sub(noisy, y_true)
    correction = noise.delta / stacked_norm(achieved)
    return StackedData(
        tuple(b + correction * d for b, d in zip(y_true.blocks, achieved.blocks))
    )


_PATTERNS = {
    "flat": lambda j, m: np.ones(m),
    "invsqrt": lambda j, m: 1.0 / np.sqrt(j),
    "e1": lambda j, m: (j == 1).astype(float),
    "alternating": lambda j, m: (-1.0) ** (j + 1) / np.sqrt(j),
}


def make_representer(
    weights: np.ndarray, pattern: str = "invsqrt", w_norm: Optional[float] = None
) -> HVector:
    """Named smoothness representer in coordinate space.

    `invsqrt` (components 1/sqrt(j)) spreads energy across a power-law
    spectrum so manufactured reference solutions actually realize the decay
    exponent their smoothness index promises.  Optionally rescaled to a
    prescribed weighted norm.
    """
    m = np.size(weights)
    j = np.arange(1, m + 1, dtype=float)
    try:
        vals = _PATTERNS[pattern](j, m)
    except KeyError:
        raise ValueError(
            f"unknown representer pattern {pattern!r}; choose from {sorted(_PATTERNS)}"
        ) from None
    w = HVector(vals, weights)
    if w_norm is not None:
        current = norm(w)
        if current == 0:
            raise ValueError("cannot rescale a zero representer")
        w = (w_norm / current) * w
    return w


@dataclass(frozen=True)
class SourceSpec:
    """Smoothness of the reference solution relative to the initial guess:
    x_dag - x_1 = B^nu w with B the normal operator at x_dag."""

    nu: float
    w: HVector

    def __post_init__(self):
        # nu = 1/2 is the saturation boundary and still admissible here.
        if not (0.0 < self.nu <= 0.5):
            raise ValueError("smoothness index nu must lie in (0, 1/2]")


def assemble_normal_operator(sys: NonlinearSystem, x: HVector) -> SymOperator:
    """B = (1/n) sum_i F_i'(x)^* F_i'(x) as an explicit SymOperator.

    Assembled column by column through the derivative interface, so it is
    valid for any system, at O(n * dim_x) derivative applications.
    """
    m = sys.dim_x
    wx = sys.x_weights
    wy = sys.y_weights
    acc = np.zeros((m, m))
    basis = np.eye(m)
    for i in range(sys.n):
        cols = np.empty((sys.dim_y, m))
        for j in range(m):
            cols[:, j] = sys.deriv_apply_i(i, x, HVector(basis[j], wx)).values
        acc += cols.T @ (wy[:, None] * cols)
    b_mat = (acc / sys.n) / wx[:, None]
    return SymOperator.from_matrix(b_mat, wx)


def build_source_truth(
    sys: NonlinearSystem,
    x1: HVector,
    spec: SourceSpec,
    max_sweeps: int = 100,
    tol: float = 1e-10,
) -> HVector:
    """Manufacture x_dag with x_dag - x_1 = B(x_dag)^nu w.

    B depends on the point it is evaluated at, so the construction is a
    fixed-point sweep starting from x_1; for systems whose derivative does
    not depend on the argument one sweep is already exact.  Raises if the
    sweep has not settled to `tol` within `max_sweeps`.
    """
    x = x1
    last_diff = math.inf
    for _ in range(max_sweeps):
        B = assemble_normal_operator(sys, x)
        x_next = x1 + frac_power(B, spec.nu).apply(spec.w)
        last_diff = norm(x_next - x)
        x = x_next
        if last_diff <= tol:
            residual = norm(
                frac_power(assemble_normal_operator(sys, x), spec.nu).apply(spec.w)
                - (x - x1)
            )
            if residual > 1e-8 * max(norm(spec.w), 1e-300):
                raise NumericalFailure(
                    f"source construction settled but violates its defining "
                    f"relation (residual {residual:.3e})",
                    diagnostics={"residual": residual},
                )
            return x
    raise NumericalFailure(
        f"source construction did not converge in {max_sweeps} sweeps "
        f"(last change {last_diff:.3e})",
        diagnostics={"last_change": last_diff},
    )


def estimate_deriv_bound(
    sys: NonlinearSystem,
    sample_points: Sequence[HVector],
    tol: float = 1e-6,
    max_iters: int = 2000,
) -> float:
    """max over samples and i of the operator norm of F_i'(x).

    Power iteration on F_i'(x)^* F_i'(x), matrix-free, to `tol` relative on
    the norm.  Raises on stagnation.
    """
    if len(sample_points) == 0:
        raise ValueError("need at least one sample point")
    best = 0.0
    for x in sample_points:
        for i in range(sys.n):
            best = max(best, _power_iteration_norm(sys, i, x, tol, max_iters))
    return best


def _power_iteration_norm(sys, i, x, tol, max_iters):
    m = sys.dim_x
    v = HVector(np.ones(m) + 1e-3 * np.arange(m) / max(m - 1, 1), sys.x_weights)
    v = (1.0 / norm(v)) * v
    s_old = math.inf
    for _ in range(max_iters):
        av = sys.deriv_adjoint_apply_i(i, x, sys.deriv_apply_i(i, x, v))
        lam = max(inner(av, v), 0.0)
        s_new = math.sqrt(lam)
        av_norm = norm(av)
        if av_norm == 0.0:
            return 0.0
        v = (1.0 / av_norm) * av
        if abs(s_new - s_old) <= tol * max(s_new, 1e-300):
            return s_new
        s_old = s_new
    raise NumericalFailure(
        f"power iteration stagnated after {max_iters} iterations "
        f"(block {i}, last estimate {s_old:.6g})"
    )


@dataclass(frozen=True)
class ConeEstimate:
    """Largest observed ratio of linearization error to residual difference
    over sampled pairs in a ball (both orientations of each pair)."""

    eta_hat: float
    samples: int
    ball_radius: float
    pairs_used: int
    skipped: int


def _random_ball_point(center: HVector, radius: float, rng) -> HVector:
    g = HVector(rng.standard_normal(center.dim), center.weights)
    scale = radius * rng.uniform() / max(norm(g), 1e-300)
    return center + scale * g


def estimate_cone_constant(
    sys: NonlinearSystem,
    center: HVector,
    radius: float,
    samples: int,
    seed: int,
) -> ConeEstimate:
    """Sampled tangential-cone ratio within a ball.

    Each sample draws a pair of points; the ratio ||F(x) - F(xt) - F'(xt)(x -
    xt)|| / ||F(x) - F(xt)|| is evaluated in both orientations.  Pairs with a
    residual difference below 1e-14 carry no information and are skipped (and
    counted).
    """
    if radius <= 0 or samples < 1:
        raise ValueError("need radius > 0 and samples >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    eta_hat = 0.0
    used = 0
    skipped = 0
    for _ in range(samples):
        a = _random_ball_point(center, radius, rng)
        b = _random_ball_point(center, radius, rng)
        fa = apply_full(sys, a)
        fb = apply_full(sys, b)
        for x, xt, fx, fxt in ((a, b, fa, fb), (b, a, fb, fa)):
            den = stacked_norm(stacked_sub(fx, fxt))
            if den < 1e-14:
                skipped += 1
                continue
            step = x - xt
            lin = StackedData(
                tuple(sys.deriv_apply_i(i, xt, step) for i in range(sys.n))
            )
            num_blocks = tuple(
                (bx - bt) - bl for bx, bt, bl in zip(fx.blocks, fxt.blocks, lin.blocks)
            )
            ratio = stacked_norm(StackedData(num_blocks)) / den
            eta_hat = max(eta_hat, ratio)
            used += 1
    return ConeEstimate(
        eta_hat=eta_hat,
        samples=samples,
        ball_radius=radius,
        pairs_used=used,
        skipped=skipped,
    )


@dataclass(frozen=True)
class RangeInvRecord:
    """Per-(block, sample) factorization check F_i'(x) = R F_i'(x_dag)."""

    i: int
    sample_id: int
    residual_rel: float
    c_r_hat: float
    distance: float
    rank_deficient: bool


def _orthonormal_deriv_matrix(sys, i, x):
    """F_i'(x) expressed between orthonormalized coordinates, so Euclidean
    matrix norms equal weighted operator norms."""
    m = sys.dim_x
    cols = np.empty((sys.dim_y, m))
    basis = np.eye(m)
    for j in range(m):
        cols[:, j] = sys.deriv_apply_i(i, x, HVector(basis[j], sys.x_weights)).values
    return (np.sqrt(sys.y_weights)[:, None] * cols) / np.sqrt(sys.x_weights)[None, :]


def check_range_invariance(
    sys: NonlinearSystem,
    x_dag: HVector,
    points: Sequence[HVector],
    rcond: float = 1e-10,
) -> list:
    """Least-squares check that derivatives factor through the derivative at
    the reference solution.

    For each block and sample point the minimum-norm perturbation D with
    (I + D) F_i'(x_dag) = F_i'(x) is computed; the report carries the
    relative factorization residual and ||D|| / ||x - x_dag|| (an empirical
    constant for the near-identity factor).  Rank-deficient reference
    derivatives are flagged per block, not fatal.
    """
    records = []
    base = []
    pinvs = []
    deficient = []
    for i in range(sys.n):
        k0 = _orthonormal_deriv_matrix(sys, i, x_dag)
        base.append(k0)
        pinvs.append(np.linalg.pinv(k0, rcond=rcond))
        rank = np.linalg.matrix_rank(k0, tol=rcond * max(k0.shape) * _spec_norm(k0))
        deficient.append(rank < min(k0.shape))
    for sid, x in enumerate(points):
        dist = norm(x - x_dag)
        for i in range(sys.n):
            kx = _orthonormal_deriv_matrix(sys, i, x)
            diff = kx - base[i]
            delta_op = diff @ pinvs[i]
            res = _spec_norm(diff - delta_op @ base[i])
            diff_scale = _spec_norm(diff)
            res_rel = res / diff_scale if diff_scale > 1e-14 else 0.0
            c_r = _spec_norm(delta_op) / dist if dist > 1e-14 else 0.0
            records.append(
                RangeInvRecord(
                    i=i,
                    sample_id=sid,
                    residual_rel=res_rel,
                    c_r_hat=c_r,
                    distance=dist,
                    rank_deficient=deficient[i],
                )
            )
    return records


def _spec_norm(mat):
    return float(np.linalg.norm(mat, 2)) if mat.size else 0.0


def adjoint_defect(sys, i, x, h, g) -> float:
    """|<F'h, g> - <h, F'* g>| normalized by ||h|| ||g|| (1 + ||F'h||/||h||)."""
    fh = sys.deriv_apply_i(i, x, h)
    fsg = sys.deriv_adjoint_apply_i(i, x, g)
    lhs = inner(fh, g)
    rhs = inner(h, fsg)
    nh, ng = norm(h), norm(g)
    if nh == 0 or ng == 0:
        return 0.0
    op_lower = norm(fh) / nh
    return abs(lhs - rhs) / (nh * ng * (1.0 + op_lower))


def deriv_linearity_defect(sys, i, x, h1, h2, a=1.3, b=-0.7) -> float:
    """Superposition defect of the derivative, normalized."""
    combo = sys.deriv_apply_i(i, x, a * h1 + b * h2)
    split = a * sys.deriv_apply_i(i, x, h1) + b * sys.deriv_apply_i(i, x, h2)
    scale = max(norm(combo), norm(split), 1e-300)
    return norm(combo - split) / scale


def finite_difference_order(
    sys, i, x, h, ts=(1e-3, 1e-4, 1e-5)
) -> float:
    """Observed order of the forward-difference derivative error.

    The error ||(F(x + t h) - F(x))/t - F'(x) h|| should be O(t); returns the
    log-log slope over `ts`.  If the map is linear the error sits at rounding
    level and the slope is reported as 1.0 (exact derivative).
    """
    fx = sys.apply_i(i, x)
    dfh = sys.deriv_apply_i(i, x, h)
    errs = []
    for t in ts:
        fd = (1.0 / t) * (sys.apply_i(i, x + t * h) - fx)
        errs.append(norm(fd - dfh))
    scale = max(norm(dfh), norm(fx), 1.0)
    if max(errs) <= 1e-10 * scale:
        return 1.0
    logt = np.log(np.asarray(ts))
    loge = np.log(np.maximum(errs, 1e-300))
    slope = np.polyfit(logt, loge, 1)[0]
    return float(slope)
