"""Stochastic gradient iteration, full-gradient baseline, schedules, stopping.

The stochastic update draws one equation index uniformly at random (i.i.d.
with replacement) and moves along the negative gradient of that single
equation's misfit; the full-gradient baseline averages all n equation
gradients, which is the gradient of the product-norm objective.  Index draws
come from a seeded, cross-platform-stable generator (PCG64 via
numpy.random.default_rng) and are consumed in fixed-size chunks so that
single-path and batched executions see identical streams.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalFailure, ValidationError
from .hilbert import HVector, StackedData, SymOperator, inner, norm
from .problems import NonlinearSystem, stacked_residual_sq

__all__ = [
    "StepSchedule",
    "StoppingRule",
    "IterState",
    "Trajectory",
    "INDEX_CHUNK",
    "DIVERGENCE_FACTOR",
    "sgd_direction",
    "landweber_direction",
    "sgd_step",
    "landweber_step",
    "project_box",
    "stopping_k",
    "validate_apriori",
    "run",
    "default_checkpoints",
]

INDEX_CHUNK = 1024
DIVERGENCE_FACTOR = 1e12


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes: constant eta_0, or polynomially decaying eta_0 * k^(-alpha)."""

    kind: str
    eta0: float
    alpha: Optional[float] = None

    @classmethod
    def constant(cls, eta0: float) -> "StepSchedule":
        if eta0 <= 0:
            raise ValidationError("eta0 must be positive")
        return cls(kind="constant", eta0=float(eta0))

    @classmethod
    def polynomial(cls, eta0: float, alpha: float) -> "StepSchedule":
        if eta0 <= 0:
            raise ValidationError("eta0 must be positive")
        if not (0.0 < alpha < 1.0):
            raise ValidationError(
                f"decay exponent alpha must lie strictly inside (0, 1); got {alpha}"
            )
        return cls(kind="polynomial", eta0=float(eta0), alpha=float(alpha))

    def eta(self, k: int) -> float:
        if k < 1:
            raise ValueError("iteration counter is 1-based")
        if self.kind == "constant":
            return self.eta0
        return self.eta0 * float(k) ** (-self.alpha)

    def etas(self, k: int) -> np.ndarray:
        """eta_1 .. eta_k as an array."""
        ks = np.arange(1, k + 1, dtype=float)
        if self.kind == "constant":
            return np.full(k, self.eta0)
        return self.eta0 * ks ** (-self.alpha)

    def partial_sum(self, k: int) -> float:
        return float(self.etas(k).sum()) if k >= 1 else 0.0

    def validate_against(self, deriv_bound: float) -> None:
        """Admissibility with respect to L = max_i sup ||F_i'||.

        Constant steps need eta0 * L^2 < 1 (the step-sum then diverges on its
        own); polynomial steps need eta0 <= L^(-2).
        """
        l2 = deriv_bound**2
        if self.kind == "constant":
            if self.eta0 * l2 >= 1.0:
                raise ValidationError(
                    f"constant step size eta0 = {self.eta0:.6g} is inadmissible: "
                    f"eta0 * L^2 = {self.eta0 * l2:.6g} must stay below 1 "
                    f"(L = {deriv_bound:.6g})"
                )
        else:
            if self.eta0 * l2 > 1.0 + 1e-9:
                raise ValidationError(
                    f"polynomial step size eta0 = {self.eta0:.6g} is inadmissible: "
                    f"eta0 must not exceed L^-2 = {1.0 / l2:.6g} (L = {deriv_bound:.6g})"
                )


@dataclass(frozen=True)
class StoppingRule:
    """When to stop: fixed iteration budget, an a priori map delta -> k, or
    the closed-form index floor((delta/||w||)^(-2/((2 nu + 1)(1 - alpha))))."""

    kind: str
    max_iter: Optional[int] = None
    table: Optional[dict] = None
    fn: Optional[Callable[[float], int]] = None
    nu: Optional[float] = None
    alpha: Optional[float] = None
    w_norm: Optional[float] = None
    delta: Optional[float] = None

    @classmethod
    def fixed(cls, max_iter: int) -> "StoppingRule":
        if max_iter < 0:
            raise ValidationError("iteration budget must be nonnegative")
        return cls(kind="max_iter", max_iter=int(max_iter))

    @classmethod
    def apriori_table(cls, table: dict) -> "StoppingRule":
        return cls(kind="apriori", table=dict(table))

    @classmethod
    def apriori_fn(cls, fn: Callable[[float], int]) -> "StoppingRule":
        return cls(kind="apriori", fn=fn)

    @classmethod
    def kstar(cls, nu, alpha, w_norm, delta=None) -> "StoppingRule":
        if not (0.0 < nu <= 0.5):
            raise ValidationError("nu must lie in (0, 1/2]")
        if not (0.0 < alpha < 1.0):
            raise ValidationError("alpha must lie in (0, 1)")
        if w_norm <= 0:
            raise ValidationError("representer norm must be positive")
        return cls(kind="kstar", nu=nu, alpha=alpha, w_norm=w_norm, delta=delta)


def stopping_k(rule: StoppingRule, delta: Optional[float] = None) -> int:
    """Number of update steps before stopping."""
    if rule.kind == "max_iter":
        return rule.max_iter
    if rule.kind == "apriori":
        if delta is None:
            raise ValidationError("a priori rule needs the noise level")
        if rule.fn is not None:
            return int(rule.fn(delta))
        for key, k in rule.table.items():
            if math.isclose(key, delta, rel_tol=1e-9, abs_tol=0.0):
                return int(k)
        raise ValidationError(f"noise level {delta!r} not present in the a priori table")
    if rule.kind == "kstar":
        d = rule.delta if delta is None else delta
        if d is None or d <= 0:
            raise ValidationError("closed-form stopping needs delta > 0")
        exponent = -2.0 / ((2.0 * rule.nu + 1.0) * (1.0 - rule.alpha))
        value = (d / rule.w_norm) ** exponent
        # floor with a hair of relative slack so values that are integers in
        # exact arithmetic do not round down by one ulp
        k = int(math.floor(value * (1.0 + 1e-9)))
        if k < 1:
            warnings.warn(
                f"noise level {d:.3g} >= representer norm {rule.w_norm:.3g}; "
                f"stopping index clamped to 1",
                stacklevel=2,
            )
            return 1
        return k
    raise ValidationError(f"unknown stopping rule kind {rule.kind!r}")


@dataclass
class AprioriRow:
    delta: float
    k: int
    weighted_sum: float  # delta^2 * sum_{i<=k} eta_i


@dataclass
class AprioriReport:
    rows: list
    k_increasing: bool
    tail_decreasing: bool

    @property
    def admissible(self) -> bool:
        return self.k_increasing and self.tail_decreasing


def validate_apriori(
    rule: StoppingRule, schedule: StepSchedule, deltas: Sequence[float]
) -> AprioriReport:
    """Empirical admissibility check of an a priori stopping rule.

    Over a decreasing noise sequence the stopping index must grow without
    bound while delta^2 * sum_{i<=k(delta)} eta_i decays; the report carries
    both diagnostics per delta and flags a rule whose index stalls or whose
    weighted step sum has a non-decreasing tail.
    """
    deltas = [float(d) for d in deltas]
    if len(deltas) < 2 or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValidationError("need a strictly decreasing noise-level sequence")
    rows = []
    for d in deltas:
        k = stopping_k(rule, d)
        rows.append(AprioriRow(delta=d, k=k, weighted_sum=d * d * schedule.partial_sum(k)))
    k_increasing = all(b.k > a.k for a, b in zip(rows, rows[1:]))
    tail = rows[len(rows) // 2 :]
    tail_decreasing = all(
        b.weighted_sum < a.weighted_sum * (1.0 - 1e-12) for a, b in zip(tail, tail[1:])
    )
    return AprioriReport(rows=rows, k_increasing=k_increasing, tail_decreasing=tail_decreasing)


class _IndexStream:
    """Uniform index draws consumed in fixed-size chunks.

    Chunking is part of the reproducibility contract: a path always requests
    INDEX_CHUNK draws at a time from its own generator, so sequential and
    batched executions of the same path see the same indices.
    """

    def __init__(self, rng: np.random.Generator, n: int):
        self.rng = rng
        self.n = n
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= self._buf.size:
            self._buf = self.rng.integers(0, self.n, size=INDEX_CHUNK)
            self._pos = 0
        i = int(self._buf[self._pos])
        self._pos += 1
        return i


@dataclass
class IterState:
    """Mutable single-path iteration state; k is 1-based and x_1 is the
    initial guess."""

    k: int
    x: HVector
    indices: _IndexStream
    x1_norm: float
    last_index: int = -1

    @classmethod
    def start(cls, x1: HVector, seed, n: int) -> "IterState":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return cls(k=1, x=x1, indices=_IndexStream(rng, n), x1_norm=norm(x1))


def sgd_direction(sys: NonlinearSystem, x: HVector, y: StackedData, i: int) -> HVector:
    """F_i'(x)^* (F_i(x) - y_i): the single-equation gradient estimate."""
    residual = sys.apply_i(i, x) - y.blocks[i]
    return sys.deriv_adjoint_apply_i(i, x, residual)


def landweber_direction(sys: NonlinearSystem, x: HVector, y: StackedData) -> HVector:
    """(1/n) sum_i F_i'(x)^* (F_i(x) - y_i): gradient of the product-norm
    objective."""
    total = sgd_direction(sys, x, y, 0).values
    for i in range(1, sys.n):
        total = total + sgd_direction(sys, x, y, i).values
    return HVector((1.0 / sys.n) * total, sys.x_weights)


def _guarded(x_new: np.ndarray, state: IterState, weights) -> HVector:
    vec = HVector(x_new, weights)
    if not np.all(np.isfinite(x_new)):
        raise NumericalFailure(
            f"iterate became non-finite at step {state.k}",
            step=state.k,
            diagnostics={"bad_components": int(np.sum(~np.isfinite(x_new)))},
        )
    bound = DIVERGENCE_FACTOR * (1.0 + state.x1_norm)
    nrm = norm(vec)
    if nrm > bound:
        raise NumericalFailure(
            f"iterate norm {nrm:.3e} exceeded the divergence guard "
            f"{bound:.3e} at step {state.k}; the step size is too aggressive "
            f"for this system",
            step=state.k,
            diagnostics={"norm": nrm, "bound": bound},
        )
    return vec


def sgd_step(
    sys: NonlinearSystem, state: IterState, y: StackedData, schedule: StepSchedule
) -> IterState:
    """One update x_{k+1} = x_k - eta_k F_i'(x_k)^*(F_i(x_k) - y_i) with i
    drawn uniformly; evaluates exactly one equation block."""
    i = state.indices.next()
    eta = schedule.eta(state.k)
    g = sgd_direction(sys, state.x, y, i)
    state.x = _guarded(state.x.values - eta * g.values, state, sys.x_weights)
    state.last_index = i
    state.k += 1
    return state


def landweber_step(
    sys: NonlinearSystem, state: IterState, y: StackedData, schedule: StepSchedule
) -> IterState:
    """One full-gradient update; evaluates all n equation blocks."""
    eta = schedule.eta(state.k)
    g = landweber_direction(sys, state.x, y)
    state.x = _guarded(state.x.values - eta * g.values, state, sys.x_weights)
    state.last_index = -1
    state.k += 1
    return state


def clip_values(values, lo, hi):
    """Componentwise clamp shared by all projection paths."""
    return np.minimum(np.maximum(values, lo), hi)


def project_box(x: HVector, lo, hi) -> HVector:
    """Metric projection onto the box [lo, hi]^m (componentwise clamp); it is
    non-expansive in the weighted norm."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("box is empty: lo > hi somewhere")
    return HVector(clip_values(x.values, lo, hi), x.weights)


def default_checkpoints(k_final: int, per_decade: int = 20) -> tuple:
    """Log-spaced iterate indices from 1 to k_final inclusive."""
    if k_final < 1:
        raise ValueError("need at least one iterate")
    count = max(2, int(per_decade * math.log10(max(k_final, 2))) + 1)
    pts = np.unique(
        np.rint(np.geomspace(1, k_final, count)).astype(np.int64)
    )
    return tuple(int(p) for p in pts)


@dataclass
class Trajectory:
    """Checkpointed record of one run: iterate index, step size and drawn
    index of the step leaving that iterate, squared error distances and the
    stacked residual."""

    variant: str
    ks: np.ndarray
    etas: np.ndarray
    indices: np.ndarray
    err_sq: np.ndarray
    berr_sq: np.ndarray
    residual_sq: np.ndarray
    x_final: HVector
    steps: int


_VARIANTS = ("sgd", "landweber", "sgd_projected")


def run(
    sys: NonlinearSystem,
    y: StackedData,
    x1: HVector,
    schedule: StepSchedule,
    rule: StoppingRule,
    variant: str = "sgd",
    seed: int = 0,
    checkpoints: Optional[Sequence[int]] = None,
    delta: Optional[float] = None,
    x_dag: Optional[HVector] = None,
    B: Optional[SymOperator] = None,
    box: Optional[tuple] = None,
) -> Trajectory:
    """Iterate until the stopping rule fires, recording traces at checkpoints.

    Checkpoints are iterate indices (1-based; x_1 is the initial guess); the
    final iterate is always recorded.  ||x_k - x_dag||^2 and the seminorm
    <B e_k, e_k> are traced only when a reference solution / normal operator
    are supplied.  A fixed (config, seed) reproduces the trajectory exactly.
    """
    if variant not in _VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; choose from {_VARIANTS}")
    if variant == "sgd_projected" and box is None:
        raise ValidationError("projected variant needs a box")
    steps = stopping_k(rule, delta)
    k_final = steps + 1
    if checkpoints is None:
        cps = set(default_checkpoints(k_final))
    else:
        cps = set(int(c) for c in checkpoints)
    cps.add(k_final)

    state = IterState.start(x1, seed, sys.n)
    rows = []

    def record(k_now):
        e_sq = b_sq = math.nan
        if x_dag is not None:
            e = state.x - x_dag
            e_sq = inner(e, e)
            if B is not None:
                b_sq = B.quad_form(e)
        r_sq = stacked_residual_sq(sys, state.x, y)
        rows.append([k_now, 0.0, -1, e_sq, b_sq, r_sq])

    for k in range(1, steps + 1):
        if k in cps:
            record(k)
        if variant == "landweber":
            landweber_step(sys, state, y, schedule)
        else:
            sgd_step(sys, state, y, schedule)
            if variant == "sgd_projected":
                state.x = project_box(state.x, box[0], box[1])
        if rows and rows[-1][0] == k:
            rows[-1][1] = schedule.eta(k)
            rows[-1][2] = state.last_index
    record(k_final)

    arr = np.array([r[3:] for r in rows], dtype=float)
    return Trajectory(
        variant=variant,
        ks=np.array([r[0] for r in rows], dtype=np.int64),
        etas=np.array([r[1] for r in rows], dtype=float),
        indices=np.array([r[2] for r in rows], dtype=np.int64),
        err_sq=arr[:, 0],
        berr_sq=arr[:, 1],
        residual_sq=arr[:, 2],
        x_final=state.x,
        steps=steps,
    )
