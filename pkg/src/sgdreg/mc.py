"""Monte Carlo ensemble harness.

Runs M independent stochastic-gradient paths, each on its own substream
(derived by hashing the master seed with the path index through
numpy.random.SeedSequence), and aggregates per-checkpoint statistics: the
mean squared error, its exact split into the squared error of the mean
iterate plus the sampling variance of the iterate, the weighted-seminorm
error, and the stacked residual.

The split uses population (1/M) normalization so it is an identity for the
sample statistics, asserted at every checkpoint; the Bessel correction is
reserved for standard errors.

Built-in systems get vectorized path engines that update all paths at once;
they share the low-level kernels with the single-path code and consume index
draws with the same chunk protocol, so engine choice never changes results.
Aggregation reduces per-path traces in fixed path order, which makes ensemble
output bitwise reproducible regardless of thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NumericalFailure, ValidationError
from .hilbert import HVector, StackedData, SymOperator, norm
from .problems import NoiseModel, NonlinearSystem, make_noisy, stacked_residual_sq
from .solvers import (
    INDEX_CHUNK,
    IterState,
    StepSchedule,
    _IndexStream,
    clip_values,
    landweber_step,
    sgd_step,
)
from .testproblems import (
    TP1Diagonal,
    TP2PotentialBVP,
    _tp1_apply_vals,
    _tp1_deriv_factor,
)

__all__ = [
    "PathPlan",
    "MCEstimate",
    "PathTraces",
    "path_rng",
    "standard_error",
    "run_ensemble",
    "run_ensemble_traced",
]


@dataclass(frozen=True)
class PathPlan:
    """How many paths, which master seed, where to record.

    `shared_noise=True` (the default) fixes one noisy data realization for
    every path, so the only randomness is the index draws; fresh noise per
    path is a robustness-study mode, not covered by the theory the harness
    verifies.
    """

    paths: int
    master_seed: int
    checkpoints: tuple
    shared_noise: bool = True

    def __post_init__(self):
        if self.paths < 2:
            raise ValidationError("need at least two paths to estimate a variance")
        cps = tuple(int(c) for c in self.checkpoints)
        if len(cps) == 0 or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 1:
            raise ValidationError("checkpoints must be strictly increasing and >= 1")
        object.__setattr__(self, "checkpoints", cps)


@dataclass(frozen=True)
class MCEstimate:
    """Per-checkpoint ensemble statistics (population normalization for the
    variance so mse = bias_sq + variance holds exactly in-sample)."""

    k: int
    mse: float
    mse_stderr: float
    bias_sq: float
    variance: float
    berr_mse: float
    berr_stderr: float
    residual_mse: float
    residual_stderr: float


@dataclass
class PathTraces:
    """Raw per-path checkpoint data (paths x checkpoints [x dim])."""

    checkpoints: np.ndarray
    err_sq: np.ndarray
    berr_sq: np.ndarray
    residual_sq: np.ndarray
    err_vecs: Optional[np.ndarray]


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Per-path generator: PCG64 seeded by hashing (master_seed, path_index)."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(path_index,))
    )


def standard_error(samples) -> float:
    """Sample standard deviation (Bessel-corrected) divided by sqrt(M)."""
    samples = np.asarray(samples, dtype=float)
    m = samples.size
    if m < 2:
        raise ValueError("need at least two samples")
    return float(np.std(samples, ddof=1) / math.sqrt(m))


def _metrics(sys, x, y, x_dag, B):
    """Checkpoint metrics; the single code path both engines call."""
    e_sq = b_sq = math.nan
    e_vals = None
    if x_dag is not None:
        e = x - x_dag
        e_sq = float(np.dot(x.weights * e.values, e.values))
        e_vals = e.values
        if B is not None:
            b_sq = B.quad_form(e)
    r_sq = stacked_residual_sq(sys, x, y)
    return e_sq, b_sq, r_sq, e_vals


def _noise_for_path(noise: NoiseModel, p: int) -> NoiseModel:
    child = int(
        np.random.SeedSequence(noise.direction_seed, spawn_key=(p,)).generate_state(1)[0]
    )
    return NoiseModel(delta=noise.delta, direction_seed=child)


def _trace_one_path(sys, y, x1, schedule, steps, variant, rng, cps, x_dag, B, box):
    state = IterState(
        k=1, x=x1, indices=_IndexStream(rng, sys.n), x1_norm=norm(x1)
    )
    cp_set = set(cps)
    out = {}

    def record(k):
        out[k] = _metrics(sys, state.x, y, x_dag, B)

    for k in range(1, steps + 1):
        if k in cp_set:
            record(k)
        if variant == "landweber":
            landweber_step(sys, state, y, schedule)
        else:
            sgd_step(sys, state, y, schedule)
            if variant == "sgd_projected":
                state.x = HVector(
                    clip_values(state.x.values, box[0], box[1]), state.x.weights
                )
    record(steps + 1)
    return [out[k] for k in cps]


def _alloc_traces(M, cps, dim, want_vecs):
    C = len(cps)
    return PathTraces(
        checkpoints=np.asarray(cps, dtype=np.int64),
        err_sq=np.full((M, C), math.nan),
        berr_sq=np.full((M, C), math.nan),
        residual_sq=np.full((M, C), math.nan),
        err_vecs=np.full((M, C, dim), math.nan) if want_vecs else None,
    )


def _store_path(traces, p, recs):
    for c, (e_sq, b_sq, r_sq, e_vals) in enumerate(recs):
        traces.err_sq[p, c] = e_sq
        traces.berr_sq[p, c] = b_sq
        traces.residual_sq[p, c] = r_sq
        if traces.err_vecs is not None and e_vals is not None:
            traces.err_vecs[p, c] = e_vals


def _generic_paths(
    sys, y_shared, y_true, x1, schedule, steps, variant, plan, noise,
    x_dag, B, box, threads,
):
    cps = _effective_checkpoints(plan, steps)
    traces = _alloc_traces(plan.paths, cps, sys.dim_x, x_dag is not None)

    def work(p):
        if y_shared is not None:
            y = y_shared
        else:
            y = make_noisy(y_true, _noise_for_path(noise, p))
        try:
            return _trace_one_path(
                sys, y, x1, schedule, steps, variant,
                path_rng(plan.master_seed, p), cps, x_dag, B, box,
            )
        except NumericalFailure as exc:
            raise NumericalFailure(
                f"path {p} failed: {exc}", step=exc.step, diagnostics=exc.diagnostics
            ) from exc

    if threads <= 1:
        for p in range(plan.paths):
            _store_path(traces, p, work(p))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for p, recs in enumerate(pool.map(work, range(plan.paths))):
                _store_path(traces, p, recs)
    return traces


def _effective_checkpoints(plan, steps):
    k_final = steps + 1
    cps = [c for c in plan.checkpoints if c <= k_final]
    if not cps or cps[-1] != k_final:
        cps.append(k_final)
    return tuple(cps)


def _draw_index_block(rngs, n):
    idx = np.empty((len(rngs), INDEX_CHUNK), dtype=np.int64)
    for p, rng in enumerate(rngs):
        idx[p] = rng.integers(0, n, size=INDEX_CHUNK)
    return idx


def _batch_guard(X, wx, x1_norm, k):
    if not np.all(np.isfinite(X)):
        bad = int(np.nonzero(~np.isfinite(X).all(axis=1))[0][0])
        raise NumericalFailure(
            f"path {bad} failed: iterate became non-finite at step {k}", step=k
        )
    bound = 1e12 * (1.0 + x1_norm)
    sq = (X * X) @ wx
    if np.any(sq > bound * bound):
        bad = int(np.nonzero(sq > bound * bound)[0][0])
        raise NumericalFailure(
            f"path {bad} failed: iterate norm {math.sqrt(sq[bad]):.3e} exceeded "
            f"the divergence guard at step {k}",
            step=k,
        )


def _batched_paths(sys, y, x1, schedule, steps, variant, plan, x_dag, B, box):
    """Vectorized engine for the built-in systems (all paths stepped at once).

    Uses the same elementwise kernels, the same index-draw chunking and the
    same checkpoint metrics as the sequential engine, so results agree
    bitwise with it.
    """
    M = plan.paths
    cps = _effective_checkpoints(plan, steps)
    cp_set = set(cps)
    traces = _alloc_traces(M, cps, sys.dim_x, x_dag is not None)
    wx = sys.x_weights
    x1_norm = norm(x1)

    is_tp1 = isinstance(sys, TP1Diagonal)
    groups = sys.groups
    y_act = [y.blocks[i].values[groups[i]] for i in range(sys.n)]
    if is_tp1:
        group_cols = groups
    else:
        group_nodes = [sys.obs_nodes[g] for g in groups]

    X = np.tile(x1.values, (M, 1))
    rngs = [path_rng(plan.master_seed, p) for p in range(M)]

    def record(k):
        c = cps.index(k)
        for p in range(M):
            recs = _metrics(sys, HVector(X[p].copy(), wx), y, x_dag, B)
            traces.err_sq[p, c] = recs[0]
            traces.berr_sq[p, c] = recs[1]
            traces.residual_sq[p, c] = recs[2]
            if traces.err_vecs is not None and recs[3] is not None:
                traces.err_vecs[p, c] = recs[3]

    if 1 in cp_set:
        record(1)
    k = 1
    while k <= steps:
        idx = _draw_index_block(rngs, sys.n)
        for j in range(INDEX_CHUNK):
            if k > steps:
                break
            eta = schedule.eta(k)
            iks = idx[:, j]
            if is_tp1:
                f = _tp1_apply_vals(sys.sigma, sys.kappa, X)
                factor = _tp1_deriv_factor(sys.sigma, sys.kappa, X)
                for g in range(sys.n):
                    rows = np.nonzero(iks == g)[0]
                    if rows.size == 0:
                        continue
                    sub = np.ix_(rows, group_cols[g])
                    r = f[sub] - y_act[g][None, :]
                    X[sub] = X[sub] - eta * (factor[sub] * r)
            else:
                u = sys.state_batch(X)
                rhs = np.zeros_like(X)
                for g in range(sys.n):
                    rows = np.nonzero(iks == g)[0]
                    if rows.size == 0:
                        continue
                    sub = np.ix_(rows, group_nodes[g])
                    r = u[sub] - y_act[g][None, :]
                    rhs[sub] = sys.y_weights[groups[g]][None, :] * r
                dirs = sys.adjoint_batch(X, u, rhs)
                X = X - eta * dirs
            if variant == "sgd_projected":
                X = clip_values(X, box[0], box[1])
            _batch_guard(X, wx, x1_norm, k)
            k += 1
            if k in cp_set:
                record(k)
    return traces


def _aggregate(traces: PathTraces, x_weights) -> list:
    ests = []
    M = traces.err_sq.shape[0]
    for c, k in enumerate(traces.checkpoints):
        err = traces.err_sq[:, c]
        res = traces.residual_sq[:, c]
        berr = traces.berr_sq[:, c]
        if traces.err_vecs is not None and np.all(np.isfinite(err)):
            mse = float(np.mean(err))
            ebar = np.mean(traces.err_vecs[:, c, :], axis=0)
            bias_sq = float(np.dot(x_weights * ebar, ebar))
            devs = traces.err_vecs[:, c, :] - ebar
            variance = float(
                np.mean([np.dot(x_weights * devs[p], devs[p]) for p in range(M)])
            )
            gap = abs(mse - (bias_sq + variance))
            if gap > 1e-10 * max(mse, 1e-300):
                raise NumericalFailure(
                    f"mean-square split failed at checkpoint {k}: "
                    f"mse {mse!r} != bias_sq {bias_sq!r} + variance {variance!r}"
                )
            mse_stderr = standard_error(err)
        else:
            mse = bias_sq = variance = mse_stderr = math.nan
        has_berr = np.all(np.isfinite(berr))
        ests.append(
            MCEstimate(
                k=int(k),
                mse=mse,
                mse_stderr=mse_stderr,
                bias_sq=bias_sq,
                variance=variance,
                berr_mse=float(np.mean(berr)) if has_berr else math.nan,
                berr_stderr=standard_error(berr) if has_berr else math.nan,
                residual_mse=float(np.mean(res)),
                residual_stderr=standard_error(res),
            )
        )
    return ests


def _batched_supported(sys, variant, shared, noise):
    if not shared and noise is not None and noise.delta > 0:
        return False
    if variant not in ("sgd", "sgd_projected"):
        return False
    return isinstance(sys, (TP1Diagonal, TP2PotentialBVP))


def run_ensemble_traced(
    sys: NonlinearSystem,
    y_true: StackedData,
    x1: HVector,
    schedule: StepSchedule,
    steps: int,
    variant: str,
    plan: PathPlan,
    noise: Optional[NoiseModel] = None,
    x_dag: Optional[HVector] = None,
    B: Optional[SymOperator] = None,
    box: Optional[tuple] = None,
    threads: int = 1,
    engine: str = "auto",
) -> tuple:
    """Like run_ensemble but also returns per-path traces."""
    if variant == "sgd_projected" and box is None:
        raise ValidationError("projected variant needs a box")
    if engine not in ("auto", "generic", "batched"):
        raise ValidationError(f"unknown engine {engine!r}")
    y_shared = y_true if noise is None else make_noisy(y_true, noise)
    use_batched = _batched_supported(sys, variant, plan.shared_noise, noise)
    if engine == "generic":
        use_batched = False
    elif engine == "batched" and not use_batched:
        raise ValidationError("batched engine does not support this configuration")
    if use_batched:
        traces = _batched_paths(
            sys, y_shared, x1, schedule, steps, variant, plan, x_dag, B, box
        )
    elif plan.shared_noise or noise is None:
        traces = _generic_paths(
            sys, y_shared, y_true, x1, schedule, steps, variant, plan,
            noise, x_dag, B, box, threads,
        )
    else:
        traces = _generic_paths(
            sys, None, y_true, x1, schedule, steps, variant, plan,
            noise, x_dag, B, box, threads,
        )
    return _aggregate(traces, sys.x_weights), traces


def run_ensemble(
    sys: NonlinearSystem,
    y_true: StackedData,
    x1: HVector,
    schedule: StepSchedule,
    steps: int,
    variant: str,
    plan: PathPlan,
    noise: Optional[NoiseModel] = None,
    x_dag: Optional[HVector] = None,
    B: Optional[SymOperator] = None,
    box: Optional[tuple] = None,
    threads: int = 1,
    engine: str = "auto",
) -> list:
    """Run M paths and aggregate MCEstimates at the plan's checkpoints.

    The result is a pure function of the configuration and the master seed;
    engine selection and thread count cannot change it.
    """
    estimates, _ = run_ensemble_traced(
        sys, y_true, x1, schedule, steps, variant, plan,
        noise=noise, x_dag=x_dag, B=B, box=box, threads=threads, engine=engine,
    )
    return estimates
