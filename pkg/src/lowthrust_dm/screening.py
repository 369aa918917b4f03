"""Target sets, exact nearest-neighbour search and preliminary screening.

A costate guess is screened by propagating its extremal for the maximum
shooting time and recording the earliest closest approach, in the joint
max-norm over position and velocity, to a set of target states.  Each
target state carries the final coast time that brings it to the fixed
terminal point.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _kernels as K
from .config import ConfigError, NondimensionalProblem, ProblemConfig, Tolerances, nondimensionalize
from .cr3bp import MAX_STEPS, propagate_ballistic
from .indirect import DecisionVector, delta_v

MANIFOLD_COLUMNS = ("tau_f", "r1", "r2", "r3", "v1", "v2", "v3")
LEAF_SIZE = 16


class ManifoldFormatError(ValueError):
    """A manifold file row could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class TargetValidationError(ValueError):
    """Target data violate the configured constraints."""


# --------------------------------------------------------------------- k-d tree

class KDTree:
    """Exact nearest-neighbour index under the max-norm.

    Built once with median splits on the widest coordinate; immutable after
    construction.  Ties resolve to the lowest point index.
    """

    def __init__(self, points, leaf_size=LEAF_SIZE):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("KDTree needs a non-empty 2-D point array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("KDTree points must be finite")
        n, dim = pts.shape
        order = np.arange(n)
        lo, hi, left, right, start, stop = [], [], [], [], [], []

        def build(s, e):
            node = len(lo)
            block = pts[order[s:e]]
            lo.append(block.min(axis=0))
            hi.append(block.max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            stop.append(e)
            if e - s > leaf_size:
                axis = int(np.argmax(hi[node] - lo[node]))
                mid = (s + e) // 2
                # stable on ties so the layout is a pure function of the input
                sub = order[s:e][np.argsort(block[:, axis], kind="stable")]
                order[s:e] = sub
                left[node] = build(s, mid)
                right[node] = build(mid, e)
            return node

        build(0, n)
        self.n_points = n
        self.dim = dim
        self._idx = order.copy()
        self._pts = np.ascontiguousarray(pts[order])
        self._lo = np.ascontiguousarray(lo)
        self._hi = np.ascontiguousarray(hi)
        self._left = np.asarray(left, dtype=np.int64)
        self._right = np.asarray(right, dtype=np.int64)
        self._start = np.asarray(start, dtype=np.int64)
        self._stop = np.asarray(stop, dtype=np.int64)
        for arr in (self._idx, self._pts, self._lo, self._hi, self._left, self._right,
                    self._start, self._stop):
            arr.setflags(write=False)

    @property
    def arrays(self):
        return (self._pts, self._idx, self._lo, self._hi, self._left, self._right,
                self._start, self._stop)

    def query(self, q, bound=math.inf):
        """Return ``(index, distance)``; ``(-1, inf)`` if nothing lies strictly within ``bound``."""
        q = np.asarray(q, dtype=float).reshape(self.dim)
        j, d = K.kd_query(*self.arrays, q, float(bound))
        return int(j), float(d)


# --------------------------------------------------------------------- targets

@dataclass(frozen=True)
class TargetSet:
    states: np.ndarray
    tau_f: np.ndarray
    index: KDTree = field(repr=False, compare=False)
    period: float | None = None

    @classmethod
    def from_points(cls, states, tau_f, period=None) -> "TargetSet":
        states = np.array(states, dtype=float).reshape(-1, 6)
        tau_f = np.array(tau_f, dtype=float).reshape(-1)
        if states.shape[0] == 0:
            raise TargetValidationError("target set is empty")
        if tau_f.shape[0] != states.shape[0]:
            raise TargetValidationError("one tau_f per target state is required")
        states.setflags(write=False)
        tau_f.setflags(write=False)
        return cls(states, tau_f, KDTree(states), period)

    def __len__(self):
        return self.states.shape[0]


def build_target_orbit(seed_state, period, n_points, mu, tol=1e-12) -> TargetSet:
    """Sample one period of a periodic orbit on a uniform time grid.

    Point i sits at ``t_i = i * period / n_points`` and carries
    ``tau_f = (period - t_i) mod period``, the coast that returns it to the seed.
    """
    if not period > 0:
        raise ValueError("period must be positive")
    if n_points < 2:
        raise ValueError("need at least two target points")
    times = np.arange(n_points) * (period / n_points)
    arc = propagate_ballistic(seed_state, mu, period, tol=tol, times=times)
    states = arc.states.copy()
    states[0] = np.asarray(seed_state, dtype=float)
    tau_f = np.mod(period - times, period)
    return TargetSet.from_points(states, tau_f, period=period)


def save_manifold(path, states, tau_f, comment=None) -> None:
    """Write a manifold file; values are written with full round-trip precision."""
    states = np.asarray(states, dtype=float).reshape(-1, 6)
    tau_f = np.asarray(tau_f, dtype=float).reshape(-1)
    path = Path(path)
    with path.open("w", newline="") as fh:
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFOLD_COLUMNS)
        for t, x in zip(tau_f, states):
            writer.writerow([repr(float(t)), *(repr(float(v)) for v in x)])


def load_manifold(path, tau_f_range=None) -> TargetSet:
    """Read a manifold file (``#`` comment lines allowed) into a target set."""
    path = Path(path)
    rows = []
    header_seen = False
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            cells = [c.strip() for c in next(csv.reader([text]))]
            if not header_seen:
                if tuple(cells) != MANIFOLD_COLUMNS:
                    raise ManifoldFormatError(
                        f"expected header {','.join(MANIFOLD_COLUMNS)}, got {text!r}", lineno)
                header_seen = True
                continue
            if len(cells) != len(MANIFOLD_COLUMNS):
                raise ManifoldFormatError(f"expected 7 values, got {len(cells)}", lineno)
            try:
                values = [float(c) for c in cells]
            except ValueError as exc:
                raise ManifoldFormatError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ManifoldFormatError("non-finite value", lineno)
            rows.append(values)
    if not header_seen:
        raise TargetValidationError(f"{path}: manifold file has no header")
    if not rows:
        raise TargetValidationError(f"{path}: manifold file has no rows")
    data = np.array(rows)
    if tau_f_range is not None:
        lo, hi = tau_f_range
        bad = np.flatnonzero((data[:, 0] < lo) | (data[:, 0] > hi))
        if bad.size:
            raise TargetValidationError(
                f"{path}: {bad.size} rows have tau_f outside [{lo}, {hi}] (first: row {bad[0] + 1})")
    return TargetSet.from_points(data[:, 1:], data[:, 0])


_TARGET_CACHE: dict = {}


def target_from_config(config: ProblemConfig, n_points=None) -> TargetSet:
    """Target set described by the configuration, cached per configuration digest."""
    b = config.boundary
    key = (config.digest(), n_points)
    if key in _TARGET_CACHE:
        return _TARGET_CACHE[key]
    if b.target_kind == "periodic_orbit":
        target = build_target_orbit(b.target_seed_state, b.target_period,
                                    n_points or b.target_points, config.mu,
                                    tol=config.tolerances.rtol)
    elif b.target_kind == "manifold_file":
        target = load_manifold(b.manifold_file, b.tau_f_range)
    else:
        raise ConfigError(f"unknown target kind {b.target_kind!r}")
    _TARGET_CACHE[key] = target
    return target


def nearest(target: TargetSet, query):
    """Closest target point: ``(state, tau_f, delta_c)``."""
    j, d = target.index.query(query)
    return target.states[j].copy(), float(target.tau_f[j]), d


def backward_ballistic_arc(state, mu, duration, n_points, tol=1e-12):
    """States reached by coasting backward from ``state``; for synthetic manifold files.

    Returns ``(states, tau_f)`` where ``tau_f`` is the forward coast back to ``state``.
    """
    times = -np.linspace(0.0, duration, n_points)
    arc = propagate_ballistic(state, mu, -duration, tol=tol, times=times)
    return arc.states, -times


# --------------------------------------------------------------------- screening

@dataclass(frozen=True)
class ScreeningResult:
    decision: DecisionVector | None
    delta_c_min: float
    accepted: bool
    samples_scanned: int
    target_index: int = -1
    dv_mps: float = math.nan
    reason: str | None = None
    target_state: np.ndarray | None = field(default=None, repr=False, compare=False)


def _reason(status):
    return {K.STATUS_SINGULAR: "singularity", K.STATUS_FUEL: "fuel_exhausted",
            K.STATUS_STEP_COLLAPSE: "step_collapse", K.STATUS_MAX_STEPS: "step_budget"}.get(status)


def screen_problem(costates, problem: NondimensionalProblem, target: TargetSet, tau_s_max: float,
                   tolerances: Tolerances, delta=None, grid_dt=None) -> ScreeningResult:
    """Screen one guess against ``target`` for an already nondimensionalized problem.

    ``delta = inf`` reports the exact minimum over the scanned times.
    """
    lam = np.asarray(costates, dtype=float).reshape(6)
    delta = tolerances.delta if delta is None else float(delta)
    grid_dt = tolerances.grid_dt if grid_dt is None else float(grid_dt)
    y0 = np.concatenate([problem.x0, [problem.m0], lam, [problem.lam_m0]])
    p = np.array([problem.mu, problem.c, problem.t_max, 0.0])
    status, t_last, _, _, _, ts, te, hs, Ys, Fs = K.propagate(
        K.KIND_AUGMENTED, y0, float(tau_s_max), p, tolerances.rtol, tolerances.atol,
        tolerances.collision_radius, problem.m_dry, True, MAX_STEPS)
    if status not in (K.OK, K.STATUS_FUEL) or ts.shape[0] == 0:
        return ScreeningResult(None, math.inf, False, 0, reason=_reason(status) or "empty")
    # beyond fuel exhaustion nothing is usable; the part before it is still a valid extremal
    t_valid = float(t_last)
    best, t_best, j, scanned = K.screen_scan(
        ts, te, hs, Ys, Fs, t_valid, grid_dt, p, delta, int(tolerances.refine_depth),
        float(tolerances.lipschitz_safety), *target.index.arrays)
    reason = _reason(status)
    if j < 0:
        return ScreeningResult(None, math.inf, False, int(scanned), reason=reason or "no_approach")
    mass = np.empty((1, 7))
    K.eval_steps(ts, te, hs, Ys, Fs, np.array([t_best]), 7, mass)
    decision = DecisionVector(tau_s=t_best, tau_i=0.0, tau_f=float(target.tau_f[j]),
                              lam_r0=lam[:3], lam_v0=lam[3:], lam_m0=problem.lam_m0)
    accepted = bool(best < delta)
    result = ScreeningResult(
        decision=decision, delta_c_min=float(best), accepted=accepted,
        samples_scanned=int(scanned), target_index=int(j),
        dv_mps=delta_v(problem.c, problem.m0, mass[0, 6]) * problem.velocity_unit,
        reason=None if accepted else (reason or "above_delta"),
        target_state=target.states[j].copy())
    return result


def screen(costate_guess, config: ProblemConfig, target: TargetSet, alpha: float,
           grid_dt=None, delta=None) -> ScreeningResult:
    """Preliminary screening of one costate guess ``(lam_r0, lam_v0)`` at thrust level ``alpha``."""
    lam = np.concatenate([np.ravel(x) for x in costate_guess]) if isinstance(costate_guess, tuple) \
        else np.asarray(costate_guess, dtype=float)
    problem = nondimensionalize(config, alpha)
    return screen_problem(lam, problem, target, config.tau_s_max_for(alpha), config.tolerances,
                          delta=delta, grid_dt=grid_dt)


class Screener(BaseEstimator):
    """Estimator front end: ``fit`` builds the target set, ``predict`` flags accepted guesses."""

    def __init__(self, config: ProblemConfig | None = None, alpha: float = 1.0, delta=None,
                 grid_dt=None):
        self.config = config
        self.alpha = alpha
        self.delta = delta
        self.grid_dt = grid_dt

    def fit(self, X=None, y=None):
        if self.config is None:
            raise ValueError("Screener needs a problem configuration")
        self.target_ = target_from_config(self.config)
        self.problem_ = nondimensionalize(self.config, self.alpha)
        self.n_features_in_ = 6
        return self

    def screen(self, X) -> list:
        check_is_fitted(self, "target_")
        X = check_array(X, dtype=float)
        if X.shape[1] != 6:
            raise ValueError(f"expected 6 costates per row, got {X.shape[1]}")
        tmax = self.config.tau_s_max_for(self.alpha)
        return [screen_problem(x, self.problem_, self.target_, tmax, self.config.tolerances,
                               delta=self.delta, grid_dt=self.grid_dt) for x in X]

    def predict(self, X) -> np.ndarray:
        return np.array([r.accepted for r in self.screen(X)], dtype=bool)
