"""Extremal flow of the minimum-fuel indirect formulation.

The augmented state stacks ``(r, v, m, lam_r, lam_v, lam_m)`` into 14
components.  Mass is in units of the initial wet mass, so ``m(0) = 1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .config import NondimensionalProblem
from .cr3bp import (DEFAULT_COLLISION_RADIUS, DEFAULT_TOL, MAX_STEPS, PropagationError,
                    SingularityError, _raise_for_status, accel)

TRAJECTORY_COLUMNS = ("t", "r1", "r2", "r3", "v1", "v2", "v3", "m",
                      "lam_r1", "lam_r2", "lam_r3", "lam_v1", "lam_v2", "lam_v3", "lam_m",
                      "S", "sigma")


class FuelExhaustedError(PropagationError):
    """Mass reached the dry-mass floor; ``t_last`` is the exhaustion time."""


@dataclass(frozen=True)
class AugmentedState:
    r: np.ndarray
    v: np.ndarray
    m: float
    lam_r: np.ndarray
    lam_v: np.ndarray
    lam_m: float

    def __post_init__(self):
        for name in ("r", "v", "lam_r", "lam_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "m", float(self.m))
        object.__setattr__(self, "lam_m", float(self.lam_m))

    @classmethod
    def from_array(cls, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (14,):
            raise ValueError(f"expected 14 components, got shape {y.shape}")
        return cls(y[0:3], y[3:6], y[6], y[7:10], y[10:13], y[13])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.r, self.v, [self.m], self.lam_r, self.lam_v, [self.lam_m]])

    @property
    def cartesian(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])


@dataclass(frozen=True, eq=False)
class DecisionVector:
    tau_s: float
    tau_i: float
    tau_f: float
    lam_r0: np.ndarray
    lam_v0: np.ndarray
    lam_m0: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "lam_r0", np.asarray(self.lam_r0, dtype=float).reshape(3))
        object.__setattr__(self, "lam_v0", np.asarray(self.lam_v0, dtype=float).reshape(3))
        for name in ("tau_s", "tau_i", "tau_f", "lam_m0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.tau_s < 0 or self.tau_i < 0 or self.tau_f < 0:
            raise ValueError("durations in a decision vector must be non-negative")

    @classmethod
    def from_array(cls, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (10,):
            raise ValueError(f"expected 10 components, got shape {u.shape}")
        return cls(u[0], u[1], u[2], u[3:6], u[6:9], u[9])

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.tau_s, self.tau_i, self.tau_f], self.lam_r0, self.lam_v0,
                               [self.lam_m0]])

    @property
    def costates(self) -> np.ndarray:
        """The six learned initial costates ``(lam_r0, lam_v0)``."""
        return np.concatenate([self.lam_r0, self.lam_v0])

    def __eq__(self, other):
        if not isinstance(other, DecisionVector):
            return NotImplemented
        return bool(np.array_equal(self.as_array(), other.as_array()))

    __hash__ = None

    def replace(self, **changes) -> "DecisionVector":
        values = dict(tau_s=self.tau_s, tau_i=self.tau_i, tau_f=self.tau_f,
                      lam_r0=self.lam_r0, lam_v0=self.lam_v0, lam_m0=self.lam_m0)
        values.update(changes)
        return DecisionVector(**values)


@dataclass(frozen=True)
class ControlOutput:
    u_hat: np.ndarray
    sigma: float
    S: float


def _as_aug(aug) -> np.ndarray:
    if isinstance(aug, AugmentedState):
        return aug.as_array()
    y = np.asarray(aug, dtype=float)
    if y.shape != (14,):
        raise ValueError(f"expected 14 components, got shape {y.shape}")
    return y


def switching_function(aug, c) -> float:
    """S = |lam_v| + lam_m m / c."""
    return float(K.switching(_as_aug(aug), float(c)))


def control_law(aug, c, T_max=None) -> ControlOutput:
    """Bang-bang minimizer of the Hamiltonian; S = 0 resolves to coasting.

    ``T_max`` does not affect the minimizer and is accepted for symmetry with
    the other operations.
    """
    y = _as_aug(aug)
    lam_v = y[10:13]
    norm = np.linalg.norm(lam_v)
    u_hat = -lam_v / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    S = float(K.switching(y, float(c)))
    return ControlOutput(u_hat=u_hat, sigma=1.0 if S > 0 else 0.0, S=S)


def hamiltonian(aug, control: ControlOutput, c, T_max, mu) -> float:
    """H = lam_r.v + lam_v.(g + sigma T u/m) - lam_m sigma T / c."""
    y = _as_aug(aug)
    g = accel(y[:6], mu)
    thrust = control.sigma * T_max
    u = np.asarray(control.u_hat, dtype=float)
    return float(y[7:10] @ y[3:6] + y[10:13] @ (g + thrust * u / y[6]) - y[13] * thrust / c)


def optimal_hamiltonian(aug, c, T_max, mu) -> float:
    """Reduced form lam_r.v + lam_v.g - S sigma T / m under the optimal control."""
    y = _as_aug(aug)
    ctrl = control_law(y, c)
    g = accel(y[:6], mu)
    return float(y[7:10] @ y[3:6] + y[10:13] @ g - ctrl.S * ctrl.sigma * T_max / y[6])


def augmented_rhs(aug, mu, c, T_max, sigma=None) -> np.ndarray:
    """Time derivative of the augmented state.

    ``sigma`` overrides the throttle given by the sign of S, as happens on an
    arc held fixed between detected switches.
    """
    y = _as_aug(aug)
    if sigma is None:
        sigma = 1.0 if K.switching(y, float(c)) > 0 else 0.0
    rho1, rho2 = K.distances(y[0], y[1], y[2], float(mu))
    if min(rho1, rho2) < DEFAULT_COLLISION_RADIUS:
        raise SingularityError("state within the collision radius of a primary")
    out = np.empty(14)
    K.rhs(K.KIND_AUGMENTED, y, np.array([mu, c, T_max, sigma], dtype=float), out)
    return out


def initial_augmented_state(decision: DecisionVector, problem: NondimensionalProblem) -> np.ndarray:
    return np.concatenate([problem.x0, [problem.m0], decision.lam_r0, decision.lam_v0,
                           [decision.lam_m0]])


@dataclass(frozen=True)
class ExtremalTrajectory:
    times: np.ndarray
    states: np.ndarray          # (n, 14) augmented samples
    switch_times: np.ndarray
    final: np.ndarray           # augmented state at tau_s
    dv: float                   # NU
    dv_mps: float
    c: float = field(repr=False, default=1.0)

    @property
    def S(self) -> np.ndarray:
        lv = np.linalg.norm(self.states[:, 10:13], axis=1)
        return lv + self.states[:, 13] * self.states[:, 6] / self.c

    @property
    def sigma(self) -> np.ndarray:
        return (self.S > 0).astype(float)

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self)


def delta_v(c, m_initial, m_final) -> float:
    return float(c * np.log(m_initial / m_final))


def _run(y0, duration, problem, tol, store, collision_radius):
    if problem.t_max is None:
        raise ValueError("problem has no thrust level; nondimensionalize with an alpha")
    p = np.array([problem.mu, problem.c, problem.t_max, 0.0])
    return K.propagate(K.KIND_AUGMENTED, y0, float(duration), p, tol, tol,
                       collision_radius, problem.m_dry, store, MAX_STEPS)


def propagate_extremal(decision: DecisionVector, problem: NondimensionalProblem, sample_grid=None,
                       tol=DEFAULT_TOL, collision_radius=DEFAULT_COLLISION_RADIUS) -> ExtremalTrajectory:
    """Integrate the augmented flow for ``decision.tau_s`` with switch restarts.

    Raises :class:`FuelExhaustedError` if the mass reaches the dry floor and
    :class:`PropagationError` on collisions or step collapse.
    """
    if decision.tau_i != 0.0:
        raise ValueError("only tau_i = 0 is supported")
    y0 = initial_augmented_state(decision, problem)
    grid = np.zeros(0) if sample_grid is None else np.asarray(sample_grid, dtype=float).reshape(-1)
    if grid.size and (grid.min() < 0 or grid.max() > decision.tau_s or np.any(np.diff(grid) < 0)):
        raise ValueError("sample grid must be sorted and lie within [0, tau_s]")
    status, t_last, y, switches, _, ts, te, hs, Ys, Fs = _run(
        y0, decision.tau_s, problem, tol, grid.size > 0, collision_radius)
    if status == K.STATUS_FUEL:
        raise FuelExhaustedError(f"fuel exhausted at t={t_last:.12g}", t_last, y)
    if status != K.OK:
        _raise_for_status(status, t_last, y, "extremal propagation")
    if decision.tau_s == 0.0 or not grid.size:
        states = np.repeat(y0[None, :], grid.size, axis=0) if decision.tau_s == 0.0 else np.zeros((0, 14))
    else:
        states = np.empty((grid.size, 14))
        K.eval_steps(ts, te, hs, Ys, Fs, grid, 14, states)
    dv = delta_v(problem.c, problem.m0, y[6])
    return ExtremalTrajectory(times=grid, states=states, switch_times=np.array(switches),
                              final=np.array(y), dv=dv, dv_mps=dv * problem.velocity_unit,
                              c=problem.c)


def write_trajectory_csv(path, traj: ExtremalTrajectory) -> None:
    path = Path(path)
    S = traj.S
    sigma = traj.sigma
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t, row, s, sg in zip(traj.times, traj.states, S, sigma):
            writer.writerow([repr(float(t)), *(repr(float(v)) for v in row), repr(float(s)),
                             repr(float(sg))])


__all__ = [
    "AugmentedState", "ControlOutput", "DecisionVector", "ExtremalTrajectory",
    "FuelExhaustedError", "TRAJECTORY_COLUMNS", "augmented_rhs", "control_law",
    "delta_v", "hamiltonian", "initial_augmented_state", "optimal_hamiltonian",
    "propagate_extremal", "switching_function", "write_trajectory_csv",
]
