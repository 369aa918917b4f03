"""Natural dynamics of the circular restricted three-body problem.

States are 6-vectors ``(r1, r2, r3, v1, v2, v3)`` in the rotating frame with
the primary at ``(-mu, 0, 0)`` and the secondary at ``(1 - mu, 0, 0)``.
A :class:`CartesianState` is accepted wherever a state array is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

DEFAULT_COLLISION_RADIUS = 1e-6
DEFAULT_TOL = 1e-12
MAX_STEPS = 50_000_000

HV = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
HV.setflags(write=False)


class SingularityError(ArithmeticError):
    """State is within the collision radius of a primary."""


class PropagationError(RuntimeError):
    """Integration failed; ``t_last`` is the last time reached successfully."""

    def __init__(self, message, t_last=0.0, state=None):
        super().__init__(message)
        self.t_last = float(t_last)
        self.state = state


@dataclass(frozen=True)
class CartesianState:
    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))

    @classmethod
    def from_array(cls, x):
        x = as_state(x)
        return cls(x[:3], x[3:])

    def __array__(self, dtype=None, copy=None):
        out = np.concatenate([self.r, self.v])
        return out if dtype is None else out.astype(dtype)


def as_state(state) -> np.ndarray:
    if isinstance(state, CartesianState):
        return np.array(state)
    x = np.asarray(state, dtype=float)
    if x.shape != (6,):
        raise ValueError(f"expected a 6-component state, got shape {x.shape}")
    return x


def primary_distances(state, mu):
    x = as_state(state)
    return K.distances(x[0], x[1], x[2], float(mu))


def _check(x, mu, collision_radius):
    if not 0.0 <= mu < 0.5:
        raise ValueError(f"mu must lie in [0, 1/2), got {mu}")
    rho1, rho2 = K.distances(x[0], x[1], x[2], mu)
    if rho1 < collision_radius or rho2 < collision_radius:
        raise SingularityError(f"state within {collision_radius:g} DU of a primary "
                               f"(rho1={rho1:.3e}, rho2={rho2:.3e})")


def accel(state, mu, collision_radius=DEFAULT_COLLISION_RADIUS) -> np.ndarray:
    """Rotating-frame acceleration g(r, v) including Coriolis and centrifugal terms."""
    x = as_state(state)
    mu = float(mu)
    _check(x, mu, collision_radius)
    out = np.empty(3)
    K.accel(x, mu, out)
    return out


def jacobians(state, mu, collision_radius=DEFAULT_COLLISION_RADIUS):
    """Return ``(G, Hv)`` with G = dg/dr (symmetric) and the constant Hv = dg/dv."""
    x = as_state(state)
    mu = float(mu)
    _check(x, mu, collision_radius)
    G = np.empty((3, 3))
    K.gravity_gradient(x, mu, G)
    return G, HV.copy()


def jacobi_energy(state, mu, collision_radius=DEFAULT_COLLISION_RADIUS) -> float:
    """Specific energy 0.5|v|^2 - 0.5(r1^2 + r2^2) - (1-mu)/rho1 - mu/rho2."""
    x = as_state(state)
    mu = float(mu)
    _check(x, mu, collision_radius)
    rho1, rho2 = K.distances(x[0], x[1], x[2], mu)
    pot = 0.5 * (x[0] ** 2 + x[1] ** 2) + (1.0 - mu) / rho1 + mu / rho2
    return float(0.5 * x[3:] @ x[3:] - pot)


def mirror(state) -> np.ndarray:
    """Image under the time-reversal symmetry (r1, -r2, r3, -v1, v2, -v3)."""
    x = as_state(state).copy()
    x[[1, 3, 5]] *= -1.0
    return x


@dataclass(frozen=True)
class BallisticArc:
    times: np.ndarray
    states: np.ndarray
    final_state: np.ndarray
    duration: float


def _raise_for_status(status, t_last, y, what="propagation"):
    if status == K.OK:
        return
    reason = {
        K.STATUS_SINGULAR: "collision with a primary",
        K.STATUS_FUEL: "fuel exhausted",
        K.STATUS_STEP_COLLAPSE: "step size collapsed",
        K.STATUS_MAX_STEPS: "step budget exhausted",
    }[status]
    raise PropagationError(f"{what} stopped at t={t_last:.12g}: {reason}", t_last, y)


def propagate_ballistic(state, mu, duration, tol=DEFAULT_TOL, times=None,
                        collision_radius=DEFAULT_COLLISION_RADIUS) -> BallisticArc:
    """Integrate a coast arc for ``duration`` TU (negative runs backward).

    ``times`` are sample times within ``[0, duration]``, ordered in the
    integration direction; they are served from the dense interpolant.
    """
    x = as_state(state)
    mu = float(mu)
    _check(x, mu, collision_radius)
    duration = float(duration)
    times = np.zeros(0) if times is None else np.asarray(times, dtype=float).reshape(-1)
    if times.size:
        sgn = 1.0 if duration >= 0 else -1.0
        scaled = sgn * times
        if scaled.min() < 0 or scaled.max() > abs(duration) * (1 + 1e-14) or np.any(np.diff(scaled) < 0):
            raise ValueError("sample times must be monotone and lie within the propagation span")
    store = times.size > 0
    status, t_last, y, _, _, ts, te, hs, Ys, Fs = K.propagate(
        K.KIND_BALLISTIC, x, duration, np.array([mu]), tol, tol,
        collision_radius, 0.0, store, MAX_STEPS)
    _raise_for_status(status, t_last, y)
    if duration == 0.0:
        states = np.repeat(x[None, :], times.size, axis=0)
    elif store:
        states = np.empty((times.size, 6))
        K.eval_steps(ts, te, hs, Ys, Fs, times, 6, states)
    else:
        states = np.zeros((0, 6))
    return BallisticArc(times=times, states=states, final_state=y, duration=duration)
