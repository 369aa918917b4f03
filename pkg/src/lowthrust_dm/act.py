"""Adjoint control transformation (ACT).

Physical thrust-frame variables at t = 0, ``(phi, phi_dot, beta, beta_dot,
S, S_dot)``, are mapped to the initial costates ``(lam_r0, lam_v0)``.  The
thrust angles are measured in the velocity-centred frame
``R = [v_hat | w_hat | h_hat]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ACT_KEYS, NondimensionalProblem, ProblemConfig, SearchRanges, nondimensionalize
from .cr3bp import accel, as_state
from .rng import stream

DEGENERATE = 1e-12


class FrameError(ValueError):
    """Velocity or angular momentum too small to define the spacecraft frame."""


class RejectedSampleError(ValueError):
    """The sample implies a non-positive primer-vector magnitude."""


@dataclass(frozen=True)
class ActSample:
    phi0: float
    phi_dot0: float
    beta0: float
    beta_dot0: float
    s0: float
    s_dot0: float

    @classmethod
    def from_array(cls, a):
        return cls(*(float(x) for x in np.asarray(a, dtype=float).reshape(6)))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in ACT_KEYS])


@dataclass(frozen=True)
class SpacecraftFrame:
    v_hat: np.ndarray
    w_hat: np.ndarray
    h_hat: np.ndarray
    v_hat_dot: np.ndarray
    w_hat_dot: np.ndarray
    h_hat_dot: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return np.column_stack([self.v_hat, self.w_hat, self.h_hat])

    @property
    def R_dot(self) -> np.ndarray:
        return np.column_stack([self.v_hat_dot, self.w_hat_dot, self.h_hat_dot])


def _frames(r, v, vdot):
    """Batched frame and its derivative; r, v of shape (3,), vdot of shape (n, 3)."""
    speed = np.linalg.norm(v)
    h = np.cross(r, v)
    hn = np.linalg.norm(h)
    if speed < DEGENERATE or hn < DEGENERATE:
        raise FrameError(f"degenerate frame geometry (|v|={speed:.3e}, |h|={hn:.3e})")
    v_hat = v / speed
    h_hat = h / hn
    w_hat = np.cross(h_hat, v_hat)
    v_hat_dot = vdot / speed - np.outer(vdot @ v, v) / speed**3
    hdot = np.cross(r, vdot)
    h_hat_dot = hdot / hn - np.outer(hdot @ h, h) / hn**3
    w_hat_dot = np.cross(h_hat_dot, v_hat) + np.cross(h_hat, v_hat_dot)
    R = np.column_stack([v_hat, w_hat, h_hat])
    R_dot = np.stack([v_hat_dot, w_hat_dot, h_hat_dot], axis=-1)
    return R, R_dot, (v_hat, w_hat, h_hat, v_hat_dot, w_hat_dot, h_hat_dot)


def build_frame(state, acc) -> SpacecraftFrame:
    """Velocity-centred frame at ``state`` with derivatives driven by ``acc`` = dv/dt."""
    x = as_state(state)
    _, _, parts = _frames(x[:3], x[3:], np.asarray(acc, dtype=float).reshape(1, 3))
    v_hat, w_hat, h_hat, vd, wd, hd = parts
    return SpacecraftFrame(v_hat, w_hat, h_hat, vd[0], wd[0], hd[0])


def _act_core(samples, x0, mu, m0, lam_m0, c, t_max):
    """Vectorized map; returns costates (n, 6) and a validity mask."""
    s = np.atleast_2d(np.asarray(samples, dtype=float))
    phi, phid, beta, betad, S0, Sd0 = s.T
    r, v = x0[:3], x0[3:]
    g = accel(x0, mu)

    u_p = np.column_stack([np.cos(phi) * np.cos(beta), np.sin(phi) * np.cos(beta), np.sin(beta)])
    u_p_dot = np.column_stack([
        -np.sin(phi) * phid * np.cos(beta) - np.cos(phi) * np.sin(beta) * betad,
        np.cos(phi) * phid * np.cos(beta) - np.sin(phi) * np.sin(beta) * betad,
        np.cos(beta) * betad,
    ])
    R0, _, _ = _frames(r, v, np.zeros((1, 3)))
    u = u_p @ R0.T

    lam_v_mag = S0 - lam_m0 * m0 / c
    valid = lam_v_mag > 0
    sigma = (S0 > 0).astype(float)
    thrust = sigma * t_max
    vdot = g[None, :] + (thrust / m0)[:, None] * u
    R, R_dot, _ = _frames(r, v, vdot)
    u_dot = np.einsum("nij,nj->ni", R_dot, u_p) + u_p_dot @ R.T

    m_dot = -thrust / c
    lam_m_dot = -lam_v_mag * thrust / m0**2
    lam_v_mag_dot = Sd0 - lam_m0 * m_dot / c - lam_m_dot * m0 / c

    lam_v = -lam_v_mag[:, None] * u
    lam_v_dot = -lam_v_mag_dot[:, None] * u - lam_v_mag[:, None] * u_dot
    hv_t_lam_v = np.column_stack([-2.0 * lam_v[:, 1], 2.0 * lam_v[:, 0], np.zeros(len(s))])
    lam_r = -lam_v_dot - hv_t_lam_v
    return np.hstack([lam_r, lam_v]), valid


def act_map(sample, state, m0, lam_m0, c, T_max, mu):
    """Map one ACT sample to ``(lam_r0, lam_v0)``.

    Raises :class:`RejectedSampleError` when ``S0 - lam_m0 m0 / c <= 0``.
    """
    a = sample.as_array() if isinstance(sample, ActSample) else np.asarray(sample, dtype=float)
    lam, valid = _act_core(a.reshape(1, 6), as_state(state), float(mu), float(m0), float(lam_m0),
                           float(c), float(T_max))
    if not valid[0]:
        raise RejectedSampleError("primer-vector magnitude S0 - lam_m0*m0/c must be positive")
    return lam[0, :3], lam[0, 3:]


def act_map_batch(samples, problem: NondimensionalProblem):
    """Vectorized :func:`act_map`; invalid rows come back as NaN with ``valid`` False."""
    lam, valid = _act_core(samples, problem.x0, problem.mu, problem.m0, problem.lam_m0,
                           problem.c, problem.t_max)
    lam[~valid] = np.nan
    return lam, valid


def sample_act(ranges: SearchRanges, count: int, seed, lam_m_term: float = 0.0) -> np.ndarray:
    """Uniform draws of ACT variables, one row per sample in ``ACT_KEYS`` order.

    ``seed`` is an int or a :class:`numpy.random.Generator`.  When the
    ranges give ``S0`` as an offset, ``lam_m_term`` (``lam_m0 m0 / c``) is
    added back so rows always hold the switching value itself.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    bounds = ranges.as_array()
    draws = rng.random((count, 6))
    out = bounds[:, 0] + draws * (bounds[:, 1] - bounds[:, 0])
    if ranges.s0_is_offset:
        out[:, 4] += lam_m_term
    return out


def draw_costates(problem: NondimensionalProblem, ranges: SearchRanges, count: int, seed):
    """Draw ``count`` valid costate guesses, resampling rejected ACT samples.

    Returns ``(costates, act_samples, n_rejected)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    lam_parts, act_parts, rejected, have = [], [], 0, 0
    while have < count:
        need = count - have
        a = sample_act(ranges, need, rng, problem.lam_m_term)
        lam, valid = act_map_batch(a, problem)
        rejected += int((~valid).sum())
        if not valid.any() and rejected > 1000 * count + 1000:
            raise RejectedSampleError("search ranges never yield a positive primer magnitude")
        lam_parts.append(lam[valid])
        act_parts.append(a[valid])
        have += int(valid.sum())
    return np.vstack(lam_parts)[:count], np.vstack(act_parts)[:count], rejected


class ActTransformer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: transforms ACT rows (n, 6) into costates (n, 6).

    Rejected rows map to NaN.  ``fit`` only resolves the problem constants.
    """

    def __init__(self, config: ProblemConfig | None = None, alpha: float = 1.0):
        self.config = config
        self.alpha = alpha

    def fit(self, X=None, y=None):
        if self.config is None:
            raise ValueError("ActTransformer needs a problem configuration")
        self.problem_ = nondimensionalize(self.config, self.alpha)
        self.n_features_in_ = 6
        return self

    def transform(self, X):
        check_is_fitted(self, "problem_")
        X = check_array(X, dtype=float)
        if X.shape[1] != 6:
            raise ValueError(f"expected 6 ACT variables per row, got {X.shape[1]}")
        return act_map_batch(X, self.problem_)[0]

    def sample(self, count: int, seed=0) -> np.ndarray:
        check_is_fitted(self, "problem_")
        return sample_act(self.config.search, count, seed, self.problem_.lam_m_term)
