import numpy as np
import pytest
import sympy as sp
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lowthrust_dm.act import (ActSample, ActTransformer, FrameError, RejectedSampleError,
                              act_map, act_map_batch, build_frame, draw_costates, sample_act)
from lowthrust_dm.config import SearchRanges, nondimensionalize
from lowthrust_dm.cr3bp import accel
from lowthrust_dm.indirect import DecisionVector, control_law, propagate_extremal


def test_frame_hand_values():
    f = build_frame([1, 0, 0, 0, 1, 0], [0, 0, 0])
    np.testing.assert_allclose(f.v_hat, [0, 1, 0])
    np.testing.assert_allclose(f.h_hat, [0, 0, 1])
    np.testing.assert_allclose(f.w_hat, [-1, 0, 0])


def test_frame_degenerate():
    with pytest.raises(FrameError):
        build_frame([1, 0, 0, 0, 0, 0], [0, 0, 0])
    with pytest.raises(FrameError):
        build_frame([1, 0, 0, 2, 0, 0], [0, 0, 0])


def test_frame_orthonormal(rng):
    for _ in range(50):
        x = rng.normal(size=6)
        f = build_frame(x, rng.normal(size=3))
        R, Rd = f.R, f.R_dot
        assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
        assert np.max(np.abs(Rd.T @ R + R.T @ Rd)) <= 1e-9


def test_frame_matches_symbolic(europa, europa_problem):
    x0 = europa_problem.x0
    acc = accel(x0, europa.mu)
    t = sp.symbols("t")
    r = sp.Matrix(x0[:3]) + sp.Matrix(x0[3:]) * t
    v = sp.Matrix(x0[3:]) + sp.Matrix(acc) * t
    v_hat = v / sp.sqrt(v.dot(v))
    h = r.cross(v)
    h_hat = h / sp.sqrt(h.dot(h))
    w_hat = h_hat.cross(v_hat)
    f = build_frame(x0, acc)
    for sym, val, dval in ((v_hat, f.v_hat, f.v_hat_dot), (h_hat, f.h_hat, f.h_hat_dot),
                           (w_hat, f.w_hat, f.w_hat_dot)):
        np.testing.assert_allclose(np.array(sym.subs(t, 0), dtype=float).ravel(), val, atol=1e-14)
        np.testing.assert_allclose(np.array(sym.diff(t).subs(t, 0), dtype=float).ravel(), dval,
                                   atol=1e-12)


def _samples(europa, p, n, seed=5):
    return sample_act(europa.search, n, seed, p.lam_m_term)


def test_round_trip_angles_and_switching(europa, europa_problem):
    p = europa_problem
    for a in _samples(europa, p, 50):
        lam_r, lam_v = act_map(ActSample.from_array(a), p.x0, p.m0, p.lam_m0, p.c, p.t_max, p.mu)
        y = np.concatenate([p.x0, [p.m0], lam_r, lam_v, [p.lam_m0]])
        ctl = control_law(y, p.c)
        assert ctl.S == pytest.approx(a[4], abs=1e-12)
        R = build_frame(p.x0, [0, 0, 0]).R
        up = R.T @ ctl.u_hat
        assert np.arctan2(up[1], up[0]) % (2 * np.pi) == pytest.approx(a[0] % (2 * np.pi), abs=1e-12)
        assert np.arcsin(up[2]) == pytest.approx(a[2], abs=1e-12)


@pytest.mark.parametrize("cfg", ["europa", "gto"])
def test_round_trip_rates(request, cfg):
    config = request.getfixturevalue(cfg)
    p = nondimensionalize(config, 1.0)
    h = 1e-6
    for a in sample_act(config.search, 10, 9, p.lam_m_term):
        lam, valid = act_map_batch(a[None, :], p)
        d = DecisionVector(h, 0.0, 0.0, lam[0, :3], lam[0, 3:])
        traj = propagate_extremal(d, p, sample_grid=[0.0, h])
        S = traj.S
        assert (S[1] - S[0]) / h == pytest.approx(a[5], abs=1e-4)
        R0 = build_frame(p.x0, [0, 0, 0]).R
        R1 = build_frame(traj.states[1, :6], [0, 0, 0]).R
        u0 = R0.T @ (-traj.states[0, 10:13] / np.linalg.norm(traj.states[0, 10:13]))
        u1 = R1.T @ (-traj.states[1, 10:13] / np.linalg.norm(traj.states[1, 10:13]))
        phi = np.unwrap([np.arctan2(u0[1], u0[0]), np.arctan2(u1[1], u1[0])])
        assert (phi[1] - phi[0]) / h == pytest.approx(a[1], abs=1e-4)
        assert (np.arcsin(u1[2]) - np.arcsin(u0[2])) / h == pytest.approx(a[3], abs=1e-4)


def test_rejected_sample(europa_problem):
    p = europa_problem
    bad = ActSample(np.pi, 0.0, 0.0, 0.0, p.lam_m_term - 0.01, 0.0)
    with pytest.raises(RejectedSampleError):
        act_map(bad, p.x0, p.m0, p.lam_m0, p.c, p.t_max, p.mu)
    lam, valid = act_map_batch(bad.as_array()[None, :], p)
    assert not valid[0] and np.all(np.isnan(lam))


def test_zero_width_interval(europa, europa_problem):
    a = _samples(europa, europa_problem, 100)
    assert np.all(a[:, 2] == 0.0) and np.all(a[:, 3] == 0.0)


def test_gto_offset_keeps_primer_positive(gto):
    p = nondimensionalize(gto, 0.5)
    a = sample_act(gto.search, 5000, 1, p.lam_m_term)
    assert np.all(a[:, 4] > p.lam_m_term)
    gap = a[:, 4] - p.lam_m_term
    assert gap.min() >= 0.08 and gap.max() <= 0.4


def test_uniform_means(gto):
    n = 10_000
    a = sample_act(gto.search, n, 0)
    b = gto.search.as_array()
    mid, width = b.mean(axis=1), b[:, 1] - b[:, 0]
    sigma = width / np.sqrt(12 * n)
    assert np.all(np.abs(a.mean(axis=0) - mid) <= 3 * sigma)


def test_sampling_deterministic(europa, europa_problem):
    np.testing.assert_array_equal(_samples(europa, europa_problem, 20, 4),
                                  _samples(europa, europa_problem, 20, 4))
    assert not np.array_equal(_samples(europa, europa_problem, 20, 4),
                              _samples(europa, europa_problem, 20, 5))


def test_draw_costates_resamples(europa):
    p = nondimensionalize(europa, 1.0)
    ranges = SearchRanges(phi0=(3.0, 3.2), s0=(p.lam_m_term - 0.1, 0.1))
    lam, act, rejected = draw_costates(p, ranges, 500, 3)
    assert lam.shape == (500, 6) and rejected > 0
    assert np.all(act[:, 4] > p.lam_m_term)


def test_transformer_api(europa):
    t = ActTransformer(config=europa, alpha=1.0)
    with pytest.raises(NotFittedError):
        t.transform(np.zeros((1, 6)))
    assert clone(t).get_params()["alpha"] == 1.0
    t.fit()
    X = t.sample(10, seed=1)
    out = t.transform(X)
    assert out.shape == (10, 6) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        t.transform(np.zeros((2, 5)))
