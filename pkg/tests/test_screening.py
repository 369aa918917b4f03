import math

import numpy as np
import pytest
from scipy.spatial import cKDTree
from sklearn.base import clone

from lowthrust_dm.act import draw_costates
from lowthrust_dm.config import NondimensionalProblem
from lowthrust_dm.cr3bp import jacobi_energy, propagate_ballistic
from lowthrust_dm.indirect import DecisionVector, propagate_extremal
from lowthrust_dm.screening import (KDTree, ManifoldFormatError, Screener, TargetSet,
                                    TargetValidationError, backward_ballistic_arc,
                                    build_target_orbit, load_manifold, nearest, save_manifold,
                                    screen, screen_problem)


def brute(points, q):
    d = np.max(np.abs(points - q), axis=1)
    j = int(np.argmin(d))  # argmin returns the first minimum
    return j, d[j]


@pytest.fixture(scope="module")
def orbit(europa):
    b = europa.boundary
    return build_target_orbit(b.target_seed_state, b.target_period, 4096, europa.mu)


def test_orbit_points_share_energy(orbit, europa):
    e0 = jacobi_energy(orbit.states[0], europa.mu)
    e = np.array([jacobi_energy(s, europa.mu) for s in orbit.states])
    assert np.max(np.abs(e - e0)) <= 1e-9


def test_orbit_seed_has_zero_coast(orbit, europa):
    seed = np.array(europa.boundary.target_seed_state)
    state, tau_f, dc = nearest(orbit, seed)
    assert tau_f == 0.0 and dc == 0.0
    np.testing.assert_array_equal(state, seed)
    assert np.all((orbit.tau_f >= 0) & (orbit.tau_f < orbit.period))


def test_orbit_coast_reaches_seed(orbit, europa):
    for i in (5, 1000, 3000):
        end = propagate_ballistic(orbit.states[i], europa.mu, orbit.tau_f[i]).final_state
        # four-digit period closes to ~1e-4 at the seed; the coast itself is exact
        assert np.max(np.abs(end - orbit.states[0])) < 2e-4


def test_min_points():
    with pytest.raises(ValueError):
        build_target_orbit([1.03, 0, 0, 0, -0.07, 0], 4.1, 1, 2.5e-5)


def test_kdtree_matches_brute_force(orbit, rng):
    pts = orbit.states
    scale = pts.max(axis=0) - pts.min(axis=0)
    for _ in range(1000):
        q = pts[rng.integers(len(pts))] + rng.normal(size=6) * 0.05 * scale
        j, d = orbit.index.query(q)
        jb, db = brute(pts, q)
        assert (j, d) == (jb, db)


def test_kdtree_random_clouds(rng):
    for n in (1, 2, 17, 300):
        pts = rng.normal(size=(n, 6))
        tree = KDTree(pts)
        for q in rng.normal(size=(50, 6)):
            assert tree.query(q) == brute(pts, q)


def test_kdtree_ties_lowest_index():
    pts = np.zeros((40, 6))
    pts[:, 0] = np.repeat([-1.0, 1.0], 20)
    tree = KDTree(pts)
    assert tree.query(np.zeros(6)) == (0, 1.0)
    dup = np.tile([0.3, 0, 0, 0, 0, 0], (50, 1))
    assert KDTree(dup).query(np.zeros(6))[0] == 0


def test_kdtree_bound_and_immutability(rng):
    pts = rng.normal(size=(100, 6))
    tree = KDTree(pts)
    assert tree.query(pts[3] + 10.0, bound=0.5) == (-1, math.inf)
    with pytest.raises(ValueError):
        tree.arrays[0][0, 0] = 1.0
    with pytest.raises(ValueError):
        KDTree(np.zeros((0, 6)))


def test_manifold_roundtrip(tmp_path, europa):
    states, tau = backward_ballistic_arc(europa.boundary.target_seed_state, europa.mu, 2.0, 257)
    path = tmp_path / "m.csv"
    save_manifold(path, states, tau, comment="synthetic\ntwo lines")
    t = load_manifold(path)
    np.testing.assert_array_equal(t.states, states)
    np.testing.assert_array_equal(t.tau_f, tau)
    # coasting tau_f from any point returns to the seed
    end = propagate_ballistic(t.states[100], europa.mu, t.tau_f[100]).final_state
    np.testing.assert_allclose(end, europa.boundary.target_seed_state, atol=1e-10)


def test_manifold_single_row(tmp_path, rng):
    path = tmp_path / "one.csv"
    save_manifold(path, [[1, 2, 3, 4, 5, 6]], [7.0])
    t = load_manifold(path, (5.0, 11.0))
    assert len(t) == 1
    for q in rng.normal(size=(5, 6)):
        assert nearest(t, q)[1] == 7.0


def test_manifold_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(TargetValidationError):
        load_manifold(empty)
    hdr = tmp_path / "h.csv"
    hdr.write_text("tau_f,r1,r2,r3,v1,v2,v3\n")
    with pytest.raises(TargetValidationError):
        load_manifold(hdr)
    bad = tmp_path / "b.csv"
    bad.write_text("# c\ntau_f,r1,r2,r3,v1,v2,v3\n6,1,2,3,4,5,6\n6,1,2,x,4,5,6\n")
    with pytest.raises(ManifoldFormatError) as err:
        load_manifold(bad)
    assert err.value.line == 4
    short = tmp_path / "s.csv"
    short.write_text("tau_f,r1,r2,r3,v1,v2,v3\n6,1,2,3\n")
    with pytest.raises(ManifoldFormatError):
        load_manifold(short)
    window = tmp_path / "w.csv"
    window.write_text("tau_f,r1,r2,r3,v1,v2,v3\n6,1,2,3,4,5,6\n12,1,2,3,4,5,6\n")
    with pytest.raises(TargetValidationError):
        load_manifold(window, (5.0, 11.0))


def test_gto_manifold_within_window(gto):
    from lowthrust_dm.screening import target_from_config
    t = target_from_config(gto)
    assert len(t) > 100
    assert t.tau_f.min() >= 5.0 and t.tau_f.max() <= 11.0


# --------------------------------------------------------------------- screening

def _guess(europa, p, seed=0):
    lam, _, _ = draw_costates(p, europa.search, 1, seed)
    return lam[0]


def _target_on_extremal(lam, p, times):
    traj = propagate_extremal(DecisionVector(max(times), 0, 0, lam[:3], lam[3:]), p,
                              sample_grid=times)
    far = traj.states[:, :6] + 5.0
    return TargetSet.from_points(np.vstack([far, traj.states[:, :6]]),
                                 np.arange(2 * len(times), dtype=float))


@pytest.mark.parametrize("t_hit", [5.0, 5.003721])
def test_passes_through_target(europa, europa_problem, t_hit):
    lam = _guess(europa, europa_problem)
    target = _target_on_extremal(lam, europa_problem, [t_hit])
    res = screen_problem(lam, europa_problem, target, 10.0, europa.tolerances)
    assert res.accepted
    assert res.delta_c_min <= (1e-12 if t_hit == 5.0 else 1e-6)
    assert res.decision.tau_s == pytest.approx(t_hit, abs=1e-5)
    assert res.decision.tau_f == 1.0 and res.target_index == 1
    assert res.decision.lam_m0 == -1.0 and res.decision.tau_i == 0.0


def test_exact_minimum_matches_dense_scan(europa, europa_problem, orbit):
    p = europa_problem
    for seed in range(3):
        lam = _guess(europa, p, seed)
        res = screen_problem(lam, p, orbit, 8.0, europa.tolerances, delta=math.inf)
        grid = np.arange(0.0, 8.0, 1e-4)
        traj = propagate_extremal(DecisionVector(8.0, 0, 0, lam[:3], lam[3:]), p, sample_grid=grid)
        d, _ = cKDTree(orbit.states).query(traj.states[:, :6], p=np.inf)
        speed = np.max(np.abs(np.diff(traj.states[:, :6], axis=0))) / 1e-4
        assert res.delta_c_min <= d.min() + 1e-12
        assert res.delta_c_min >= d.min() - speed * 1e-4


def test_monotone_in_delta(europa, europa_problem, orbit):
    p = europa_problem
    lam, _, _ = draw_costates(p, europa.search, 40, 21)
    for x in lam:
        accepted = [screen_problem(x, p, orbit, 6.0, europa.tolerances, delta=d).accepted
                    for d in (1e-3, 1e-2, 5e-2)]
        assert accepted == sorted(accepted)


def test_deterministic(europa, europa_problem, orbit):
    lam = _guess(europa, europa_problem, 4)
    a = screen_problem(lam, europa_problem, orbit, 6.0, europa.tolerances, delta=math.inf)
    b = screen_problem(lam, europa_problem, orbit, 6.0, europa.tolerances, delta=math.inf)
    assert a == b and a.delta_c_min == b.delta_c_min


def test_zero_costates_coast(europa, europa_problem):
    p = europa_problem
    arc = propagate_ballistic(p.x0, p.mu, 3.0, times=[2.0])
    near = TargetSet.from_points(arc.states, [0.5])
    res = screen_problem(np.zeros(6), p, near, 3.0, europa.tolerances)
    assert res.accepted and res.dv_mps == 0.0
    far = TargetSet.from_points(arc.states + 0.1, [0.5])
    assert not screen_problem(np.zeros(6), p, far, 3.0, europa.tolerances).accepted


def test_fuel_exhaustion_rejected(europa):
    p = NondimensionalProblem(mu=europa.mu, c=1.0, x0=np.array([1.0752, 0, 0, 0, -0.1499, 0]),
                              m_dry=0.9, t_max=0.5)
    far = TargetSet.from_points([[5.0, 5, 5, 5, 5, 5]], [0.0])
    res = screen_problem(np.array([0, 0, 0, 0, 5.0, 0]), p, far, 10.0, europa.tolerances)
    assert not res.accepted and res.reason == "fuel_exhausted"


def test_screen_entry_point_and_estimator(europa):
    lam = np.zeros(6)
    res = screen((lam[:3], lam[3:]), europa, build_target_orbit(
        europa.boundary.target_seed_state, 4.1055, 64, europa.mu), 1.0)
    assert not res.accepted
    s = Screener(config=europa, alpha=1.0, delta=1e-3)
    assert clone(s).get_params()["delta"] == 1e-3
    s.fit()
    flags = s.predict(np.zeros((2, 6)))
    assert flags.dtype == bool and flags.shape == (2,)
