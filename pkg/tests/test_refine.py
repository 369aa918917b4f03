import math

import numpy as np
import pytest

from lowthrust_dm.act import draw_costates
from lowthrust_dm.indirect import DecisionVector, control_law, propagate_extremal
from lowthrust_dm.refine import ResidualError, refine, residual
from lowthrust_dm.screening import build_target_orbit, screen_problem

TAU_S = 3.0


@pytest.fixture(scope="module")
def built(europa, europa_problem):
    """A decision whose target is its own propagated endpoint (zero residual by construction)."""
    lam, _, _ = draw_costates(europa_problem, europa.search, 1, 7)
    d = DecisionVector(TAU_S, 0.0, 1.0, lam[0, :3], lam[0, 3:])
    final = propagate_extremal(d, europa_problem).final[:6]
    return d, final


def test_constructed_residual_vanishes(built, europa_problem):
    d, target = built
    assert np.max(np.abs(residual(d, europa_problem, target))) <= 1e-10


def test_zero_shooting_time_residual(europa_problem, rng):
    target = rng.normal(size=6)
    d = DecisionVector(0.0, 0.0, 0.0, [0.1, 0, 0], [0, 0.2, 0])
    np.testing.assert_array_equal(residual(d, europa_problem, target),
                                  europa_problem.x0 - target)


def test_residual_matches_screening_distance(europa, europa_problem):
    b = europa.boundary
    orbit = build_target_orbit(b.target_seed_state, b.target_period, 1024, europa.mu)
    lam, _, _ = draw_costates(europa_problem, europa.search, 1, 3)
    res = screen_problem(lam[0], europa_problem, orbit, 8.0, europa.tolerances, delta=math.inf)
    r = residual(res.decision, europa_problem, res.target_state)
    # dense output versus a direct integration to the same time
    assert np.max(np.abs(r)) == pytest.approx(res.delta_c_min, abs=1e-8)


def test_already_feasible_takes_no_iterations(built, europa_problem):
    d, target = built
    rep = refine(d, europa_problem, target, tol=1e-6)
    assert rep.converged and rep.iterations == 0 and rep.decision == d


def test_perturbation_reconverges_quickly(built, europa_problem, rng):
    d, target = built
    start = d.replace(lam_r0=d.lam_r0 + 1e-6 * rng.normal(size=3),
                      lam_v0=d.lam_v0 + 1e-6 * rng.normal(size=3))
    rep = refine(start, europa_problem, target, tol=1e-9)
    assert rep.converged and rep.iterations <= 5
    assert rep.residual_norm <= 1e-9
    assert rep.initial_residual_norm > rep.residual_norm
    # independent check of the returned decision
    assert np.max(np.abs(residual(rep.decision, europa_problem, target))) <= 1e-9


def test_best_residual_never_worsens(built, europa_problem, rng):
    d, target = built
    for k in range(3):
        start = d.replace(lam_v0=d.lam_v0 + 0.05 * rng.normal(size=3))
        r0 = np.max(np.abs(residual(start, europa_problem, target)))
        for iters in (1, 3):
            rep = refine(start, europa_problem, target, tol=1e-12, max_iters=iters)
            assert rep.residual_norm <= r0
            assert rep.initial_residual_norm == pytest.approx(r0, rel=1e-12)
            assert rep.iterations <= iters


def test_free_times_preserves_fixed_coast_endpoint(built, europa_problem, rng):
    d, target = built
    start = d.replace(lam_r0=d.lam_r0 + 1e-5 * rng.normal(size=3))
    rep = refine(start, europa_problem, target, tol=1e-9, free_times=True)
    assert rep.converged and rep.residual_norm <= 1e-9
    assert rep.decision.tau_s > 0 and rep.decision.tau_f >= 0


def test_refined_extremal_obeys_control_law(built, europa_problem, rng):
    d, target = built
    start = d.replace(lam_v0=d.lam_v0 + 1e-4 * rng.normal(size=3))
    rep = refine(start, europa_problem, target, tol=1e-9)
    grid = np.linspace(0.0, rep.decision.tau_s, 50)
    traj = propagate_extremal(rep.decision, europa_problem, sample_grid=grid)
    assert traj.final[13] < 0  # lambda_m stays negative
    c, T = europa_problem.c, europa_problem.t_max
    for y in traj.states:
        u = control_law(y, c, T)
        S = np.linalg.norm(y[10:13]) + y[13] * y[6] / c
        assert u.sigma == (1.0 if S > 0 else 0.0)
        np.testing.assert_allclose(u.u_hat, -y[10:13] / np.linalg.norm(y[10:13]), atol=1e-15)


def test_unpropagatable_guess_raises(europa_problem):
    # full thrust for longer than the propellant lasts (about 4500 TU at alpha = 1)
    d = DecisionVector(6000.0, 0.0, 0.0, [0, 0, 0], [500.0, 0, 0])
    with pytest.raises(ResidualError):
        refine(d, europa_problem, np.zeros(6))
