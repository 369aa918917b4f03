import csv

import numpy as np
import pytest

from lowthrust_dm.act import draw_costates
from lowthrust_dm.config import NondimensionalProblem
from lowthrust_dm.indirect import (TRAJECTORY_COLUMNS, AugmentedState, ControlOutput,
                                   DecisionVector, FuelExhaustedError, augmented_rhs, control_law,
                                   hamiltonian, optimal_hamiltonian, propagate_extremal,
                                   switching_function)

from conftest import MU_EM, MU_EUROPA, random_states


def random_aug(rng, mu, n):
    xs = random_states(rng, n, mu)
    out = []
    for x in xs:
        m = rng.uniform(0.5, 1.0)
        lam = rng.normal(size=7)
        out.append(np.concatenate([x, [m], lam[:6], [-abs(lam[6])]]))
    return np.array(out)


def test_control_simple():
    y = AugmentedState([1, 0, 0], [0, 0, 0], 1.0, [0, 0, 0], [0, 1, 0], 0.0)
    ctl = control_law(y, c=1.0)
    np.testing.assert_array_equal(ctl.u_hat, [0, -1, 0])
    assert ctl.S == 1.0 and ctl.sigma == 1.0


def test_control_zero_primer_anchor():
    y = AugmentedState([1, 0, 0], [0, 0, 0], 1.0, [0, 0, 0], [0, 0, 0], -1.0)
    ctl = control_law(y, c=9.57195)
    assert ctl.S == pytest.approx(-0.10447, abs=5e-5)
    assert ctl.sigma == 0.0
    np.testing.assert_array_equal(ctl.u_hat, [1, 0, 0])


def test_tie_breaks_to_coast():
    y = AugmentedState([1, 0, 0], [0, 0, 0], 1.0, [0, 0, 0], [0.5, 0, 0], -1.0)
    assert control_law(y, c=2.0).S == 0.0
    assert control_law(y, c=2.0).sigma == 0.0


def test_control_minimizes_hamiltonian(rng):
    for y in random_aug(rng, MU_EM, 20):
        c, T = 1.3, 0.05
        opt = control_law(y, c)
        h_opt = hamiltonian(y, opt, c, T, MU_EM)
        u = rng.normal(size=(1000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        sig = rng.uniform(0, 1, 1000)
        for uu, s in zip(u, sig):
            assert h_opt <= hamiltonian(y, ControlOutput(uu, s, 0.0), c, T, MU_EM) + 1e-15


def test_hamiltonian_forms(rng):
    y = np.zeros(14)
    y[:6] = [0.5, 0.2, 0.1, 0.1, 0.2, 0.0]
    y[6] = 1.0
    assert hamiltonian(y, ControlOutput(np.array([1.0, 0, 0]), 1.0, 0.0), 1.0, 0.1, MU_EM) == 0.0
    for y in random_aug(rng, MU_EM, 50):
        a = hamiltonian(y, control_law(y, 1.1), 1.1, 0.07, MU_EM)
        b = optimal_hamiltonian(y, 1.1, 0.07, MU_EM)
        assert a == pytest.approx(b, abs=1e-14 * max(1.0, abs(a)))


def test_coast_hamiltonian(rng):
    from lowthrust_dm.cr3bp import accel
    y = random_aug(rng, MU_EM, 1)[0]
    h = hamiltonian(y, ControlOutput(np.array([0, 1.0, 0]), 0.0, 0.0), 1.0, 0.3, MU_EM)
    assert h == pytest.approx(y[7:10] @ y[3:6] + y[10:13] @ accel(y[:6], MU_EM), abs=1e-15)


def test_coast_zero_costates():
    y = np.zeros(14)
    y[:6] = [0.5, 0.2, 0.1, 0.1, 0.2, 0.0]
    y[6] = 1.0
    d = augmented_rhs(y, MU_EM, 1.0, 0.1)
    np.testing.assert_array_equal(d[6:], np.zeros(8))


@pytest.mark.parametrize("mu", [MU_EM, MU_EUROPA])
def test_costate_rates_are_hamiltonian_gradient(rng, mu):
    c, T = 1.7, 0.04
    h = 1e-6
    for y in random_aug(rng, mu, 50):
        ctl = control_law(y, c)
        d = augmented_rhs(y, mu, c, T)
        grad = np.empty(7)
        dlam = np.empty(7)
        for k in range(7):
            e = np.zeros(14)
            e[k] = h
            grad[k] = (hamiltonian(y + e, ctl, c, T, mu) - hamiltonian(y - e, ctl, c, T, mu)) / (2 * h)
            e = np.zeros(14)
            e[7 + k] = h
            dlam[k] = (hamiltonian(y + e, ctl, c, T, mu) - hamiltonian(y - e, ctl, c, T, mu)) / (2 * h)
        np.testing.assert_allclose(d[7:], -grad, rtol=1e-6, atol=1e-8 * np.max(np.abs(grad)))
        np.testing.assert_allclose(d[:7], dlam, rtol=1e-6, atol=1e-9)


def test_thrusting_mass_costate_rate():
    y = np.array([0.9, 0.1, 0, 0, 0.3, 0, 0.8, 0, 0, 0, 0.3, 0.4, 0, -0.1])
    d = augmented_rhs(y, MU_EM, 2.0, 0.05)
    assert switching_function(y, 2.0) > 0
    assert d[13] == pytest.approx(-0.5 * 0.05 / 0.8**2)
    assert d[6] == pytest.approx(-0.05 / 2.0)


def _europa_extremals(europa, europa_problem, n, seed=3):
    lam, _, _ = draw_costates(europa_problem, europa.search, n, seed)
    return [DecisionVector(20.0, 0.0, 0.0, l[:3], l[3:]) for l in lam]


def test_zero_duration(europa, europa_problem):
    d = _europa_extremals(europa, europa_problem, 1)[0].replace(tau_s=0.0)
    traj = propagate_extremal(d, europa_problem, sample_grid=[0.0])
    np.testing.assert_array_equal(traj.final[:6], europa_problem.x0)
    assert traj.dv == 0.0


def test_hamiltonian_and_monotonicity(europa, europa_problem):
    grid = np.linspace(0, 20.0, 2001)
    seen_switch = False
    for d in _europa_extremals(europa, europa_problem, 6):
        traj = propagate_extremal(d, europa_problem, sample_grid=grid)
        p = europa_problem
        H = np.array([optimal_hamiltonian(y, p.c, p.t_max, p.mu) for y in traj.states])
        assert np.max(np.abs(H - H[0])) <= 1e-8
        assert np.all(np.diff(traj.states[:, 6]) <= 0)
        assert np.all(np.diff(traj.states[:, 13]) <= 1e-15)
        if traj.switch_times.size:
            seen_switch = True
            on = propagate_extremal(d, p, sample_grid=traj.switch_times)
            assert np.max(np.abs(on.S)) <= 1e-10
    assert seen_switch


def test_delta_v_matches_thrust_integral(europa, europa_problem):
    p = europa_problem
    d = _europa_extremals(europa, p, 1, seed=11)[0]
    traj = propagate_extremal(d, p)
    edges = np.unique(np.concatenate([[0.0], traj.switch_times, [d.tau_s]]))
    x, w = np.polynomial.legendre.leggauss(20)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        sub = np.linspace(a, b, int(np.ceil((b - a) / 0.25)) + 1)
        for s0, s1 in zip(sub[:-1], sub[1:]):
            t = 0.5 * (s1 - s0) * x + 0.5 * (s1 + s0)
            st = propagate_extremal(d, p, sample_grid=t).states
            S = np.linalg.norm(st[:, 10:13], axis=1) + st[:, 13] * st[:, 6] / p.c
            sig = float(np.median(S > 0))  # constant inside one arc
            total += 0.5 * (s1 - s0) * np.sum(w * sig * p.t_max / st[:, 6])
    assert traj.dv == pytest.approx(total, abs=1e-9)
    assert traj.dv_mps == pytest.approx(traj.dv * p.velocity_unit)


def test_fuel_exhaustion_time():
    p = NondimensionalProblem(mu=MU_EM, c=1.0, x0=np.array([0.5, 0, 0, 0, 0.5, 0]), m_dry=0.9,
                              t_max=0.5)
    d = DecisionVector(1.0, 0.0, 0.0, [0, 0, 0], [0, 5.0, 0])
    with pytest.raises(FuelExhaustedError) as err:
        propagate_extremal(d, p)
    assert err.value.t_last == pytest.approx(0.2, abs=1e-9)


def test_tau_i_must_be_zero(europa_problem):
    with pytest.raises(ValueError):
        propagate_extremal(DecisionVector(1.0, 0.5, 0.0, [0, 0, 0], [0, 1, 0]), europa_problem)


def test_decision_vector_roundtrip():
    u = np.arange(10, dtype=float)
    assert np.array_equal(DecisionVector.from_array(u).as_array(), u)
    with pytest.raises(ValueError):
        DecisionVector.from_array(np.zeros(9))


def test_trajectory_csv(tmp_path, europa, europa_problem):
    d = _europa_extremals(europa, europa_problem, 1)[0]
    traj = propagate_extremal(d, europa_problem, sample_grid=np.linspace(0, 20, 11))
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS
    assert len(rows) == 12
    assert float(rows[-1][0]) == 20.0
    assert float(rows[1][7]) == 1.0
