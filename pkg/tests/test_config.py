import math

import numpy as np
import pytest

from lowthrust_dm.config import (AlphaMap, ConfigError, DomainError, UnitSystem, load_config,
                                 nondimensionalize, parse_config, resolve_config)


def test_europa_exhaust_velocity_hand_arithmetic(europa):
    p = nondimensionalize(europa)
    c_nu = 7365 * 9.80665 * 48822.76 / 670.9e6
    assert p.c == pytest.approx(c_nu, rel=1e-12)
    assert p.lam_m_term == pytest.approx(-1 / c_nu, rel=1e-12)
    assert p.m0 == 1.0 and p.lam_m0 == -1.0
    assert p.m_dry == pytest.approx(0.4)


def test_europa_thrust_hand_arithmetic(europa):
    p = nondimensionalize(europa, 1.0)
    t_nu = 4.984 * 48822.76**2 / (25000.0 * 670.9e6)
    assert p.t_max == pytest.approx(t_nu, rel=1e-12)


def test_gto_mass_costate_anchor(gto):
    p = nondimensionalize(gto)
    assert p.lam_m0 * p.m0 / p.c == pytest.approx(-0.10447, abs=5e-5)


def test_identity_units():
    u = UnitSystem(1.0, 1.0, 1.0, 1.0)
    assert u.to_nu(3000.0 * 9.80665, "velocity") == 3000.0 * 9.80665


@pytest.mark.parametrize("alpha,thrust", [(0.2, 0.9968), (1.0, 4.984)])
def test_europa_alpha_map(europa, alpha, thrust):
    assert europa.alpha_to_thrust(alpha) == pytest.approx(thrust, abs=1e-12)
    assert europa.thrust_to_alpha(thrust) == pytest.approx(alpha, abs=1e-15)


def test_gto_alpha_map(gto):
    assert gto.alpha_to_thrust(0.0) == pytest.approx(0.5)
    assert gto.alpha_to_thrust(1.0) == pytest.approx(1.0)


def test_alpha_domain(europa):
    with pytest.raises(DomainError):
        europa.alpha_to_thrust(0.05)
    with pytest.raises(DomainError):
        europa.thrust_to_alpha(6.0)


def test_alpha_roundtrip_and_monotone(rng):
    m = AlphaMap(0.5, 0.5, 0.0, 1.0)
    a = np.sort(rng.uniform(0, 1, 200))
    t = np.array([m.to_thrust(x) for x in a])
    assert np.all(np.diff(t) > 0)
    back = np.array([m.to_alpha(x) for x in t])
    assert np.max(np.abs(back - a)) < 1e-15


def test_unit_roundtrip(rng, europa):
    u = europa.units
    for kind in ("distance", "time", "velocity", "acceleration", "mass", "force"):
        v = rng.uniform(-1e6, 1e6, 10)
        np.testing.assert_allclose(u.to_si(u.to_nu(v, kind), kind), v, rtol=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
def test_nonpositive_scale_rejected(bad):
    with pytest.raises(ConfigError):
        UnitSystem(bad, 1.0, 1.0, 1.0)


def _ini(**over):
    with open(resolve_config("europa_dro").source) as fh:
        text = fh.read()
    for key, value in over.items():
        lines = [f"{key} = {value}" if ln.split("=")[0].strip() == key else ln
                 for ln in text.splitlines()]
        text = "\n".join(lines)
    return text


def test_parse_roundtrip_matches_builtin(europa):
    cfg = parse_config(_ini(), source=europa.source)
    assert cfg.digest() == europa.digest()


@pytest.mark.parametrize("over", [dict(mu="0.6"), dict(dry_mass="30000.0"),
                                  dict(delta="1e-5"), dict(thrust_scale="0.0")])
def test_invariants_enforced(over):
    with pytest.raises(ConfigError):
        parse_config(_ini(**over))


def test_tau_s_max_scales_inversely(europa):
    assert europa.tau_s_max_for(1.0) == pytest.approx(60.0)
    assert europa.tau_s_max_for(0.4) == pytest.approx(150.0)


def test_load_config_from_path(tmp_path, europa):
    p = tmp_path / "p.ini"
    p.write_text(_ini())
    assert load_config(p).digest() == europa.digest()
    assert resolve_config(str(p)).digest() == europa.digest()
