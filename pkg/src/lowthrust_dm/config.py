"""Problem definitions, unit systems and the conditional-parameter map.

Problems are stored as INI files with the sections ``[problem]``, ``[units]``,
``[spacecraft]``, ``[alpha]``, ``[boundary]``, ``[search]`` and
``[tolerances]``.  Inline comments (``;``) carry the unit of each field.
Boundary states are given in natural units; everything else is SI.

Spacecraft mass is normalized by the initial wet mass, so ``m(0) = 1``.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

G0 = 9.80665

ACT_KEYS = ("phi0", "phi_dot0", "beta0", "beta_dot0", "s0", "s_dot0")


class ConfigError(ValueError):
    """Invalid or inconsistent problem configuration."""


class DomainError(ValueError):
    """A value lies outside the interval on which a map is defined."""


@dataclass(frozen=True)
class UnitSystem:
    distance_unit: float  # m per DU
    time_unit: float  # s per TU
    system_mass_unit: float  # kg per system MU
    spacecraft_mass_unit: float  # kg per spacecraft MU (= m0)

    def __post_init__(self):
        for name in ("distance_unit", "time_unit", "system_mass_unit", "spacecraft_mass_unit"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}")

    @property
    def velocity_unit(self) -> float:
        return self.distance_unit / self.time_unit

    @property
    def acceleration_unit(self) -> float:
        return self.distance_unit / self.time_unit**2

    @property
    def force_unit(self) -> float:
        return self.spacecraft_mass_unit * self.acceleration_unit

    def _scale(self, kind: str) -> float:
        scales = {
            "distance": self.distance_unit,
            "time": self.time_unit,
            "velocity": self.velocity_unit,
            "acceleration": self.acceleration_unit,
            "mass": self.spacecraft_mass_unit,
            "force": self.force_unit,
        }
        try:
            return scales[kind]
        except KeyError:
            raise ValueError(f"unknown quantity kind {kind!r}") from None

    def to_nu(self, value, kind: str):
        if np.ndim(value):
            value = np.asarray(value, dtype=float)
        return value / self._scale(kind)

    def to_si(self, value, kind: str):
        if np.ndim(value):
            value = np.asarray(value, dtype=float)
        return value * self._scale(kind)


@dataclass(frozen=True)
class SpacecraftParams:
    m0: float  # kg
    dry_mass: float  # kg
    isp: float  # s
    thrust_min: float  # N
    thrust_max: float  # N
    g0: float = G0  # m/s^2

    def __post_init__(self):
        if not 0 < self.dry_mass < self.m0:
            raise ConfigError("require 0 < dry_mass < m0")
        if not self.isp > 0:
            raise ConfigError("isp must be positive")
        if not 0 < self.thrust_min <= self.thrust_max:
            raise ConfigError("require 0 < thrust_min <= thrust_max")

    @property
    def exhaust_velocity(self) -> float:
        """Exhaust velocity ``c = isp * g0`` in m/s."""
        return self.isp * self.g0


@dataclass(frozen=True)
class BoundaryConditions:
    initial_state: tuple
    target_kind: str  # "periodic_orbit" or "manifold_file"
    target_seed_state: tuple | None = None
    target_period: float | None = None
    tau_f_range: tuple | None = None
    manifold_file: str | None = None
    target_points: int = 4096

    def __post_init__(self):
        if len(self.initial_state) != 6:
            raise ConfigError("initial_state needs 6 components")
        if self.target_kind == "periodic_orbit":
            if self.target_seed_state is None or len(self.target_seed_state) != 6:
                raise ConfigError("periodic_orbit target needs a 6-component seed state")
            if self.target_period is None or not self.target_period > 0:
                raise ConfigError("periodic_orbit target needs a positive period")
            if self.target_points < 2:
                raise ConfigError("target_points must be at least 2")
        elif self.target_kind == "manifold_file":
            if self.tau_f_range is None or not self.tau_f_range[0] < self.tau_f_range[1]:
                raise ConfigError("manifold_file target needs tau_f_min < tau_f_max")
        else:
            raise ConfigError(f"unknown target_kind {self.target_kind!r}")

    @property
    def tau_f_bounds(self) -> tuple[float, float]:
        if self.target_kind == "periodic_orbit":
            return 0.0, float(self.target_period)
        return float(self.tau_f_range[0]), float(self.tau_f_range[1])


@dataclass(frozen=True)
class AlphaMap:
    """Affine map ``T_max = thrust_offset + thrust_scale * alpha`` on ``[lo, hi]``."""

    thrust_offset: float
    thrust_scale: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.thrust_scale == 0:
            raise ConfigError("alpha map is not bijective (zero scale)")
        if not self.lo < self.hi:
            raise ConfigError("alpha interval must satisfy lo < hi")

    def to_thrust(self, alpha: float) -> float:
        if not (self.lo - 1e-12 <= alpha <= self.hi + 1e-12):
            raise DomainError(f"alpha={alpha} outside [{self.lo}, {self.hi}]")
        return self.thrust_offset + self.thrust_scale * alpha

    def to_alpha(self, thrust: float) -> float:
        alpha = (thrust - self.thrust_offset) / self.thrust_scale
        if not (self.lo - 1e-12 <= alpha <= self.hi + 1e-12):
            raise DomainError(f"thrust={thrust} N maps outside [{self.lo}, {self.hi}]")
        return alpha


@dataclass(frozen=True)
class SearchRanges:
    """Uniform sampling intervals of the adjoint control transformation.

    ``s0`` is either the switching value itself or, when
    ``s0_is_offset`` is set, the quantity ``S0 - lam_m0 * m0 / c``
    (that is, the initial primer magnitude).
    """

    phi0: tuple = (0.0, 0.0)
    phi_dot0: tuple = (0.0, 0.0)
    beta0: tuple = (0.0, 0.0)
    beta_dot0: tuple = (0.0, 0.0)
    s0: tuple = (0.0, 0.0)
    s_dot0: tuple = (0.0, 0.0)
    s0_is_offset: bool = False

    def __post_init__(self):
        for key in ACT_KEYS:
            lo, hi = getattr(self, key)
            if not lo <= hi:
                raise ConfigError(f"search range {key} has lo > hi")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, key) for key in ACT_KEYS], dtype=float)


@dataclass(frozen=True)
class Tolerances:
    delta: float  # global-search tolerance [NU]
    feasibility: float  # [NU]
    tau_s_max: float  # [TU], at the reference thrust if one is given
    tau_s_max_reference_thrust: float | None = None  # N
    grid_dt: float = 0.01  # TU
    rtol: float = 1e-12
    atol: float = 1e-12
    collision_radius: float = 1e-6
    refine_depth: int = 12  # sub-grid bisection levels; 0 scans the grid only
    lipschitz_safety: float = 1.5

    def __post_init__(self):
        if not self.delta >= self.feasibility > 0:
            raise ConfigError("require delta >= feasibility tolerance > 0")
        if not self.tau_s_max > 0:
            raise ConfigError("tau_s_max must be positive")
        if not self.grid_dt > 0:
            raise ConfigError("grid_dt must be positive")


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    mu: float
    units: UnitSystem
    spacecraft: SpacecraftParams
    boundary: BoundaryConditions
    alpha_map: AlphaMap
    search: SearchRanges
    tolerances: Tolerances
    objective_scale: float = 1.0  # k, fixed by lam_m0 = -1
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0 < self.mu < 0.5:
            raise ConfigError("mass ratio must satisfy 0 < mu < 1/2")
        if not self.objective_scale > 0:
            raise ConfigError("objective scale k must be positive")
        if not math.isclose(self.units.spacecraft_mass_unit, self.spacecraft.m0):
            raise ConfigError("spacecraft mass unit must equal m0")

    def alpha_to_thrust(self, alpha: float) -> float:
        return self.alpha_map.to_thrust(alpha)

    def thrust_to_alpha(self, thrust: float) -> float:
        return self.alpha_map.to_alpha(thrust)

    def tau_s_max_for(self, alpha: float) -> float:
        """Maximum shooting time, scaled inversely with thrust when a reference is set."""
        tol = self.tolerances
        if tol.tau_s_max_reference_thrust is None:
            return tol.tau_s_max
        return tol.tau_s_max * tol.tau_s_max_reference_thrust / self.alpha_to_thrust(alpha)

    def with_tolerances(self, **changes) -> "ProblemConfig":
        return replace(self, tolerances=replace(self.tolerances, **changes))

    def digest(self) -> str:
        """Stable content hash of the configuration."""
        return hashlib.sha256(repr(_canonical(self)).encode()).hexdigest()[:16]


def _canonical(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return tuple(
            (name, _canonical(getattr(obj, name)))
            for name, f in obj.__dataclass_fields__.items()
            if f.compare
        )
    if isinstance(obj, (tuple, list)):
        return tuple(_canonical(x) for x in obj)
    if isinstance(obj, float):
        return float.hex(obj)
    return obj


@dataclass(frozen=True)
class NondimensionalProblem:
    """Mission constants in natural units, for one thrust level."""

    mu: float
    c: float
    x0: np.ndarray
    m_dry: float
    t_max: float | None = None
    alpha: float | None = None
    m0: float = 1.0
    lam_m0: float = -1.0
    velocity_unit: float = 1.0  # m/s per NU, for reporting delta-v

    @property
    def lam_m_term(self) -> float:
        """``lam_m0 * m0 / c``, the switching-function offset at t = 0."""
        return self.lam_m0 * self.m0 / self.c


def nondimensionalize(config: ProblemConfig, alpha: float | None = None) -> NondimensionalProblem:
    units, sc = config.units, config.spacecraft
    c = units.to_nu(sc.exhaust_velocity, "velocity")
    t_max = None if alpha is None else units.to_nu(config.alpha_to_thrust(alpha), "force")
    return NondimensionalProblem(
        mu=config.mu,
        c=float(c),
        x0=np.array(config.boundary.initial_state, dtype=float),
        m_dry=sc.dry_mass / sc.m0,
        t_max=t_max,
        alpha=alpha,
        velocity_unit=units.velocity_unit,
    )


def _floats(text: str) -> tuple:
    return tuple(float(eval_number(x)) for x in text.replace("\n", " ").split(",") if x.strip())


def eval_number(text: str) -> float:
    """Parse a decimal number, also accepting ``pi`` expressions like ``pi-0.012``."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    allowed = set("0123456789.+-*/eE pi()")
    if not set(text) <= allowed:
        raise ConfigError(f"cannot parse number {text!r}")
    try:
        return float(eval(text, {"__builtins__": {}}, {"pi": math.pi}))  # noqa: S307
    except Exception as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc


def parse_config(text: str, source: str | None = None) -> ProblemConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    def get(section, key, default=None, conv=eval_number):
        try:
            raw = parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            if default is not None:
                return default
            raise ConfigError(f"missing [{section}] {key}") from None
        return conv(raw)

    def opt(section, key, conv=eval_number):
        if parser.has_option(section, key) and parser.get(section, key).strip():
            return conv(parser.get(section, key))
        return None

    sc = SpacecraftParams(
        m0=get("spacecraft", "m0"),
        dry_mass=get("spacecraft", "dry_mass"),
        isp=get("spacecraft", "isp"),
        thrust_min=get("spacecraft", "thrust_min"),
        thrust_max=get("spacecraft", "thrust_max"),
        g0=get("spacecraft", "g0", G0),
    )
    units = UnitSystem(
        distance_unit=get("units", "distance_unit"),
        time_unit=get("units", "time_unit"),
        system_mass_unit=get("units", "system_mass_unit"),
        spacecraft_mass_unit=sc.m0,
    )
    kind = get("boundary", "target_kind", conv=str.strip)
    manifold = opt("boundary", "manifold_file", conv=str.strip)
    if manifold and source and not Path(manifold).is_absolute():
        manifold = str(Path(source).parent / manifold)
    tau_f_range = opt("boundary", "tau_f_range", conv=_floats)
    boundary = BoundaryConditions(
        initial_state=get("boundary", "initial_state", conv=_floats),
        target_kind=kind,
        target_seed_state=opt("boundary", "target_seed_state", conv=_floats),
        target_period=opt("boundary", "target_period"),
        tau_f_range=tau_f_range,
        manifold_file=manifold,
        target_points=int(get("boundary", "target_points", 4096)),
    )
    alpha_map = AlphaMap(
        thrust_offset=get("alpha", "thrust_offset", 0.0),
        thrust_scale=get("alpha", "thrust_scale"),
        lo=get("alpha", "lo"),
        hi=get("alpha", "hi"),
    )
    ranges = {key: opt("search", key, conv=_floats) or (0.0, 0.0) for key in ACT_KEYS}
    offset = opt("search", "s0_minus_lam_m_term", conv=_floats)
    if offset is not None:
        ranges["s0"] = offset
    search = SearchRanges(**ranges, s0_is_offset=offset is not None)
    tolerances = Tolerances(
        delta=get("tolerances", "delta"),
        feasibility=get("tolerances", "feasibility"),
        tau_s_max=get("tolerances", "tau_s_max"),
        tau_s_max_reference_thrust=opt("tolerances", "tau_s_max_reference_thrust"),
        grid_dt=get("tolerances", "grid_dt", 0.01),
        rtol=get("tolerances", "rtol", 1e-12),
        atol=get("tolerances", "atol", 1e-12),
        collision_radius=get("tolerances", "collision_radius", 1e-6),
        refine_depth=int(get("tolerances", "refine_depth", 12)),
        lipschitz_safety=float(get("tolerances", "lipschitz_safety", 1.5)),
    )
    cfg = ProblemConfig(
        name=get("problem", "name", "problem", conv=str.strip),
        mu=get("problem", "mu"),
        units=units,
        spacecraft=sc,
        boundary=boundary,
        alpha_map=alpha_map,
        search=search,
        tolerances=tolerances,
        source=source,
    )
    for thrust in (sc.thrust_min, sc.thrust_max):
        cfg.thrust_to_alpha(thrust)
    return cfg


def load_config(path) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def builtin_config(name: str) -> ProblemConfig:
    """Load one of the bundled problems: ``europa_dro`` or ``gto_halo``."""
    ref = resources.files("lowthrust_dm.problems") / f"{name}.ini"
    with resources.as_file(ref) as path:
        return load_config(path)


def resolve_config(name_or_path) -> ProblemConfig:
    path = Path(name_or_path)
    if path.suffix == ".ini" or path.exists():
        return load_config(path)
    return builtin_config(str(name_or_path))
