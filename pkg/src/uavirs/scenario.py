"""Scenario configuration: geometry, radio constants, solver and learning settings.

Everything inside a :class:`Scenario` is SI linear (W, m, s, Hz). Decibel
quantities only exist in the JSON file and are converted on load.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "Propulsion",
    "PenaltyConfig",
    "SolverConfig",
    "LearningConfig",
    "Scenario",
    "Association",
    "dbm_to_watts",
    "db_to_linear",
    "enumerate_associations",
    "load_scenario",
    "load_scenario_file",
    "dump_scenario",
    "default_scenario",
]


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration files."""


def dbm_to_watts(x: float) -> float:
    return 10.0 ** ((float(x) - 30.0) / 10.0)


def db_to_linear(x: float) -> float:
    return 10.0 ** (float(x) / 10.0)


@dataclass(frozen=True)
class Propulsion:
    """Rotary-wing power model constants (W, m/s, rad/s, m, kg/m^3, m^2)."""

    P_blade: float = 79.86
    P_induced: float = 88.63
    v_rotor: float = 4.03
    omega: float = 300.0
    rotor_radius: float = 0.4
    solidity: float = 0.05
    disk_area: float = 0.503
    air_density: float = 1.225
    drag_ratio: float = 0.6

    @property
    def tip_speed(self) -> float:
        return self.omega * self.rotor_radius


@dataclass(frozen=True)
class PenaltyConfig:
    """Settings of the penalty SCA for decoding order and power."""

    zeta: float = 10.0
    eps: float = 1e-5
    max_iter: int = 50
    round_tol: float = 1e-3
    zeta_start: float = 1e-4
    zeta_growth: float = 2.0


@dataclass(frozen=True)
class SolverConfig:
    """Trajectory loop settings and numerical tolerances."""

    eps_outer: float = 1e-4
    eps_inner: float = 1e-4
    max_outer: int = 15
    max_inner: int = 30
    v_floor: float = 0.1
    tol: float = 1e-8
    r_min: float = 1.0


@dataclass(frozen=True)
class LearningConfig:
    lr: float = 1e-3
    batch: int = 32
    discount: float = 0.99
    deflation: float = 1.0
    hidden: int = 64
    expert_starts: int = 20
    expert_slots: int = 100
    online_steps: int = 300
    episode_slots: int = 100
    updates_per_step: int = 20

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ConfigError("learning.discount: must lie in (0, 1)")
        if self.deflation <= 0:
            raise ConfigError("learning.deflation: must be positive")
        for name in ("batch", "hidden", "expert_starts", "expert_slots", "episode_slots"):
            if getattr(self, name) < 1:
                raise ConfigError(f"learning.{name}: must be at least 1")
        if self.online_steps < 0 or self.updates_per_step < 0 or self.lr < 0:
            raise ConfigError("learning: step counts and learning rate must be non-negative")


@dataclass(frozen=True)
class Association:
    """Per-user IRS index (0-based) with a binary matrix view ``alpha[s, i]``."""

    assign: tuple
    S: int

    def __post_init__(self):
        object.__setattr__(self, "assign", tuple(int(a) for a in self.assign))
        if any(a < 0 or a >= self.S for a in self.assign):
            raise ValueError("IRS index out of range")

    @property
    def N(self) -> int:
        return len(self.assign)

    @cached_property
    def alpha(self) -> np.ndarray:
        a = np.zeros((self.S, self.N))
        a[list(self.assign), list(range(self.N))] = 1.0
        a.setflags(write=False)
        return a

    def counts(self) -> np.ndarray:
        return np.bincount(np.asarray(self.assign, dtype=int), minlength=self.S)

    def feasible(self, J_b: int) -> bool:
        return bool(np.all(self.counts() <= J_b))

    @classmethod
    def from_alpha(cls, alpha) -> "Association":
        alpha = np.asarray(alpha)
        if np.any(alpha.sum(axis=0) != 1):
            raise ValueError("each user must be assigned to exactly one IRS")
        return cls(tuple(int(k) for k in np.argmax(alpha, axis=0)), alpha.shape[0])


def enumerate_associations(N: int, S: int, J_b: int) -> list:
    """All assignments of N users to S IRSs with at most J_b users per IRS.

    Order is lexicographic in the per-user IRS tuple, so action indices are
    stable across runs.
    """
    if N < 1 or S < 1:
        raise ValueError("need at least one user and one IRS")
    out = []
    for combo in itertools.product(range(S), repeat=N):
        if max(np.bincount(combo, minlength=S)) <= J_b:
            out.append(Association(combo, S))
    return out


def _vec(x, n, name):
    arr = np.broadcast_to(np.asarray(x, dtype=float), (n,)).astype(float)
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class Scenario:
    """Immutable world description.

    ``rician_rg`` and ``xi_rg`` are indexed ``[s][i]``.
    """

    users: tuple
    irs: tuple
    uav_start: tuple
    z_min: float = 50.0
    z_max: float = 150.0
    v_max: float = 20.0
    tau: float = 1.0
    T: int = 100
    map_size: tuple = (500.0, 500.0)
    beta: float = 1e-5
    f_c: float = 2.4e9
    c: float = 3e8
    J_b: int = 100
    J_I: int = 100
    D_b: float = 0.0625
    D_I: float = 0.0625
    A_amp: float = 0.9
    rician_ug: tuple = ()
    rician_rg: tuple = ()
    xi_ug: tuple = ()
    xi_rg: tuple = ()
    noise: float = 1e-11
    p_max: float = 0.1
    eta: float = 1.0
    propulsion: Propulsion = field(default_factory=Propulsion)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)

    def __post_init__(self):
        users = tuple(tuple(float(c) for c in u) for u in self.users)
        irs = tuple(tuple(float(c) for c in s) for s in self.irs)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "irs", irs)
        object.__setattr__(self, "uav_start", tuple(float(c) for c in self.uav_start))
        object.__setattr__(self, "map_size", tuple(float(c) for c in self.map_size))
        N, S = len(users), len(irs)
        ug = self.rician_ug if len(np.atleast_1d(self.rician_ug)) else 10.0
        rg = self.rician_rg if np.size(self.rician_rg) else 10.0
        xug = self.xi_ug if len(np.atleast_1d(self.xi_ug)) else 2.5
        xrg = self.xi_rg if np.size(self.xi_rg) else 2.5
        object.__setattr__(self, "rician_ug", _vec(ug, N, "rician_ug"))
        object.__setattr__(self, "xi_ug", _vec(xug, N, "xi_ug"))
        for name, val in (("rician_rg", rg), ("xi_rg", xrg)):
            arr = np.broadcast_to(np.asarray(val, dtype=float), (S, N))
            object.__setattr__(self, name, tuple(tuple(float(v) for v in row) for row in arr))
        object.__setattr__(self, "J_b", int(self.J_b))
        object.__setattr__(self, "J_I", int(self.J_I))
        object.__setattr__(self, "T", int(self.T))
        self.validate()

    # -- validation -------------------------------------------------------

    def validate(self):
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")

        if len(self.users) < 1:
            bad("geometry.users", "at least one user required")
        if len(self.irs) < 1:
            bad("geometry.irs", "at least one IRS required")
        for path, pts in (("geometry.users", self.users), ("geometry.irs", self.irs),
                          ("geometry.uav_start", (self.uav_start,))):
            for k, p in enumerate(pts):
                if len(p) != 3 or not all(math.isfinite(c) for c in p):
                    bad(f"{path}[{k}]", "position must be three finite coordinates")
        if self.z_min > self.z_max:
            bad("geometry.z_min", "altitude bounds inverted")
        if not self.z_min <= self.uav_start[2] <= self.z_max:
            bad("geometry.uav_start", "start altitude outside [z_min, z_max]")
        if not (self.tau > 0):
            bad("geometry.tau", "slot duration must be positive")
        if self.T < 1:
            bad("geometry.T", "at least one slot required")
        if not (self.v_max > 0):
            bad("geometry.v_max", "maximum speed must be positive")
        if not (0 < self.A_amp < 1):
            bad("irs.A_amp", "amplitude loss must lie in (0, 1)")
        if not (self.p_max > 0):
            bad("radio.p_max", "transmit power must be positive")
        if not (self.noise > 0):
            bad("radio.noise", "noise power must be positive")
        if self.J_b < len(self.users):
            bad("irs.J_b", "fewer element rows than users")
        if self.J_I < 1:
            bad("irs.J_I", "need at least one element column")
        for name in ("beta", "f_c", "c", "D_b", "D_I", "eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                bad(f"radio.{name}", "must be positive and finite")
        for name in ("rician_ug", "xi_ug"):
            if any(not (v > 0) for v in getattr(self, name)):
                bad(f"radio.{name}", "must be positive")
        for name in ("rician_rg", "xi_rg"):
            if any(not (v > 0) for row in getattr(self, name) for v in row):
                bad(f"radio.{name}", "must be positive")

    # -- numpy views ------------------------------------------------------

    @cached_property
    def user_pos(self) -> np.ndarray:
        return _frozen(np.array(self.users, dtype=float))

    @cached_property
    def irs_pos(self) -> np.ndarray:
        return _frozen(np.array(self.irs, dtype=float))

    @cached_property
    def start(self) -> np.ndarray:
        return _frozen(np.array(self.uav_start, dtype=float))

    @cached_property
    def kappa_ug(self) -> np.ndarray:
        g = np.array(self.rician_ug)
        return _frozen(g / (g + 1.0))

    @cached_property
    def kappa_rg(self) -> np.ndarray:
        g = np.array(self.rician_rg)
        return _frozen(g / (g + 1.0))

    @cached_property
    def xi_ug_arr(self) -> np.ndarray:
        return _frozen(np.array(self.xi_ug))

    @cached_property
    def xi_rg_arr(self) -> np.ndarray:
        return _frozen(np.array(self.xi_rg))

    @cached_property
    def actions(self) -> list:
        return enumerate_associations(self.N, self.S, self.J_b)

    @property
    def N(self) -> int:
        return len(self.users)

    @property
    def S(self) -> int:
        return len(self.irs)

    @property
    def wavelength(self) -> float:
        return self.c / self.f_c

    def with_changes(self, **kw) -> "Scenario":
        return replace(self, **kw)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# JSON boundary
# --------------------------------------------------------------------------

_GEOMETRY = ("users", "irs", "uav_start", "z_min", "z_max", "v_max", "tau", "T", "map_size")
_IRS = ("J_b", "J_I", "D_b", "D_I", "A_amp")
_RADIO_PLAIN = ("beta", "f_c", "c", "xi_ug", "xi_rg", "eta")


def _pick(section: Mapping, key: str, path: str, linear: str | None = None,
          db: str | None = None, dbm: str | None = None):
    """Read a quantity that may be given as linear, dB or dBm."""
    hits = [k for k in (linear, db, dbm) if k and k in section]
    if len(hits) > 1:
        raise ConfigError(f"{path}: give only one of {', '.join(hits)}")
    if not hits:
        return None
    k = hits[0]
    val = section[k]
    if k == linear:
        return val
    conv = db_to_linear if k == db else dbm_to_watts
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        return conv(float(arr))
    return np.vectorize(conv)(arr).tolist()


def _section(doc: Mapping, name: str) -> Mapping:
    sec = doc.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"{name}: section must be an object")
    return sec


def _dataclass_from(cls, sec: Mapping, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    kw = {}
    for f in fields(cls):
        if f.name in sec:
            typ = type(getattr(cls(), f.name))
            try:
                kw[f.name] = typ(sec[f.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{f.name}: {exc}") from None
    return cls(**kw)


def scenario_from_dict(doc: Mapping) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ConfigError("top level must be an object")
    geo = _section(doc, "geometry")
    for key in ("users", "irs", "uav_start"):
        if key not in geo:
            raise ConfigError(f"geometry.{key}: required key missing")
    kw: dict[str, Any] = {k: geo[k] for k in _GEOMETRY if k in geo}
    unknown = set(geo) - set(_GEOMETRY)
    if unknown:
        raise ConfigError(f"geometry.{sorted(unknown)[0]}: unknown key")

    irs = _section(doc, "irs")
    unknown = set(irs) - set(_IRS)
    if unknown:
        raise ConfigError(f"irs.{sorted(unknown)[0]}: unknown key")
    kw.update({k: irs[k] for k in _IRS if k in irs})

    radio = _section(doc, "radio")
    allowed = set(_RADIO_PLAIN) | {"noise_w", "noise_dbm", "p_max_w", "p_max_dbm",
                                   "rician_ug", "rician_ug_db", "rician_rg", "rician_rg_db"}
    unknown = set(radio) - allowed
    if unknown:
        raise ConfigError(f"radio.{sorted(unknown)[0]}: unknown key")
    kw.update({k: radio[k] for k in _RADIO_PLAIN if k in radio})
    for name, lin, db, dbm in (("noise", "noise_w", None, "noise_dbm"),
                               ("p_max", "p_max_w", None, "p_max_dbm"),
                               ("rician_ug", "rician_ug", "rician_ug_db", None),
                               ("rician_rg", "rician_rg", "rician_rg_db", None)):
        v = _pick(radio, name, f"radio.{name}", linear=lin, db=db, dbm=dbm)
        if v is not None:
            kw[name] = v

    kw["propulsion"] = _dataclass_from(Propulsion, _section(doc, "propulsion"), "propulsion")
    kw["penalty"] = _dataclass_from(PenaltyConfig, _section(doc, "noma"), "noma")
    kw["solver"] = _dataclass_from(SolverConfig, _section(doc, "solver"), "solver")
    kw["learning"] = _dataclass_from(LearningConfig, _section(doc, "learning"), "learning")
    extra = set(doc) - {"geometry", "radio", "irs", "noma", "propulsion", "learning", "solver",
                        "schema_version"}
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown section")
    try:
        return Scenario(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_scenario(config_text: str) -> Scenario:
    """Parse JSON configuration text into a validated :class:`Scenario`."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse failure: {exc}") from None
    return scenario_from_dict(doc)


def load_scenario_file(path) -> Scenario:
    return load_scenario(Path(path).read_text())


def scenario_to_dict(sc: Scenario) -> dict:
    """Inverse of :func:`scenario_from_dict`; writes linear units only."""
    return {
        "schema_version": 1,
        "geometry": {
            "users": [list(u) for u in sc.users],
            "irs": [list(s) for s in sc.irs],
            "uav_start": list(sc.uav_start),
            "z_min": sc.z_min, "z_max": sc.z_max, "v_max": sc.v_max,
            "tau": sc.tau, "T": sc.T, "map_size": list(sc.map_size),
        },
        "radio": {
            "beta": sc.beta, "f_c": sc.f_c, "c": sc.c,
            "noise_w": sc.noise, "p_max_w": sc.p_max, "eta": sc.eta,
            "rician_ug": list(sc.rician_ug), "rician_rg": [list(r) for r in sc.rician_rg],
            "xi_ug": list(sc.xi_ug), "xi_rg": [list(r) for r in sc.xi_rg],
        },
        "irs": {"J_b": sc.J_b, "J_I": sc.J_I, "D_b": sc.D_b, "D_I": sc.D_I, "A_amp": sc.A_amp},
        "propulsion": asdict(sc.propulsion),
        "noma": asdict(sc.penalty),
        "solver": asdict(sc.solver),
        "learning": asdict(sc.learning),
    }


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2)


DEFAULT_USERS = ((200.0, 310.0, 0.0), (330.0, 220.0, 0.0), (280.0, 40.0, 0.0))


def default_scenario(**overrides) -> Scenario:
    """Three users, two IRSs on a 500 m square map."""
    base = Scenario(
        users=DEFAULT_USERS,
        irs=((250.0, 250.0, 30.0), (250.0, 0.0, 30.0)),
        uav_start=(0.0, 0.0, 100.0),
        rician_ug=db_to_linear(10.0),
        rician_rg=db_to_linear(10.0),
        noise=dbm_to_watts(-80.0),
        p_max=dbm_to_watts(20.0),
    )
    return replace(base, **overrides) if overrides else base
