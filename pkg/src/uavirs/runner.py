"""Episode runners (AISLE, fixed-order baseline, enumeration upper bound) and sweeps.

Every slot follows the same pipeline: pick an association at L[t], move with
the trajectory step computed from the initial order and uniform power, then
choose order and power at L[t]. The slot reward is the energy efficiency with
rates at L[t] and the speed of the leg L[t] -> L[t+1].
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .energy import min_propulsion_power, power_from_speed
from .imitation import QFunction, policy, slot_inputs
from .noma import rates
from .scenario import Scenario, dbm_to_watts
from .sic_power import optimize_fixed_order, optimize_sic_power
from .trajectory import optimize_step

log = logging.getLogger(__name__)

__all__ = [
    "SlotRecord",
    "EpisodeResult",
    "SweepTable",
    "run_aisle",
    "run_fsd",
    "run_upper_bound",
    "run_algorithm",
    "sweep",
    "episode_csv",
    "episode_summary",
    "write_episode",
    "ALGORITHMS",
    "MAX_ENUMERATION",
]

SCHEMA_VERSION = 1
ALGORITHMS = ("aisle", "fsd", "upper")
MAX_ENUMERATION = 10_000


@dataclass
class SlotRecord:
    t: int
    uav_pos: np.ndarray        # L[t]
    next_pos: np.ndarray       # L[t+1]
    action: int
    alpha: np.ndarray          # (S, N)
    w: np.ndarray              # (N, N)
    p: np.ndarray              # (N,)
    rates: np.ndarray          # (N,)
    p_fly: float
    p_sum: float
    ee: float
    effective: np.ndarray      # (N,) bool, rate >= R_min

    @property
    def velocity(self) -> np.ndarray:
        return self.next_pos - self.uav_pos


@dataclass
class EpisodeResult:
    algorithm: str
    seed: int
    records: list = field(default_factory=list)
    r_min: float = 1.0

    @property
    def total_ee(self) -> float:
        return float(sum(r.ee for r in self.records))

    @property
    def avg_effective_throughput(self) -> float:
        if not self.records:
            return 0.0
        return float(sum(np.sum(r.rates * r.effective) for r in self.records) / len(self.records))

    @property
    def positions(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3))
        return np.vstack([self.records[0].uav_pos] + [r.next_pos for r in self.records])


class SlotError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# slot pipeline
# --------------------------------------------------------------------------


def _order_and_power(mode, gains, w0, p0, sc: Scenario):
    if mode == "joint":
        res = optimize_sic_power(gains, w0, p0, sc.noise, sc.p_max, sc.penalty)
        return res.w, res.p
    if mode == "fixed":
        if sc.N == 1:
            return w0, np.array([sc.p_max])
        p, _ = optimize_fixed_order(gains, w0, sc.noise, sc.p_max, p_start=p0)
        return w0, p
    raise ValueError(mode)


def _record(t, L, nxt, a, w, p, gains, sc: Scenario) -> SlotRecord:
    r = rates(p, w, gains, sc.noise)
    speed = float(np.hypot(*(nxt - L)[:2])) / sc.tau
    p_fly = power_from_speed(speed, sc.propulsion, sc.solver.v_floor)
    p_sum = sc.eta * float(np.sum(p)) + p_fly
    return SlotRecord(t=t, uav_pos=L.copy(), next_pos=np.asarray(nxt, float).copy(), action=a,
                      alpha=sc.actions[a].alpha.copy(), w=np.asarray(w, float).copy(),
                      p=np.asarray(p, float).copy(), rates=r, p_fly=p_fly, p_sum=p_sum,
                      ee=float(np.sum(r)) / p_sum, effective=r >= sc.solver.r_min)


def _slot(t, L, a, v_prev, sc: Scenario, mode: str) -> SlotRecord:
    assoc = sc.actions[a]
    gains, w0, p0 = slot_inputs(L, assoc, sc)
    step = optimize_step(L, assoc, w0, p0, sc, v_prev=v_prev)
    w, p = _order_and_power(mode, gains, w0, p0, sc)
    return _record(t, L, step.position, a, w, p, gains, sc)


def _episode(sc: Scenario, algorithm: str, seed: int, choose: Callable) -> EpisodeResult:
    result = EpisodeResult(algorithm=algorithm, seed=seed, r_min=sc.solver.r_min)
    L = sc.start.copy()
    v_prev = None
    for t in range(sc.T):
        try:
            rec = choose(t, L, v_prev)
        except Exception as exc:
            raise SlotError(f"{algorithm}: slot {t} at {L.tolist()}: {exc}") from exc
        result.records.append(rec)
        v_prev = (rec.next_pos - L)[:2] / sc.tau
        L = rec.next_pos
        log.debug("%s t=%d action=%d ee=%.6g pos=%s", algorithm, t, rec.action, rec.ee,
                  np.round(L, 3).tolist())
    return result


def run_aisle(sc: Scenario, q: QFunction, seed: int = 0) -> EpisodeResult:
    """Greedy learned association, joint order and power per slot."""
    _check_q(q, sc)
    return _episode(sc, "aisle", seed,
                    lambda t, L, v: _slot(t, L, policy(q, L, "greedy")[0], v, sc, "joint"))


def run_fsd(sc: Scenario, q: QFunction, seed: int = 0) -> EpisodeResult:
    """As AISLE but the decoding order stays at the initial (gain-sorted) order."""
    _check_q(q, sc)
    return _episode(sc, "fsd", seed,
                    lambda t, L, v: _slot(t, L, policy(q, L, "greedy")[0], v, sc, "fixed"))


def run_upper_bound(sc: Scenario, seed: int = 0) -> EpisodeResult:
    """Per slot, the association with the highest slot energy efficiency.

    Order and power are computed for every association; the trajectory step
    is skipped for candidates whose sum rate over the smallest possible power
    cannot beat the incumbent. Ties go to the lowest action index.
    """
    n_act = len(sc.actions)
    if n_act > MAX_ENUMERATION:
        raise ValueError(f"{n_act} associations exceed the enumeration guard ({MAX_ENUMERATION})")
    p_floor_fly = min_propulsion_power(sc.propulsion, sc.v_max, sc.solver.v_floor)

    def choose(t, L, v_prev):
        cands = []
        for a, assoc in enumerate(sc.actions):
            gains, w0, p0 = slot_inputs(L, assoc, sc)
            w, p = _order_and_power("joint", gains, w0, p0, sc)
            sr = float(np.sum(rates(p, w, gains, sc.noise)))
            cands.append((a, assoc, gains, w0, p0, w, p, sr))
        best = None
        for a, assoc, gains, w0, p0, w, p, sr in sorted(cands, key=lambda c: (-c[-1], c[0])):
            bound = sr / (sc.eta * float(np.sum(p)) + p_floor_fly)
            if best is not None and (bound < best.ee or (bound == best.ee and a > best.action)):
                continue
            step = optimize_step(L, assoc, w0, p0, sc, v_prev=v_prev)
            rec = _record(t, L, step.position, a, w, p, gains, sc)
            if best is None or rec.ee > best.ee or (rec.ee == best.ee and a < best.action):
                best = rec
        return best

    return _episode(sc, "upper", seed, choose)


def run_algorithm(name: str, sc: Scenario, q: Optional[QFunction], seed: int) -> EpisodeResult:
    if name == "aisle":
        return run_aisle(sc, q, seed)
    if name == "fsd":
        return run_fsd(sc, q, seed)
    if name == "upper":
        return run_upper_bound(sc, seed)
    raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")


def _check_q(q: Optional[QFunction], sc: Scenario):
    if q is None:
        raise ValueError("a trained Q-function is required")
    if q.n_actions != len(sc.actions):
        raise ValueError(f"Q-function has {q.n_actions} outputs but the scenario has "
                         f"{len(sc.actions)} associations")


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def apply_axis(sc: Scenario, axis: str, value) -> Scenario:
    """Scenario with one swept quantity replaced."""
    if axis == "elements":
        k = int(value)
        return sc.with_changes(J_b=k, J_I=k)
    if axis == "power":
        return sc.with_changes(p_max=dbm_to_watts(float(value)))
    if axis == "slots":
        return sc.with_changes(T=int(value))
    if axis == "start":
        pos = tuple(float(x) for x in value)
        if len(pos) != 3:
            raise ValueError("start values must be 3D positions")
        return sc.with_changes(uav_start=pos)
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class SweepCell:
    axis: str
    value: object
    algorithm: str
    seed: int
    total_ee: float = float("nan")
    avg_effective_throughput: float = float("nan")
    error: str = ""


@dataclass
class SweepTable:
    axis: str
    cells: list = field(default_factory=list)

    def summary(self):
        """Mean metrics per (value, algorithm) over the seeds that succeeded."""
        groups: dict = {}
        for c in self.cells:
            groups.setdefault((_value_key(c.value), c.algorithm), []).append(c)
        rows = []
        for (_, algo), cs in groups.items():
            ok = [c for c in cs if not c.error]
            rows.append({
                "axis": self.axis, "value": cs[0].value, "algorithm": algo,
                "seeds": len(ok), "failures": len(cs) - len(ok),
                "mean_total_ee": float(np.mean([c.total_ee for c in ok])) if ok else float("nan"),
                "mean_effective_throughput": (float(np.mean([c.avg_effective_throughput for c in ok]))
                                              if ok else float("nan")),
            })
        return rows

    def mean(self, algorithm: str, value) -> float:
        for row in self.summary():
            if row["algorithm"] == algorithm and _value_key(row["value"]) == _value_key(value):
                return row["mean_total_ee"]
        raise KeyError((algorithm, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["schema_version", "axis", "value", "algorithm", "seed", "total_ee",
                     "avg_effective_throughput", "error"])
        for c in self.cells:
            wr.writerow([SCHEMA_VERSION, c.axis, _value_text(c.value), c.algorithm, c.seed,
                         repr(c.total_ee), repr(c.avg_effective_throughput), c.error])
        return buf.getvalue()


def _value_key(v):
    return tuple(v) if isinstance(v, (list, tuple, np.ndarray)) else v


def _value_text(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in v)
    return repr(v)


def sweep(template: Scenario, axis: str, values: Sequence, seeds: Sequence[int],
          q: Optional[QFunction] = None, algorithms: Sequence[str] = ALGORITHMS) -> SweepTable:
    """Run every algorithm for every (value, seed); failures are recorded per cell."""
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {a!r}")
    table = SweepTable(axis=axis)
    for value in values:
        sc = apply_axis(template, axis, value)
        for algo in algorithms:
            for seed in seeds:
                cell = SweepCell(axis=axis, value=value, algorithm=algo, seed=int(seed))
                try:
                    res = run_algorithm(algo, sc, q, int(seed))
                    cell.total_ee = res.total_ee
                    cell.avg_effective_throughput = res.avg_effective_throughput
                except Exception as exc:  # a failed cell must not stop the sweep
                    cell.error = f"{type(exc).__name__}: {exc}"
                    log.warning("sweep cell %s=%s %s seed %s failed: %s", axis, value, algo,
                                seed, cell.error)
                table.cells.append(cell)
    return table


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def _episode_columns(N: int, S: int):
    cols = ["schema_version", "t", "x", "y", "z", "next_x", "next_y", "next_z", "action"]
    cols += [f"alpha_{s}_{i}" for s in range(S) for i in range(N)]
    cols += [f"w_{i}_{j}" for i in range(N) for j in range(N) if i != j]
    cols += [f"p_{i}" for i in range(N)]
    cols += [f"rate_{i}" for i in range(N)]
    cols += ["p_fly", "p_sum", "ee"]
    cols += [f"effective_{i}" for i in range(N)]
    return cols


def episode_csv(result: EpisodeResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    if not result.records:
        wr.writerow(["schema_version"])
        return buf.getvalue()
    S, N = result.records[0].alpha.shape
    wr.writerow(_episode_columns(N, S))
    for r in result.records:
        row = [SCHEMA_VERSION, r.t, *map(repr, map(float, r.uav_pos)),
               *map(repr, map(float, r.next_pos)), r.action]
        row += [int(v) for v in r.alpha.ravel()]
        row += [repr(float(r.w[i, j])) for i in range(N) for j in range(N) if i != j]
        row += [repr(float(v)) for v in r.p]
        row += [repr(float(v)) for v in r.rates]
        row += [repr(r.p_fly), repr(r.p_sum), repr(r.ee)]
        row += [int(v) for v in r.effective]
        wr.writerow(row)
    return buf.getvalue()


def episode_summary(result: EpisodeResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "algorithm": result.algorithm,
        "seed": result.seed,
        "slots": len(result.records),
        "total_ee": result.total_ee,
        "avg_effective_throughput": result.avg_effective_throughput,
        "r_min": result.r_min,
        "final_position": result.positions[-1].tolist() if result.records else None,
    }


def write_episode(result: EpisodeResult, csv_path, json_path=None):
    with open(csv_path, "w", newline="") as fh:
        fh.write(episode_csv(result))
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(episode_summary(result), fh, indent=1)
