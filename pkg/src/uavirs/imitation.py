"""Inverse soft-Q imitation of the IRS-user association, plus the expert generator.

The agent's state is the UAV position and its action an index into the
lexicographic list of feasible associations. A small tanh network maps the
normalised position to one Q-value per action; the policy is softmax(Q).
Training maximises the inverse soft-Q objective

    J = mean_expert F(Q(s, a) - l V(s')) - (1 - l) mean_online V(s~),
    F(x) = x - x^2 / (4 C),  V = logsumexp Q,

by plain gradient ascent with hand-written backpropagation.
"""
from __future__ import annotations

import base64
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import composite_gain
from .energy import min_propulsion_power, power_from_speed
from .noma import initial_order, initial_power, rates
from .scenario import Scenario
from .trajectory import optimize_step

log = logging.getLogger(__name__)

__all__ = [
    "QFunction",
    "Transitions",
    "ReplayBuffers",
    "TrainResult",
    "init_q",
    "q_forward",
    "soft_value",
    "softmax",
    "deflate",
    "iq_objective",
    "train_step",
    "policy",
    "slot_inputs",
    "step_environment",
    "expert_action",
    "generate_expert",
    "random_starts",
    "train",
    "save_transitions",
    "load_transitions",
    "save_q",
    "load_q",
]

SCHEMA_VERSION = 1
TRANSITION_FIELDS = ["schema_version", "t", "sx", "sy", "sz", "action", "nx", "ny", "nz", "reward"]


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


@dataclass
class QFunction:
    """3 -> H -> H -> |A| tanh network over the normalised UAV position.

    ``center``/``half`` map positions to [-1, 1]: x, y by the map extents and
    z by the altitude box.
    """

    params: np.ndarray
    n_actions: int
    hidden: int
    center: np.ndarray
    half: np.ndarray

    @property
    def shapes(self):
        h, a = self.hidden, self.n_actions
        return [("W1", (h, 3)), ("b1", (h,)), ("W2", (h, h)), ("b2", (h,)),
                ("W3", (a, h)), ("b3", (a,))]

    def unpack(self, params=None):
        flat = self.params if params is None else params
        out, k = {}, 0
        for name, shp in self.shapes:
            size = int(np.prod(shp))
            out[name] = flat[k:k + size].reshape(shp)
            k += size
        return out

    def copy(self) -> "QFunction":
        return QFunction(self.params.copy(), self.n_actions, self.hidden,
                         self.center.copy(), self.half.copy())

    def normalise(self, pos):
        return (np.asarray(pos, dtype=float) - self.center) / self.half


def _normalisation(sc: Scenario):
    mx, my = sc.map_size
    z_mid = 0.5 * (sc.z_min + sc.z_max)
    z_half = max(0.5 * (sc.z_max - sc.z_min), 1.0)
    return np.array([mx / 2.0, my / 2.0, z_mid]), np.array([mx / 2.0, my / 2.0, z_half])


def init_q(n_actions: int, scenario: Scenario, rng: np.random.Generator,
           hidden: Optional[int] = None) -> QFunction:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    hidden = scenario.learning.hidden if hidden is None else hidden
    center, half = _normalisation(scenario)
    q = QFunction(np.zeros(0), n_actions, hidden, center, half)
    chunks = []
    fan_in = {"W1": 3, "b1": 3, "W2": hidden, "b2": hidden, "W3": hidden, "b3": hidden}
    for name, shp in q.shapes:
        lim = 1.0 / np.sqrt(fan_in[name])
        chunks.append(rng.uniform(-lim, lim, size=int(np.prod(shp))))
    q.params = np.concatenate(chunks)
    return q


def _forward(q: QFunction, x, params=None):
    p = q.unpack(params)
    h1 = np.tanh(x @ p["W1"].T + p["b1"])
    h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
    out = h2 @ p["W3"].T + p["b3"]
    return out, (x, h1, h2, p)


def _backward(q: QFunction, cache, d_out):
    """Gradient of sum(d_out * Q) with respect to the flat parameters."""
    x, h1, h2, p = cache
    g = {}
    g["W3"] = d_out.T @ h2
    g["b3"] = d_out.sum(axis=0)
    d2 = (d_out @ p["W3"]) * (1.0 - h2**2)
    g["W2"] = d2.T @ h1
    g["b2"] = d2.sum(axis=0)
    d1 = (d2 @ p["W2"]) * (1.0 - h1**2)
    g["W1"] = d1.T @ x
    g["b1"] = d1.sum(axis=0)
    return np.concatenate([g[name].ravel() for name, _ in q.shapes])


def q_forward(q: QFunction, s) -> np.ndarray:
    """Q-values for raw positions ``s`` of shape (3,) or (B, 3)."""
    x = q.normalise(s)
    out, _ = _forward(q, np.atleast_2d(x))
    return out[0] if np.ndim(s) == 1 else out


def soft_value(qvals) -> np.ndarray:
    """log sum exp over the last axis, shifted by the max."""
    qv = np.asarray(qvals, dtype=float)
    m = np.max(qv, axis=-1, keepdims=True)
    v = m + np.log(np.sum(np.exp(qv - m), axis=-1, keepdims=True))
    v = np.squeeze(v, axis=-1)
    return float(v) if v.ndim == 0 else v


def softmax(qvals) -> np.ndarray:
    qv = np.asarray(qvals, dtype=float)
    e = np.exp(qv - np.max(qv, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def deflate(x, C: float):
    """F(x) = x - x^2 / (4C)."""
    return x - x * x / (4.0 * C)


def iq_objective(q: QFunction, expert_batch, online_states, discount: float, C: float,
                 params=None):
    """Objective J and its gradient with respect to the flat parameters.

    ``expert_batch`` = (states (E, 3), actions (E,), next_states (E, 3));
    ``online_states`` (M, 3) are the states whose soft value is pushed down
    (online samples plus episode initial states).
    """
    s, a, s_next = expert_batch
    s = np.atleast_2d(np.asarray(s, dtype=float))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=float))
    a = np.asarray(a, dtype=int)
    o = np.atleast_2d(np.asarray(online_states, dtype=float))
    E, M = s.shape[0], o.shape[0]
    x = q.normalise(np.vstack([s, s_next, o]))
    out, cache = _forward(q, x, params)
    q_s, q_next, q_o = out[:E], out[E:2 * E], out[2 * E:]
    v_next = soft_value(q_next)
    v_o = soft_value(q_o)
    arg = q_s[np.arange(E), a] - discount * v_next
    J = float(np.mean(deflate(arg, C)) - (1.0 - discount) * np.mean(v_o))
    dF = (1.0 - arg / (2.0 * C)) / E
    d_out = np.zeros_like(out)
    d_out[np.arange(E), a] = dF
    d_out[E:2 * E] = -discount * dF[:, None] * softmax(q_next)
    d_out[2 * E:] = -(1.0 - discount) / M * softmax(q_o)
    grad = _backward(q, cache, d_out)
    return J, grad


def policy(q: QFunction, s, mode: str = "greedy", rng: Optional[np.random.Generator] = None):
    """Action index and softmax distribution; greedy ties go to the lowest index."""
    dist = softmax(q_forward(q, s))
    if mode == "greedy":
        return int(np.argmax(dist)), dist
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a generator")
        return int(rng.choice(dist.size, p=dist)), dist
    raise ValueError(f"unknown policy mode {mode!r}")


# --------------------------------------------------------------------------
# transitions and buffers
# --------------------------------------------------------------------------


@dataclass
class Transitions:
    state: np.ndarray        # (n, 3)
    action: np.ndarray       # (n,)
    next_state: np.ndarray   # (n, 3)
    reward: np.ndarray       # (n,)
    t: np.ndarray            # (n,)

    def __len__(self):
        return int(self.action.size)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros(0),
                   np.zeros(0, dtype=int))

    @classmethod
    def from_rows(cls, rows):
        if not rows:
            return cls.empty()
        s, a, n, r, t = zip(*rows)
        return cls(np.array(s, dtype=float), np.array(a, dtype=int), np.array(n, dtype=float),
                   np.array(r, dtype=float), np.array(t, dtype=int))


class ReplayBuffers:
    """Fixed expert set plus a ring buffer of online transitions."""

    def __init__(self, expert: Transitions, capacity: Optional[int] = None):
        if len(expert) == 0:
            raise ValueError("expert dataset is empty")
        self.expert = expert
        self.capacity = len(expert) if capacity is None else int(capacity)
        self._s = np.zeros((self.capacity, 3))
        self._a = np.zeros(self.capacity, dtype=int)
        self._n = np.zeros((self.capacity, 3))
        self._size = 0
        self._head = 0
        self.initial_states: list = []

    def __len__(self):
        return self._size

    @property
    def full(self) -> bool:
        return self._size >= self.capacity

    def add(self, s, a, s_next):
        self._s[self._head] = s
        self._a[self._head] = a
        self._n[self._head] = s_next
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def add_initial(self, s):
        s = np.asarray(s, dtype=float)
        if not any(np.array_equal(s, x) for x in self.initial_states):
            self.initial_states.append(s.copy())

    def sample(self, batch: int, rng: np.random.Generator):
        """Half expert transitions, half online states (plus initial states)."""
        half = max(batch // 2, 1)
        ie = rng.integers(0, len(self.expert), size=half)
        io_ = rng.integers(0, self._size, size=batch - half)
        ex = (self.expert.state[ie], self.expert.action[ie], self.expert.next_state[ie])
        online = self._s[io_]
        if self.initial_states:
            online = np.vstack([online, np.array(self.initial_states)])
        return ex, online


def train_step(q: QFunction, buffers: ReplayBuffers, lr: float, batch: int,
               rng: np.random.Generator, discount: float = 0.99, C: float = 1.0):
    """One gradient-ascent step on J; returns the new QFunction and J on the batch."""
    if len(buffers) < max(batch // 2, 1):
        raise ValueError("online buffer holds fewer than batch/2 transitions")
    ex, online = buffers.sample(batch, rng)
    J, grad = iq_objective(q, ex, online, discount, C)
    out = q.copy()
    out.params = q.params + lr * grad
    return out, J


# --------------------------------------------------------------------------
# environment step and expert
# --------------------------------------------------------------------------


def slot_inputs(L, assoc, sc: Scenario):
    """Gains, initial order and uniform power at position L for one association."""
    gains = composite_gain(L, assoc, sc).gain
    return gains, initial_order(gains), initial_power(sc.N, sc.p_max)


def step_environment(L, action: int, sc: Scenario, v_prev=None):
    """Advance one slot with the initial order and power.

    Returns (next position, reward, sum rate at L, step result). The reward is
    the slot energy efficiency: rates at L, speed of the leg to the next
    position.
    """
    assoc = sc.actions[action]
    L = np.asarray(L, dtype=float)
    gains, w0, p0 = slot_inputs(L, assoc, sc)
    sr = float(np.sum(rates(p0, w0, gains, sc.noise)))
    res = optimize_step(L, assoc, w0, p0, sc, v_prev=v_prev)
    reward = sr / _slot_power(L, res.position, p0, sc)
    return res.position, reward, sr, res


def _slot_power(L, L_next, p, sc: Scenario):
    speed = float(np.hypot(*(np.asarray(L_next) - L)[:2])) / sc.tau
    return sc.eta * float(np.sum(p)) + power_from_speed(speed, sc.propulsion, sc.solver.v_floor)


def expert_action(L, sc: Scenario, v_prev=None, sum_rates=None):
    """Exhaustive argmax of the slot energy efficiency over all associations.

    Candidates are visited in decreasing sum rate; one whose sum rate over
    the smallest possible power cannot beat the incumbent is skipped without
    running its trajectory step. Ties go to the lowest action index.
    Returns (action, next position, reward).
    """
    L = np.asarray(L, dtype=float)
    if sum_rates is None:
        sum_rates = []
        for assoc in sc.actions:
            gains, w0, p0 = slot_inputs(L, assoc, sc)
            sum_rates.append(float(np.sum(rates(p0, w0, gains, sc.noise))))
    sum_rates = np.asarray(sum_rates, dtype=float)
    p_floor = sc.eta * sc.p_max + min_propulsion_power(sc.propulsion, sc.v_max, sc.solver.v_floor)
    bound = sum_rates / p_floor
    best = (-np.inf, -1, None)
    for a in sorted(range(len(sc.actions)), key=lambda k: (-sum_rates[k], k)):
        if bound[a] < best[0] or (bound[a] == best[0] and a > best[1]):
            continue
        nxt, reward, _, _ = step_environment(L, a, sc, v_prev)
        if reward > best[0] or (reward == best[0] and a < best[1]):
            best = (reward, a, nxt)
    reward, a, nxt = best
    return a, nxt, reward


def random_starts(sc: Scenario, count: int, rng: np.random.Generator):
    """Uniform positions over the map and altitude box, excluding the episode start."""
    mx, my = sc.map_size
    out = []
    while len(out) < count:
        p = np.array([rng.uniform(0, mx), rng.uniform(0, my), rng.uniform(sc.z_min, sc.z_max)])
        if not np.allclose(p, sc.start):
            out.append(p)
    return out


def generate_expert(sc: Scenario, starts, T: int) -> Transitions:
    """Roll out the exhaustive expert from each start for T slots."""
    if len(sc.actions) == 0:
        raise ValueError("no feasible association")
    rows = []
    for k, start in enumerate(starts):
        L = np.asarray(start, dtype=float)
        v_prev = None
        for t in range(T):
            a, nxt, reward = expert_action(L, sc, v_prev)
            rows.append((L.copy(), a, nxt.copy(), reward, t))
            v_prev = (nxt - L)[:2] / sc.tau
            L = nxt
        log.info("expert start %d/%d done", k + 1, len(starts))
    return Transitions.from_rows(rows)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    q: QFunction
    objective: list = field(default_factory=list)   # J per gradient step
    env_steps: int = 0
    grad_steps: int = 0


def train(sc: Scenario, expert: Transitions, seed: int, online_steps: Optional[int] = None,
          updates_per_step: Optional[int] = None) -> TrainResult:
    """Interact with sample-mode actions from the episode start, train once the
    online buffer holds as many transitions as the expert set.

    After that gate every environment step is followed by ``updates_per_step``
    gradient steps, for ``online_steps`` environment steps.
    """
    cfg = sc.learning
    online_steps = cfg.online_steps if online_steps is None else online_steps
    updates = cfg.updates_per_step if updates_per_step is None else updates_per_step
    rng = np.random.default_rng(seed)
    q = init_q(len(sc.actions), sc, rng)
    # the online buffer matches the expert set, but must fit half a batch
    buffers = ReplayBuffers(expert, capacity=max(len(expert), cfg.batch // 2, 1))
    buffers.add_initial(sc.start)
    result = TrainResult(q=q)
    L = sc.start.copy()
    v_prev = None
    t = 0
    trained = 0
    while trained < online_steps:
        a, _ = policy(q, L, "sample", rng)
        nxt, _, _, _ = step_environment(L, a, sc, v_prev)
        buffers.add(L, a, nxt)
        result.env_steps += 1
        v_prev = (nxt - L)[:2] / sc.tau
        L = nxt
        t += 1
        if t >= cfg.episode_slots:
            L, v_prev, t = sc.start.copy(), None, 0
        if not buffers.full:
            continue
        for _ in range(updates):
            q, J = train_step(q, buffers, cfg.lr, cfg.batch, rng, cfg.discount, cfg.deflation)
            result.objective.append(J)
            result.grad_steps += 1
        trained += 1
        if trained % 100 == 0:
            log.info("training: %d/%d online steps, J=%.5g", trained, online_steps, J)
    result.q = q
    return result


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def save_transitions(path, data: Transitions):
    with open(path, "w", newline="") as fh:
        fh.write(transitions_to_csv(data))


def transitions_to_csv(data: Transitions) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRANSITION_FIELDS)
    for k in range(len(data)):
        s, n = data.state[k], data.next_state[k]
        wr.writerow([SCHEMA_VERSION, int(data.t[k]), *map(repr, map(float, s)),
                     int(data.action[k]), *map(repr, map(float, n)), repr(float(data.reward[k]))])
    return buf.getvalue()


def load_transitions(path) -> Transitions:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != TRANSITION_FIELDS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        rows = []
        for line in rd:
            if int(line["schema_version"]) != SCHEMA_VERSION:
                raise ValueError(f"{path}: unsupported schema version {line['schema_version']}")
            rows.append(([float(line[c]) for c in ("sx", "sy", "sz")], int(line["action"]),
                         [float(line[c]) for c in ("nx", "ny", "nz")], float(line["reward"]),
                         int(line["t"])))
    return Transitions.from_rows(rows)


def save_q(path, q: QFunction):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "n_actions": q.n_actions,
        "hidden": q.hidden,
        "shapes": [[name, list(shp)] for name, shp in q.shapes],
        "center": q.center.tolist(),
        "half": q.half.tolist(),
        "params_b64": base64.b64encode(q.params.astype("<f8").tobytes()).decode("ascii"),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_q(path) -> QFunction:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema")
    params = np.frombuffer(base64.b64decode(doc["params_b64"]), dtype="<f8").astype(float)
    q = QFunction(params, int(doc["n_actions"]), int(doc["hidden"]),
                  np.array(doc["center"], dtype=float), np.array(doc["half"], dtype=float))
    expected = sum(int(np.prod(s)) for _, s in q.shapes)
    if params.size != expected or [[n, list(s)] for n, s in q.shapes] != doc["shapes"]:
        raise ValueError(f"{path}: parameter vector does not match its shape manifest")
    if not np.all(np.isfinite(params)):
        raise ValueError(f"{path}: non-finite parameters")
    return q
