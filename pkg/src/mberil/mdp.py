"""Environments, transitions, replay buffers and sampling primitives.

Tabular states and actions are integer indices; continuous ones are float
vectors. Every sampler takes an explicit ``numpy.random.Generator`` so that a
fixed seed reproduces rollouts and buffer draws bit for bit.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

ROW_TOL = 1e-9


@dataclass(frozen=True)
class RegularizationConfig:
    """Entropy/KL weights and loss multipliers.

    ``beta`` is a property so it can never drift from ``kappa`` and ``eta``.
    """

    kappa: float = 2.0
    eta: float = 2.0
    gamma: float = 0.9
    lambda_model: float = 1.0
    lambda_policy: float = 1.0
    lambda_qv: float = 1.0
    lambda_vq: float = 1.0

    def __post_init__(self):
        if not (self.kappa > 0 and self.eta > 0):
            raise ValueError("kappa and eta must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("lambda_model", "lambda_policy", "lambda_qv", "lambda_vq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def beta(self) -> float:
        return self.kappa * self.eta / (self.kappa + self.eta)


@dataclass
class TabularMdp:
    """Finite MDP with a state-only reward.

    ``transition[x, u, x']`` is the probability of ``x'`` after taking ``u``
    in ``x``.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    name: str = "tabular"

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self) -> None:
        p = self.transition
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValueError("every transition row must be a probability vector")
        if self.reward.shape != (p.shape[0],):
            raise ValueError("reward must be a vector over states")
        d = self.initial_dist
        if d.shape != (p.shape[0],) or np.any(d < 0) or abs(d.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector over states")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")

    def check_state(self, x) -> None:
        x = np.asarray(x)
        if np.any(x < 0) or np.any(x >= self.n_states):
            raise IndexError(f"state index out of range [0, {self.n_states})")

    def check_action(self, u) -> None:
        u = np.asarray(u)
        if np.any(u < 0) or np.any(u >= self.n_actions):
            raise IndexError(f"action index out of range [0, {self.n_actions})")

    def reset(self, rng: np.random.Generator, n: int | None = None):
        if n is None:
            return int(rng.choice(self.n_states, p=self.initial_dist))
        return _categorical(np.broadcast_to(self.initial_dist, (n, self.n_states)), rng)

    def step(self, x, u, rng: np.random.Generator):
        """Sample next state(s); ``x`` and ``u`` may be scalars or index arrays."""
        self.check_state(x)
        self.check_action(u)
        if np.ndim(x) == 0 and np.ndim(u) == 0:
            return int(rng.choice(self.n_states, p=self.transition[int(x), int(u)]))
        return _categorical(self.transition[x, u], rng)

    def state_reward(self, x) -> np.ndarray:
        return self.reward[np.asarray(x)]

    def with_transition(self, transition: np.ndarray, name: str | None = None) -> "TabularMdp":
        return TabularMdp(transition, self.reward.copy(), self.discount,
                          self.initial_dist.copy(), name or self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(d["transition"], d["reward"], d["discount"], d["initial_dist"],
                  d.get("name", "tabular"))
        for key, val in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
            if key in d and int(d[key]) != val:
                raise ValueError(f"{key}={d[key]} disagrees with transition shape")
        return mdp


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse-CDF, vectorised)."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    draws = rng.random(probs.shape[:-1])[..., None]
    return np.minimum((draws > cdf).sum(axis=-1), probs.shape[-1] - 1)


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1))


def load_mdp(path: str | Path) -> TabularMdp:
    return TabularMdp.from_dict(json.loads(Path(path).read_text()))


# -- builders ---------------------------------------------------------------

GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))  # up, down, left, right, stay


def gridworld(size: int = 5, slip: float = 0.2, goal: tuple[int, int] | None = None,
              start: tuple[int, int] = (0, 0), gamma: float = 0.9,
              goal_reward: float = 1.0) -> TabularMdp:
    """Square gridworld with five actions and a rewarding goal cell.

    A move succeeds with probability ``1 - slip``; otherwise the agent stays
    put. Moves into a wall leave the agent in place.
    """
    n = size * size
    goal = goal if goal is not None else (size - 1, size - 1)
    p = np.zeros((n, len(GRID_MOVES), n))
    for row in range(size):
        for col in range(size):
            x = row * size + col
            for u, (dr, dc) in enumerate(GRID_MOVES):
                r2, c2 = row + dr, col + dc
                if not (0 <= r2 < size and 0 <= c2 < size):
                    r2, c2 = row, col
                y = r2 * size + c2
                p[x, u, y] += 1.0 - slip
                p[x, u, x] += slip
    reward = np.zeros(n)
    reward[goal[0] * size + goal[1]] = goal_reward
    init = np.zeros(n)
    init[start[0] * size + start[1]] = 1.0
    return TabularMdp(p, reward, gamma, init, name=f"grid{size}")


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator,
               gamma: float = 0.9, branching: int | None = None) -> TabularMdp:
    """Random dense (or ``branching``-sparse) MDP for oracle tests."""
    p = rng.random((n_states, n_actions, n_states)) + 0.05
    if branching is not None and branching < n_states:
        for x in range(n_states):
            for u in range(n_actions):
                drop = rng.permutation(n_states)[branching:]
                p[x, u, drop] = 0.0
    p /= p.sum(axis=2, keepdims=True)
    reward = rng.normal(size=n_states)
    init = rng.random(n_states) + 0.1
    return TabularMdp(p, reward, gamma, init / init.sum(), name="random")


# -- continuous environment -------------------------------------------------

@dataclass
class ContinuousEnv:
    """Continuous-state environment with clamped actions."""

    state_dim: int
    action_dim: int
    dynamics: Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]
    reward_fn: Callable[[np.ndarray], np.ndarray]
    action_low: np.ndarray
    action_high: np.ndarray
    initial_sampler: Callable[[np.random.Generator, int], np.ndarray]
    discount: float = 0.9
    name: str = "continuous"

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.action_low, self.action_high)

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        if n is None:
            return self.initial_sampler(rng, 1)[0]
        return self.initial_sampler(rng, n)

    def step(self, x, u, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(self.clamp(u))
        nxt = self.dynamics(xb, ub, rng)
        return nxt[0] if single else nxt

    def state_reward(self, x) -> np.ndarray:
        return self.reward_fn(np.atleast_2d(np.asarray(x, dtype=float)))


def point_mass(noise: float = 0.05, dt: float = 0.1, goal=(1.0, 1.0),
               bound: float = 2.0, gamma: float = 0.9) -> ContinuousEnv:
    """2-D point mass: ``x' = clip(x + dt*u + noise*eps)``, reward ``exp(-|x - goal|^2)``.

    The reward is positive so returns normalize against ``R_min = 0``.
    """
    goal = np.asarray(goal, dtype=float)

    def dynamics(x, u, rng):
        nxt = x + dt * u + noise * rng.standard_normal(x.shape)
        return np.clip(nxt, -bound, bound)

    def reward_fn(x):
        return np.exp(-np.sum((x - goal) ** 2, axis=-1))

    def initial(rng, n):
        return rng.uniform(-0.1, 0.1, size=(n, 2))

    return ContinuousEnv(2, 2, dynamics, reward_fn, -np.ones(2), np.ones(2),
                         initial, gamma, name="pointmass")


Env = TabularMdp | ContinuousEnv


def step(env: Env, x, u, rng: np.random.Generator):
    """Draw ``x' ~ p(.|x, u)`` from the environment."""
    return env.step(x, u, rng)


def is_tabular(env) -> bool:
    return isinstance(env, TabularMdp)


# -- transitions and trajectories -------------------------------------------

@dataclass(frozen=True)
class Transition:
    x: Any
    u: Any
    x_next: Any

    def __post_init__(self):
        for part in (self.x, self.u, self.x_next):
            if not np.all(np.isfinite(np.asarray(part, dtype=float))):
                raise ValueError("transition components must be finite")


@dataclass
class Trajectory:
    transitions: list[Transition]

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    def is_chained(self) -> bool:
        return all(np.array_equal(a.x_next, b.x)
                   for a, b in zip(self.transitions, self.transitions[1:]))

    def __len__(self):
        return len(self.transitions)


@dataclass
class Batch:
    """Column view of a set of transitions (arrays indexed by sample)."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray

    def __len__(self):
        return len(self.x)

    @classmethod
    def concat(cls, batches: Sequence["Batch"]) -> "Batch":
        return cls(*(np.concatenate([getattr(b, k) for b in batches])
                     for k in ("x", "u", "x_next")))

    @classmethod
    def from_transitions(cls, ts: Iterable[Transition]) -> "Batch":
        ts = list(ts)
        return cls(np.array([t.x for t in ts]), np.array([t.u for t in ts]),
                   np.array([t.x_next for t in ts]))

    def transitions(self) -> list[Transition]:
        return [Transition(_scalar(a), _scalar(b), _scalar(c))
                for a, b, c in zip(self.x, self.u, self.x_next)]


def _scalar(v):
    return v.item() if np.ndim(v) == 0 else v


def _policy_sample(policy, x, rng):
    return policy.sample(np.asarray(x), rng)


def rollout_batch(env: Env, policy, horizon: int, n_episodes: int,
                  rng: np.random.Generator, dynamics=None) -> Batch:
    """Run ``n_episodes`` episodes in lockstep; transitions ordered episode-major.

    ``dynamics`` (a model with ``sample((x, u), rng)``) replaces the
    environment's transition when given, which is how simulated data is made.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = env.reset(rng, n_episodes)
    xs, us, nxts = [], [], []
    for _ in range(horizon):
        u = _policy_sample(policy, x, rng)
        if not is_tabular(env):
            u = env.clamp(u)
        nxt = env.step(x, u, rng) if dynamics is None else dynamics.sample((x, u), rng)
        xs.append(x)
        us.append(u)
        nxts.append(nxt)
        x = nxt
    stack = lambda seq: np.stack(seq, axis=1).reshape((n_episodes * horizon,) + np.shape(seq[0])[1:])
    return Batch(stack(xs), stack(us), stack(nxts))


def rollout(env: Env, policy, horizon: int, rng: np.random.Generator) -> Trajectory:
    """One episode of exactly ``horizon`` chained transitions."""
    batch = rollout_batch(env, policy, horizon, 1, rng)
    return Trajectory(batch.transitions())


def sample_discounted_state(env: Env, policy, gamma: float, rng: np.random.Generator,
                            n: int | None = None, dynamics=None, max_steps: int = 10_000):
    """Draw from the discounted visitation distribution by geometric restart.

    Each chain starts from the initial distribution and stops before every
    step with probability ``1 - gamma``; the state at stopping time is
    returned.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    count = 1 if n is None else n
    x = env.reset(rng, count)
    done = rng.random(count) >= gamma
    for _ in range(max_steps):
        if done.all():
            break
        live = ~done
        u = _policy_sample(policy, x[live], rng)
        if not is_tabular(env):
            u = env.clamp(u)
        xl = x[live]
        nxt = env.step(xl, u, rng) if dynamics is None else dynamics.sample((xl, u), rng)
        x = x.copy()
        x[live] = nxt
        done = done | (rng.random(count) >= gamma)
    return x[0] if n is None else x


# -- replay buffers ---------------------------------------------------------

class BufferRole(str, Enum):
    EXPERT = "expert"
    REAL_LEARNER = "real_learner"
    SIMULATED = "simulated"


class TransitionBuffer:
    """Append-only replay buffer with optional FIFO capacity.

    Storage is a ring of preallocated arrays, grown by doubling when no
    capacity is set.
    """

    def __init__(self, role: BufferRole | str, capacity: int | None = None):
        self.role = BufferRole(role)
        self.capacity = capacity
        self._arrays: dict[str, np.ndarray] | None = None
        self._start = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _alloc(self, batch: Batch, n: int) -> None:
        self._arrays = {k: np.empty((n,) + getattr(batch, k).shape[1:], getattr(batch, k).dtype)
                        for k in ("x", "u", "x_next")}

    def _storage(self) -> int:
        return 0 if self._arrays is None else len(self._arrays["x"])

    def push(self, t: Transition) -> None:
        self.push_batch(Batch(np.array([t.x]), np.array([t.u]), np.array([t.x_next])))

    def push_batch(self, batch: Batch) -> None:
        n = len(batch)
        if n == 0:
            return
        for k in ("x", "u", "x_next"):
            if not np.all(np.isfinite(getattr(batch, k))):
                raise ValueError("transition components must be finite")
        if self.capacity is not None and n > self.capacity:
            batch = Batch(batch.x[-self.capacity:], batch.u[-self.capacity:],
                          batch.x_next[-self.capacity:])
            n = self.capacity
        if self._arrays is None:
            self._alloc(batch, self.capacity or max(16, n))
        if self.capacity is None and self._size + n > self._storage():
            data = self.as_batch()
            self._alloc(batch, max(2 * self._storage(), self._size + n))
            for k in ("x", "u", "x_next"):
                self._arrays[k][: self._size] = getattr(data, k)
            self._start = 0
        cap = self._storage()
        overflow = max(0, self._size + n - cap)
        self._start = (self._start + overflow) % cap
        self._size -= overflow
        idx = (self._start + self._size + np.arange(n)) % cap
        for k in ("x", "u", "x_next"):
            self._arrays[k][idx] = getattr(batch, k)
        self._size += n

    def _ordered(self, positions: np.ndarray) -> np.ndarray:
        return (self._start + positions) % self._storage()

    def as_batch(self) -> Batch:
        if self._size == 0:
            return Batch(np.empty(0), np.empty(0), np.empty(0))
        idx = self._ordered(np.arange(self._size))
        return Batch(*(self._arrays[k][idx] for k in ("x", "u", "x_next")))

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise RuntimeError(f"cannot sample from empty {self.role.value} buffer")
        idx = self._ordered(rng.integers(0, self._size, size=n))
        return Batch(*(self._arrays[k][idx] for k in ("x", "u", "x_next")))

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return self.sample_batch(n, rng).transitions()

    def to_csv(self, path: str | Path) -> None:
        write_transitions_csv(self.as_batch(), path)

    @classmethod
    def from_csv(cls, path: str | Path, role: BufferRole | str, tabular: bool,
                 capacity: int | None = None) -> "TransitionBuffer":
        buf = cls(role, capacity)
        batch = read_transitions_csv(path, tabular)
        if len(batch):
            buf.push_batch(batch)
        return buf


def buffer_push(buf: TransitionBuffer, t: Transition) -> None:
    buf.push(t)


def buffer_sample(buf: TransitionBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    return buf.sample(n, rng)


def sample_union(buffers: Sequence[TransitionBuffer], n: int, rng: np.random.Generator) -> Batch:
    """Uniform draw over the concatenation of several buffers."""
    sizes = np.array([len(b) for b in buffers])
    if sizes.sum() == 0:
        raise RuntimeError("cannot sample from empty buffers")
    which = rng.choice(len(buffers), size=n, p=sizes / sizes.sum())
    parts = [buffers[i].sample_batch(int((which == i).sum()), rng)
             for i in range(len(buffers)) if (which == i).any()]
    return Batch.concat(parts)


def _fmt(v) -> str:
    flat = np.atleast_1d(np.asarray(v)).ravel()
    if np.issubdtype(flat.dtype, np.integer):
        return " ".join(str(int(a)) for a in flat)
    return " ".join(f"{float(a):.17g}" for a in flat)


def write_transitions_csv(batch: Batch, path: str | Path) -> None:
    """Columns x,u,x_next; vector components are space-separated inside a field."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "u", "x_next"])
        for a, b, c in zip(batch.x, batch.u, batch.x_next):
            w.writerow([_fmt(a), _fmt(b), _fmt(c)])


def read_transitions_csv(path: str | Path, tabular: bool) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if tabular:
        cols = {k: np.array([int(r[k]) for r in rows], dtype=int) for k in ("x", "u", "x_next")}
    else:
        cols = {k: np.array([[float(s) for s in r[k].split()] for r in rows])
                for k in ("x", "u", "x_next")}
    return Batch(cols["x"], cols["u"], cols["x_next"])


def discounted_visitation(mdp: TabularMdp, policy_table: np.ndarray,
                          transition: np.ndarray | None = None) -> np.ndarray:
    """Exact normalized discounted state distribution (1-γ) Σ γ^t P(x_t)."""
    p = mdp.transition if transition is None else transition
    p_pi = np.einsum("xu,xuy->xy", policy_table, p)
    g = mdp.discount
    return (1 - g) * np.linalg.solve(np.eye(mdp.n_states) - g * p_pi.T, mdp.initial_dist)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def log_floor(p, floor: float = -30.0) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), floor)

