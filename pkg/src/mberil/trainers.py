"""Training loops for model-based imitation and its ablations/baselines.

One outer iteration of the full algorithm:

1. collect real transitions with the learner's policy,
2. collect simulated transitions with policy and learned model,
3. fit r, V, Q with both discriminators (policy and model frozen),
4. collect more simulated transitions,
5. fit V, Q to the soft Bellman relations,
6. improve model and policy by KL projection onto their induced targets.

The other variants drop or replace phases; ``PHASES`` is the schedule table.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .approx import GaussianMap, MlpSpec, NumericError, TabularMap
from .losses import (LossBreakdown, ValueFn, loss_bc, loss_disc_total, loss_ermbc,
                     loss_improve_model, loss_improve_policy, loss_model_nll,
                     loss_policy_disc, loss_policy_eval, loss_policy_eval_mf)
from .mdp import (Batch, BufferRole, RegularizationConfig, TabularMdp, TransitionBuffer,
                  is_tabular, log_floor, rollout_batch, sample_union)
from .oracle import SolveResult, solve, uniform_baselines


class Variant(str, Enum):
    MB_ERIL = "MB-ERIL"
    ERMBC = "ERMBC"
    MB_ERIL_NOPE = "MB-ERIL-noPE"
    DYNA_MF_ERIL = "Dyna-MF-ERIL"
    MF_ERIL = "MF-ERIL"
    BC = "BC"


PHASES: dict[Variant, tuple[str, ...]] = {
    Variant.MB_ERIL: ("collect_real", "collect_sim", "disc", "collect_sim", "pe", "improve"),
    Variant.ERMBC: ("collect_real", "collect_sim", "ermbc", "collect_sim", "pe", "improve"),
    Variant.MB_ERIL_NOPE: ("collect_real", "collect_sim", "disc", "improve"),
    Variant.DYNA_MF_ERIL: ("collect_real", "model_mle", "collect_sim", "disc_mf", "pe_mf",
                           "improve_policy"),
    Variant.MF_ERIL: ("collect_real", "disc_mf", "pe_mf", "improve_policy"),
    Variant.BC: ("bc",),
}

HAS_MODEL = {Variant.MB_ERIL, Variant.ERMBC, Variant.MB_ERIL_NOPE, Variant.DYNA_MF_ERIL}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, reports: list):
        super().__init__(message)
        self.reports = reports


@dataclass
class Schedule:
    iterations: int = 30
    n_real: int = 100
    n_sim: int = 10_000
    horizon: int = 50
    disc_steps: int = 50
    pe_steps: int = 100
    improve_steps: int = 50
    model_steps: int = 50
    bc_steps: int = 50
    batch_size: int = 128
    lr_critic: float = 3e-4
    lr_policy: float = 3e-4
    lr_model: float = 3e-4
    k_model: int | None = None
    k_policy: int | None = None
    k_improve: int = 1
    sim_capacity: int | None = 100_000
    hidden: tuple[int, ...] = (64, 64)
    model_init: str = "support"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.model_init not in ("support", "uniform"):
            raise ValueError("model_init must be 'support' or 'uniform'")
        if self.n_real < 1 or self.n_sim < 1 or self.horizon < 1:
            raise ValueError("collection sizes and horizon must be >= 1")


# -- optimizer ---------------------------------------------------------------

def optimizer_step(params: dict, grads: dict, moments: dict, lr: float,
                   b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update, in place.

    ``moments`` holds ``t`` and per-parameter first/second moment arrays.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    t = moments.get("t", 0) + 1
    moments["t"] = t
    for k, g in grads.items():
        m = moments.setdefault("m_" + k, np.zeros_like(params[k]))
        v = moments.setdefault("v_" + k, np.zeros_like(params[k]))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            params[k] -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)


# -- learner state -------------------------------------------------------------

@dataclass
class IterationReport:
    iteration: int
    real_interactions: int
    losses: LossBreakdown
    metrics: dict = field(default_factory=dict)

    @property
    def eval_return(self) -> float:
        return self.metrics.get("eval_return", float("nan"))


@dataclass
class TrainState:
    vf: ValueFn
    model: object
    policy: object
    expert: TransitionBuffer
    real: TransitionBuffer
    sim: TransitionBuffer
    rng: np.random.Generator
    iteration: int = 0
    real_interactions: int = 0
    eval_interactions: int = 0
    moments: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    cursor: tuple | None = None

    def components(self) -> dict[str, object]:
        return {**self.vf.parts(), "model": self.model, "policy": self.policy}

    @property
    def total_interactions(self) -> int:
        return self.real_interactions + self.eval_interactions


def support_model(env: TabularMdp) -> TabularMap:
    """Model uniform over each row's reachable next states (log floor elsewhere)."""
    q0, _ = uniform_baselines(env)
    return TabularMap(log_floor(q0))


def init_learner(env, rng: np.random.Generator, hidden=(64, 64), model_init: str = "support"):
    """Fresh (value functions, model, policy) sized for ``env``.

    A tabular model starts either uniform over all next states or uniform over
    the environment's support. The structured model discriminator can only
    reweight next states through V(x'), so it cannot carve a support out of a
    model that puts mass on impossible transitions.
    """
    if is_tabular(env):
        s, a = env.n_states, env.n_actions
        model = support_model(env) if model_init == "support" else TabularMap.uniform(s, a, s)
        return ValueFn.tabular(s, a), model, TabularMap.uniform(s, a)
    ds, da = env.state_dim, env.action_dim
    vf = ValueFn.mlp(ds, da, rng, tuple(hidden))
    model = GaussianMap(MlpSpec((ds + da, *hidden, 2 * ds), head="gaussian"), rng,
                        init_log_std=-2.0)
    policy = GaussianMap(MlpSpec((ds, *hidden, 2 * da), head="gaussian"), rng)
    return vf, model, policy


def new_state(env, expert: TransitionBuffer, schedule: Schedule, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    vf, model, policy = init_learner(env, rng, schedule.hidden, schedule.model_init)
    return TrainState(vf, model, policy, expert, TransitionBuffer(BufferRole.REAL_LEARNER),
                      TransitionBuffer(BufferRole.SIMULATED, schedule.sim_capacity), rng)


# -- data collection -------------------------------------------------------------

def collect_real(state: TrainState, env, n: int, horizon: int = 50) -> None:
    """Append ``n`` transitions from running the policy in the real environment.

    Episodes of length ``horizon`` continue across calls.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = state.rng
    if state.cursor is None:
        state.cursor = (env.reset(rng), 0)
    x, t = state.cursor
    xs, us, nxts = [], [], []
    for _ in range(n):
        if t >= horizon:
            x, t = env.reset(rng), 0
        u = state.policy.sample(np.asarray([x]), rng)[0]
        if not is_tabular(env):
            u = env.clamp(u)
        nxt = env.step(x, u, rng)
        xs.append(x)
        us.append(u)
        nxts.append(nxt)
        x, t = nxt, t + 1
    state.cursor = (x, t)
    state.real.push_batch(Batch(np.array(xs), np.array(us), np.array(nxts)))
    state.real_interactions += n


def collect_sim(state: TrainState, env, n: int, horizon: int = 50) -> None:
    """Append ``n`` transitions from running the policy inside the learned model."""
    if n < 1:
        raise ValueError("n must be >= 1")
    episodes = math.ceil(n / horizon)
    batch = rollout_batch(env, state.policy, horizon, episodes, state.rng, dynamics=state.model)
    state.sim.push_batch(Batch(batch.x[:n], batch.u[:n], batch.x_next[:n]))


def check_sizes(n_expert: int, n_real: int, n_sim: int) -> None:
    if not n_sim > n_real >= n_expert:
        warnings.warn(f"expected N_sim >> N_real >= N_expert, got {n_sim}, {n_real}, {n_expert}",
                      stacklevel=2)


# -- phases ----------------------------------------------------------------------

def _apply(state: TrainState, grads: dict, names: tuple[str, ...], lrs: dict) -> None:
    parts = state.components()
    for name in names:
        if name in grads:
            optimizer_step(parts[name].params, grads[name], state.moments.setdefault(name, {}),
                           lrs[name])


def _k(m, k):
    return k if (k is not None or isinstance(m, TabularMap)) else 10


def _check(value: float, phase: str, state: TrainState) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in phase {phase!r} at iteration "
                               f"{state.iteration}", [])
    return value


def run_phase(phase: str, state: TrainState, env, cfg: RegularizationConfig,
              schedule: Schedule, variant: Variant) -> dict[str, float]:
    """Execute one phase and return the mean of each loss it reports."""
    s, rng, bs = schedule, state.rng, schedule.batch_size
    lrs = {"reward": s.lr_critic, "value": s.lr_critic, "qvalue": s.lr_critic,
           "model": s.lr_model, "policy": s.lr_policy}
    sums: dict[str, float] = {}

    def add(key, value):
        sums[key] = sums.get(key, 0.0) + _check(float(value), phase, state)

    if phase == "collect_real":
        collect_real(state, env, s.n_real, s.horizon)
        state.trace.append((state.iteration, phase, s.n_real))
        return {}
    if phase == "collect_sim":
        collect_sim(state, env, s.n_sim, s.horizon)
        state.trace.append((state.iteration, phase, s.n_sim))
        return {}

    all_bufs = [b for b in (state.expert, state.real, state.sim) if len(b)]
    steps = {"disc": s.disc_steps, "disc_mf": s.disc_steps, "ermbc": s.disc_steps,
             "pe": s.pe_steps, "pe_mf": s.pe_steps, "improve": s.improve_steps,
             "improve_policy": s.improve_steps, "model_mle": s.model_steps,
             "bc": s.bc_steps}[phase]
    if phase in ("improve", "improve_policy"):
        q_frozen, b_frozen = state.model.copy(), state.policy.copy()
    for _ in range(steps):
        if phase == "disc":
            real = sample_union([state.expert, state.real], bs, rng)
            sim = state.sim.sample_batch(bs, rng)
            expert = state.expert.sample_batch(bs, rng)
            learner = sample_union([state.real, state.sim], bs, rng)
            br, g = loss_disc_total(state.vf, state.model, state.policy, real, sim, expert,
                                    learner, cfg)
            add("model_disc", br.model_disc)
            add("policy_disc", br.policy_disc)
            add("total_disc", br.total_disc)
            _apply(state, g, ("reward", "value", "qvalue"), lrs)
        elif phase == "disc_mf":
            learner_bufs = [state.real, state.sim] if variant is Variant.DYNA_MF_ERIL else [state.real]
            expert = state.expert.sample_batch(bs, rng)
            learner = sample_union(learner_bufs, bs, rng)
            loss, g = loss_policy_disc(state.vf, state.policy, expert, learner, cfg,
                                       model_free=True)
            add("policy_disc", loss)
            _apply(state, g, ("reward", "value"), lrs)
        elif phase == "ermbc":
            expert = state.expert.sample_batch(bs, rng)
            pe_batch = sample_union(all_bufs, bs, rng)
            loss, g = loss_ermbc(state.vf, state.model, state.policy, expert, cfg, pe_batch,
                                 _k(state.model, s.k_model), _k(state.policy, s.k_policy), rng)
            add("ermbc", loss)
            _apply(state, g, ("model", "policy", "value", "qvalue"), lrs)
        elif phase in ("pe", "pe_mf"):
            bufs = all_bufs if phase == "pe" or variant is Variant.DYNA_MF_ERIL else \
                [state.expert, state.real]
            batch = sample_union(bufs, bs, rng)
            if phase == "pe":
                loss, g, (lq, lv) = loss_policy_eval(
                    state.vf, state.model, state.policy, batch, cfg,
                    _k(state.model, s.k_model), _k(state.policy, s.k_policy), rng)
            else:
                loss, g, (lq, lv) = loss_policy_eval_mf(
                    state.vf, state.policy, batch, cfg, _k(state.policy, s.k_policy), rng)
            add("pe_qv", lq)
            add("pe_vq", lv)
            _apply(state, g, ("value", "qvalue"), lrs)
        elif phase in ("improve", "improve_policy"):
            batch = sample_union(all_bufs, bs, rng)
            if phase == "improve":
                loss, g = loss_improve_model(state.model, state.vf, q_frozen, batch, cfg,
                                             s.k_improve, rng)
                add("improve_model", loss)
                _apply(state, g, ("model",), lrs)
            loss, g = loss_improve_policy(state.policy, state.vf, b_frozen, batch.x, cfg,
                                          s.k_improve, rng)
            add("improve_policy", loss)
            _apply(state, g, ("policy",), lrs)
        elif phase == "model_mle":
            loss, g = loss_model_nll(state.model, state.real.sample_batch(bs, rng))
            add("model_mle", loss)
            _apply(state, g, ("model",), lrs)
        elif phase == "bc":
            loss, g = loss_bc(state.policy, state.expert.sample_batch(bs, rng))
            add("bc", loss)
            _apply(state, g, ("policy",), lrs)
        else:
            raise ValueError(f"unknown phase {phase!r}")
    state.trace.append((state.iteration, phase, steps))
    return {k: v / steps for k, v in sums.items()}


def train(variant: Variant | str, env, expert: TransitionBuffer, cfg: RegularizationConfig,
          schedule: Schedule, seed: int, evaluate: Callable[[TrainState], dict] | None = None,
          state: TrainState | None = None, on_iteration: Callable | None = None):
    """Run ``schedule.iterations`` outer iterations; returns (state, reports).

    Passing a restored ``state`` resumes training where it stopped.
    """
    variant = Variant(variant)
    if len(expert) == 0:
        raise ValueError("expert buffer is empty")
    if variant is not Variant.BC:
        check_sizes(len(expert), schedule.n_real * schedule.iterations, schedule.n_sim)
    if state is None:
        state = new_state(env, expert, schedule, seed)
    reports: list[IterationReport] = []
    while state.iteration < schedule.iterations:
        losses: dict[str, float] = {}
        try:
            for phase in PHASES[variant]:
                losses.update(run_phase(phase, state, env, cfg, schedule, variant))
        except (TrainingDiverged, NumericError, FloatingPointError) as err:
            raise TrainingDiverged(f"{variant.value}: {err}", reports) from err
        state.iteration += 1
        br = LossBreakdown(**{k: v for k, v in losses.items() if k in LossBreakdown.__annotations__})
        if "pe_qv" in losses:
            br.pe_qv, br.pe_vq = losses["pe_qv"], losses["pe_vq"]
        metrics = evaluate(state) if evaluate is not None else {}
        rep = IterationReport(state.iteration, state.real_interactions, br, metrics)
        reports.append(rep)
        if on_iteration is not None:
            on_iteration(state, rep)
    return state, reports


# -- expert ----------------------------------------------------------------------

def expert_world(env: TabularMdp, cfg: RegularizationConfig,
                 tol: float = 1e-10) -> tuple[SolveResult, TabularMdp]:
    """Oracle solution under uniform baselines and the environment it induces.

    The returned MDP keeps reward, discount and start distribution of ``env``
    but moves according to the induced dynamics, so expert and learner act
    in the same world.
    """
    q0, b0 = uniform_baselines(env)
    res = solve(env, q0, b0, cfg, tol=tol)
    world = env.with_transition(res.expert_model.table(), name=env.name + "-induced")
    return res, world


def make_expert(env: TabularMdp, cfg: RegularizationConfig, n_trajectories: int, horizon: int,
                rng: np.random.Generator, solution: SolveResult | None = None) -> TransitionBuffer:
    """Expert transitions sampled from the oracle's (policy, dynamics)."""
    if solution is None:
        solution, world = expert_world(env, cfg)
    else:
        world = env.with_transition(solution.expert_model.table())
    batch = rollout_batch(world, solution.expert_policy, horizon, n_trajectories, rng)
    buf = TransitionBuffer(BufferRole.EXPERT)
    buf.push_batch(batch)
    return buf


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Parameters, buffers, optimizer moments and RNG state in one ``.npz``."""
    arrays, meta = {}, {"iteration": state.iteration,
                        "real_interactions": state.real_interactions,
                        "eval_interactions": state.eval_interactions,
                        "rng": state.rng.bit_generator.state,
                        "trace": state.trace, "moments_t": {}}
    for name, obj in state.components().items():
        for k, v in obj.params.items():
            arrays[f"param/{name}/{k}"] = v
    for name, mom in state.moments.items():
        meta["moments_t"][name] = mom.get("t", 0)
        for k, v in mom.items():
            if k != "t":
                arrays[f"moment/{name}/{k}"] = v
    for role, buf in (("expert", state.expert), ("real", state.real), ("sim", state.sim)):
        b = buf.as_batch()
        for k in ("x", "u", "x_next"):
            arrays[f"buffer/{role}/{k}"] = getattr(b, k)
    if state.cursor is not None:
        arrays["cursor/x"] = np.asarray(state.cursor[0])
        meta["cursor_t"] = state.cursor[1]
    meta["sim_capacity"] = state.sim.capacity
    arrays["meta"] = np.frombuffer(json.dumps(meta, default=_json_default).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path: str | Path, env, schedule: Schedule) -> TrainState:
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    meta = json.loads(bytes(data.pop("meta")).decode())
    bufs = {}
    for role, brole, cap in (("expert", BufferRole.EXPERT, None),
                             ("real", BufferRole.REAL_LEARNER, None),
                             ("sim", BufferRole.SIMULATED, meta["sim_capacity"])):
        buf = TransitionBuffer(brole, cap)
        b = Batch(*(data[f"buffer/{role}/{k}"] for k in ("x", "u", "x_next")))
        if len(b):
            buf.push_batch(b)
        bufs[role] = buf
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = new_state(env, bufs["expert"], schedule, 0)
    state.real, state.sim, state.rng = bufs["real"], bufs["sim"], rng
    for name, obj in state.components().items():
        for k in obj.params:
            obj.params[k] = data[f"param/{name}/{k}"].copy()
    for key, v in data.items():
        if key.startswith("moment/"):
            _, name, k = key.split("/", 2)
            state.moments.setdefault(name, {})[k] = v.copy()
    for name, t in meta["moments_t"].items():
        state.moments.setdefault(name, {})["t"] = t
    state.iteration = meta["iteration"]
    state.real_interactions = meta["real_interactions"]
    state.eval_interactions = meta["eval_interactions"]
    state.trace = [tuple(t) for t in meta["trace"]]
    if "cursor/x" in data:
        cx = data["cursor/x"]
        state.cursor = (cx.item() if cx.ndim == 0 else cx, meta["cursor_t"])
    return state


def schedule_from_dict(d: dict) -> Schedule:
    known = set(Schedule.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
    return Schedule(**d)


def schedule_to_dict(s: Schedule) -> dict:
    d = asdict(s)
    d["hidden"] = list(s.hidden)
    return d
