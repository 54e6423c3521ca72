"""Metrics, experiment configuration and the comparison protocol."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx import GaussianMap, MlpSpec, TabularMap
from .mdp import (Batch, BufferRole, RegularizationConfig, TabularMdp, TransitionBuffer,
                  gridworld, is_tabular, load_mdp, point_mass, random_mdp, rollout_batch)
from .trainers import (HAS_MODEL, Schedule, TrainState, Variant, check_sizes, expert_world,
                       make_expert, schedule_from_dict, train)

LOG_FLOOR = -30.0

METRIC_COLUMNS = ("iteration", "real_interactions", "loss_model_disc", "loss_policy_disc",
                  "loss_pe", "loss_improve_model", "loss_improve_policy", "eval_return",
                  "normalized_return", "nll_policy", "nll_model")

SUMMARY_COLUMNS = ("variant", "iteration", "real_interactions", "runs", "median", "mean", "sd",
                   "lower", "upper")


# -- metrics -----------------------------------------------------------------------

def normalized_return(returns, r_max: float, r_min: float = 0.0) -> float:
    """Mean of ``(R - R_min) / (R_max - R_min)``."""
    if not r_max > r_min:
        raise ValueError("r_max must exceed r_min")
    returns = np.asarray(returns, dtype=float)
    if returns.size == 0:
        raise ValueError("no returns given")
    return float(np.mean((returns - r_min) / (r_max - r_min)))


def _is_model(m) -> bool:
    if isinstance(m, TabularMap):
        return m.params["logits"].ndim == 3
    return m.spec.n_in != m.dim


def nll(m, test: TransitionBuffer | Batch, kind: str | None = None) -> float:
    """Mean negative log-likelihood of ``test`` under a policy or model.

    A policy scores ``u`` given ``x``; a model scores ``x'`` given ``(x, u)``.
    Log-densities are floored so impossible events cost a finite amount.
    """
    batch = test.as_batch() if isinstance(test, TransitionBuffer) else test
    if len(batch) == 0:
        raise ValueError("test set is empty")
    if kind is None:
        kind = "model" if _is_model(m) else "policy"
    if kind == "model":
        lp = m.log_prob((batch.x, batch.u), batch.x_next)
    elif kind == "policy":
        lp = m.log_prob(batch.x, batch.u)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return float(-np.mean(np.maximum(lp, LOG_FLOOR)))


def episode_returns(env, policy, episodes: int, horizon: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Undiscounted sum of state rewards over each of ``episodes`` rollouts."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    batch = rollout_batch(env, policy, horizon, episodes, rng)
    return np.asarray(env.state_reward(batch.x), float).reshape(episodes, horizon).sum(axis=1)


def evaluate_policy(env, policy, episodes: int, horizon: int, rng: np.random.Generator) -> float:
    return float(episode_returns(env, policy, episodes, horizon, rng).mean())


def interactions_to_threshold(rows: list[dict], threshold: float = 0.9) -> float:
    """Real interactions at the first evaluation reaching ``threshold`` (inf if never)."""
    for row in rows:
        if row["normalized_return"] >= threshold:
            return float(row["real_interactions"])
    return math.inf


# -- continuous expert -----------------------------------------------------------

@dataclass
class ScriptedGaussianPolicy:
    """Proportional controller toward ``goal`` with Gaussian exploration."""

    goal: np.ndarray
    gain: float = 2.0
    std: float = 0.1

    def _mean(self, x):
        return np.clip(self.gain * (self.goal - np.atleast_2d(x)), -1.0, 1.0)

    def sample(self, x, rng):
        mean = self._mean(x)
        return mean + self.std * rng.standard_normal(mean.shape)

    def log_prob(self, x, u):
        z = (np.atleast_2d(u) - self._mean(x)) / self.std
        return np.sum(-0.5 * z * z - math.log(self.std) - 0.5 * math.log(2 * math.pi), axis=-1)


# -- configuration ---------------------------------------------------------------

ENV_KINDS = {"gridworld", "random", "file", "point_mass"}


@dataclass
class ExperimentConfig:
    env: dict = field(default_factory=lambda: {"kind": "gridworld"})
    variants: list[str] = field(default_factory=lambda: ["MB-ERIL", "MF-ERIL"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    regularization: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    expert_trajectories: int = 30
    n_real: int = 100
    n_sim: int = 10_000
    horizon: int = 50
    iterations: int = 30
    eval_episodes: int = 20
    expert_episodes: int = 100
    threshold: float = 0.9
    expert_sizes: list[int] = field(default_factory=lambda: [1, 5, 10, 30])
    out_dir: str = "runs"

    def __post_init__(self):
        self.variants = [Variant(v).value for v in self.variants]
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        kind = self.env.get("kind")
        if kind not in ENV_KINDS:
            raise ValueError(f"env.kind must be one of {sorted(ENV_KINDS)}")
        for key in ("n_real", "n_sim", "horizon", "iterations", "eval_episodes",
                    "expert_episodes", "expert_trajectories"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        clash = {"n_real", "n_sim", "horizon", "iterations"} & set(self.schedule)
        if clash:
            raise ValueError(f"set {sorted(clash)} at the top level, not under schedule")
        self.reg_config()
        self.make_schedule()

    def reg_config(self) -> RegularizationConfig:
        return RegularizationConfig(**self.regularization)

    def make_schedule(self) -> Schedule:
        return schedule_from_dict({**self.schedule, "n_real": self.n_real, "n_sim": self.n_sim,
                                   "horizon": self.horizon, "iterations": self.iterations})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        reg_unknown = set(d.get("regularization", {})) - set(RegularizationConfig.__dataclass_fields__)
        if reg_unknown:
            raise ValueError(f"unknown regularization keys: {sorted(reg_unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def build_env(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "gridworld":
        return gridworld(**spec)
    if kind == "random":
        seed = spec.pop("seed", 0)
        return random_mdp(rng=np.random.default_rng(seed), **spec)
    if kind == "file":
        return load_mdp(spec["path"])
    return point_mass(**spec)


# -- protocol ----------------------------------------------------------------------

@dataclass
class Task:
    """Everything shared by all runs of one experiment."""

    world: object
    expert_policy: object
    r_max: float
    r_min: float = 0.0
    solution: object = None

    def expert_buffer(self, n_trajectories: int, horizon: int, seed: int,
                      cfg: RegularizationConfig) -> TransitionBuffer:
        rng = np.random.default_rng([seed, 2])
        if self.solution is not None:
            return make_expert(self.world, cfg, n_trajectories, horizon, rng, self.solution)
        buf = TransitionBuffer(BufferRole.EXPERT)
        buf.push_batch(rollout_batch(self.world, self.expert_policy, horizon, n_trajectories, rng))
        return buf


def build_task(config: ExperimentConfig) -> Task:
    """Expert, the world the learner acts in, and the return used for normalization.

    For tabular environments the expert is the oracle solution under uniform
    baselines and the world moves by its induced dynamics.
    """
    env = build_env(config.env)
    cfg = config.reg_config()
    rng = np.random.default_rng(987_654_321)
    if is_tabular(env):
        solution, world = expert_world(env, cfg)
        policy = solution.expert_policy
    else:
        solution, world = None, env
        policy = ScriptedGaussianPolicy(np.asarray(config.env.get("goal", (1.0, 1.0)), float))
    r_max = evaluate_policy(world, policy, config.expert_episodes, config.horizon, rng)
    if not r_max > 0.0:
        raise ValueError("expert return must be positive to normalize against R_min = 0")
    return Task(world, policy, r_max, 0.0, solution)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v != "" else math.nan) for k, v in r.items()})
        out[-1]["iteration"] = int(out[-1]["iteration"])
        out[-1]["real_interactions"] = int(out[-1]["real_interactions"])
    return out


def run_single(config: ExperimentConfig, task: Task, variant: str, seed: int,
               expert_trajectories: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train one (variant, seed) pair and return its metric rows."""
    cfg = config.reg_config()
    schedule = config.make_schedule()
    n_traj = expert_trajectories or config.expert_trajectories
    expert = task.expert_buffer(n_traj, config.horizon, seed, cfg)
    test = task.expert_buffer(n_traj, config.horizon, seed + 1_000_003, cfg)
    eval_rng = np.random.default_rng([seed, 1])
    variant = Variant(variant)

    def evaluate(state: TrainState) -> dict:
        rets = episode_returns(task.world, state.policy, config.eval_episodes, config.horizon,
                               eval_rng)
        state.eval_interactions += config.eval_episodes * config.horizon
        out = {"eval_return": float(rets.mean()),
               "normalized_return": normalized_return(rets, task.r_max, task.r_min),
               "nll_policy": nll(state.policy, test, "policy")}
        if variant in HAS_MODEL:
            out["nll_model"] = nll(state.model, test, "model")
        return out

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state, reports = train(variant, task.world, expert, cfg, schedule, seed, evaluate)
    rows = []
    for rep in reports:
        lb = rep.losses
        row = {"iteration": rep.iteration, "real_interactions": rep.real_interactions,
               "loss_model_disc": lb.model_disc, "loss_policy_disc": lb.policy_disc,
               "loss_pe": lb.pe_qv + lb.pe_vq, "loss_improve_model": lb.improve_model,
               "loss_improve_policy": lb.improve_policy}
        row.update(rep.metrics)
        rows.append(row)
    return state, rows


def metrics_path(out: Path, variant: str, seed: int) -> Path:
    return out / f"metrics_{variant}_seed{seed}.csv"


def summarize(paths_by_variant: dict[str, list[Path]]) -> list[dict]:
    """Median, mean and +-1 sd of normalized return per variant and iteration.

    Computed from the per-run CSV files alone.
    """
    rows = []
    for variant, paths in paths_by_variant.items():
        runs = [read_metrics(p) for p in paths]
        n_iter = min(len(r) for r in runs)
        for i in range(n_iter):
            vals = np.array([r[i]["normalized_return"] for r in runs])
            mean, sd = float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append({"variant": variant, "iteration": runs[0][i]["iteration"],
                         "real_interactions": runs[0][i]["real_interactions"],
                         "runs": len(runs), "median": float(np.median(vals)), "mean": mean,
                         "sd": sd, "lower": mean - sd, "upper": mean + sd})
    return rows


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([row["variant"]] + [_fmt(row[c]) for c in SUMMARY_COLUMNS[1:]])


@dataclass
class ExperimentResult:
    metric_files: dict[tuple[str, int], Path]
    summary_file: Path
    rows: dict[tuple[str, int], list[dict]]
    states: dict[tuple[str, int], TrainState]
    task: Task
    figure: Path | None = None


def run_experiment(config: ExperimentConfig, svg: bool = False,
                   progress=None) -> ExperimentResult:
    """Every (variant, seed) run, its metrics CSV, a summary CSV and optional figure."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(config)
    check_sizes(config.expert_trajectories * config.horizon, config.n_real * config.iterations,
                config.n_sim)
    files, rows, states = {}, {}, {}
    for variant in config.variants:
        for seed in config.seeds:
            state, run_rows = run_single(config, task, variant, seed)
            path = metrics_path(out, variant, seed)
            write_rows(path, METRIC_COLUMNS, run_rows)
            files[(variant, seed)] = path
            rows[(variant, seed)] = run_rows
            states[(variant, seed)] = state
            if progress is not None:
                progress(variant, seed, run_rows)
    summary = summarize({v: [files[(v, s)] for s in config.seeds] for v in config.variants})
    summary_path = out / "summary.csv"
    write_summary(summary_path, summary)
    figure = None
    if svg:
        from .plotting import plot_learning_curves
        figure = out / "learning_curves.svg"
        plot_learning_curves(summary, figure)
    return ExperimentResult(files, summary_path, rows, states, task, figure)


SWEEP_COLUMNS = ("variant", "expert_trajectories", "seed", "final_normalized_return")


def sweep_expert(config: ExperimentConfig, svg: bool = False) -> tuple[Path, list[dict]]:
    """Final-iteration normalized return as a function of the expert dataset size."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(config)
    rows = []
    for variant in config.variants:
        for n_traj in config.expert_sizes:
            for seed in config.seeds:
                _, run_rows = run_single(config, task, variant, seed, n_traj)
                rows.append({"variant": variant, "expert_trajectories": n_traj, "seed": seed,
                             "final_normalized_return": run_rows[-1]["normalized_return"]})
    path = out / "expert_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["variant"]] + [_fmt(r[c]) for c in SWEEP_COLUMNS[1:]])
    if svg:
        from .plotting import plot_expert_sweep
        plot_expert_sweep(rows, out / "expert_sweep.svg")
    return path, rows
