"""Exact solver for the entropy/KL-regularized Bellman equation on tabular MDPs.

With baselines ``q(x'|x,u)`` and ``b(u|x)`` the fixed point is

    Q(x,u) = 1/beta * log sum_x' exp(beta * (r(x) + gamma V(x') + log q(x'|x,u) / eta))
    V(x)   = 1/beta * log sum_u  exp(beta * (Q(x,u) + log b(u|x) / eta))

and the maximizing policy and dynamics are the corresponding softmax rows.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx import TabularMap, as_table, logsumexp
from .mdp import RegularizationConfig, TabularMdp


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class ValueTable:
    v: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.q))):
            raise ValueError("value tables must be finite")


@dataclass
class SolveResult:
    values: ValueTable
    expert_policy: TabularMap
    expert_model: TabularMap
    iterations: int
    residual: float
    residual_trace: list[float] = field(default_factory=list)


def _log_baselines(mdp: TabularMdp, q, b):
    q = as_table(q)
    b = as_table(b)
    if q.shape != mdp.transition.shape or b.shape != mdp.transition.shape[:2]:
        raise ValueError("baseline shapes do not match the MDP")
    if np.any((mdp.transition > 0) & (q <= 0)):
        raise ValueError("model baseline q vanishes where the MDP has transitions")
    if np.any(b <= 0):
        raise ValueError("policy baseline b must be strictly positive")
    with np.errstate(divide="ignore"):
        return np.log(q), np.log(b)


def _q_backup(v, reward, log_q, gamma, cfg):
    beta = cfg.beta
    inner = beta * (reward[:, None, None] + gamma * v[None, None, :] + log_q / cfg.eta)
    return logsumexp(inner, axis=2) / beta


def _v_backup(q_sa, log_b, cfg):
    return logsumexp(cfg.beta * (q_sa + log_b / cfg.eta), axis=1) / cfg.beta


def soft_backup(values: ValueTable, mdp: TabularMdp, q, b, cfg: RegularizationConfig) -> ValueTable:
    """One application of both log-sum-exp relations (Q from V, then V from Q)."""
    log_q, log_b = _log_baselines(mdp, q, b)
    q_new = _q_backup(values.v, mdp.reward, log_q, cfg.gamma, cfg)
    return ValueTable(_v_backup(q_new, log_b, cfg), q_new)


def solve(mdp: TabularMdp, q, b, cfg: RegularizationConfig, tol: float = 1e-10,
          max_iter: int = 100_000) -> SolveResult:
    """Soft value iteration until successive V iterates differ by less than ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    log_q, log_b = _log_baselines(mdp, q, b)
    v = np.zeros(mdp.n_states)
    trace = []
    for it in range(1, max_iter + 1):
        q_sa = _q_backup(v, mdp.reward, log_q, cfg.gamma, cfg)
        v_new = _v_backup(q_sa, log_b, cfg)
        res = float(np.max(np.abs(v_new - v)))
        trace.append(res)
        v = v_new
        if res < tol:
            break
    else:
        raise ConvergenceError(f"soft value iteration did not converge in {max_iter} iterations "
                               f"(residual {res:.3e})", res, max_iter)
    values = ValueTable(v, q_sa)
    return SolveResult(values, induced_policy(values, b, cfg),
                       induced_model(values, mdp.reward, q, cfg), it, res, trace)


def _model_log_table(values: ValueTable, reward, q, cfg):
    with np.errstate(divide="ignore"):
        log_q = np.log(as_table(q))
    beta = cfg.beta
    return beta * (reward[:, None, None] + cfg.gamma * values.v[None, None, :] + log_q / cfg.eta
                   - values.q[:, :, None])


def induced_model(values: ValueTable, mdp_reward, q, cfg: RegularizationConfig) -> TabularMap:
    """``p(x'|x,u) = exp(beta (r + gamma V' + log q / eta)) / exp(beta Q)``."""
    return TabularMap(_model_log_table(values, np.asarray(mdp_reward, float), q, cfg))


def induced_policy(values: ValueTable, b, cfg: RegularizationConfig) -> TabularMap:
    """``pi(u|x) = exp(beta (Q + log b / eta)) / exp(beta V)``."""
    with np.errstate(divide="ignore"):
        log_b = np.log(as_table(b))
    return TabularMap(cfg.beta * (values.q + log_b / cfg.eta - values.v[:, None]))


def literal_table(m: TabularMap) -> np.ndarray:
    """Probabilities exactly as the induced formula gives them (no renormalization)."""
    return np.exp(m.params["logits"])


def inner_objective(p_tilde, x: int, u: int, values: ValueTable, mdp: TabularMdp, q,
                    cfg: RegularizationConfig) -> float:
    """Regularized one-step objective maximized over the next-state distribution.

    ``sum p~ [r(x) + gamma V(x') - log p~ / kappa - log(p~ / q) / eta]``; returns
    ``-inf`` if ``p~`` puts mass where ``q`` has none.
    """
    p_tilde = np.asarray(p_tilde, dtype=float)
    if (p_tilde.shape != (mdp.n_states,) or np.any(p_tilde < 0)
            or abs(p_tilde.sum() - 1.0) > 1e-9):
        raise ValueError("p_tilde must be a probability vector over next states")
    q_row = as_table(q)[x, u]
    if np.any((p_tilde > 0) & (q_row <= 0)):
        return float("-inf")
    s = p_tilde > 0
    pt, qr = p_tilde[s], q_row[s]
    gain = mdp.reward[x] + cfg.gamma * values.v[s]
    return float(np.sum(pt * (gain - np.log(pt) / cfg.kappa - np.log(pt / qr) / cfg.eta)))


def log_density_ratios(values: ValueTable, mdp_reward, q, b, cfg: RegularizationConfig):
    """Closed-form scaled log-ratios ``log(p/q)/beta`` and ``log(pi/b)/beta``.

    The model table is ``r + gamma V' - Q - log q / kappa``, ``nan`` off q's support.
    """
    reward = np.asarray(mdp_reward, float)
    q_tab = as_table(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        model = (reward[:, None, None] + cfg.gamma * values.v[None, None, :]
                 - values.q[:, :, None] - np.log(q_tab) / cfg.kappa)
        model = np.where(q_tab > 0, model, np.nan)
        policy = values.q - values.v[:, None] - np.log(as_table(b)) / cfg.kappa
    return model, policy


def dump_csv(result: SolveResult, mdp: TabularMdp, q, b, cfg: RegularizationConfig,
             path: str | Path) -> None:
    """One row per (x, u, x') with both densities, values and log-ratios."""
    q_tab, b_tab = as_table(q), as_table(b)
    p_tab, pi_tab = result.expert_model.table(), result.expert_policy.table()
    m_ratio, p_ratio = log_density_ratios(result.values, mdp.reward, q, b, cfg)
    v, qv = result.values.v, result.values.q
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "u", "x_next", "p", "q", "pi", "b", "V_x", "V_next", "Q",
                    "model_log_ratio", "policy_log_ratio"])
        for x in range(mdp.n_states):
            for u in range(mdp.n_actions):
                for y in range(mdp.n_states):
                    w.writerow([x, u, y] + [f"{val:.17g}" for val in (
                        p_tab[x, u, y], q_tab[x, u, y], pi_tab[x, u], b_tab[x, u], v[x], v[y],
                        qv[x, u], m_ratio[x, u, y], p_ratio[x, u])])


def uniform_baselines(mdp: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    """Uniform policy, and a model uniform over each row's support."""
    support = (mdp.transition > 0).astype(float)
    q0 = support / support.sum(axis=2, keepdims=True)
    b0 = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    return q0, b0
