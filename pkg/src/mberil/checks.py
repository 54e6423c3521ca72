"""Property suites that exercise the closed forms end to end.

Each ``check_*`` function returns a dict of measured quantities; ``run_all``
compares them with their tolerances for the ``check`` subcommand.
"""
from __future__ import annotations

import time

import numpy as np
from scipy import stats

from .approx import GaussianMap, MlpSpec, TabularMap, grad_check
from .losses import (ValueFn, closure, d_model, d_policy, exact_pairs, exact_triples, loss_bc,
                     loss_disc_total, loss_ermbc, loss_improve_model, loss_improve_policy,
                     loss_model_disc, loss_policy_disc, loss_policy_eval, loss_policy_eval_mf,
                     pack, policy_eval_targets, policy_eval_targets_mf)
from .mdp import (Batch, BufferRole, RegularizationConfig, TabularMdp, TransitionBuffer,
                  random_mdp, sample_discounted_state)
from .oracle import SolveResult, inner_objective, literal_table, solve, uniform_baselines
from .trainers import optimizer_step


def random_baselines(mdp: TabularMdp, rng: np.random.Generator):
    """Random positive model baseline on the MDP's support and random policy baseline."""
    support = mdp.transition > 0
    q = np.where(support, rng.gamma(1.0, size=support.shape) + 0.05, 0.0)
    q /= q.sum(axis=2, keepdims=True)
    b = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return q, b + 1e-3 * (b == 0)


def random_task(rng: np.random.Generator, max_states: int = 10, max_actions: int = 4,
                cfg: RegularizationConfig | None = None):
    cfg = cfg or RegularizationConfig()
    mdp = random_mdp(int(rng.integers(2, max_states + 1)), int(rng.integers(1, max_actions + 1)),
                     rng, gamma=cfg.gamma)
    q, b = random_baselines(mdp, rng)
    return mdp, q, b, solve(mdp, q, b, cfg)


def oracle_value_fn(mdp: TabularMdp, res: SolveResult) -> ValueFn:
    vf = ValueFn.tabular(mdp.n_states, mdp.n_actions)
    vf.reward.params["table"] = mdp.reward.copy()
    vf.value.params["table"] = res.values.v.copy()
    vf.qvalue.params["table"] = res.values.q.copy()
    return vf


def check_oracle_fixed_point(seed: int = 0, n_mdps: int = 20) -> dict:
    rng = np.random.default_rng(seed)
    cfg = RegularizationConfig(kappa=2.0, eta=2.0, gamma=0.9)
    t0 = time.perf_counter()
    worst = {"residual": 0.0, "iterations": 0, "p_row_err": 0.0, "pi_row_err": 0.0}
    for _ in range(n_mdps):
        _, _, _, res = random_task(rng, cfg=cfg)
        worst["residual"] = max(worst["residual"], res.residual)
        worst["iterations"] = max(worst["iterations"], res.iterations)
        worst["p_row_err"] = max(worst["p_row_err"],
                                 float(np.max(np.abs(literal_table(res.expert_model).sum(-1) - 1))))
        worst["pi_row_err"] = max(worst["pi_row_err"],
                                  float(np.max(np.abs(literal_table(res.expert_policy).sum(-1) - 1))))
    worst["seconds"] = time.perf_counter() - t0
    return worst


def check_optimality(seed: int = 0, n_perturb: int = 100) -> dict:
    """Induced model attains Q(x,u) in the inner objective and beats perturbations."""
    rng = np.random.default_rng(seed)
    cfg = RegularizationConfig()
    mdp = random_mdp(5, 3, rng, gamma=cfg.gamma)
    q, b = random_baselines(mdp, rng)
    t0 = time.perf_counter()
    res = solve(mdp, q, b, cfg)
    p = res.expert_model.table()
    gap, margin = 0.0, np.inf
    for x in range(mdp.n_states):
        for u in range(mdp.n_actions):
            best = inner_objective(p[x, u], x, u, res.values, mdp, q, cfg)
            gap = max(gap, abs(best - res.values.q[x, u]))
            support = q[x, u] > 0
            for _ in range(n_perturb):
                logits = np.log(p[x, u][support]) + rng.normal(scale=0.5, size=support.sum())
                alt = np.zeros(mdp.n_states)
                alt[support] = np.exp(logits - logits.max())
                alt /= alt.sum()
                margin = min(margin, best - inner_objective(alt, x, u, res.values, mdp, q, cfg))
    return {"max_gap": gap, "min_margin": float(margin), "seconds": time.perf_counter() - t0}


def check_discriminators(seed: int = 0, n_mdps: int = 20,
                         cfg: RegularizationConfig | None = None) -> dict:
    """Oracle (r, V, Q) reproduce p/(p+q) and pi/(pi+b) everywhere on the support."""
    rng = np.random.default_rng(seed)
    cfg = cfg or RegularizationConfig()
    err_m = err_p = 0.0
    for _ in range(n_mdps):
        mdp, q, b, res = random_task(rng, cfg=cfg)
        vf = oracle_value_fn(mdp, res)
        p, pi = res.expert_model.table(), res.expert_policy.table()
        qm = TabularMap.from_probs(q)
        bm = TabularMap.from_probs(b)
        batch, _ = exact_triples(q)
        want = p[batch.x, batch.u, batch.x_next] / (p[batch.x, batch.u, batch.x_next]
                                                    + q[batch.x, batch.u, batch.x_next])
        err_m = max(err_m, float(np.max(np.abs(d_model(vf, qm, batch, cfg) - want))))
        xs, us = np.divmod(np.arange(mdp.n_states * mdp.n_actions), mdp.n_actions)
        want_p = pi[xs, us] / (pi[xs, us] + b[xs, us])
        err_p = max(err_p, float(np.max(np.abs(d_policy(vf, bm, xs, us, cfg) - want_p))))
    return {"model_err": err_m, "policy_err": err_p}


def check_bellman_zero(seed: int = 0, n_mdps: int = 5) -> dict:
    rng = np.random.default_rng(seed)
    cfg = RegularizationConfig()
    worst = 0.0
    for _ in range(n_mdps):
        mdp, q, b, res = random_task(rng, cfg=cfg)
        vf = oracle_value_fn(mdp, res)
        batch, w = exact_pairs(np.ones((mdp.n_states, mdp.n_actions)))
        loss, _, _ = loss_policy_eval(vf, TabularMap.from_probs(q), TabularMap.from_probs(b),
                                      batch, cfg, weights=w / w.sum())
        worst = max(worst, loss)
    return {"loss": worst}


# -- gradient fidelity -------------------------------------------------------------

def _perturb(parts, rng, scale=0.5):
    for obj in parts.values():
        for k in obj.params:
            obj.params[k] = obj.params[k] + scale * rng.standard_normal(obj.params[k].shape)


def _tabular_setup(rng):
    mdp = random_mdp(4, 3, rng, gamma=0.9)
    vf = ValueFn.tabular(4, 3)
    q = TabularMap(rng.normal(size=(4, 3, 4)))
    b = TabularMap(rng.normal(size=(4, 3)))
    n = 24
    batch = Batch(rng.integers(0, 4, n), rng.integers(0, 3, n), rng.integers(0, 4, n))
    other = Batch(rng.integers(0, 4, n), rng.integers(0, 3, n), rng.integers(0, 4, n))
    return mdp, vf, q, b, batch, other


def _continuous_setup(rng, hidden=(8, 8)):
    vf = ValueFn.mlp(2, 2, rng, hidden)
    q = GaussianMap(MlpSpec((4, *hidden, 4), head="gaussian"), rng)
    b = GaussianMap(MlpSpec((2, *hidden, 4), head="gaussian"), rng)
    n = 12
    batch = Batch(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    other = Batch(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    return vf, q, b, batch, other


def gradient_cases(rng: np.random.Generator, cfg: RegularizationConfig):
    """(name, parts, loss_fn) triples covering every trained loss in both backends."""
    _, vf, q, b, batch, other = _tabular_setup(rng)
    qf, bf = q.copy(), b.copy()
    _perturb(vf.parts(), rng)
    cvf, cq, cb, cbatch, cother = _continuous_setup(rng)
    cqf, cbf = cq.copy(), cb.copy()
    _perturb({"q": cq, "b": cb}, rng, 0.1)
    fixed = lambda s: np.random.default_rng(s)
    cases = [
        ("model_disc/tabular", vf.parts(), lambda: loss_model_disc(vf, q, batch, other, cfg)),
        ("policy_disc/tabular", vf.parts(), lambda: loss_policy_disc(vf, b, batch, other, cfg)),
        ("policy_disc_mf/tabular", vf.parts(),
         lambda: loss_policy_disc(vf, b, batch, other, cfg, model_free=True)),
        ("disc_total/tabular", vf.parts(),
         lambda: _first(loss_disc_total(vf, q, b, batch, other, other, batch, cfg))),
        # evaluation targets are constants of the loss, so they are fixed here too
        ("policy_eval/tabular_exact", vf.parts(),
         _pe(vf, q, b, batch, cfg, policy_eval_targets(vf, q, b, batch, cfg))),
        ("policy_eval/tabular_sampled", vf.parts(),
         _pe(vf, q, b, batch, cfg, policy_eval_targets(vf, q, b, batch, cfg, 3, 3, fixed(1)))),
        ("policy_eval_mf/tabular", vf.parts(),
         lambda t=policy_eval_targets_mf(vf, b, batch, cfg): loss_policy_eval_mf(
             vf, b, batch, cfg, targets=t)[:2]),
        ("improve_model/tabular", {"model": q},
         lambda: loss_improve_model(q, vf, qf, batch, cfg)),
        ("improve_policy/tabular", {"policy": b},
         lambda: loss_improve_policy(b, vf, bf, batch.x, cfg)),
        ("ermbc/tabular", {**vf.parts(), "model": q, "policy": b},
         lambda t=policy_eval_targets(vf, q, b, other, cfg): loss_ermbc(
             vf, q, b, batch, cfg, other, pe_targets=t)),
        ("bc/tabular", {"policy": b}, lambda: loss_bc(b, batch)),
        ("model_disc/mlp", cvf.parts(), lambda: loss_model_disc(cvf, cq, cbatch, cother, cfg)),
        ("policy_disc/mlp", cvf.parts(), lambda: loss_policy_disc(cvf, cb, cbatch, cother, cfg)),
        ("disc_total/mlp", cvf.parts(),
         lambda: _first(loss_disc_total(cvf, cq, cb, cbatch, cother, cother, cbatch, cfg))),
        ("policy_eval/mlp", cvf.parts(),
         _pe(cvf, cq, cb, cbatch, cfg, policy_eval_targets(cvf, cq, cb, cbatch, cfg, 4, 4,
                                                           fixed(2)))),
        ("improve_model/gaussian", {"model": cq},
         lambda: loss_improve_model(cq, cvf, cqf, cbatch, cfg, 2, fixed(3))),
        ("improve_policy/gaussian", {"policy": cb},
         lambda: loss_improve_policy(cb, cvf, cbf, cbatch.x, cfg, 2, fixed(4))),
        ("ermbc/gaussian", {**cvf.parts(), "model": cq, "policy": cb},
         lambda t=policy_eval_targets(cvf, cq, cb, cother, cfg, 3, 3, fixed(5)): loss_ermbc(
             cvf, cq, cb, cbatch, cfg, cother, pe_targets=t)),
        ("bc/gaussian", {"policy": cb}, lambda: loss_bc(cb, cbatch)),
    ]
    return cases


def _pe(vf, q, b, batch, cfg, targets):
    return lambda: loss_policy_eval(vf, q, b, batch, cfg, targets=targets)[:2]


def _first(pair):
    br, g = pair
    return br.total_disc, g


def check_gradients(seed: int = 0, points: int = 5) -> dict:
    """Worst relative finite-difference error per loss over random parameter points."""
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for i in range(points):
        rng = np.random.default_rng([seed, i])
        cfg = RegularizationConfig(kappa=float(rng.uniform(0.5, 4)), eta=float(rng.uniform(0.5, 4)),
                                   gamma=0.9)
        for name, parts, fn in gradient_cases(rng, cfg):
            theta, _ = pack(parts)
            err = grad_check(closure(parts, fn), theta, eps=1e-6, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
    return {"errors": worst, "max_error": max(worst.values()), "seconds": time.perf_counter() - t0}


# -- learning the ratios -------------------------------------------------------------

def check_ratio_recovery(seed: int = 0, steps: int = 4000, lr: float = 0.05) -> dict:
    """Minimize the exact discriminator losses on a 3-state task from zero values.

    Real and simulated transitions share the same (x, u) weights, as do expert
    and learner actions, so the Bayes-optimal outputs are p/(p+q) and pi/(pi+b).
    """
    rng = np.random.default_rng(seed)
    cfg = RegularizationConfig()
    mdp = random_mdp(3, 2, rng, gamma=cfg.gamma)
    q, b = random_baselines(mdp, rng)
    res = solve(mdp, q, b, cfg)
    p, pi = res.expert_model.table(), res.expert_policy.table()
    qm, bm = TabularMap.from_probs(q), TabularMap.from_probs(b)
    rho = np.full((mdp.n_states, mdp.n_actions), 1.0 / (mdp.n_states * mdp.n_actions))
    real, w_real = exact_triples(rho[:, :, None] * p)
    sim, w_sim = exact_triples(rho[:, :, None] * q)
    mu = np.full(mdp.n_states, 1.0 / mdp.n_states)
    expert, w_exp = exact_pairs(mu[:, None] * pi)
    learner, w_lrn = exact_pairs(mu[:, None] * b)
    vf = ValueFn.tabular(mdp.n_states, mdp.n_actions)
    weights = {"real": w_real, "sim": w_sim, "expert": w_exp, "learner": w_lrn}
    t0 = time.perf_counter()
    moments = {name: {} for name in vf.parts()}
    for _ in range(steps):
        _, g = loss_disc_total(vf, qm, bm, real, sim, expert, learner, cfg, weights)
        for name, part in vf.parts().items():
            if name in g:
                optimizer_step(part.params, g[name], moments[name], lr)
    # score on the union of both supports
    support, _ = exact_triples(rho[:, :, None] * (p + q))
    pv, qv = p[support.x, support.u, support.x_next], q[support.x, support.u, support.x_next]
    mae_m = float(np.mean(np.abs(d_model(vf, qm, support, cfg) - pv / (pv + qv))))
    xs, us = np.divmod(np.arange(mdp.n_states * mdp.n_actions), mdp.n_actions)
    mae_p = float(np.mean(np.abs(d_policy(vf, bm, xs, us, cfg)
                                 - pi[xs, us] / (pi[xs, us] + b[xs, us]))))
    return {"model_mae": mae_m, "policy_mae": mae_p, "seconds": time.perf_counter() - t0}


# -- sampling primitives ---------------------------------------------------------------

def check_buffer_uniformity(seed: int = 0, entries: int = 100, draws: int = 100_000) -> dict:
    rng = np.random.default_rng(seed)
    buf = TransitionBuffer(BufferRole.REAL_LEARNER)
    buf.push_batch(Batch(np.arange(entries), np.zeros(entries, int), np.arange(entries)))
    counts = np.bincount(buf.sample_batch(draws, rng).x, minlength=entries)
    chi2, pval = stats.chisquare(counts)
    return {"chi2": float(chi2), "p_value": float(pval)}


def check_discounted_state(seed: int = 0, draws: int = 100_000) -> dict:
    """2-state chain, absorbing state 1, start at 0, gamma 0.5: P(state 0) = 0.5."""
    rng = np.random.default_rng(seed)
    mdp = TabularMdp(np.array([[[0.0, 1.0]], [[0.0, 1.0]]]), np.zeros(2), 0.5,
                     np.array([1.0, 0.0]))
    policy = TabularMap.uniform(2, 1)
    xs = sample_discounted_state(mdp, policy, 0.5, rng, n=draws)
    freq = float(np.mean(xs == 0))
    return {"freq_state0": freq, "sigma": float(np.sqrt(0.25 / draws))}


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    r = check_oracle_fixed_point(seed)
    out.append(("oracle fixed point", r["residual"] < 1e-10 and r["p_row_err"] < 1e-9
                and r["pi_row_err"] < 1e-9,
                f"residual {r['residual']:.2e}, row errors {r['p_row_err']:.2e}/"
                f"{r['pi_row_err']:.2e}"))
    r = check_optimality(seed)
    out.append(("induced model optimality", r["max_gap"] < 1e-8 and r["min_margin"] > 0,
                f"gap {r['max_gap']:.2e}, margin {r['min_margin']:.2e}"))
    r = check_discriminators(seed)
    out.append(("closed-form discriminators", max(r["model_err"], r["policy_err"]) < 1e-8,
                f"model {r['model_err']:.2e}, policy {r['policy_err']:.2e}"))
    r = check_bellman_zero(seed)
    out.append(("soft Bellman residual at oracle", r["loss"] < 1e-12, f"loss {r['loss']:.2e}"))
    r = check_gradients(seed)
    out.append(("gradient fidelity", r["max_error"] < 1e-4, f"max rel error {r['max_error']:.2e}"))
    r = check_ratio_recovery(seed)
    out.append(("ratio recovery", max(r["model_mae"], r["policy_mae"]) < 0.05,
                f"MAE model {r['model_mae']:.4f}, policy {r['policy_mae']:.4f}"))
    r = check_buffer_uniformity(seed)
    out.append(("buffer uniformity", r["p_value"] > 0.01, f"chi-square p {r['p_value']:.3f}"))
    r = check_discounted_state(seed)
    out.append(("discounted visitation", abs(r["freq_state0"] - 0.5) < 3 * r["sigma"],
                f"P(x=0) {r['freq_state0']:.4f}"))
    return out
