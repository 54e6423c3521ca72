"""Structured discriminators and the imitation losses built on them.

All losses return ``(value, grads)`` where ``grads`` maps a component name
(``reward``, ``value``, ``qvalue``, ``model``, ``policy``) to a dict of
parameter gradients. Minibatch losses average uniformly over the batch;
passing ``weights`` (summing to one) turns the same code into an exact
expectation over an enumerated support, which is how the tabular "exact"
forms are evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .approx import (MlpFunction, MlpSpec, TabularMap, TabularState, TabularStateAction,
                     add_grads, flatten, gaussian_log_prob, gaussian_log_prob_grads,
                     logsumexp, manifest, sigmoid, unflatten)
from .mdp import Batch, RegularizationConfig

LOG_FLOOR = -30.0

Grads = dict[str, dict[str, np.ndarray]]


class DomainError(ValueError):
    """A density needed inside a logarithm is exactly zero."""


@dataclass
class ValueFn:
    """Reward r(x), state value V(x) and state-action value Q(x, u)."""

    reward: object
    value: object
    qvalue: object

    @classmethod
    def tabular(cls, n_states: int, n_actions: int) -> "ValueFn":
        return cls(TabularState(n_states), TabularState(n_states),
                   TabularStateAction(n_states, n_actions))

    @classmethod
    def mlp(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
            hidden: tuple[int, ...] = (64, 64), activation: str = "dsilu") -> "ValueFn":
        s_spec = MlpSpec((state_dim, *hidden, 1), activation)
        sa_spec = MlpSpec((state_dim + action_dim, *hidden, 1), activation)
        return cls(MlpFunction(s_spec, rng), MlpFunction(s_spec, rng), MlpFunction(sa_spec, rng))

    def parts(self) -> dict[str, object]:
        return {"reward": self.reward, "value": self.value, "qvalue": self.qvalue}


@dataclass
class LossBreakdown:
    model_disc: float = float("nan")
    policy_disc: float = float("nan")
    total_disc: float = float("nan")
    pe_qv: float = float("nan")
    pe_vq: float = float("nan")
    improve_model: float = float("nan")
    improve_policy: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _merge(*gs: Grads) -> Grads:
    out: Grads = {}
    for g in gs:
        for name, sub in g.items():
            out[name] = add_grads(out.get(name), sub)
    return out


def scale_grads(g: Grads, c: float) -> Grads:
    return {n: {k: c * v for k, v in sub.items()} for n, sub in g.items()}


def _weights(n: int, weights) -> np.ndarray:
    if n == 0:
        raise ValueError("empty batch")
    return np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)


def frozen_log_prob(m, cond, out) -> np.ndarray:
    """Log-density of a frozen map, floored at ``LOG_FLOOR``; exact zeros are errors."""
    lp = m.log_prob(cond, out)
    if np.any(np.isneginf(lp)) or np.any(np.isnan(lp)):
        raise DomainError("zero probability at a queried point")
    return np.maximum(lp, LOG_FLOOR)


def softplus(z):
    return np.logaddexp(0.0, z)


# -- advantages and discriminators --------------------------------------------

def f_advantage(vf: ValueFn, batch: Batch, gamma: float) -> np.ndarray:
    """``r(x) + gamma V(x') - Q(x, u)``."""
    return vf.reward(batch.x) + gamma * vf.value(batch.x_next) - vf.qvalue(batch.x, batch.u)


def model_logit(vf: ValueFn, q, batch: Batch, cfg: RegularizationConfig) -> np.ndarray:
    log_q = frozen_log_prob(q, (batch.x, batch.u), batch.x_next)
    return cfg.beta * (f_advantage(vf, batch, cfg.gamma) - log_q / cfg.kappa)


def policy_logit(vf: ValueFn, b, x, u, cfg: RegularizationConfig) -> np.ndarray:
    log_b = frozen_log_prob(b, x, u)
    return cfg.beta * (vf.qvalue(x, u) - vf.value(x) - log_b / cfg.kappa)


def policy_logit_mf(vf: ValueFn, b, batch: Batch, cfg: RegularizationConfig) -> np.ndarray:
    """Policy logit with Q(x, u) replaced by r(x) + gamma V(x')."""
    log_b = frozen_log_prob(b, batch.x, batch.u)
    adv = vf.reward(batch.x) + cfg.gamma * vf.value(batch.x_next) - vf.value(batch.x)
    return cfg.beta * (adv - log_b / cfg.kappa)


def d_model(vf: ValueFn, q, batch: Batch, cfg: RegularizationConfig) -> np.ndarray:
    """Probability that a transition is real rather than model-generated."""
    return sigmoid(model_logit(vf, q, batch, cfg))


def d_policy(vf: ValueFn, b, x, u, cfg: RegularizationConfig) -> np.ndarray:
    """Probability that an action is the expert's rather than the learner's."""
    return sigmoid(policy_logit(vf, b, x, u, cfg))


def d_policy_mf(vf: ValueFn, b, batch: Batch, cfg: RegularizationConfig) -> np.ndarray:
    return sigmoid(policy_logit_mf(vf, b, batch, cfg))


# -- discriminator losses ----------------------------------------------------

def _logistic(z_pos, z_neg, w_pos, w_neg):
    """Weighted logistic loss (label 1 for pos) and its gradients w.r.t. logits."""
    loss = float(np.sum(w_pos * softplus(-z_pos)) + np.sum(w_neg * softplus(z_neg)))
    return loss, -w_pos * sigmoid(-z_pos), w_neg * sigmoid(z_neg)


def _backprop_advantage(vf: ValueFn, batch: Batch, d_f: np.ndarray, gamma: float,
                        with_q: bool = True) -> Grads:
    _, cr = vf.reward.forward(batch.x)
    _, cv = vf.value.forward(batch.x_next)
    g = {"reward": vf.reward.backward(cr, d_f)[0],
         "value": vf.value.backward(cv, gamma * d_f)[0]}
    if with_q:
        _, cq = vf.qvalue.forward(batch.x, batch.u)
        g["qvalue"] = vf.qvalue.backward(cq, -d_f)[0]
    return g


def loss_model_disc(vf: ValueFn, q, batch_real: Batch, batch_sim: Batch,
                    cfg: RegularizationConfig, w_real=None, w_sim=None):
    """Logistic loss separating real transitions (label 1) from simulated ones."""
    w_r = _weights(len(batch_real), w_real)
    w_s = _weights(len(batch_sim), w_sim)
    both = Batch.concat([batch_real, batch_sim])
    z = model_logit(vf, q, both, cfg)
    n = len(batch_real)
    loss, dz_r, dz_s = _logistic(z[:n], z[n:], w_r, w_s)
    d_f = cfg.beta * np.concatenate([dz_r, dz_s])
    return loss, _backprop_advantage(vf, both, d_f, cfg.gamma)


def loss_policy_disc(vf: ValueFn, b, batch_expert: Batch, batch_learner: Batch,
                     cfg: RegularizationConfig, w_expert=None, w_learner=None,
                     model_free: bool = False):
    """Logistic loss separating expert actions (label 1) from the learner's.

    With ``model_free`` the logit uses r(x) + gamma V(x') in place of Q(x, u)
    and gradients flow to r and V instead of Q and V.
    """
    w_e = _weights(len(batch_expert), w_expert)
    w_l = _weights(len(batch_learner), w_learner)
    both = Batch.concat([batch_expert, batch_learner])
    n = len(batch_expert)
    if model_free:
        z = policy_logit_mf(vf, b, both, cfg)
    else:
        z = policy_logit(vf, b, both.x, both.u, cfg)
    loss, dz_e, dz_l = _logistic(z[:n], z[n:], w_e, w_l)
    dz = cfg.beta * np.concatenate([dz_e, dz_l])
    _, cv = vf.value.forward(both.x)
    g_v = vf.value.backward(cv, -dz)[0]
    if model_free:
        g = _backprop_advantage(vf, both, dz, cfg.gamma, with_q=False)
        g["value"] = add_grads(g["value"], g_v)
        return loss, g
    _, cq = vf.qvalue.forward(both.x, both.u)
    return loss, {"value": g_v, "qvalue": vf.qvalue.backward(cq, dz)[0]}


def loss_disc_total(vf: ValueFn, q, b, batch_real: Batch, batch_sim: Batch,
                    batch_expert: Batch, batch_learner: Batch, cfg: RegularizationConfig,
                    weights: dict | None = None):
    """Weighted sum of the model and policy discriminator losses."""
    weights = weights or {}
    lm, gm = loss_model_disc(vf, q, batch_real, batch_sim, cfg,
                             weights.get("real"), weights.get("sim"))
    lp, gp = loss_policy_disc(vf, b, batch_expert, batch_learner, cfg,
                              weights.get("expert"), weights.get("learner"))
    total = cfg.lambda_model * lm + cfg.lambda_policy * lp
    br = LossBreakdown(model_disc=lm, policy_disc=lp, total_disc=total)
    g = _merge(scale_grads(gm, cfg.lambda_model), scale_grads(gp, cfg.lambda_policy))
    return br, g


# -- policy evaluation ---------------------------------------------------------

def _repeat(a, k):
    return np.repeat(np.asarray(a), k, axis=0)


def q_targets(vf: ValueFn, q, x, u, cfg: RegularizationConfig, k: int | None = None,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """``log E_q[exp(beta (r + gamma V' - log q / kappa))] / beta`` per (x, u).

    ``k=None`` sums exactly over a tabular model's support; otherwise a
    ``k``-sample mean is taken inside the log.
    """
    beta = cfg.beta
    r = vf.reward(x)
    if k is None:
        if not isinstance(q, TabularMap):
            raise ValueError("exact expectations need a tabular model")
        log_q = q.log_probs((x, u))
        n_s = log_q.shape[-1]
        v_all = vf.value(np.arange(n_s))
        inner = (beta / cfg.eta) * log_q + beta * (r[:, None] + cfg.gamma * v_all[None, :])
        return logsumexp(inner, axis=1) / beta
    xr, ur = _repeat(x, k), _repeat(u, k)
    nxt = q.sample((xr, ur), rng)
    log_q = frozen_log_prob(q, (xr, ur), nxt)
    inner = beta * (_repeat(r, k) + cfg.gamma * vf.value(nxt) - log_q / cfg.kappa)
    return (logsumexp(inner.reshape(len(r), k), axis=1) - np.log(k)) / beta


def v_targets(vf: ValueFn, b, x, cfg: RegularizationConfig, k: int | None = None,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """``log E_b[exp(beta (Q - log b / kappa))] / beta`` per state."""
    beta = cfg.beta
    x = np.asarray(x)
    if k is None:
        if not isinstance(b, TabularMap):
            raise ValueError("exact expectations need a tabular policy")
        log_b = b.log_probs(x)
        n_a = log_b.shape[-1]
        q_all = vf.qvalue(np.repeat(x, n_a), np.tile(np.arange(n_a), len(x))).reshape(len(x), n_a)
        return logsumexp((beta / cfg.eta) * log_b + beta * q_all, axis=1) / beta
    xr = _repeat(x, k)
    acts = b.sample(xr, rng)
    log_b = frozen_log_prob(b, xr, acts)
    inner = beta * (vf.qvalue(xr, acts) - log_b / cfg.kappa)
    return (logsumexp(inner.reshape(len(x), k), axis=1) - np.log(k)) / beta


def _squared_fit(vf_part, inputs, target, lam, weights):
    pred, cache = vf_part.forward(*inputs)
    err = pred - target
    loss = float(lam * np.sum(weights * err * err))
    return loss, vf_part.backward(cache, 2.0 * lam * weights * err)[0]


def policy_eval_targets(vf: ValueFn, q, b, batch: Batch, cfg: RegularizationConfig,
                        k_model: int | None = None, k_policy: int | None = None,
                        rng: np.random.Generator | None = None):
    """The (Q, V) regression targets, treated as constants by the loss."""
    if (k_model is not None and k_model < 1) or (k_policy is not None and k_policy < 1):
        raise ValueError("sample counts must be >= 1")
    return (q_targets(vf, q, batch.x, batch.u, cfg, k_model, rng),
            v_targets(vf, b, batch.x, cfg, k_policy, rng))


def loss_policy_eval(vf: ValueFn, q, b, batch: Batch, cfg: RegularizationConfig,
                     k_model: int | None = None, k_policy: int | None = None,
                     rng: np.random.Generator | None = None, weights=None, targets=None):
    """Squared residuals of both soft Bellman relations with frozen targets.

    Returns ``(loss, grads, (qv_term, vq_term))``; only V and Q get gradients.
    Precomputed ``targets`` skip the target computation.
    """
    w = _weights(len(batch), weights)
    if targets is None:
        targets = policy_eval_targets(vf, q, b, batch, cfg, k_model, k_policy, rng)
    tq, tv = targets
    lq, gq = _squared_fit(vf.qvalue, (batch.x, batch.u), tq, cfg.lambda_qv, w)
    lv, gv = _squared_fit(vf.value, (batch.x,), tv, cfg.lambda_vq, w)
    return lq + lv, {"qvalue": gq, "value": gv}, (lq, lv)


def policy_eval_targets_mf(vf: ValueFn, b, batch: Batch, cfg: RegularizationConfig,
                           k_policy: int | None = None, rng: np.random.Generator | None = None):
    return (vf.reward(batch.x) + cfg.gamma * vf.value(batch.x_next),
            v_targets(vf, b, batch.x, cfg, k_policy, rng))


def loss_policy_eval_mf(vf: ValueFn, b, batch: Batch, cfg: RegularizationConfig,
                        k_policy: int | None = None, rng: np.random.Generator | None = None,
                        weights=None, targets=None):
    """Model-free evaluation: Q regressed on the sampled ``r(x) + gamma V(x')``."""
    w = _weights(len(batch), weights)
    if targets is None:
        targets = policy_eval_targets_mf(vf, b, batch, cfg, k_policy, rng)
    tq, tv = targets
    lq, gq = _squared_fit(vf.qvalue, (batch.x, batch.u), tq, cfg.lambda_qv, w)
    lv, gv = _squared_fit(vf.value, (batch.x,), tv, cfg.lambda_vq, w)
    return lq + lv, {"qvalue": gq, "value": gv}, (lq, lv)


# -- policy and model improvement ----------------------------------------------

def _tabular_kl_rows(new: TabularMap, rows, log_target, w):
    """``sum_i w_i KL(new_i || exp(log_target_i))`` and its logit gradient."""
    lp = new.log_probs(rows)
    p = np.exp(lp)
    ell = lp - log_target
    with np.errstate(invalid="ignore"):
        per_row = np.sum(np.where(p > 0, p * ell, 0.0), axis=-1)
    d_rows = p * (ell - per_row[:, None]) * w[:, None]
    return float(np.sum(w * per_row)), new.backward_rows(rows, d_rows)


def loss_improve_model(q_new, vf: ValueFn, q_frozen, batch: Batch, cfg: RegularizationConfig,
                       k: int = 1, rng: np.random.Generator | None = None, weights=None):
    """Expected KL from the candidate model to ``exp(beta (r + gamma V' + log q / eta) - beta Q)``.

    Tabular candidates sum exactly over next states; Gaussian candidates use
    ``k`` reparameterised samples per (x, u).
    """
    beta = cfg.beta
    x, u = batch.x, batch.u
    if isinstance(q_new, TabularMap):
        w = _weights(len(x), weights)
        n_s = q_new.n_out
        log_qf = q_frozen.log_probs((x, u))
        v_all = vf.value(np.arange(n_s))
        base = vf.reward(x) - vf.qvalue(x, u)
        log_t = beta * (base[:, None] + cfg.gamma * v_all[None, :] + log_qf / cfg.eta)
        rows = (np.asarray(x, int), np.asarray(u, int))
        loss, g = _tabular_kl_rows(q_new, rows, log_t, w)
        return loss, {"model": g}
    if k < 1:
        raise ValueError("k must be >= 1")
    w = _repeat(_weights(len(x), weights), k) / k
    xr, ur = _repeat(x, k), _repeat(u, k)
    s, cache = q_new.rsample((xr, ur), rng)
    log_new = q_new.rsample_log_prob(cache)
    v_next, cv = vf.value.forward(s)
    _, dv_in = vf.value.backward(cv, np.ones(len(s)))
    qf_head, _ = q_frozen.head((xr, ur))
    log_qf = gaussian_log_prob(qf_head, s)
    dqf_dx, _, _ = gaussian_log_prob_grads(qf_head, s)
    const = vf.reward(xr) - vf.qvalue(xr, ur)
    per = log_new - beta * (const + cfg.gamma * v_next + log_qf / cfg.eta)
    loss = float(np.sum(w * per))
    d_sample = -beta * (cfg.gamma * dv_in[0] + dqf_dx / cfg.eta) * w[:, None]
    grads, _ = q_new.backward_rsample(cache, d_sample, d_logp=w)
    return loss, {"model": grads}


def loss_improve_policy(b_new, vf: ValueFn, b_frozen, states, cfg: RegularizationConfig,
                        k: int = 1, rng: np.random.Generator | None = None, weights=None):
    """Expected KL from the candidate policy to ``exp(beta (Q + log b / eta) - beta V)``."""
    beta = cfg.beta
    x = np.asarray(states)
    if isinstance(b_new, TabularMap):
        w = _weights(len(x), weights)
        n_a = b_new.n_out
        q_all = vf.qvalue(np.repeat(x, n_a), np.tile(np.arange(n_a), len(x))).reshape(len(x), n_a)
        log_t = beta * (q_all + b_frozen.log_probs(x) / cfg.eta - vf.value(x)[:, None])
        loss, g = _tabular_kl_rows(b_new, (np.asarray(x, int),), log_t, w)
        return loss, {"policy": g}
    if k < 1:
        raise ValueError("k must be >= 1")
    w = _repeat(_weights(len(x), weights), k) / k
    xr = _repeat(x, k)
    a, cache = b_new.rsample(xr, rng)
    log_new = b_new.rsample_log_prob(cache)
    qv, cq = vf.qvalue.forward(xr, a)
    _, dq_in = vf.qvalue.backward(cq, np.ones(len(a)))
    bf_head, _ = b_frozen.head(xr)
    log_bf = gaussian_log_prob(bf_head, a)
    dbf_da, _, _ = gaussian_log_prob_grads(bf_head, a)
    per = log_new - beta * (qv + log_bf / cfg.eta - vf.value(xr))
    loss = float(np.sum(w * per))
    d_sample = -beta * (dq_in[1] + dbf_da / cfg.eta) * w[:, None]
    grads, _ = b_new.backward_rsample(cache, d_sample, d_logp=w)
    return loss, {"policy": grads}


# -- likelihood losses -----------------------------------------------------------

def _nll(m, cond, out, weights=None):
    w = _weights(len(out), weights)
    lp, cache = m.forward_log_prob(cond, out)
    return float(-np.sum(w * lp)), m.backward_log_prob(cache, -w)


def loss_bc(b, batch_expert: Batch, weights=None):
    """Behaviour cloning: mean negative log-likelihood of expert actions."""
    loss, g = _nll(b, batch_expert.x, batch_expert.u, weights)
    return loss, {"policy": g}


def loss_model_nll(q, batch: Batch, weights=None):
    """Maximum-likelihood model fitting on observed transitions."""
    loss, g = _nll(q, (batch.x, batch.u), batch.x_next, weights)
    return loss, {"model": g}


def loss_ermbc(vf: ValueFn, q, b, batch_expert: Batch, cfg: RegularizationConfig,
               pe_batch: Batch | None = None, k_model: int | None = None,
               k_policy: int | None = None, rng: np.random.Generator | None = None,
               include_pe: bool = True, pe_targets=None):
    """Model cloning plus behaviour cloning on expert data, plus policy evaluation."""
    lq, gq = loss_model_nll(q, batch_expert)
    lb, gb = loss_bc(b, batch_expert)
    total, grads = lq + lb, _merge(gq, gb)
    if include_pe:
        lpe, gpe, _ = loss_policy_eval(vf, q, b, pe_batch if pe_batch is not None else batch_expert,
                                       cfg, k_model, k_policy, rng, targets=pe_targets)
        total += lpe
        grads = _merge(grads, gpe)
    return total, grads


# -- exact supports and gradient checking ----------------------------------------

def exact_triples(joint: np.ndarray) -> tuple[Batch, np.ndarray]:
    """Enumerate the support of a joint table ``P(x, u, x')`` with its weights."""
    idx = np.nonzero(joint > 0)
    return Batch(idx[0], idx[1], idx[2]), joint[idx]


def exact_pairs(joint_xu: np.ndarray) -> tuple[Batch, np.ndarray]:
    idx = np.nonzero(joint_xu > 0)
    return Batch(idx[0], idx[1], idx[0]), joint_xu[idx]


def pack(parts: dict[str, object]):
    """Flatten the parameters of several components into one vector."""
    shapes = {name: manifest(obj.params) for name, obj in parts.items()}
    vec = np.concatenate([flatten(obj.params) for obj in parts.values()])
    return vec, shapes


def unpack_into(parts: dict[str, object], vec: np.ndarray, shapes) -> None:
    i = 0
    for name, obj in parts.items():
        n = sum(int(np.prod(s)) for _, s in shapes[name])
        obj.params.update(unflatten(vec[i:i + n], shapes[name]))
        i += n


def flat_grads(parts: dict[str, object], grads: Grads) -> np.ndarray:
    out = []
    for name, obj in parts.items():
        g = grads.get(name, {})
        out.append(np.concatenate([np.asarray(g.get(k, np.zeros_like(obj.params[k]))).ravel()
                                   for k in sorted(obj.params)]))
    return np.concatenate(out)


def closure(parts: dict[str, object], loss_fn):
    """Wrap ``loss_fn() -> (loss, grads)`` as a function of a flat parameter vector."""
    _, shapes = pack(parts)

    def fn(theta):
        unpack_into(parts, theta, shapes)
        loss, grads = loss_fn()
        return float(loss), flat_grads(parts, grads)

    return fn
