"""Parametric function families with hand-written reverse-mode gradients.

Every trainable component exposes ``params`` (a dict of arrays), a
``forward(*inputs) -> (out, cache)`` pass and a ``backward(cache, dout) ->
(grads, dinputs)`` pass. ``dinputs`` is ``None`` for tabular components whose
inputs are integer indices.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

Params = dict[str, np.ndarray]


class NumericError(FloatingPointError):
    """Raised when a non-finite value appears during a backward pass."""


# -- parameter vectors -------------------------------------------------------

def manifest(params: Params) -> list[tuple[str, tuple[int, ...]]]:
    return [(k, tuple(params[k].shape)) for k in sorted(params)]


def flatten(params: Params) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten(vec: np.ndarray, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> Params:
    out, i = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out[name] = vec[i:i + n].reshape(shape).copy()
        i += n
    if i != len(vec):
        raise ValueError(f"vector length {len(vec)} does not match manifest ({i})")
    return out


def add_grads(a: Params | None, b: Params | None) -> Params:
    if a is None:
        return dict(b or {})
    if b is None:
        return a
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


def save_params(params: Params, path: str | Path) -> None:
    """Flat checkpoint: ``.npz`` binary, otherwise CSV with a manifest header."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, **params)
        return
    with open(path, "w", newline="") as fh:
        fh.write("# manifest " + json.dumps(manifest(params)) + "\n")
        w = csv.writer(fh)
        w.writerow(["value"])
        for v in flatten(params):
            w.writerow([f"{v:.17g}"])


def load_params(path: str | Path) -> Params:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k].copy() for k in z.files}
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("# manifest "):
            raise ValueError("missing manifest header")
        shapes = [(n, tuple(s)) for n, s in json.loads(head[len("# manifest "):])]
        rows = list(csv.reader(fh))[1:]
    return unflatten(np.array([float(r[0]) for r in rows]), shapes)


# -- activations -------------------------------------------------------------

def sigmoid(z):
    return expit(np.asarray(z, dtype=float))


def dsilu(z):
    """Derivative of the sigmoid-weighted linear unit, used as an activation."""
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def dsilu_grad(z):
    s = sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "dsilu": (dsilu, dsilu_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def softmax(z, axis=-1):
    return np.exp(log_softmax(z, axis))


def logsumexp(z, axis=-1):
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(z - m), axis=axis))


# -- multilayer perceptron ---------------------------------------------------

HEADS = ("scalar", "vector", "gaussian", "categorical")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output and the output head.

    For a ``gaussian`` head the last width is ``2 * d`` (mean and log-std).
    """

    widths: tuple[int, ...]
    activation: str = "dsilu"
    head: str = "scalar"

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "scalar" and self.widths[-1] != 1:
            raise ValueError("scalar head needs output width 1")
        if self.head == "gaussian" and self.widths[-1] % 2:
            raise ValueError("gaussian head needs an even output width")

    @property
    def n_in(self) -> int:
        return self.widths[0]


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> Params:
    params = {}
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        lim = np.sqrt(6.0 / (a + b))
        params[f"W{i}"] = rng.uniform(-lim, lim, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return params


def mlp_forward(params: Params, spec: MlpSpec, inputs: np.ndarray):
    h = np.asarray(inputs, dtype=float)
    if h.ndim != 2 or h.shape[1] != spec.n_in:
        raise ValueError(f"expected input of shape (n, {spec.n_in}), got {h.shape}")
    act = ACTIVATIONS[spec.activation][0]
    n_layers = len(spec.widths) - 1
    cache = [h]
    for i in range(n_layers):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        cache.append(z)
        h = act(z) if i < n_layers - 1 else z
    return h, cache


def mlp_backward(params: Params, spec: MlpSpec, cache, dout: np.ndarray):
    """Returns parameter gradients and the gradient w.r.t. the inputs."""
    dact = ACTIVATIONS[spec.activation][1]
    n_layers = len(spec.widths) - 1
    grads = {}
    dz = np.asarray(dout, dtype=float)
    for i in reversed(range(n_layers)):
        h_in = cache[0] if i == 0 else ACTIVATIONS[spec.activation][0](cache[i])
        grads[f"W{i}"] = h_in.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{i}"].T
        if not (np.all(np.isfinite(grads[f"W{i}"])) and np.all(np.isfinite(dh))):
            raise NumericError(f"non-finite gradient at layer {i}")
        dz = dh * dact(cache[i]) if i > 0 else dh
    return grads, dz


def forward(params: Params, spec: MlpSpec, inputs) -> np.ndarray:
    """Raw network output (scalar heads are squeezed)."""
    out, _ = mlp_forward(params, spec, np.atleast_2d(inputs))
    return out[:, 0] if spec.head == "scalar" else out


def grad(params: Params, spec: MlpSpec, inputs, loss_fn) -> Params:
    """Gradient of ``loss_fn(outputs) -> (loss, d_outputs)`` w.r.t. ``params``."""
    out, cache = mlp_forward(params, spec, np.atleast_2d(inputs))
    if spec.head == "scalar":
        _, dout = loss_fn(out[:, 0])
        dout = np.asarray(dout)[:, None]
    else:
        _, dout = loss_fn(out)
    return mlp_backward(params, spec, cache, dout)[0]


# -- modules -----------------------------------------------------------------

class TabularState:
    """A real-valued table over state indices."""

    def __init__(self, n_states: int, init: np.ndarray | None = None):
        self.params = {"table": np.zeros(n_states) if init is None else np.array(init, float)}

    def forward(self, x):
        x = np.asarray(x, dtype=int)
        return self.params["table"][x], x

    def backward(self, cache, dout):
        g = np.zeros_like(self.params["table"])
        np.add.at(g, cache, dout)
        return {"table": g}, None

    def __call__(self, x):
        return self.forward(x)[0]


class TabularStateAction:
    """A real-valued table over (state, action) index pairs."""

    def __init__(self, n_states: int, n_actions: int, init: np.ndarray | None = None):
        self.params = {"table": np.zeros((n_states, n_actions)) if init is None
                       else np.array(init, float)}

    def forward(self, x, u):
        x = np.asarray(x, dtype=int)
        u = np.asarray(u, dtype=int)
        return self.params["table"][x, u], (x, u)

    def backward(self, cache, dout):
        g = np.zeros_like(self.params["table"])
        np.add.at(g, cache, dout)
        return {"table": g}, None

    def __call__(self, x, u):
        return self.forward(x, u)[0]


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


class MlpFunction:
    """Scalar MLP over concatenated continuous inputs (one or two arrays)."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        if spec.head != "scalar":
            raise ValueError("MlpFunction needs a scalar head")
        self.spec = spec
        self.params = init_mlp(spec, rng)

    def forward(self, *inputs):
        parts = [_as_rows(a) for a in inputs]
        h = np.concatenate(parts, axis=1)
        out, cache = mlp_forward(self.params, self.spec, h)
        return out[:, 0], (cache, [p.shape[1] for p in parts])

    def backward(self, cache, dout):
        mcache, widths = cache
        grads, dh = mlp_backward(self.params, self.spec, mcache, np.asarray(dout)[:, None])
        splits = np.cumsum(widths)[:-1]
        return grads, np.split(dh, splits, axis=1)

    def __call__(self, *inputs):
        return self.forward(*inputs)[0]


# -- Gaussian head -----------------------------------------------------------

@dataclass
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.clip(np.asarray(self.log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self):
        return np.exp(self.log_std)


def gaussian_log_prob(head: GaussianHead, x) -> np.ndarray:
    """Diagonal-Gaussian log-density summed over the last axis."""
    x = np.asarray(x, dtype=float)
    if np.shape(x)[-1:] != np.shape(head.mean)[-1:]:
        raise ValueError("dimension mismatch between sample and head")
    z = (x - head.mean) / head.std
    return np.sum(-0.5 * z * z - head.log_std - HALF_LOG_2PI, axis=-1)


def gaussian_log_prob_grads(head: GaussianHead, x):
    """Partial derivatives of the log-density w.r.t. (x, mean, log_std)."""
    var = np.exp(2 * head.log_std)
    diff = np.asarray(x, dtype=float) - head.mean
    d_mean = diff / var
    d_log_std = diff * diff / var - 1.0
    return -d_mean, d_mean, d_log_std


def gaussian_rsample(head: GaussianHead, rng: np.random.Generator):
    """Reparameterised draw ``mean + std * eps``; returns (sample, eps)."""
    eps = rng.standard_normal(np.shape(head.mean))
    return head.mean + head.std * eps, eps


def gaussian_entropy(head: GaussianHead) -> np.ndarray:
    return np.sum(head.log_std + 0.5 + HALF_LOG_2PI, axis=-1)


# -- stochastic maps -----------------------------------------------------------

def _cond(c) -> tuple:
    return c if isinstance(c, tuple) else (c,)


class TabularMap:
    """Softmax table: a policy ``(S, A)`` or a model ``(S, A, S)``."""

    kind = "tabular"

    def __init__(self, logits: np.ndarray):
        self.params = {"logits": np.array(logits, dtype=float)}

    @classmethod
    def uniform(cls, *shape: int) -> "TabularMap":
        return cls(np.zeros(shape))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "TabularMap":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)))

    @property
    def n_out(self) -> int:
        return self.params["logits"].shape[-1]

    def table(self) -> np.ndarray:
        return softmax(self.params["logits"])

    def log_table(self) -> np.ndarray:
        return log_softmax(self.params["logits"])

    def _rows(self, cond):
        idx = tuple(np.asarray(c, dtype=int) for c in _cond(cond))
        return idx

    def probs(self, cond) -> np.ndarray:
        """Row(s) of probabilities for the conditioning indices."""
        return softmax(self.params["logits"][self._rows(cond)])

    def log_probs(self, cond) -> np.ndarray:
        return log_softmax(self.params["logits"][self._rows(cond)])

    def log_prob(self, cond, out) -> np.ndarray:
        return self.forward_log_prob(cond, out)[0]

    def forward_log_prob(self, cond, out):
        rows = self._rows(cond)
        out = np.asarray(out, dtype=int)
        lp = log_softmax(self.params["logits"][rows])
        return np.take_along_axis(lp, out[..., None], axis=-1)[..., 0], (rows, out, lp)

    def backward_log_prob(self, cache, dlogp) -> Params:
        rows, out, lp = cache
        d_rows = -np.exp(lp) * np.asarray(dlogp)[..., None]
        np.put_along_axis(d_rows, out[..., None],
                          np.take_along_axis(d_rows, out[..., None], -1) + np.asarray(dlogp)[..., None], -1)
        return self.backward_rows(rows, d_rows)

    def backward_rows(self, rows, d_rows) -> Params:
        g = np.zeros_like(self.params["logits"])
        np.add.at(g, rows, d_rows)
        return {"logits": g}

    def sample(self, cond, rng: np.random.Generator) -> np.ndarray:
        p = self.probs(cond)
        cdf = np.cumsum(p, axis=-1)
        cdf[..., -1] = 1.0
        draw = rng.random(p.shape[:-1])[..., None]
        s = np.minimum((draw > cdf).sum(axis=-1), p.shape[-1] - 1)
        return s if s.ndim else int(s)

    def copy(self) -> "TabularMap":
        return TabularMap(self.params["logits"].copy())


class GaussianMap:
    """Diagonal-Gaussian conditional density parameterised by an MLP.

    The network output is split into a mean and a clamped log-std.
    """

    kind = "gaussian"

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None,
                 params: Params | None = None, init_log_std: float = -1.0):
        if spec.head != "gaussian":
            raise ValueError("GaussianMap needs a gaussian head")
        self.spec = spec
        if params is None:
            params = init_mlp(spec, rng if rng is not None else np.random.default_rng(0))
            d = spec.widths[-1] // 2
            params[f"b{len(spec.widths) - 2}"][d:] = init_log_std
        self.params = params

    @property
    def dim(self) -> int:
        return self.spec.widths[-1] // 2

    def _inputs(self, cond):
        return np.concatenate([_as_rows(c) for c in _cond(cond)], axis=1)

    def head(self, cond):
        out, cache = mlp_forward(self.params, self.spec, self._inputs(cond))
        d = self.dim
        raw = out[:, d:]
        h = GaussianHead(out[:, :d], raw)
        mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return h, (cache, mask)

    def _back_head(self, hcache, d_mean, d_log_std):
        cache, mask = hcache
        dout = np.concatenate([d_mean, d_log_std * mask], axis=1)
        grads, dh = mlp_backward(self.params, self.spec, cache, dout)
        return grads, dh

    def log_prob(self, cond, out) -> np.ndarray:
        return gaussian_log_prob(self.head(cond)[0], _as_rows(out))

    def forward_log_prob(self, cond, out):
        h, hcache = self.head(cond)
        out = _as_rows(out)
        return gaussian_log_prob(h, out), (h, hcache, out)

    def backward_log_prob(self, cache, dlogp) -> Params:
        h, hcache, out = cache
        _, d_mean, d_log_std = gaussian_log_prob_grads(h, out)
        dl = np.asarray(dlogp)[:, None]
        return self._back_head(hcache, d_mean * dl, d_log_std * dl)[0]

    def sample(self, cond, rng: np.random.Generator) -> np.ndarray:
        h, _ = self.head(cond)
        return gaussian_rsample(h, rng)[0]

    def rsample(self, cond, rng: np.random.Generator):
        """Pathwise sample; ``backward_rsample`` maps sample/log-prob grads to params."""
        h, hcache = self.head(cond)
        s, eps = gaussian_rsample(h, rng)
        return s, (h, hcache, eps, s)

    def rsample_log_prob(self, cache) -> np.ndarray:
        h, _, _, s = cache
        return gaussian_log_prob(h, s)

    def backward_rsample(self, cache, d_sample, d_logp=None):
        """Gradient for a loss depending on the sample and on its own log-density."""
        h, hcache, eps, s = cache
        d_sample = np.zeros_like(s) if d_sample is None else np.asarray(d_sample, dtype=float)
        d_mean = np.zeros_like(s)
        d_log_std = np.zeros_like(s)
        if d_logp is not None:
            dl = np.asarray(d_logp)[:, None]
            gx, gm, gs = gaussian_log_prob_grads(h, s)
            d_sample = d_sample + gx * dl
            d_mean += gm * dl
            d_log_std += gs * dl
        d_mean += d_sample
        d_log_std += d_sample * h.std * eps
        grads, dh = self._back_head(hcache, d_mean, d_log_std)
        return grads, dh

    def copy(self) -> "GaussianMap":
        return GaussianMap(self.spec, params={k: v.copy() for k, v in self.params.items()})


StochasticMap = TabularMap | GaussianMap


def as_table(m) -> np.ndarray:
    """Probability table of a tabular map (or pass an array through)."""
    if isinstance(m, TabularMap):
        return m.table()
    return np.asarray(m, dtype=float)


# -- gradient checking -------------------------------------------------------

def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
               eps: float = 1e-5, max_coords: int = 2000, rng: np.random.Generator | None = None,
               floor: float = 1e-4) -> float:
    """Max per-coordinate relative error between analytic and central-difference gradients.

    ``loss_fn(theta)`` returns ``(loss, grad)``. Above ``max_coords`` a random
    subset of ``max_coords`` (at least 200) coordinates is checked.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    theta = np.array(params, dtype=float)
    _, g = loss_fn(theta.copy())
    g = np.asarray(g, dtype=float)
    coords = np.arange(len(theta))
    if len(theta) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(len(theta), size=max(200, max_coords), replace=False)
    worst = 0.0
    for i in coords:
        tp = theta.copy()
        tp[i] += eps
        tm = theta.copy()
        tm[i] -= eps
        num = (loss_fn(tp)[0] - loss_fn(tm)[0]) / (2 * eps)
        err = abs(num - g[i]) / max(abs(num), abs(g[i]), floor)
        worst = max(worst, err)
    return float(worst)
