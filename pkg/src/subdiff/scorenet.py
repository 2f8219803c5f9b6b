"""Time-conditioned MLP score models, denoising score matching, analytic scores.

A score model is any object with a ``dim`` attribute that maps a batch
``x`` of shape ``(B, dim)`` and times ``t`` (scalar or ``(B,)``) to scores of
shape ``(B, dim)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from subdiff.sde import VEProcess

log = logging.getLogger(__name__)


def _silu(h):
    return h * expit(h)


def _silu_grad(h):
    s = expit(h)
    return s * (1.0 + h * (1.0 - s))


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected input dimension {dim}, got {x.shape[-1]}")
    return x, single


def _batch_times(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t.reshape(n)


class ScoreNet:
    """MLP on ``[x, log sigma(t)]`` whose output divided by ``sigma(t)`` is the score.

    ``params`` is a flat list ``[W1, b1, W2, b2, ..., Wout, bout]`` with
    weights of shape ``(fan_in, fan_out)``.
    """

    def __init__(self, input_dim, process: VEProcess, hidden=(256, 256), seed=0, params=None):
        self.input_dim = int(input_dim)
        self.process = process
        self.hidden = tuple(int(h) for h in hidden)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = [np.array(p, dtype=np.float64) for p in params]
        shapes = self.layer_shapes()
        if len(self.params) != 2 * len(shapes):
            raise ValueError("parameter list does not match layer shapes")
        for i, (fi, fo) in enumerate(shapes):
            if self.params[2 * i].shape != (fi, fo) or self.params[2 * i + 1].shape != (fo,):
                raise ValueError(f"layer {i} parameters have the wrong shape")

    @property
    def dim(self):
        return self.input_dim

    def layer_shapes(self):
        widths = (self.input_dim + 1,) + self.hidden + (self.input_dim,)
        return list(zip(widths[:-1], widths[1:]))

    def _init_params(self, rng):
        params = []
        for fi, fo in self.layer_shapes():
            bound = 1.0 / np.sqrt(fi)
            params.append(rng.uniform(-bound, bound, size=(fi, fo)))
            params.append(rng.uniform(-bound, bound, size=fo))
        return params

    def copy(self):
        return ScoreNet(self.input_dim, self.process, self.hidden, params=self.params)

    def num_params(self):
        return sum(p.size for p in self.params)

    def _check_t(self, t):
        return self.process.check_time(t, lo=self.process.eps * (1 - 1e-12))

    def _forward(self, x, t):
        sig = self.process.sigma(t)
        a = np.concatenate([x, np.log(sig)[:, None]], axis=1)
        acts, pre = [a], []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = a @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                pre.append(h)
                a = _silu(h)
                acts.append(a)
            else:
                a = h
        return a, (acts, pre), sig

    def output(self, x, t):
        """Raw network output (noise-prediction scale)."""
        x, single = _as_batch(x, self.input_dim)
        t = _batch_times(self._check_t(t), x.shape[0])
        out = self._forward(x, t)[0]
        return out[0] if single else out

    def __call__(self, x, t):
        x, single = _as_batch(x, self.input_dim)
        t = _batch_times(self._check_t(t), x.shape[0])
        out, _, sig = self._forward(x, t)
        s = out / sig[:, None]
        return s[0] if single else s

    score = __call__

    def _backward(self, grad_out, cache):
        acts, pre = cache
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        g = grad_out
        for i in range(n_layers - 1, -1, -1):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * _silu_grad(pre[i - 1])
        return grads

    def dsm_loss_and_grad(self, x0, t, z):
        """Weighted DSM loss for given noise draws and its parameter gradient."""
        xt = x0 + self.process.sigma(t)[:, None] * z
        out, cache, _ = self._forward(xt, t)
        # sigma^2 * ||out / sigma + z / sigma||^2 = ||out + z||^2
        resid = out + z
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        grads = self._backward(2.0 * resid / x0.shape[0], cache)
        return loss, grads


def _draw_dsm_noise(batch, process, rng):
    t = rng.uniform(process.eps, process.T, size=batch.shape[0])
    z = rng.standard_normal(batch.shape)
    return t, z


def dsm_loss(net: ScoreNet, batch, process: VEProcess, rng):
    """Denoising score matching loss with weight ``sigma(t)^2`` and its gradient."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    if batch.shape[1] != net.input_dim:
        raise ValueError("batch dimension does not match the network")
    t, z = _draw_dsm_noise(batch, process, rng)
    return net.dsm_loss_and_grad(batch, t, z)


def dsm_terms(score_fn, batch, process: VEProcess, rng):
    """Per-example ``||sigma * score + z||^2`` for any score model (no gradient)."""
    batch = np.asarray(batch, dtype=np.float64)
    t, z = _draw_dsm_noise(batch, process, rng)
    sig = process.sigma(t)[:, None]
    r = sig * score_fn(batch + sig * z, t) + z
    return np.sum(r * r, axis=1)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need steps >= 0, batch_size >= 1, lr > 0")


class TrainingDiverged(FloatingPointError):
    pass


def train(net: ScoreNet, dataset, process: VEProcess, config: TrainConfig) -> ScoreNet:
    """Adam on the DSM objective. Returns a new network; ``net`` is untouched.

    The per-step losses are attached to the result as ``train_losses``.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != net.input_dim:
        raise ValueError(f"dataset must have shape (N, {net.input_dim})")
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    out = net.copy()
    out.process = process
    rng = np.random.default_rng(config.seed)
    m = [np.zeros_like(p) for p in out.params]
    v = [np.zeros_like(p) for p in out.params]
    losses = np.empty(config.steps)
    b1, b2 = config.beta1, config.beta2
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, data.shape[0], size=config.batch_size)
        loss, grads = dsm_loss(out, data[idx], process, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}; learning rate {config.lr} is likely too high"
            )
        losses[step - 1] = loss
        lr_t = config.lr * np.sqrt(1 - b2**step) / (1 - b1**step)
        for p, g, mi, vi in zip(out.params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= lr_t * mi / (np.sqrt(vi) + config.adam_eps)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f", step, losses[step - 1 - config.log_every + 1:step].mean())
    if not all(np.all(np.isfinite(p)) for p in out.params):
        raise TrainingDiverged("non-finite parameters after training")
    out.train_losses = losses
    return out


@dataclass(frozen=True, eq=False)
class GmmSpec:
    """Isotropic Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.broadcast_to(np.asarray(self.sds, dtype=np.float64), w.shape).copy()
        if mu.shape[0] != w.shape[0]:
            raise ValueError("one mean per weight required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(s <= 0):
            raise ValueError("component sds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sds", s)

    @property
    def dim(self):
        return self.means.shape[1]

    def project(self, columns) -> "GmmSpec":
        """Law of ``U^T x``; an isotropic mixture stays isotropic under orthonormal ``U``."""
        return GmmSpec(self.weights, self.means @ np.asarray(columns), self.sds)

    def sample(self, count, rng):
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        x = self.means[comp] + self.sds[comp, None] * rng.standard_normal((count, self.dim))
        return x, comp


def _gmm_terms(spec: GmmSpec, process: VEProcess, x, t):
    x, single = _as_batch(x, spec.dim)
    t = _batch_times(t, x.shape[0])
    var = spec.sds[None, :] ** 2 + process.sigma(t)[:, None] ** 2  # (B, M)
    sq = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ spec.means.T
        + np.sum(spec.means**2, axis=1)[None, :]
    )
    sq = np.maximum(sq, 0.0)
    logc = np.log(spec.weights)[None, :] - 0.5 * spec.dim * np.log(2 * np.pi * var) - 0.5 * sq / var
    return x, single, var, logc


def gmm_log_density(spec: GmmSpec, process: VEProcess, x, t):
    """Log density of the mixture diffused to time ``t``."""
    _, single, _, logc = _gmm_terms(spec, process, x, t)
    out = logsumexp(logc, axis=1)
    return out[0] if single else out


def gmm_score_oracle(spec: GmmSpec, process: VEProcess, x, t):
    """Exact score of the mixture diffused to time ``t``."""
    x, single, var, logc = _gmm_terms(spec, process, x, t)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    rv = resp / var
    s = rv @ spec.means - x * rv.sum(axis=1, keepdims=True)
    return s[0] if single else s


@dataclass(frozen=True, eq=False)
class GmmScore:
    """Analytic mixture score wrapped as a score model."""

    spec: GmmSpec
    process: VEProcess

    @property
    def dim(self):
        return self.spec.dim

    def __call__(self, x, t):
        return gmm_score_oracle(self.spec, self.process, x, t)


@dataclass(frozen=True, eq=False)
class GaussianScore:
    """Exact score of ``N(mean, cov)`` diffused by a VE process."""

    mean: np.ndarray
    cov: np.ndarray
    process: VEProcess
    _eye: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))
        object.__setattr__(self, "_eye", np.eye(self.mean.shape[0]))

    @property
    def dim(self):
        return self.mean.shape[0]

    def __call__(self, x, t):
        x, single = _as_batch(x, self.dim)
        t = _batch_times(t, x.shape[0])
        sig2 = self.process.sigma(t) ** 2
        out = np.empty_like(x)
        # group identical times: the sampler always passes one time per call
        for tv in np.unique(sig2):
            rows = sig2 == tv
            prec = np.linalg.inv(self.cov + tv * self._eye)
            out[rows] = -(x[rows] - self.mean) @ prec
        return out[0] if single else out


class ZeroScore:
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))
