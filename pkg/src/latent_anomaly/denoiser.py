"""Noise predictors: the exact mixture oracle and a small trainable MLP.

Both expose ``eps(z_t, t, cond)`` so the samplers can take either one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .diffusion import NoiseSchedule, forward_diffuse
from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateConditionError,
    InvariantViolation,
    TrainingDivergedError,
)


@dataclass(frozen=True)
class ArchetypeMixture:
    """Diagonal Gaussian mixture whose components carry embedding directions."""

    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    archetype_emb: np.ndarray
    kappa: float = 20.0

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        sigma2 = np.atleast_2d(np.asarray(self.sigma2, dtype=float))
        emb = np.atleast_2d(np.asarray(self.archetype_emb, dtype=float))
        k = pi.shape[0]
        if mu.shape[0] != k or sigma2.shape != mu.shape or emb.shape[0] != k:
            raise ConfigurationError("mixture arrays disagree on the number of components or latent dim")
        if abs(pi.sum() - 1.0) > 1e-12 or np.any(pi <= 0):
            raise ConfigurationError(f"mixture weights must be positive and sum to 1, got {pi}")
        if np.any(sigma2 <= 0):
            raise ConfigurationError("mixture variances must be positive")
        if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("archetype embeddings must be unit-norm")
        if not self.kappa > 0:
            raise ConfigurationError("kappa must be positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "archetype_emb", emb)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.archetype_emb.shape[1]


@dataclass(frozen=True)
class ConditionEmbedding:
    """A condition vector ``c``, or a batch of them (one row per sample).

    ``is_null`` is a bool for a single condition and a bool array for a batch.
    Null rows are all-zero by construction.
    """

    values: np.ndarray
    is_null: np.ndarray | bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        isn = np.asarray(self.is_null, dtype=bool)
        if v.ndim == 2 and isn.ndim == 0:
            isn = np.full(v.shape[0], bool(isn))
        if np.any(isn):
            v = v.copy()
            v[isn] = 0.0
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("condition embedding has non-finite entries")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "is_null", isn if v.ndim == 2 else bool(isn))

    @classmethod
    def null(cls, d_e: int, n: int | None = None) -> "ConditionEmbedding":
        if n is None:
            return cls(np.zeros(d_e), True)
        return cls(np.zeros((n, d_e)), np.ones(n, dtype=bool))

    @property
    def d_e(self) -> int:
        return self.values.shape[-1]

    def __len__(self):
        return 1 if self.values.ndim == 1 else self.values.shape[0]

    def take(self, idx) -> "ConditionEmbedding":
        if self.values.ndim == 1:
            return self
        return ConditionEmbedding(self.values[idx], self.is_null[idx])


def condition_log_weights(c: ConditionEmbedding, mix: ArchetypeMixture) -> np.ndarray:
    """Log of :func:`condition_weights`; shape (K,) or (N, K)."""
    if c.d_e != mix.cond_dim:
        raise ConfigurationError(f"condition dim {c.d_e} != mixture embedding dim {mix.cond_dim}")
    v = np.atleast_2d(c.values)
    isnull = np.atleast_1d(c.is_null)
    log_pi = np.log(mix.pi)
    out = np.broadcast_to(log_pi, (v.shape[0], mix.K)).copy()
    live = ~isnull
    if np.any(live):
        norms = np.linalg.norm(v[live], axis=1)
        if np.any(norms == 0):
            raise DegenerateConditionError("zero-norm condition vector without the null flag")
        cos = (v[live] @ mix.archetype_emb.T) / norms[:, None]
        logits = mix.kappa * cos + log_pi
        logits -= logits.max(axis=1, keepdims=True)
        logits -= np.log(np.exp(logits).sum(axis=1, keepdims=True))
        out[live] = logits
    return out[0] if c.values.ndim == 1 else out


def condition_weights(c: ConditionEmbedding, mix: ArchetypeMixture) -> np.ndarray:
    """Mixture weights implied by a condition.

    The null condition returns the base weights ``pi``. Otherwise the
    softmax of ``kappa * cos(c, archetype_emb[k])`` is multiplied by ``pi``
    and renormalised.
    """
    if np.all(np.atleast_1d(c.is_null)):
        w = mix.pi.copy()
        return w if c.values.ndim == 1 else np.tile(w, (c.values.shape[0], 1))
    return np.exp(condition_log_weights(c, mix))


def analytic_eps(z_t, t: int, c: ConditionEmbedding, mix: ArchetypeMixture, sched: NoiseSchedule,
                 log_w=None) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - abar_t) * grad log q(z_t | c)``.

    ``log_w`` may carry precomputed :func:`condition_log_weights` for ``c``.
    """
    sched.check_t(t, lo=1)
    z = np.asarray(z_t, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if log_w is None:
        log_w = condition_log_weights(c, mix)
    log_w = np.atleast_2d(log_w)
    out = _kernels.mixture_eps(z2, np.sqrt(sched.alpha_bar[t]), log_w, mix.mu, mix.sigma2)
    if not np.all(np.isfinite(out)):
        raise InvariantViolation("analytic eps produced non-finite values")
    return out[0] if single else out


class AnalyticDenoiser:
    """Adapter exposing :func:`analytic_eps` through the common ``eps`` method."""

    kind = "analytic"

    def __init__(self, mix: ArchetypeMixture, sched: NoiseSchedule):
        self.mix = mix
        self.sched = sched
        self._last = (None, None)

    def eps(self, z_t, t: int, c: ConditionEmbedding) -> np.ndarray:
        # samplers call repeatedly with the same condition object
        last = self._last
        if last[0] is c:
            log_w = last[1]
        else:
            log_w = condition_log_weights(c, self.mix)
            self._last = (c, log_w)
        return analytic_eps(z_t, t, c, self.mix, self.sched, log_w)


# --------------------------------------------------------------------------
# trainable network


def time_embedding(t, T: int, m: int = 16) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at frequencies spaced geometrically in [1, T]."""
    if m % 2:
        raise ConfigurationError("time-embedding size must be even")
    freqs = np.geomspace(1.0, float(T), m // 2) if m > 2 else np.ones(1)
    ang = np.multiply.outer(np.asarray(t, dtype=float) / T, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


@dataclass
class DenoiserNet:
    """MLP ``[z_t | time features | c] -> eps`` with SiLU hidden layers.

    ``weights[i]`` has shape (fan_in, fan_out) and maps layer i to i+1.
    """

    dim: int
    cond_dim: int
    T: int
    time_dim: int = 16
    hidden: tuple[int, ...] = (128, 128)
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    kind = "trained"

    @property
    def in_dim(self) -> int:
        return self.dim + self.time_dim + self.cond_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.dim]

    @classmethod
    def init(cls, dim, cond_dim, T, rng, time_dim=16, hidden=(128, 128)) -> "DenoiserNet":
        net = cls(dim, cond_dim, T, time_dim, tuple(int(h) for h in hidden))
        w = net.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            net.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            net.biases.append(np.zeros(fan_out))
        # condition inputs start disconnected; a net never shown a condition ignores it
        net.weights[0][dim + time_dim:] = 0.0
        return net

    @classmethod
    def zeros(cls, dim, cond_dim, T, time_dim=16, hidden=(128, 128)) -> "DenoiserNet":
        net = cls(dim, cond_dim, T, time_dim, tuple(hidden))
        w = net.widths
        net.weights = [np.zeros((a, b)) for a, b in zip(w[:-1], w[1:])]
        net.biases = [np.zeros(b) for b in w[1:]]
        return net

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.dim, self.cond_dim, self.T, self.time_dim, self.hidden,
                           [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def inputs(self, z_t, t, c) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z_t, dtype=float))
        n = z.shape[0]
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"latent dim {z.shape[1]} != network dim {self.dim}")
        cv = c.values if isinstance(c, ConditionEmbedding) else np.asarray(c, dtype=float)
        if cv.shape[-1] != self.cond_dim:
            raise ConfigurationError(f"condition dim {cv.shape[-1]} != network condition dim {self.cond_dim}")
        cv = np.broadcast_to(cv, (n, self.cond_dim))
        te = np.broadcast_to(time_embedding(t, self.T, self.time_dim), (n, self.time_dim))
        return np.concatenate([z, te, cv], axis=1)

    def _forward(self, x):
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            if i < last:
                pre.append(a)
                h, _ = _silu(a)
                acts.append(h)
            else:
                h = a
        return h, acts, pre

    def eps(self, z_t, t, c) -> np.ndarray:
        single = np.ndim(z_t) == 1
        out, _, _ = self._forward(self.inputs(z_t, t, c))
        return out[0] if single else out


def net_forward(net: DenoiserNet, z_t, t, c) -> np.ndarray:
    return net.eps(z_t, t, c)


def loss_and_grad(net: DenoiserNet, z0, t, c, eps, sched: NoiseSchedule):
    """Mean squared-norm eps residual over the batch and its parameter gradients.

    Gradients are returned in ``net.params`` order (W0, b0, W1, b1, ...).
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    if z0.shape[0] == 0:
        raise ConfigurationError("empty batch")
    z_t = forward_diffuse(z0, t, eps, sched)
    x = net.inputs(z_t, t, c)
    out, acts, pre = net._forward(x)
    resid = out - eps
    B = z0.shape[0]
    loss = float(np.sum(resid * resid) / B)
    delta = 2.0 * resid / B
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            a = pre[i - 1]
            s = 1.0 / (1.0 + np.exp(-a))
            delta = (delta @ net.weights[i].T) * (s * (1.0 + a * (1.0 - s)))
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 128
    lr: float = 1e-3
    p_drop: float = 0.1
    seed: int = 0


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    net: DenoiserNet
    opt: Adam
    rng: np.random.Generator
    losses: list[float]

    @property
    def step(self) -> int:
        return len(self.losses)


def start_training(dim, cond_dim, sched: NoiseSchedule, cfg: TrainConfig, hidden=(128, 128), time_dim=16) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    net = DenoiserNet.init(dim, cond_dim, sched.T, rng, time_dim=time_dim, hidden=hidden)
    return TrainState(net, Adam(net.params, lr=cfg.lr), rng, [])


def train(state: TrainState, z0_data, cond_data: ConditionEmbedding, sched: NoiseSchedule,
          cfg: TrainConfig, progress=None) -> TrainState:
    """Run Adam on the conditional eps objective until ``cfg.steps`` total steps.

    Each step draws a minibatch, a uniform timestep per sample and unit
    normal noise; conditions are replaced by the null condition with
    probability ``cfg.p_drop``. Mutates and returns ``state``.
    """
    z0_data = np.asarray(z0_data, dtype=float)
    n = z0_data.shape[0]
    if n == 0:
        raise ConfigurationError("training set is empty")
    cvals = np.broadcast_to(cond_data.values, (n, cond_data.d_e))
    net, opt, rng = state.net, state.opt, state.rng
    params = net.params
    while state.step < cfg.steps:
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, net.dim))
        drop = rng.random(cfg.batch_size) < cfg.p_drop
        c = np.where(drop[:, None], 0.0, cvals[idx])
        loss, grads = loss_and_grad(net, z0_data[idx], t, c, eps, sched)
        if not np.isfinite(loss):
            raise TrainingDivergedError(state.step, opt.lr, loss)
        opt.step(params, grads)
        state.losses.append(loss)
        if progress is not None:
            progress(state.step, loss)
    return state


def smoothed(losses, window: int = 100) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    x = np.asarray(losses, dtype=float)
    n = len(x) // window
    if n == 0:
        return np.array([x.mean()]) if len(x) else x
    return x[: n * window].reshape(n, window).mean(axis=1)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "latent-anomaly-checkpoint"
CHECKPOINT_VERSION = 1


def _flat(arrays):
    return [np.asarray(a, dtype=float).ravel().tolist() for a in arrays]


def save_checkpoint(path, state: TrainState, sched: NoiseSchedule, config_digest: str = "",
                    dataset_digest: str = "") -> str:
    """Write a JSON checkpoint; returns its sha256 digest."""
    net = state.net
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dim": net.dim,
        "cond_dim": net.cond_dim,
        "time_dim": net.time_dim,
        "hidden": list(net.hidden),
        "schedule": {"T": sched.T, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        "config_digest": config_digest,
        "dataset_digest": dataset_digest,
        "step": state.step,
        "params": _flat(net.params),
        "adam": {"t": state.opt.t, "lr": state.opt.lr, "m": _flat(state.opt.m), "v": _flat(state.opt.v)},
        "rng_state": state.rng.bit_generator.state,
        "losses": [float(x) for x in state.losses],
    }
    data = json.dumps(doc, sort_keys=True).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, dim: int | None = None, cond_dim: int | None = None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(state, meta)``; ``meta`` holds the schedule parameters and
    digests. Raises :class:`CheckpointError` on a dimension mismatch.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    if dim is not None and doc["dim"] != dim:
        raise CheckpointError(f"{path}: latent dim {doc['dim']} != expected {dim}")
    if cond_dim is not None and doc["cond_dim"] != cond_dim:
        raise CheckpointError(f"{path}: condition dim {doc['cond_dim']} != expected {cond_dim}")
    sch = doc["schedule"]
    net = DenoiserNet.zeros(doc["dim"], doc["cond_dim"], sch["T"], doc["time_dim"], tuple(doc["hidden"]))

    def fill(targets, flat):
        if len(flat) != len(targets):
            raise CheckpointError(f"{path}: wrong number of parameter tensors")
        for p, vals in zip(targets, flat):
            if len(vals) != p.size:
                raise CheckpointError(f"{path}: parameter tensor size mismatch")
            p[...] = np.asarray(vals, dtype=float).reshape(p.shape)

    fill(net.params, doc["params"])
    opt = Adam(net.params, lr=doc["adam"]["lr"])
    fill(opt.m, doc["adam"]["m"])
    fill(opt.v, doc["adam"]["v"])
    opt.t = doc["adam"]["t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    state = TrainState(net, opt, rng, list(doc["losses"]))
    meta = {k: doc[k] for k in ("schedule", "config_digest", "dataset_digest", "step")}
    return state, meta
