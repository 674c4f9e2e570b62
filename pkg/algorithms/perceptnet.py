"""Small dense networks with hand-written backprop, Adam, and the perception losses."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import psutil
from scipy.special import expit
from tqdm import tqdm

from algorithms import distdp
from utils.errors import TrainingDivergedError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "sigmoid", "linear")


class PerceptionNet:
    """Feedforward net: ReLU hidden layers, tanh / sigmoid / linear head.

    Inputs are row vectors, so a batch is an (n, inputs) array and each weight
    matrix is (fan_in, fan_out).
    """

    def __init__(self, layer_sizes, output_activation="tanh", seed=0, weights=None):
        if len(layer_sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        self.output_activation = output_activation
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
                weights.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=float) for p in weights]
        expected = [(a, b) for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]
        for (fan_in, fan_out), W, b in zip(expected, self.params[0::2], self.params[1::2]):
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"parameter shapes {W.shape}/{b.shape} do not match layer {fan_in}->{fan_out}")

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return PerceptionNet(self.layer_sizes, self.output_activation, weights=[p.copy() for p in self.params])

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, flat):
        offset = 0
        for p in self.params:
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def _head(self, z):
        if self.output_activation == "tanh":
            return np.tanh(z)
        if self.output_activation == "sigmoid":
            return expit(z)
        return z

    def _head_grad(self, out):
        if self.output_activation == "tanh":
            return 1.0 - out ** 2
        if self.output_activation == "sigmoid":
            return out * (1.0 - out)
        return np.ones_like(out)

    def forward_cache(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected inputs of size {self.layer_sizes[0]}, got {x.shape[1]}")
        activations = [x]
        a = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = a @ self.params[2 * i] + self.params[2 * i + 1]
            a = self._head(z) if i == n_layers - 1 else np.maximum(z, 0.0)
            activations.append(a)
        return a, activations

    def forward(self, x):
        return self.forward_cache(x)[0]

    def backward(self, cache, upstream):
        """Parameter gradients given dLoss/dOutput (post-activation)."""
        activations = cache
        grads = [None] * len(self.params)
        delta = upstream * self._head_grad(activations[-1])
        for i in reversed(range(len(self.params) // 2)):
            grads[2 * i] = activations[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.params[2 * i].T) * (activations[i] > 0)
        return grads


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g ** 2
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    loss: str = "baseline"
    lam: float = 1.0
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.loss not in ("baseline", "risk"):
            raise ValueError(f"loss must be 'baseline' or 'risk', got {self.loss!r}")


# -- losses ----------------------------------------------------------------


def mse_and_grad(s, s_hat):
    diff = np.asarray(s_hat, float) - np.asarray(s, float)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_baseline(s, s_hat):
    return mse_and_grad(s, s_hat)[0]


def risk_term_and_grad(s, s_hat, table, alpha, scale=1.0):
    """Mean risk of the errors ``s_hat - s`` (divided by ``scale``) and its gradient in ``s_hat``."""
    s = np.atleast_2d(np.asarray(s, float))
    s_hat = np.atleast_2d(np.asarray(s_hat, float))
    value, grad = distdp.risk_and_gradient(table, s, s_hat - s, alpha)
    n = len(s)
    return float(value.mean() / scale), grad / (n * scale)


def loss_risk(s, s_hat, table, alpha, lam, scale=1.0):
    base = loss_baseline(s, s_hat)
    if lam == 0:
        return base
    term, _ = risk_term_and_grad(s, s_hat, table, alpha, scale)
    return base + lam * term


def risk_loss_and_grad(s, s_hat, table, alpha, lam, scale=1.0):
    base, dbase = mse_and_grad(s, s_hat)
    if lam == 0:
        return base, dbase
    term, dterm = risk_term_and_grad(s, s_hat, table, alpha, scale)
    return base + lam * term, dbase + lam * dterm


def bce_and_grad(target, p_hat, clip=1e-7, weight=None):
    """Mean binary cross-entropy, or the ``weight``-weighted sum when weights are given."""
    p = np.clip(p_hat, clip, 1 - clip)
    loss = -(target * np.log(p) + (1 - target) * np.log(1 - p))
    grad = (p - target) / (p * (1 - p))
    if weight is None:
        return float(loss.mean()), grad / loss.size
    return float(np.sum(weight * loss)), weight * grad


# -- training --------------------------------------------------------------


@dataclass
class TrainReport:
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    memory_delta: int = 0

    @property
    def final_loss(self):
        return self.trace[-1] if self.trace else float("nan")

    def as_row(self):
        return {
            "epochs": len(self.trace),
            "final_loss": self.final_loss,
            "wall_time_s": self.wall_time,
            "memory_kb": self.memory_delta / 1024,
        }


def fit(net, inputs, loss_fn, config, progress=False):
    """Minibatch Adam. ``loss_fn(batch_index, outputs) -> (loss, dloss/doutputs)``.

    Returns the net (updated in place) and a ``TrainReport`` with the per-epoch
    mean loss trace.
    """
    inputs = np.asarray(inputs, dtype=float)
    if len(inputs) == 0:
        raise ValueError("cannot train on an empty dataset")
    process = psutil.Process()
    mem_before = process.memory_info().rss
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.params, lr=config.lr)
    report = TrainReport()
    epochs = tqdm(range(config.epochs), desc="train", leave=False) if progress else range(config.epochs)
    for epoch in epochs:
        order = rng.permutation(len(inputs))
        total = 0.0
        for start_row in range(0, len(order), config.batch_size):
            batch = order[start_row:start_row + config.batch_size]
            out, cache = net.forward_cache(inputs[batch])
            loss, dout = loss_fn(batch, out)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch + 1}, batch starting {start_row}")
            opt.step(net.backward(cache, dout))
            total += loss * len(batch)
        report.trace.append(total / len(inputs))
        if (epoch + 1) % 50 == 0 or epoch == 0:
            logger.info("epoch %d/%d loss %.6g", epoch + 1, config.epochs, report.trace[-1])
    report.wall_time = time.perf_counter() - start
    report.memory_delta = process.memory_info().rss - mem_before
    return net, report
