"""Small feed-forward networks with an embedded NALU layer, trained by backprop.

Everything is float64 numpy. Inputs are batches of shape (n, in_dim); a network
maps them to a vector of n scalar outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

EPS = 1e-7


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu", rng=None):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.activation = activation
        self.params = {
            "W": _uniform(rng, in_dim, (out_dim, in_dim)),
            "b": _uniform(rng, in_dim, (out_dim,)),
        }

    @property
    def in_dim(self) -> int:
        return self.params["W"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x):
        z = x @ self.params["W"].T + self.params["b"]
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        return out, (x, z)

    def backward(self, dout, cache):
        x, z = cache
        dz = dout * (z > 0.0) if self.activation == "relu" else dout
        grads = {"W": dz.T @ x, "b": dz.sum(axis=0)}
        return dz @ self.params["W"], grads

    def header(self) -> dict:
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim, "activation": self.activation}


class NaluLayer:
    """Gated mix of an additive accumulator and a log-space multiplicative path.

    ``W = tanh(W_hat) * sigmoid(M_hat)`` is shared by both paths; the gate is
    ``sigmoid(G x)``.
    """

    kind = "nalu"

    def __init__(self, in_dim: int, out_dim: int, rng=None, eps: float = EPS):
        if eps <= 0:
            raise ValueError("eps must be positive")
        rng = np.random.default_rng() if rng is None else rng
        self.eps = eps
        self.params = {
            "W_hat": _uniform(rng, in_dim, (out_dim, in_dim)),
            "M_hat": _uniform(rng, in_dim, (out_dim, in_dim)),
            "G": _uniform(rng, in_dim, (out_dim, in_dim)),
        }

    @property
    def in_dim(self) -> int:
        return self.params["W_hat"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W_hat"].shape[0]

    def weights(self):
        t = np.tanh(self.params["W_hat"])
        s = sigmoid(self.params["M_hat"])
        return t * s, t, s

    def forward(self, x):
        W, t, s = self.weights()
        a = x @ W.T
        log_x = np.log(np.abs(x) + self.eps)
        m = np.exp(log_x @ W.T)
        g = sigmoid(x @ self.params["G"].T)
        out = g * a + (1.0 - g) * m
        return out, (x, log_x, a, m, g, W, t, s)

    def backward(self, dout, cache):
        x, log_x, a, m, g, W, t, s = cache
        da = dout * g
        dlog = dout * (1.0 - g) * m  # through exp
        dgate = dout * (a - m) * g * (1.0 - g)
        dW = da.T @ x + dlog.T @ log_x
        dx = da @ W + (dlog @ W) * np.sign(x) / (np.abs(x) + self.eps) + dgate @ self.params["G"]
        grads = {
            "W_hat": dW * s * (1.0 - t * t),
            "M_hat": dW * t * s * (1.0 - s),
            "G": dgate.T @ x,
        }
        return dx, grads

    def header(self) -> dict:
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim, "eps": self.eps}


def nac_forward(layer: NaluLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    W, _, _ = layer.weights()
    return x @ W.T


def nalu_forward(layer: NaluLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    return layer.forward(x)[0]


class Network:
    def __init__(self, layers: list):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if layers[-1].out_dim != 1:
            raise ValueError("the last layer must have a single output")
        self.layers = layers
        self._version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def forward(self, X):
        """Returns predictions of shape (n,) and the cache needed by backward."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"network expects {self.input_dim} inputs, got {X.shape[1]}")
        caches = []
        h = X
        for layer in self.layers:
            h, c = layer.forward(h)
            caches.append(c)
        y = h[:, 0]
        return (float(y[0]) if single else y), (self._version, caches, y)

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, y_target):
        """Gradients of the batch mean of 1/2 (y - target)^2, one dict per layer."""
        version, caches, y = cache
        if version != self._version:
            raise RuntimeError("stale cache: parameters changed since the forward pass")
        t = np.atleast_1d(np.asarray(y_target, dtype=np.float64))
        dout = ((y - t) / y.size)[:, None]
        grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            dout, grads[i] = self.layers[i].backward(dout, caches[i])
        return grads

    def apply_update(self, steps) -> None:
        for layer, step in zip(self.layers, steps):
            for k, v in step.items():
                layer.params[k] -= v
        self._version += 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for layer in self.layers for p in layer.params.values()])

    def set_flat(self, flat) -> None:
        i = 0
        for layer in self.layers:
            for k, p in layer.params.items():
                layer.params[k] = np.asarray(flat[i : i + p.size], dtype=np.float64).reshape(p.shape).copy()
                i += p.size
        self._version += 1

    def to_dict(self) -> dict:
        return {
            "topology": [layer.header() for layer in self.layers],
            "params": [{k: v.tolist() for k, v in layer.params.items()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        layers = []
        for head, params in zip(d["topology"], d["params"]):
            if head["kind"] == "dense":
                layer = DenseLayer(head["in"], head["out"], head["activation"], rng=np.random.default_rng(0))
            elif head["kind"] == "nalu":
                layer = NaluLayer(head["in"], head["out"], rng=np.random.default_rng(0), eps=head["eps"])
            else:
                raise ValueError(f"unknown layer kind {head['kind']!r}")
            for k in layer.params:
                layer.params[k] = np.array(params[k], dtype=np.float64).reshape(layer.params[k].shape)
            layers.append(layer)
        return cls(layers)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_network(input_dim: int, rng=None, width: int = 32, nalu_width: int = 16) -> Network:
    """Three dense ReLU layers, a NALU layer, then a ReLU layer and a linear output."""
    rng = np.random.default_rng() if rng is None else rng
    return Network(
        [
            DenseLayer(input_dim, width, "relu", rng),
            DenseLayer(width, width, "relu", rng),
            DenseLayer(width, width, "relu", rng),
            NaluLayer(width, nalu_width, rng),
            DenseLayer(nalu_width, width, "relu", rng),
            DenseLayer(width, 1, "identity", rng),
        ]
    )


def relu_network(input_dim: int, n_params: int, depth: int = 5, rng=None) -> Network:
    """Dense ReLU stack of ``depth`` hidden layers whose size is close to ``n_params``."""
    rng = np.random.default_rng() if rng is None else rng

    def count(w):
        return (input_dim + 1) * w + (depth - 1) * (w + 1) * w + (w + 1)

    width = min(range(1, 1024), key=lambda w: abs(count(w) - n_params))
    dims = [input_dim] + [width] * depth
    layers = [DenseLayer(a, b, "relu", rng) for a, b in zip(dims, dims[1:])]
    layers.append(DenseLayer(width, 1, "identity", rng))
    return Network(layers)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps_per_call: int = 1
    optimizer: str = "sgd"  # "sgd" or "adam"
    momentum: float = 0.0
    clip_norm: Optional[float] = None
    seed: int = 0
    # inverse-time decay: lr / (1 + t / decay_steps); None keeps lr fixed
    decay_steps: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """SGD (with optional momentum) or Adam; state is per network."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.state: Optional[list] = None
        self.t = 0

    def step(self, net: Network, grads) -> None:
        cfg = self.config
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for layer in grads for g in layer.values()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
                grads = [{k: g * scale for k, g in layer.items()} for layer in grads]
        if self.state is None:
            self.state = [{k: [np.zeros_like(g), np.zeros_like(g)] for k, g in layer.items()} for layer in grads]
        self.t += 1
        lr = cfg.learning_rate
        if cfg.decay_steps:
            lr = lr / (1.0 + (self.t - 1) / cfg.decay_steps)
        steps = []
        if cfg.optimizer == "adam":
            b1, b2 = 0.9, 0.999
            c1, c2 = 1 - b1**self.t, 1 - b2**self.t
            for layer, st in zip(grads, self.state):
                out = {}
                for k, g in layer.items():
                    m, v = st[k]
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    out[k] = lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)
                steps.append(out)
        else:
            for layer, st in zip(grads, self.state):
                out = {}
                for k, g in layer.items():
                    vel = st[k][0]
                    vel *= cfg.momentum
                    vel += g
                    out[k] = lr * vel
                steps.append(out)
        net.apply_update(steps)


def forward(net: Network, x):
    return net.forward(x)


def backward(net: Network, cache, y_target):
    return net.backward(cache, y_target)


def loss(net: Network, X, y) -> float:
    """Mean squared error of ``net`` over a dataset."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("loss over an empty dataset")
    pred = net(np.atleast_2d(X))
    return float(np.mean((pred - y) ** 2))


def train_batch(net: Network, X, y, config: TrainConfig, optimizer: Optional[Optimizer] = None, rng=None) -> float:
    """Run ``config.steps_per_call`` minibatch updates on (X, y); returns the loss afterwards.

    Minibatches of ``config.batch_size`` rows are drawn without replacement
    and reshuffled once the data is used up.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty training batch")
    optimizer = Optimizer(config) if optimizer is None else optimizer
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = y.size
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for _ in range(config.steps_per_call):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        _, cache = net.forward(X[idx])
        optimizer.step(net, net.backward(cache, y[idx]))
    return loss(net, X, y)
