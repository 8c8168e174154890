"""A small reverse-mode toolkit for dense networks.

Layers cache what their backward pass needs during ``forward`` and
accumulate parameter gradients into ``grads`` during ``backward``. Everything
is float64.
"""
from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError

BCE_CLAMP = 1e-7
LEAKY_SLOPE = 0.2


class Module:
    """Base class. Containers override :meth:`children`."""

    kind = "module"

    def __init__(self):
        self.training = True
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, accumulate: bool = True):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        """Leaf modules in forward order, with dotted names."""
        kids = self.children()
        if not kids:
            yield prefix, self
            return
        for name, child in kids:
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for _, m in self.named_modules():
            for key, p in m.params.items():
                out.append((p, m.grads[key]))
        return out

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [
            (f"{name}.{key}", p, m.grads[key])
            for name, m in self.named_modules()
            for key, p in m.params.items()
        ]

    def zero_grad(self) -> None:
        for _, g in self.parameters():
            g.fill(0.0)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def kink_signature(self) -> np.ndarray:
        """Sign pattern of every piecewise-linear activation's last input."""
        masks = [m.last_mask.ravel() for _, m in self.named_modules()
                 if isinstance(m, Activation) and m.last_mask is not None]
        return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout, accumulate=True):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout, accumulate)
        return dout


def kaiming_bound(fan_in: int, negative_slope: float = 0.0) -> float:
    gain = math.sqrt(2.0 / (1.0 + negative_slope**2))
    return gain * math.sqrt(3.0 / fan_in)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Linear(Module):
    """y = x W^T + b with W of shape (out, in)."""

    kind = "linear"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 init: str = "kaiming", negative_slope: float = 0.0):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        if init == "kaiming":
            bound = kaiming_bound(in_dim, negative_slope)
        elif init == "xavier":
            bound = xavier_bound(in_dim, out_dim)
        elif init == "zeros":
            bound = 0.0
        else:
            raise ConfigError(f"unknown init {init!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim)) if bound else np.zeros((out_dim, in_dim))
        self.params = {"weight": w, "bias": np.zeros(out_dim)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(
                f"linear layer expects input of shape (batch, {self.in_dim}), got {x.shape}; "
                f"weight shape is {self.params['weight'].shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout, accumulate=True):
        if accumulate:
            self.grads["weight"] += dout.T @ self._x
            self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]


class BatchNorm(Module):
    """Per-feature batch normalization.

    Training mode standardizes by batch statistics (biased variance) and
    updates ``running = (1 - momentum) * running + momentum * batch``.
    Inference mode uses the running statistics and accepts any batch size.

    When ``reference_rows`` is set to ``r``, training-mode statistics are
    taken from the first ``r`` rows only and applied to every row
    (reference batch normalization).
    """

    kind = "batchnorm"

    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.features, self.eps, self.momentum = features, eps, momentum
        self.params = {"gamma": np.ones(features), "beta": np.zeros(features)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.buffers = {"running_mean": np.zeros(features), "running_var": np.ones(features)}
        self.reference_rows: int | None = None
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.features:
            raise ConfigError(f"batchnorm expects (batch, {self.features}), got {x.shape}")
        n_ref = None
        if self.training:
            n_ref = x.shape[0] if self.reference_rows is None else self.reference_rows
            if n_ref < 2 or n_ref > x.shape[0]:
                raise ConfigError("batchnorm in training mode needs a batch of at least 2")
            ref = x[:n_ref]
            mu = ref.mean(axis=0)
            var = ref.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mu
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std, n_ref)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout, accumulate=True):
        xhat, inv_std, n_ref = self._cache
        gamma = self.params["gamma"]
        if accumulate:
            self.grads["gamma"] += (dout * xhat).sum(axis=0)
            self.grads["beta"] += dout.sum(axis=0)
        dxhat = dout * gamma
        dx = dxhat * inv_std
        if n_ref is None:
            return dx
        # statistics depend on the reference rows only
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * xhat).sum(axis=0)
        dx[:n_ref] -= (inv_std / n_ref) * (s1 + xhat[:n_ref] * s2)
        return dx


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(kind: str, x):
    if kind == "relu":
        return np.where(x >= 0, x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, LEAKY_SLOPE * x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x, y, dout):
    """Gradient through an activation; at exactly 0 the positive-side slope is used."""
    if kind == "relu":
        return dout * (x >= 0)
    if kind == "leaky_relu":
        return dout * np.where(x >= 0, 1.0, LEAKY_SLOPE)
    if kind == "tanh":
        return dout * (1.0 - y * y)
    if kind == "sigmoid":
        return dout * y * (1.0 - y)
    raise ConfigError(f"unknown activation {kind!r}")


class Activation(Module):
    kind = "activation"

    def __init__(self, name: str):
        super().__init__()
        activation_forward(name, np.zeros(1))
        self.name = name
        self.last_mask = None
        self._cache = None

    def forward(self, x):
        y = activation_forward(self.name, x)
        if self.name in ("relu", "leaky_relu"):
            self.last_mask = x >= 0
        self._cache = (x, y)
        return y

    def backward(self, dout, accumulate=True):
        x, y = self._cache
        return activation_backward(self.name, x, y, dout)


def dropout_forward(x, p: float, training: bool, rng: np.random.Generator):
    """Inverted dropout. Returns ``(y, mask)``; the mask already carries the
    1/(1-p) survivor scaling and is ``None`` when the call is an identity.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


class Dropout(Module):
    kind = "dropout"

    def __init__(self, p: float, rng: np.random.Generator | None = None):
        super().__init__()
        dropout_forward(np.zeros(1), p, False, None)
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        # when set, reused instead of drawing a new mask (gradient checks)
        self.frozen_mask = None
        self._mask = None

    def forward(self, x):
        if self.training and self.frozen_mask is not None:
            self._mask = self.frozen_mask
            return x * self._mask
        y, self._mask = dropout_forward(x, self.p, self.training, self.rng)
        return y

    def backward(self, dout, accumulate=True):
        return dout if self._mask is None else dout * self._mask

    def freeze(self, mask=None):
        """Pin the dropout mask; defaults to the last mask drawn."""
        self.frozen_mask = self._mask if mask is None else mask

    def unfreeze(self):
        self.frozen_mask = None


def bce_loss(scores, targets):
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7].

    Returns ``(loss, dloss/dscores)``.
    """
    s = np.clip(np.asarray(scores, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    n = s.size
    loss = -np.mean(t * np.log(s) + (1.0 - t) * np.log(1.0 - s))
    grad = -(t / s - (1.0 - t) / (1.0 - s)) / n
    return float(loss), grad


def bce_logit_grad(scores, targets):
    """d(mean BCE)/d(logits) for sigmoid outputs, (s - t) / n.

    This is the exact derivative of the unclamped loss and does not vanish
    when the sigmoid saturates.
    """
    s = np.asarray(scores, dtype=np.float64)
    return (s - np.asarray(targets, dtype=np.float64)) / s.size


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Adam:
    """Bias-corrected Adam updating parameter arrays in place."""

    def __init__(self, params: list[tuple[np.ndarray, np.ndarray]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
            raise ConfigError("Adam needs lr > 0 and betas in [0, 1)")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p, _ in params]
        self.v = [np.zeros_like(p) for p, _ in params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for (p, g), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def grad_check(loss_fn: Callable[[], float], arrays: list[np.ndarray], analytic: list[np.ndarray],
               h: float = 1e-5, kink_fn: Callable[[], np.ndarray] | None = None,
               coords: list[np.ndarray] | None = None) -> float:
    """Maximum relative error between analytic gradients and central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current contents of
    ``arrays`` (perturbed in place and restored). If ``kink_fn`` is given it
    returns the activation sign pattern; coordinates whose perturbation
    flips any sign straddle a kink and are skipped. ``coords`` optionally
    restricts each array to a subset of flat indices.
    """
    worst = 0.0
    base_sig = None
    if kink_fn is not None:
        loss_fn()
        base_sig = kink_fn()
    for i, (arr, grad) in enumerate(zip(arrays, analytic)):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = range(flat.size) if coords is None else coords[i]
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            fp = loss_fn()
            crossed = kink_fn is not None and not np.array_equal(kink_fn(), base_sig)
            flat[j] = old - h
            fm = loss_fn()
            crossed = crossed or (kink_fn is not None and not np.array_equal(kink_fn(), base_sig))
            flat[j] = old
            if crossed:
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(gflat[j], numeric)))
    return worst
