"""Finite-difference verification of every differentiable component.

Each check builds a small instance, projects its output onto a fixed random
direction ``R`` so the loss is the scalar ``sum(out * R)``, and compares the
analytic gradients with central differences. ReLU-family kinks are skipped
through the module's kink signature.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gan, nn

GRAD_TOL = 1e-4
FD_STEP = 1e-5
COMPACT_BLOCKS = ((8, 16), (16, 8), (8, 8), (8, 4))


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    n_tensors: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < GRAD_TOL)


def _module_check(module: nn.Module, inputs: list[np.ndarray], rng, h: float) -> tuple[float, int]:
    """Check ``module`` with respect to its inputs and all parameters."""
    out = module.forward(*inputs)
    R = rng.normal(size=out.shape)

    def loss():
        return float((module.forward(*inputs) * R).sum())

    module.zero_grad()
    module.forward(*inputs)
    din = module.backward(R)
    din = list(din) if isinstance(din, tuple) else [din]
    params = module.named_parameters()
    arrays = list(inputs) + [p for _, p, _ in params]
    analytic = [d.copy() for d in din] + [g.copy() for _, _, g in params]
    err = nn.grad_check(loss, arrays, analytic, h=h, kink_fn=module.kink_signature)
    return err, len(arrays)


def _loss_check(fn, pred, target, h: float) -> tuple[float, int]:
    _, grad = fn(pred, target)
    err = nn.grad_check(lambda: fn(pred, target)[0], [pred], [grad.copy()], h=h)
    return err, 1


def _components(seed: int, h: float) -> list[tuple[str, Callable[[], tuple[float, int]]]]:
    rng = np.random.default_rng(seed)

    def linear():
        m = nn.Linear(5, 4, rng)
        m.params["bias"][:] = rng.normal(size=4)
        return _module_check(m, [rng.normal(size=(6, 5))], rng, h)

    def batchnorm():
        m = nn.BatchNorm(4)
        m.params["gamma"][:] = rng.uniform(0.5, 1.5, 4)
        m.params["beta"][:] = rng.normal(size=4)
        return _module_check(m, [rng.normal(size=(6, 4))], rng, h)

    def batchnorm_reference():
        m = nn.BatchNorm(4)
        m.reference_rows = 4
        m.params["gamma"][:] = rng.uniform(0.5, 1.5, 4)
        return _module_check(m, [rng.normal(size=(8, 4))], rng, h)

    def activation(name):
        def run():
            return _module_check(nn.Activation(name), [rng.normal(size=(6, 5))], rng, h)
        return run

    def bce():
        scores = rng.uniform(0.05, 0.95, size=(8, 1))
        targets = rng.integers(0, 2, size=(8, 1)).astype(np.float64)
        return _loss_check(nn.bce_loss, scores, targets, h)

    def mse():
        return _loss_check(nn.mse_loss, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), h)

    def residual(in_dim, out_dim):
        def run():
            block = gan.ResidualBlock(in_dim, out_dim, rng)
            block.train()
            return _module_check(block, [rng.normal(size=(6, in_dim))], rng, h)
        return run

    def generator():
        g = gan.GeneratorNet(7, hidden=8, blocks=COMPACT_BLOCKS, seed=seed + 1)
        g.train()
        return _module_check(g, [rng.uniform(-1, 1, size=(6, 7))], rng, h)

    def discriminator():
        d = gan.DiscriminatorNet(7, seed=seed + 2)
        d.train()
        veg, bare = rng.uniform(-1, 1, size=(6, 7)), rng.uniform(-1, 1, size=(6, 7))
        d.forward(veg, bare)
        for m in d.dropouts():
            m.freeze()
        try:
            return _module_check(d, [veg, bare], rng, h)
        finally:
            for m in d.dropouts():
                m.unfreeze()

    return [
        ("linear", linear),
        ("batchnorm", batchnorm),
        ("batchnorm_reference", batchnorm_reference),
        ("relu", activation("relu")),
        ("leaky_relu", activation("leaky_relu")),
        ("tanh", activation("tanh")),
        ("sigmoid", activation("sigmoid")),
        ("bce", bce),
        ("mse", mse),
        ("residual_identity", residual(6, 6)),
        ("residual_projection", residual(6, 9)),
        ("generator", generator),
        ("discriminator", discriminator),
    ]


COMPONENTS = tuple(name for name, _ in _components(0, FD_STEP))


@contextlib.contextmanager
def corrupted_backward(cls, factor: float = 1.01):
    """Temporarily scale the input gradient returned by ``cls.backward``."""
    original = cls.backward

    def bad(self, dout, accumulate=True):
        return original(self, dout, accumulate) * factor

    cls.backward = bad
    try:
        yield
    finally:
        cls.backward = original


def run_grad_checks(seed: int = 0, h: float = FD_STEP, only=None) -> list[CheckResult]:
    results = []
    for name, fn in _components(seed, h):
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        err, n = fn()
        results.append(CheckResult(name, float(err), n, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'component':<22}{'max_rel_error':>15}  status"]
    for r in results:
        lines.append(f"{r.component:<22}{r.max_rel_error:>15.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
