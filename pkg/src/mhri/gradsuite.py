"""Finite-difference verification suite over every differentiable operation.

Each check builds a random small instance, reduces the op output to a scalar
with a fixed random weighting (so gradients are O(1)) and compares the
reverse-mode gradient with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .gradcheck import grad_check_many
from .model import MHRIModel, ModelConfig
from .seeding import derive_rng
from .synth import SynthConfig, generate_dataset

ELEMENTWISE_TOL = 1e-5
COMPOSITE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _op_checks(rng: np.random.Generator) -> list[tuple[str, float, Callable[[], tuple[Callable, dict]]]]:
    """(name, tolerance, builder) where builder returns (f, tensors)."""

    def t(*shape, low=None):
        x = rng.normal(size=shape)
        if low is not None:
            x = np.abs(x) + low
        return Tensor(x)

    def unary(op, low=None, shape=(3, 4)):
        def build():
            x = t(*shape, low=low)
            w = rng.normal(size=shape)
            return (lambda: _weighted(op(x), w)), {"x": x}
        return build

    def binary(op, shape_a=(3, 4), shape_b=(3, 4), low_b=None):
        def build():
            a, b = t(*shape_a), t(*shape_b, low=low_b)
            w = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
            return (lambda: _weighted(op(a, b), w)), {"a": a, "b": b}
        return build

    def matmul():
        a, b = t(2, 3, 4), t(4, 5)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: _weighted(a @ b, w)), {"a": a, "b": b}

    def reduce(op):
        def build():
            x = t(3, 4, 2)
            w = rng.normal(size=(3, 2))
            return (lambda: _weighted(op(x), w)), {"x": x}
        return build

    def reshape_transpose():
        x = t(2, 3, 4)
        w = rng.normal(size=(4, 6))
        return (lambda: _weighted(x.reshape(6, 4).transpose(), w)), {"x": x}

    def take():
        x = t(5, 3)
        idx = np.array([0, 2, 2, 4])
        w = rng.normal(size=(4, 3))
        return (lambda: _weighted(x[idx], w)), {"x": x}

    def concat():
        a, b = t(2, 3), t(2, 2)
        w = rng.normal(size=(2, 5))
        return (lambda: _weighted(ag.concat([a, b], axis=-1), w)), {"a": a, "b": b}

    def masked_fill():
        x = t(3, 4)
        mask = rng.random((3, 4)) < 0.4
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(ag.masked_fill(x, mask, -2.0), w)), {"x": x}

    def dropout():
        x = t(4, 5)
        w = rng.normal(size=(4, 5))
        return (lambda: _weighted(ag.dropout(x, 0.3, np.random.default_rng(3), True), w)), {"x": x}

    def layer_norm():
        x, g, b = t(3, 6), t(6), t(6)
        w = rng.normal(size=(3, 6))
        return (lambda: _weighted(ag.layer_norm(x, g, b), w)), {"x": x, "gain": g, "bias": b}

    def cross_entropy():
        x = t(6, 4)
        y = rng.integers(0, 4, 6)
        mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        return (lambda: ag.masked_cross_entropy(x, y, mask)), {"logits": x}

    def bce():
        x = t(5, 3)
        y = (rng.random((5, 3)) < 0.5).astype(float)
        wts = (rng.random((5, 3)) < 0.7).astype(float)
        return (lambda: ag.masked_bce_with_logits(x, y, wts)), {"logits": x}

    def kl():
        x = t(4, 3)
        q = rng.dirichlet(np.ones(3), size=4)
        w = rng.normal(size=4)
        return (lambda: _weighted(ag.kl_divergence(ag.softmax(x, -1), q), w)), {"x": x}

    E, C = ELEMENTWISE_TOL, COMPOSITE_TOL
    return [
        ("add", E, binary(lambda a, b: a + b, (3, 4), (4,))),
        ("sub", E, binary(lambda a, b: a - b)),
        ("mul", E, binary(lambda a, b: a * b, (3, 1), (3, 4))),
        ("div", E, binary(lambda a, b: a / b, low_b=0.5)),
        ("pow", E, unary(lambda x: x ** 2.5, low=0.5)),
        ("exp", E, unary(ag.exp)),
        ("log", E, unary(ag.log, low=0.5)),
        ("tanh", E, unary(ag.tanh)),
        ("sigmoid", E, unary(ag.sigmoid)),
        ("gelu", E, unary(ag.gelu)),
        ("masked_fill", E, masked_fill),
        ("dropout", E, dropout),
        ("matmul", C, matmul),
        ("sum", C, reduce(lambda x: x.sum(axis=1))),
        ("mean", C, reduce(lambda x: x.mean(axis=1))),
        ("reshape_transpose", C, reshape_transpose),
        ("take", C, take),
        ("concat", C, concat),
        ("softmax", C, unary(lambda x: ag.softmax(x, -1))),
        ("log_softmax", C, unary(lambda x: ag.log_softmax(x, -1))),
        ("layer_norm", C, layer_norm),
        ("masked_cross_entropy", C, cross_entropy),
        ("masked_bce_with_logits", C, bce),
        ("kl_divergence", C, kl),
    ]


def small_model(seed: int, coupling: str = "soft", dropout: float = 0.0) -> MHRIModel:
    """A tiny model with every parameter randomised (residual projections included)."""
    config = ModelConfig(d_model=8, n_heads=2, n_layers=1, d_v=8, d_t=8, max_seq=8,
                         dropout=dropout, seed=seed, coupling=coupling)
    model = MHRIModel(config)
    rng = derive_rng(seed, "gradsuite")
    for name, p in model.params.items():
        base = 1.0 if name.endswith(".g") else 0.0
        p.data = np.ascontiguousarray(base + rng.normal(0.0, 0.3, p.shape))
    return model


def small_episodes(seed: int):
    return generate_dataset(SynthConfig(n_episodes=2, utterances_per_episode=(3, 5), d_v=8, d_t=8, seed=seed))


def _model_checks(seed: int):
    from .train import TrainConfig, batch_objective, prepare_batch

    def fuse():
        model = small_model(seed)
        ep = small_episodes(seed)[0]
        v, x = Tensor(ep.video_matrix()), Tensor(ep.text_matrix())
        w = derive_rng(seed, "fuse-w").normal(size=(len(ep), 8))
        return (lambda: _weighted(model.fuse(v, x), w)), {"video": v, "text": x}

    def joint(coupling, dropout):
        def build():
            model = small_model(seed, coupling, dropout)
            config = TrainConfig(lambda_s=0.5, lambda_r=0.5)
            tb = prepare_batch(small_episodes(seed), config)

            def f():
                rng = np.random.default_rng(11) if dropout else None
                return batch_objective(model, tb, config, training=bool(dropout), rng=rng)[0]
            return f, dict(model.params.items())
        return build

    return [
        ("fuse_inputs", ELEMENTWISE_TOL, fuse),
        ("joint_loss", COMPOSITE_TOL, joint("soft", 0.0)),
        ("joint_loss_dropout", COMPOSITE_TOL, joint("soft", 0.2)),
    ]


def run_gradcheck_suite(seed: int = 0, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    rng = derive_rng(seed, "ops")
    checks = _op_checks(rng) + _model_checks(seed)
    results = []
    for name, tol, build in checks:
        t0 = time.perf_counter()
        f, tensors = build()
        errors = grad_check_many(f, tensors)
        res = CheckResult(name, max(errors.values()), tol, time.perf_counter() - t0)
        results.append(res)
        if report:
            report(res)
    return results
