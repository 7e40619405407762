"""Finite-difference gradient suite over every primitive and the composed model.

Used by the ``gradcheck`` CLI subcommand and by the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    default_dtype,
    dropout,
    gradcheck,
    grad_reverse,
    keyed_rng,
    matmul,
    numeric_param_grad,
    softmax,
    stack,
)

TOLERANCE = 1e-4
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < TOLERANCE)


def _away_from(x: np.ndarray, kinks, margin=1e-2) -> np.ndarray:
    # keep finite differences off non-differentiable points
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + np.where(x >= k, margin, -margin), x)
    return x


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


# name -> (input generators, function of tensors)
PRIMITIVES: dict[str, tuple[list[Callable], Callable]] = {
    "add": ([_normal(2, 3), _normal(3)], lambda a, b: a + b),
    "sub": ([_normal(2, 3), _normal(2, 1)], lambda a, b: a - b),
    "mul": ([_normal(2, 3), _normal(2, 3)], lambda a, b: a * b),
    "div": ([_normal(2, 3), lambda r: r.uniform(0.5, 2.0, size=(2, 3)) * r.choice([-1, 1], size=(2, 3))], lambda a, b: a / b),
    "neg": ([_normal(4)], lambda a: -a),
    "matmul": ([_normal(2, 3), _normal(3, 4)], matmul),
    "relu": ([lambda r: _away_from(r.normal(size=(3, 3)), [0.0])], lambda a: a.relu()),
    "sigmoid": ([lambda r: r.normal(scale=3, size=(3, 3))], lambda a: a.sigmoid()),
    "tanh": ([_normal(3, 3)], lambda a: a.tanh()),
    "exp": ([_normal(3, 3)], lambda a: a.exp()),
    "expm1": ([_normal(3, 3)], lambda a: a.expm1()),
    "log": ([lambda r: r.uniform(0.2, 3.0, size=(3, 3))], lambda a: a.log()),
    "square": ([_normal(3, 3)], lambda a: a.square()),
    "clip": ([lambda r: _away_from(r.normal(size=(3, 3)), [-0.5, 0.5])], lambda a: a.clip(-0.5, 0.5)),
    "sum": ([_normal(2, 3, 2)], lambda a: a.sum(axis=1, keepdims=True)),
    "mean": ([_normal(2, 3, 2)], lambda a: a.mean(axis=-1)),
    "reshape": ([_normal(2, 6)], lambda a: a.reshape(3, 2, 2)),
    "transpose": ([_normal(2, 3)], lambda a: a.T),
    "getitem": ([_normal(4, 3)], lambda a: a[1:3, ::2] * a[0, :2]),
    "concat": ([_normal(2, 3), _normal(2, 2)], lambda a, b: concat([a, b], axis=-1)),
    "stack": ([_normal(2, 3), _normal(2, 3)], lambda a, b: stack([a, b], axis=1)),
    "softmax": ([lambda r: r.normal(scale=2, size=(3, 4))], lambda a: softmax(a, axis=-1)),
    "dropout": ([_normal(3, 4)], lambda a: dropout(a, 0.3, True, keyed_rng(5))),
}


def check_primitive(name: str, points: int = 100, seed: int = 0) -> CheckResult:
    gens, fn = PRIMITIVES[name]
    start = time.perf_counter()
    worst = 0.0
    with default_dtype(np.float64):
        for point in range(points):
            rng = keyed_rng(seed, 11, point)
            inputs = [g(rng) for g in gens]
            proj = rng.normal(size=fn(*[Tensor(x) for x in inputs]).shape)
            for i in range(len(inputs)):
                def f(x, i=i):
                    args = [Tensor(v) for v in inputs]
                    args[i] = x
                    return (fn(*args) * proj).sum()

                worst = max(worst, gradcheck(f, inputs[i], EPS))
    return CheckResult(name, worst, points, time.perf_counter() - start)


def check_grad_reverse(points: int = 100, seed: int = 0) -> CheckResult:
    """The reversal node must return exactly ``-lam`` times the identity gradient."""
    start = time.perf_counter()
    worst = 0.0
    with default_dtype(np.float64):
        for point in range(points):
            rng = keyed_rng(seed, 12, point)
            lam = float(rng.uniform(0, 2))
            x0 = rng.normal(size=(2, 3))
            proj = rng.normal(size=(2, 3))

            def identity(x):
                return (x.tanh() * proj).sum()

            x = Tensor(x0.copy(), requires_grad=True)
            (grad_reverse(x, lam).tanh() * proj).sum().backward()
            reversed_grad = x.grad.copy()
            x = Tensor(x0.copy(), requires_grad=True)
            identity(x).backward()
            worst = max(worst, gradcheck(identity, x0, EPS))
            worst = max(worst, float(np.max(np.abs(reversed_grad + lam * x.grad))))
    return CheckResult("grad_reverse", worst, points, time.perf_counter() - start)


def toy_model_config():
    from .pipeline import ModelConfig

    return ModelConfig(
        dims=(3, 2, 3),
        d_code=4,
        enc_hidden=5,
        n_experts=2,
        moie_hidden=5,
        d_repr=4,
        heads=2,
        adapter_hidden=5,
        d_fuse=4,
    )


def full_graph_error(seed: int = 0, n: int = 2, max_coords: int | None = None) -> float:
    """Check the whole training objective of a toy model, every parameter.

    Parameters upstream of the reversal node receive ``-lam`` times the
    domain-loss gradient, so their numeric reference is the objective with
    ``alpha`` replaced by ``-lam * alpha``.
    """
    from .pipeline import MIDG, TrainConfig, total_loss

    config = toy_model_config()
    train = TrainConfig()
    with default_dtype(np.float64):
        model = MIDG(config, seed=seed)
    model.train()
    rng = keyed_rng(seed, 13)
    features = {m: rng.normal(size=(n, d)) for m, d in zip("tav", config.dims)}
    labels = rng.uniform(*train.label_range, size=n)

    def objective(alpha):
        out = model.forward_train(features, labels, train, keyed_rng(seed, 14))
        return total_loss(out.components, alpha, train.beta, train.gamma, train.delta)

    model.zero_grad()
    objective(train.alpha).backward()
    params = model.parameters()
    analytic = [p.grad.copy() for p in params]

    upstream = list(model.in_branch.router.parameters())
    for ex in model.in_branch.experts:
        upstream.extend(ex.parameters())
    for dis in model.disentanglers.values():
        upstream.extend(dis.in_encoder.parameters())
        upstream.extend(dis.out_encoder.parameters())
    upstream_ids = {id(p) for p in upstream}
    surrogate_alpha = -config.grl_lambda * train.alpha

    worst = 0.0
    for k, (p, a) in enumerate(zip(params, analytic)):
        alpha = surrogate_alpha if id(p) in upstream_ids else train.alpha
        coords, numeric = numeric_param_grad(lambda: objective(alpha), p, EPS, max_coords, keyed_rng(seed, 15, k))
        a = a.reshape(-1)[coords]
        worst = max(worst, float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)), initial=0.0)))
    model.zero_grad()
    return worst


def check_full_graph(points: int = 3, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    worst = max(full_graph_error(seed + i) for i in range(points))
    return CheckResult("full_graph", worst, points, time.perf_counter() - start)


def run_suite(points: int = 100, seed: int = 0, graph_points: int = 3) -> list[CheckResult]:
    results = [check_primitive(name, points, seed) for name in PRIMITIVES]
    results.append(check_grad_reverse(points, seed))
    results.append(check_full_graph(graph_points, seed))
    return results
