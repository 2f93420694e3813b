"""Central finite-difference verification of every differentiable op.

Runs in float64; each probe builds a scalar from one op (plus sum) at a
random point and compares analytic gradients against central differences.
The suite ends with a composed residual block and a full thinking layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_rope_cache, block_forward, init_params
from .routing import RoutingPolicy, RoutingTrace, itt_layer_forward
from .tensor import Tensor, grad_check, precision

OP_TOLERANCE = 1e-4
LAYER_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _op_probes(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    n, d, v = 4, 6, 9
    idx = np.array([3, 0, 3])
    ids = np.array([1, 7, 2, 7])
    targets = np.array([0, 5, 1, 8])
    probes: list[tuple[str, Callable, list[Tensor]]] = [
        ("matmul", lambda xs: T.sum_all(T.matmul(xs[0], xs[1])), [_rand(rng, 3, 5), _rand(rng, 5, 2)]),
        ("transpose", lambda xs: T.sum_all(T.mul(T.transpose(xs[0]), xs[1])), [_rand(rng, 3, 5), _rand(rng, 5, 3)]),
        ("add", lambda xs: T.sum_all(T.mul(T.add(xs[0], xs[1]), xs[0])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("add_row_vector", lambda xs: T.sum_all(T.mul(T.add(xs[0], xs[1]), xs[0])), [_rand(rng, n, d), _rand(rng, d)]),
        ("mul", lambda xs: T.sum_all(T.mul(xs[0], xs[1])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("mul_row_vector", lambda xs: T.sum_all(T.mul(xs[0], xs[1])), [_rand(rng, n, d), _rand(rng, d)]),
        ("scale", lambda xs: T.sum_all(T.mul(T.scale(xs[0], -2.5), xs[0])), [_rand(rng, n, d)]),
        ("scale_rows", lambda xs: T.sum_all(T.scale_rows(xs[0], xs[1])), [_rand(rng, n, d), _rand(rng, n)]),
        ("gather_rows", lambda xs: T.sum_all(T.mul(T.gather_rows(xs[0], idx), xs[1])), [_rand(rng, n, d), _rand(rng, 3, d)]),
        ("scatter_rows", lambda xs: T.sum_all(T.mul(T.scatter_rows(xs[0], idx, n), xs[1])), [_rand(rng, 3, d), _rand(rng, n, d)]),
        ("embedding", lambda xs: T.sum_all(T.mul(T.embedding(xs[0], ids), xs[1])), [_rand(rng, v, d), _rand(rng, 4, d)]),
        ("concat", lambda xs: T.sum_all(T.mul(T.concat([xs[0], xs[1]], axis=1), xs[2])), [_rand(rng, n, 2), _rand(rng, n, 3), _rand(rng, n, 5)]),
        ("slice_axis", lambda xs: T.sum_all(T.mul(T.slice_axis(xs[0], 1, 1, 4), xs[1])), [_rand(rng, n, d), _rand(rng, n, 3)]),
        ("reshape", lambda xs: T.sum_all(T.mul(T.reshape(xs[0], (d, n)), xs[1])), [_rand(rng, n, d), _rand(rng, d, n)]),
        ("softmax", lambda xs: T.sum_all(T.mul(T.softmax(xs[0]), xs[1])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("rms_norm", lambda xs: T.sum_all(T.mul(T.rms_norm(xs[0], xs[1]), xs[2])), [_rand(rng, n, d), _rand(rng, d), _rand(rng, n, d)]),
        ("silu", lambda xs: T.sum_all(T.mul(T.silu(xs[0]), xs[1])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("sigmoid", lambda xs: T.sum_all(T.mul(T.sigmoid(xs[0]), xs[1])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("tanh", lambda xs: T.sum_all(T.mul(T.tanh(xs[0]), xs[1])), [_rand(rng, n, d), _rand(rng, n, d)]),
        ("sum_all", lambda xs: T.sum_all(xs[0]), [_rand(rng, n, d)]),
        ("mean_all", lambda xs: T.mean_all(T.mul(xs[0], xs[0])), [_rand(rng, n, d)]),
        ("cross_entropy", lambda xs: T.cross_entropy(xs[0], targets), [_rand(rng, n, v)]),
    ]
    return probes


def _layer_inputs(rng, config: ModelConfig):
    params = init_params(config, seed=int(rng.integers(1 << 30)))
    # Random, non-identity starting point so every path carries signal.
    for name, t in params.items():
        t.data = rng.normal(0.0, 0.2, t.shape).astype(t.data.dtype)
    return params


def _min_weight_gap(weights: np.ndarray) -> float:
    w = np.sort(weights)
    return float(np.diff(w).min()) if w.size > 1 else 1.0


def check_block(rng, n: int = 4) -> CheckResult:
    config = ModelConfig(d_model=8, n_layers=1, n_heads=2, mlp_hidden=16, max_seq_len=8)
    params = _layer_inputs(rng, config)
    rope = build_rope_cache(config.max_seq_len, config.head_dim)
    x = _rand(rng, n, config.d_model)
    names = [k for k in params if k.startswith("layers.0.")]
    tensors = [x] + [params[k] for k in names]

    def fn(ts):
        return T.mean_all(T.mul(block_forward(params, config, 0, ts[0], rope), ts[0]))

    errs = grad_check(fn, tensors)
    return CheckResult("block_forward", max(errs), LAYER_TOLERANCE)


def check_itt_layer(rng, n: int = 4, steps: int = 3) -> CheckResult:
    config = ModelConfig(
        d_model=8, n_layers=1, n_heads=2, mlp_hidden=16, max_seq_len=8,
        variant="itt", thinking_steps=steps, itt_interval=1,
    )
    policy = RoutingPolicy(capacities=[0.5] * (steps - 1))
    rope = build_rope_cache(config.max_seq_len, config.head_dim)
    pre = "layers.0."

    # Selection is discrete: redraw any starting point where router scores
    # nearly tie, so finite differences cannot flip a selection.
    for _ in range(20):
        params = _layer_inputs(rng, config)
        x = _rand(rng, n, config.d_model)
        encodings = [params[pre + f"phi.{t}"] for t in range(steps)]
        routers = [
            (params[pre + f"router.{t}.w"], params[pre + f"router.{t}.b"])
            for t in range(1, steps)
        ]

        def fn(ts):
            out = itt_layer_forward(
                ts[0],
                lambda y: block_forward(params, config, 0, y, rope),
                encodings,
                routers,
                policy,
                policy.resolved_capacities(steps - 1),
                mode="train",
            )
            return T.mean_all(T.mul(out, ts[0]))

        trace = RoutingTrace()
        with T.no_grad():
            itt_layer_forward(
                x,
                lambda y: block_forward(params, config, 0, y, rope),
                encodings,
                routers,
                policy,
                policy.resolved_capacities(steps - 1),
                mode="train",
                trace=trace,
            )
        if min(_min_weight_gap(s.weights) for s in trace.steps) > 1e-3:
            break

    tensors = [x] + [params[k] for k in params if k.startswith(pre)]
    errs = grad_check(fn, tensors)
    return CheckResult("itt_layer_forward", max(errs), LAYER_TOLERANCE)


def run_suite(seed: int = 0, include_layers: bool = True) -> list[CheckResult]:
    """The full verification pass; always runs in float64."""
    results: list[CheckResult] = []
    with precision("float64"):
        rng = np.random.default_rng(seed)
        for name, fn, tensors in _op_probes(rng):
            errs = grad_check(fn, tensors)
            results.append(CheckResult(name, max(errs), OP_TOLERANCE))
        if include_layers:
            results.append(check_block(rng))
            results.append(check_itt_layer(rng))
    return results
