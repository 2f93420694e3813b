"""Per-step token routing and residual accumulation for thinking layers.

A thinking layer applies its block transformation ``f`` up to T times: one
full pass over every token, then T-1 routed refinement steps in which a
linear scorer picks the tokens worth refining. Unselected tokens pass
through bitwise unchanged. The layer output is the sum of all step
outputs, each weighted elementwise by a learnable per-step encoding.

Selection rules:

* ``capacity_percentile`` -- the top ceil(c*n) tokens by score, ties broken
  toward the earlier position. Used for full (teacher-forced) sequences,
  where looking at the whole sequence is fine.
* ``threshold_0_5`` -- tokens with score strictly above 0.5 (sigmoid) or
  0.0 (tanh). Pointwise, hence causal; used for incremental decoding.
* ``top_p`` -- the smallest descending-score prefix whose share of the
  total score mass reaches p.

A capacity of exactly 0 removes a step outright: no routing, no block
application, and no term in the final accumulation. This is the knob used
by elastic step-removal sweeps and is only meaningful at evaluation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    gather_rows,
    matmul,
    mul,
    reshape,
    scale,
    scale_rows,
    scatter_rows,
    sigmoid,
    tanh,
)

NORMALIZATIONS = ("sigmoid", "tanh")
SELECTIONS = ("capacity_percentile", "threshold_0_5", "top_p")
REWEIGHTINGS = ("only_select", "symmetric")
SCHEDULES = ("constant", "linear_warmup")

# Guard against float fuzz in c*n when c carries decimal intent (0.07*100
# must select 7 tokens, not 8). Capacities are meaningful well above 1e-9.
_COUNT_EPS = 1e-9


@dataclass
class RoutingPolicy:
    """Selection rules and per-step knobs for routed refinement steps."""

    normalization: str = "sigmoid"
    selection: str = "capacity_percentile"
    capacities: list[float] | None = None  # per routed step; default 0.5 each
    top_p: float = 0.9
    reweighting: str = "only_select"
    alphas: list[float] | None = None  # per routed step; default 1.0 each
    schedule: str = "constant"
    c_start: float = 0.1
    c_final: float = 0.7
    capacity_warmup_steps: int = 0

    def validate(self, n_routed: int | None = None) -> None:
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.reweighting not in REWEIGHTINGS:
            raise ValueError(f"reweighting must be one of {REWEIGHTINGS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        for name, value in (("c_start", self.c_start), ("c_final", self.c_final)):
            if self.schedule == "linear_warmup" and not (0.0 < value <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if self.capacities is not None:
            for c in self.capacities:
                if not (0.0 < c <= 1.0):
                    raise ValueError(f"capacity {c} outside (0, 1]")
            if n_routed is not None and len(self.capacities) != n_routed:
                raise ValueError(
                    f"{len(self.capacities)} capacities for {n_routed} routed steps"
                )
        if self.alphas is not None:
            for a in self.alphas:
                if a <= 0.0:
                    raise ValueError(f"alpha {a} must be positive")
            if n_routed is not None and len(self.alphas) != n_routed:
                raise ValueError(f"{len(self.alphas)} alphas for {n_routed} routed steps")

    def resolved_capacities(self, n_routed: int) -> list[float]:
        if self.capacities is None:
            return [0.5] * n_routed
        if len(self.capacities) != n_routed:
            raise ValueError(
                f"{len(self.capacities)} capacities for {n_routed} routed steps"
            )
        return list(self.capacities)

    def resolved_alphas(self, n_routed: int) -> list[float]:
        if self.alphas is None:
            return [1.0] * n_routed
        if len(self.alphas) != n_routed:
            raise ValueError(f"{len(self.alphas)} alphas for {n_routed} routed steps")
        return list(self.alphas)


@dataclass
class StepTrace:
    """Recorded routing decisions of one refinement step."""

    layer: int
    step: int
    capacity: float
    selected: list[int]
    scores: np.ndarray  # raw linear scores, length n
    weights: np.ndarray  # normalized scores, length n


@dataclass
class RoutingTrace:
    """Per-layer, per-step routing record of one forward pass."""

    steps: list[StepTrace] = field(default_factory=list)
    layer_flops: dict[int, int] = field(default_factory=dict)

    def for_layer(self, layer: int) -> list[StepTrace]:
        return [s for s in self.steps if s.layer == layer]


def selection_count(capacity: float, n: int) -> int:
    """ceil(capacity * n), robust to float fuzz for decimal capacities."""
    return int(math.ceil(capacity * n - _COUNT_EPS))


def selection_threshold(normalization: str) -> float:
    """Decision boundary for threshold gating: 0.5 for sigmoid, 0 for tanh."""
    return 0.5 if normalization == "sigmoid" else 0.0


def capacity_schedule(
    policy: RoutingPolicy, n_routed: int, step: int | None
) -> list[float]:
    """Per-step capacities at a given training step (None = final/eval state)."""
    if policy.schedule == "constant":
        return policy.resolved_capacities(n_routed)
    if policy.capacity_warmup_steps <= 0:
        raise ValueError("linear_warmup schedule requires capacity_warmup_steps > 0")
    if step is None:
        c = policy.c_final
    else:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        frac = min(1.0, step / policy.capacity_warmup_steps)
        c = policy.c_start + (policy.c_final - policy.c_start) * frac
    c = min(1.0, max(c, 1e-12))
    return [c] * n_routed


def router_score(y: Tensor, weight: Tensor, bias: Tensor, normalization: str) -> Tensor:
    """Normalized importance score per token: normalize(y @ weight + bias).

    The score stays on the tape, so selected tokens propagate gradients
    into the router parameters through the multiplicative reweighting.
    """
    logits = add(matmul(y, weight), bias)  # [n, 1]
    w = sigmoid(logits) if normalization == "sigmoid" else tanh(logits)
    return reshape(w, (y.shape[0],))


def select_tokens(
    weights: np.ndarray,
    policy: RoutingPolicy,
    capacity: float | None = None,
) -> np.ndarray:
    """Indices chosen by the policy's selection rule, in ascending order."""
    n = weights.shape[0]
    if n < 1:
        raise ValueError("select_tokens: empty sequence")
    if policy.selection == "capacity_percentile":
        if capacity is None:
            raise ValueError("capacity_percentile selection needs a capacity")
        k = selection_count(capacity, n)
        # Stable argsort on negated scores: descending by weight, ties by index.
        order = np.argsort(-weights, kind="stable")[:k]
        return np.sort(order)
    if policy.selection == "threshold_0_5":
        thr = selection_threshold(policy.normalization)
        return np.flatnonzero(weights > thr)
    # top_p
    order = np.argsort(-weights, kind="stable")
    total = float(weights.sum())
    if total <= 0.0:
        return np.arange(n)
    cum = np.cumsum(weights[order]) / total
    k = int(np.searchsorted(cum, policy.top_p - 1e-12) + 1)
    return np.sort(order[: min(k, n)])


def decode_gate(score: float, normalization: str = "sigmoid") -> bool:
    """Per-token think/skip gate for incremental decoding (strict inequality)."""
    return score > selection_threshold(normalization)


def atr_step(
    y_prev: Tensor,
    step: int,
    f: Callable[[Tensor], Tensor],
    policy: RoutingPolicy,
    router_w: Tensor,
    router_b: Tensor,
    alpha: float,
    capacity: float,
    mode: str = "train",
    layer: int = -1,
) -> tuple[Tensor, StepTrace]:
    """One routed refinement step.

    Selected rows become alpha * w_i * f(y_prev)[i]; unselected rows pass
    through bitwise (``only_select``) or scaled by 1 - w_i (``symmetric``).
    In train mode selection follows the policy rule over the whole
    sequence; in eval mode it is the pointwise threshold gate.
    """
    n = y_prev.shape[0]
    logits = add(matmul(y_prev, router_w), router_b)
    w = sigmoid(logits) if policy.normalization == "sigmoid" else tanh(logits)
    w = reshape(w, (n,))
    w_vals = w.data
    if mode == "train":
        selected = select_tokens(w_vals, policy, capacity)
    elif mode == "eval":
        selected = np.flatnonzero(w_vals > selection_threshold(policy.normalization))
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    trace = StepTrace(
        layer=layer,
        step=step,
        capacity=capacity,
        selected=[int(i) for i in selected],
        scores=np.ascontiguousarray(logits.data[:, 0]),
        weights=w_vals.copy(),
    )

    k = selected.shape[0]
    complement = np.setdiff1d(np.arange(n), selected, assume_unique=True)

    if policy.reweighting == "only_select" and k == 0:
        return y_prev, trace

    parts: list[Tensor] = []
    if k > 0:
        refined = f(y_prev)
        sel = scale_rows(gather_rows(refined, selected), gather_rows(w, selected))
        if alpha != 1.0:
            sel = scale(sel, alpha)
        parts.append(scatter_rows(sel, selected, n))
    if complement.shape[0] > 0:
        passthrough = gather_rows(y_prev, complement)
        if policy.reweighting == "symmetric":
            ones = Tensor(np.ones(complement.shape[0]))
            keep = add(scale(gather_rows(w, complement), -1.0), ones)
            passthrough = scale_rows(passthrough, keep)
        parts.append(scatter_rows(passthrough, complement, n))
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out, trace


def rtc_combine(
    y0: Tensor,
    step_outputs: Sequence[Tensor | None],
    encodings: Sequence[Tensor],
) -> Tensor:
    """Weighted accumulation of step outputs: y0*phi[0] + sum_t out_t*phi[t].

    ``None`` entries mark removed steps and contribute nothing.
    """
    if len(encodings) != len(step_outputs) + 1:
        raise ValueError(
            f"{len(encodings)} encodings for {len(step_outputs)} routed steps"
        )
    out = mul(y0, encodings[0])
    for t, y in enumerate(step_outputs, start=1):
        if y is None:
            continue
        out = add(out, mul(y, encodings[t]))
    return out


def itt_layer_forward(
    x: Tensor,
    f: Callable[[Tensor], Tensor],
    encodings: Sequence[Tensor],
    routers: Sequence[tuple[Tensor, Tensor]],
    policy: RoutingPolicy,
    capacities: Sequence[float],
    mode: str = "train",
    alphas: Sequence[float] | None = None,
    layer: int = -1,
    trace: RoutingTrace | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Full thinking layer: base pass, routed refinements, accumulation.

    ``encodings`` has one vector per step including step 0; ``routers`` and
    ``capacities`` cover the routed steps only (one fewer entry).
    """
    n_routed = len(routers)
    if len(capacities) != n_routed:
        raise ValueError(f"{len(capacities)} capacities for {n_routed} routed steps")
    if alphas is None:
        alphas = [1.0] * n_routed
    y0 = f(x)
    state = y0
    step_outputs: list[Tensor | None] = []
    for t in range(1, n_routed + 1):
        c = capacities[t - 1]
        if c == 0.0:  # step removed: no routing, no block, no contribution
            if trace is not None:
                trace.steps.append(
                    StepTrace(
                        layer=layer,
                        step=t,
                        capacity=0.0,
                        selected=[],
                        scores=np.zeros(x.shape[0]),
                        weights=np.zeros(x.shape[0]),
                    )
                )
            step_outputs.append(None)
            continue
        router_w, router_b = routers[t - 1]
        state, row = atr_step(
            state, t, f, policy, router_w, router_b, alphas[t - 1], c, mode, layer
        )
        if trace is not None:
            trace.steps.append(row)
        step_outputs.append(state)
    if capture is not None:
        capture["layer"] = layer
        capture["y0"] = y0.data.copy()
        capture["steps"] = [None if s is None else s.data.copy() for s in step_outputs]
        capture["encodings"] = [e.data.copy() for e in encodings]
    return rtc_combine(y0, step_outputs, encodings)
