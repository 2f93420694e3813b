"""Exact per-component FLOPs accounting.

Counts multiply-add FLOPs (2*m*n*k per matmul) for every projection,
attention score/value product and MLP matmul. Normalizations, rotations
and softmax are excluded, as is the LM head: ratios compare block
compute between model variants.

All quantities are exact: per-token block cost F/n is an integer because
every term of F carries a factor of n, so a routed step over k tokens
costs exactly k*(F/n). Ratios are ``fractions.Fraction`` until display.

Router scoring costs 2*n*d per routed step. It is included in detailed
totals but excluded from the headline thinking-vs-loop ratio, which is
quoted without it; both figures are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .routing import selection_count

__all__ = [
    "LayerFlops",
    "FlopsBreakdown",
    "block_flops",
    "router_flops",
    "count_flops",
]


def block_flops(n: int, d: int, mlp_hidden: int) -> int:
    """Matmul FLOPs of one residual block over a length-n sequence."""
    attn_proj = 4 * 2 * n * d * d  # q, k, v, o projections
    attn_scores = 2 * 2 * n * n * d  # scores and value mix, summed over heads
    mlp = 3 * 2 * n * d * mlp_hidden  # gate, up, down
    return attn_proj + attn_scores + mlp


def router_flops(n: int, d: int) -> int:
    """One linear scorer pass over the sequence."""
    return 2 * n * d


@dataclass
class LayerFlops:
    """Compute of one layer, with per-step detail for thinking layers."""

    layer: int
    kind: str  # "block" | "loop" | "itt"
    base: int  # full block pass (step 0, all tokens)
    step_block: list[int] = field(default_factory=list)  # routed steps
    step_router: list[int] = field(default_factory=list)

    @property
    def blocks_total(self) -> int:
        return self.base + sum(self.step_block)

    @property
    def total(self) -> int:
        return self.blocks_total + sum(self.step_router)


@dataclass
class FlopsBreakdown:
    """Model-level accounting plus the ratio against the loop baseline."""

    seq_len: int
    capacities: list[float]
    layers: list[LayerFlops]
    blocks_total: int
    routers_total: int
    total: int
    loop_total: int  # same placement, every thinking step at full width
    ratio_vs_loop: Fraction  # headline: block FLOPs only
    ratio_vs_loop_with_routers: Fraction

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "capacities": self.capacities,
            "layers": [
                {
                    "layer": lf.layer,
                    "kind": lf.kind,
                    "base": lf.base,
                    "step_block": lf.step_block,
                    "step_router": lf.step_router,
                    "total": lf.total,
                }
                for lf in self.layers
            ],
            "blocks_total": self.blocks_total,
            "routers_total": self.routers_total,
            "total": self.total,
            "loop_total": self.loop_total,
            "ratio_vs_loop": [
                self.ratio_vs_loop.numerator,
                self.ratio_vs_loop.denominator,
            ],
            "ratio_vs_loop_float": float(self.ratio_vs_loop),
            "ratio_vs_loop_with_routers_float": float(self.ratio_vs_loop_with_routers),
        }


def count_flops(config, capacities=None, seq_len: int | None = None) -> FlopsBreakdown:
    """Account a model configuration at given routed-step capacities.

    ``capacities`` covers the routed steps (thinking_steps - 1 entries;
    step 0 always runs at full width). Entries must lie in [0, 1]; zero
    marks a removed step.
    """
    n = int(seq_len if seq_len is not None else config.max_seq_len)
    d = int(config.d_model)
    h = int(config.mlp_hidden)
    steps = int(config.thinking_steps)
    n_routed = steps - 1
    if capacities is None:
        capacities = config.routing.resolved_capacities(n_routed)
    capacities = [float(c) for c in capacities]
    if len(capacities) != n_routed:
        raise ValueError(f"{len(capacities)} capacities for {n_routed} routed steps")
    for c in capacities:
        if not (0.0 <= c <= 1.0):
            raise ValueError(f"capacity {c} outside [0, 1]")

    base = block_flops(n, d, h)
    per_token = base // n  # exact: every term of base carries a factor n
    assert per_token * n == base
    rflops = router_flops(n, d)

    layers: list[LayerFlops] = []
    loop_total = 0
    for i in range(config.n_layers):
        if config.is_thinking_layer(i):
            if config.variant == "itt":
                step_block = [
                    selection_count(c, n) * per_token if c > 0.0 else 0 for c in capacities
                ]
                step_router = [rflops if c > 0.0 else 0 for c in capacities]
                layers.append(LayerFlops(i, "itt", base, step_block, step_router))
            else:  # loop: every step at full width, no routers
                layers.append(LayerFlops(i, "loop", base, [base] * n_routed, []))
            loop_total += steps * base
        else:
            layers.append(LayerFlops(i, "block", base))
            loop_total += base
    blocks_total = sum(lf.blocks_total for lf in layers)
    routers_total = sum(sum(lf.step_router) for lf in layers)
    return FlopsBreakdown(
        seq_len=n,
        capacities=capacities,
        layers=layers,
        blocks_total=blocks_total,
        routers_total=routers_total,
        total=blocks_total + routers_total,
        loop_total=loop_total,
        ratio_vs_loop=Fraction(blocks_total, loop_total),
        ratio_vs_loop_with_routers=Fraction(blocks_total + routers_total, loop_total),
    )
