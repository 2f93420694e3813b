"""Decoder-only byte-level transformer with loop and thinking-layer variants.

Blocks follow the LLaMA-2 recipe: pre-norm RMSNorm, rotary position
embeddings (base 10000), SwiGLU MLP with hidden size ceil(8d/3) rounded up
to a multiple of 16, and an untied LM head with bias. Thinking or loop
layers replace every ``itt_interval``-th block starting at block index 1.

Parameters live in a flat name -> Tensor dict so the optimizer,
checkpointing and probes can all address them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import flops as flops_mod
from .routing import RoutingPolicy, RoutingTrace, itt_layer_forward
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    matmul,
    mul,
    rms_norm,
    scale,
    silu,
    slice_axis,
    softmax,
    transpose,
)

VARIANTS = ("vanilla", "loop", "itt")
ROPE_BASE = 10000.0
MASK_VALUE = -1e9  # finite, but drowns masked scores to exact zero after exp

# Documentation-parity presets: hidden sizes of the reference model family.
PRESET_D_MODEL = {"162M": 1024, "230M": 1536, "466M": 2048}


def default_mlp_hidden(d_model: int) -> int:
    return ((math.ceil(8 * d_model / 3) + 15) // 16) * 16


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``thinking_steps`` is the total number of block applications per
    thinking layer, counting the initial full pass; a value of 1 makes
    loop and thinking layers collapse to a plain block.
    """

    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int | None = None
    vocab_size: int = 256
    max_seq_len: int = 128
    variant: str = "vanilla"
    thinking_steps: int = 1
    itt_interval: int = 2
    routing: RoutingPolicy = field(default_factory=RoutingPolicy)
    preset: str | None = None

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in PRESET_D_MODEL:
                raise ValueError(f"unknown preset {self.preset!r}")
            self.d_model = PRESET_D_MODEL[self.preset]
        if self.mlp_hidden is None:
            self.mlp_hidden = default_mlp_hidden(self.d_model)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.thinking_steps < 1:
            raise ValueError("thinking_steps must be >= 1")
        if self.itt_interval < 1:
            raise ValueError("itt_interval must be >= 1")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be positive")
        self.routing.validate(self.n_routed)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_routed(self) -> int:
        return self.thinking_steps - 1

    def is_thinking_layer(self, i: int) -> bool:
        if self.variant == "vanilla":
            return False
        return i % self.itt_interval == 1 % self.itt_interval


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters: normal(0, 0.02) matrices, unit norms.

    Step encodings start at ones for step 0 and zeros afterwards, and
    routers start at zero, so a freshly initialized thinking model
    computes exactly what the vanilla model does.
    """
    rng = np.random.default_rng(seed)
    d, h, v = config.d_model, config.mlp_hidden, config.vocab_size
    p: dict[str, Tensor] = {}

    def mat(name: str, shape: tuple[int, ...]) -> None:
        p[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    mat("embed", (v, d))
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        for w in ("wq", "wk", "wv", "wo"):
            mat(pre + w, (d, d))
        p[pre + "mlp_norm"] = Tensor(np.ones(d), requires_grad=True)
        mat(pre + "w_gate", (d, h))
        mat(pre + "w_up", (d, h))
        mat(pre + "w_down", (h, d))
        if config.is_thinking_layer(i) and config.variant == "itt":
            p[pre + "phi.0"] = Tensor(np.ones(d), requires_grad=True)
            for t in range(1, config.thinking_steps):
                p[pre + f"phi.{t}"] = Tensor(np.zeros(d), requires_grad=True)
                p[pre + f"router.{t}.w"] = Tensor(np.zeros((d, 1)), requires_grad=True)
                p[pre + f"router.{t}.b"] = Tensor(np.zeros(1), requires_grad=True)
    p["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    mat("head.w", (d, v))
    p["head.b"] = Tensor(np.zeros(v), requires_grad=True)
    return p


def build_rope_cache(max_seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [max_seq_len, head_dim/2]."""
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even for rotary embeddings, got {head_dim}")
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(0, half, dtype=np.float64) / half)
    angles = np.outer(np.arange(max_seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


@lru_cache(maxsize=32)
def _causal_mask(n: int, dtype: str) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


def _apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate pairs (first half, second half) of each head row by position."""
    half = x.shape[1] // 2
    x1 = slice_axis(x, 1, 0, half)
    x2 = slice_axis(x, 1, half, 2 * half)
    r1 = add(mul(x1, cos), scale(mul(x2, sin), -1.0))
    r2 = add(mul(x1, sin), mul(x2, cos))
    return concat([r1, r2], axis=1)


def attention_forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    layer: int,
    x: Tensor,
    rope: tuple[np.ndarray, np.ndarray],
) -> Tensor:
    """Causal multi-head attention sublayer, pre-norm included."""
    n = x.shape[0]
    cos_np, sin_np = rope
    if n > cos_np.shape[0]:
        raise ShapeError(
            f"attention: sequence length {n} exceeds rotary cache {cos_np.shape[0]}"
        )
    pre = f"layers.{layer}."
    xn = rms_norm(x, params[pre + "attn_norm"])
    q = matmul(xn, params[pre + "wq"])
    k = matmul(xn, params[pre + "wk"])
    v = matmul(xn, params[pre + "wv"])
    hd = config.head_dim
    cos = Tensor(cos_np[:n])
    sin = Tensor(sin_np[:n])
    mask = Tensor(_causal_mask(n, str(q.data.dtype)))
    heads = []
    for hh in range(config.n_heads):
        lo, hi = hh * hd, (hh + 1) * hd
        qh = _apply_rope(slice_axis(q, 1, lo, hi), cos, sin)
        kh = _apply_rope(slice_axis(k, 1, lo, hi), cos, sin)
        vh = slice_axis(v, 1, lo, hi)
        att = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(hd))
        att = add(att, mask)
        heads.append(matmul(softmax(att), vh))
    return matmul(concat(heads, axis=1), params[pre + "wo"])


def mlp_forward(
    params: dict[str, Tensor], config: ModelConfig, layer: int, x: Tensor
) -> Tensor:
    """SwiGLU MLP sublayer, pre-norm included: down(silu(gate(x)) * up(x))."""
    pre = f"layers.{layer}."
    xn = rms_norm(x, params[pre + "mlp_norm"])
    gated = mul(silu(matmul(xn, params[pre + "w_gate"])), matmul(xn, params[pre + "w_up"]))
    return matmul(gated, params[pre + "w_down"])


def block_forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    layer: int,
    x: Tensor,
    rope: tuple[np.ndarray, np.ndarray],
) -> Tensor:
    """Pre-norm residual block: x + attn(x), then + mlp(...)."""
    h = add(x, attention_forward(params, config, layer, x, rope))
    return add(h, mlp_forward(params, config, layer, h))


def loop_layer_forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    layer: int,
    x: Tensor,
    rope: tuple[np.ndarray, np.ndarray],
    steps: int,
) -> Tensor:
    """Apply the same block ``steps`` times; steps=1 is a plain block."""
    if steps < 1:
        raise ValueError("loop layer needs steps >= 1")
    y = x
    for _ in range(steps):
        y = block_forward(params, config, layer, y, rope)
    return y


def model_forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    tokens,
    mode: str = "train",
    capacities: list[float] | None = None,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
    trace: RoutingTrace | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Token ids [n] -> logits [n, vocab].

    ``mode`` picks the routing rule of thinking layers: 'train' uses the
    policy's whole-sequence selection (also correct for teacher-forced
    evaluation), 'eval' uses the causal per-token threshold gate.
    ``capacities`` overrides the routed-step capacities of every thinking
    layer; ``capture``, when given, receives the step states of the last
    thinking layer.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"model_forward: tokens must be 1-D, got shape {ids.shape}")
    if ids.size == 0:
        raise ShapeError("model_forward: empty token sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(
            f"model_forward: token id out of range [0, {config.vocab_size})"
        )
    if rope is None:
        rope = build_rope_cache(config.max_seq_len, config.head_dim)
    n = ids.shape[0]
    n_routed = config.n_routed
    if capacities is None:
        capacities = config.routing.resolved_capacities(n_routed)
    elif len(capacities) != n_routed:
        raise ValueError(f"{len(capacities)} capacities for {n_routed} routed steps")

    x = embedding(params["embed"], ids)
    last_thinking = max(
        (i for i in range(config.n_layers) if config.is_thinking_layer(i)),
        default=None,
    )
    for i in range(config.n_layers):
        if config.is_thinking_layer(i):
            if config.variant == "loop":
                x = loop_layer_forward(params, config, i, x, rope, config.thinking_steps)
            else:
                pre = f"layers.{i}."
                encodings = [params[pre + f"phi.{t}"] for t in range(config.thinking_steps)]
                routers = [
                    (params[pre + f"router.{t}.w"], params[pre + f"router.{t}.b"])
                    for t in range(1, config.thinking_steps)
                ]
                x = itt_layer_forward(
                    x,
                    lambda y, _i=i: block_forward(params, config, _i, y, rope),
                    encodings,
                    routers,
                    config.routing,
                    capacities,
                    mode=mode,
                    alphas=config.routing.resolved_alphas(n_routed),
                    layer=i,
                    trace=trace,
                    capture=capture if i == last_thinking else None,
                )
        else:
            x = block_forward(params, config, i, x, rope)
        if trace is not None:
            trace.layer_flops[i] = _layer_flops_realized(config, i, n, trace)
    x = rms_norm(x, params["final_norm"])
    return add(matmul(x, params["head.w"]), params["head.b"])


def _layer_flops_realized(
    config: ModelConfig, layer: int, n: int, trace: RoutingTrace
) -> int:
    """Accounted FLOPs of one layer given the recorded selections."""
    base = flops_mod.block_flops(n, config.d_model, config.mlp_hidden)
    if not config.is_thinking_layer(layer):
        return base
    if config.variant == "loop":
        return config.thinking_steps * base
    per_token = base // n
    total = base
    for row in trace.for_layer(layer):
        if row.capacity > 0.0:
            total += len(row.selected) * per_token + flops_mod.router_flops(
                n, config.d_model
            )
    return total


def sequence_loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    inputs,
    targets,
    mode: str = "train",
    capacities: list[float] | None = None,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Mean next-token cross-entropy of one sequence."""
    logits = model_forward(
        params, config, inputs, mode=mode, capacities=capacities, rope=rope
    )
    return cross_entropy(logits, targets)


def generate_greedy(
    params: dict[str, Tensor],
    config: ModelConfig,
    prompt,
    n_new: int,
    capacities: list[float] | None = None,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Greedy incremental decoding with per-token threshold gating.

    Recomputes the prefix each step; threshold gating is pointwise and the
    model causal, so each emitted distribution matches the full-sequence
    forward. Returns the extended ids and the logits row used per step.
    """
    ids = np.asarray(prompt, dtype=np.int64)
    if rope is None:
        rope = build_rope_cache(config.max_seq_len, config.head_dim)
    step_logits: list[np.ndarray] = []
    for _ in range(n_new):
        logits = model_forward(
            params, config, ids, mode="eval", capacities=capacities, rope=rope
        )
        row = logits.data[-1].copy()
        step_logits.append(row)
        ids = np.append(ids, int(np.argmax(row)))
    return ids, step_logits
