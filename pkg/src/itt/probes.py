"""Training and inference diagnostics.

* Gradient nuclear norms of the attention projections, per layer, with an
  easy/hard sample split over a synthetic single-digit addition task.
* Early-exit probe: per token, the first refinement step whose
  accumulated state already decodes the target within a loss threshold.
* Routing trace export (JSON) and elastic capacity sweeps (CSV rows).

Probes are read-only over parameters and never alter model outputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import flops as flops_mod
from .model import ModelConfig, build_rope_cache, generate_greedy, model_forward, sequence_loss
from .routing import RoutingTrace, capacity_schedule
from .tensor import Tape, Tensor, add, backward, matmul, no_grad, rms_norm, zero_grads

__all__ = [
    "nuclear_norm",
    "GnnRow",
    "gradient_nuclear_norm",
    "make_addition_samples",
    "easy_hard_split",
    "gnn_report",
    "gnn_report_csv",
    "early_exit_probe",
    "export_routing_trace",
    "SweepRow",
    "default_sweep_grid",
    "elastic_sweep",
    "sweep_csv",
    "fit_log_linear",
]

ATTN_MATRICES = ("wq", "wk", "wv", "wo")
GNN_CSV_HEADER = ["sample_id", "label", "layer", "wq", "wk", "wv", "wo", "total"]
SWEEP_CSV_HEADER = ["capacities", "eval_loss", "eval_ppl", "flops_per_token", "wall_ms"]


def nuclear_norm(mat: np.ndarray, name: str = "matrix") -> float:
    """Sum of singular values, computed in float64."""
    if mat.ndim != 2:
        raise ValueError(f"nuclear norm needs a 2-D array, got shape {mat.shape}")
    try:
        s = np.linalg.svd(mat.astype(np.float64), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge for {name}") from exc
    return float(s.sum())


@dataclass
class GnnRow:
    sample_id: int
    label: str  # "easy" | "hard" | "batch"
    layer: int
    norms: dict[str, float]  # per attention projection
    total: float


def gradient_nuclear_norm(
    params,
    config: ModelConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    sample_id: int = 0,
    label: str = "batch",
    rope=None,
) -> list[GnnRow]:
    """Nuclear norm of dL/dW for each attention projection of each layer."""
    zero_grads(params.values())
    with Tape() as tape:
        loss = sequence_loss(params, config, inputs, targets, mode="train", rope=rope)
    backward(tape, loss)
    rows = []
    for layer in range(config.n_layers):
        norms = {}
        for w in ATTN_MATRICES:
            g = params[f"layers.{layer}.{w}"].grad
            norms[w] = (
                0.0 if g is None else nuclear_norm(g, f"layers.{layer}.{w} gradient")
            )
        rows.append(
            GnnRow(sample_id, label, layer, norms, total=sum(norms.values()))
        )
    zero_grads(params.values())
    return rows


# ---------------------------------------------------------------------------
# Easy/hard split on a synthetic task
# ---------------------------------------------------------------------------


def make_addition_samples(count: int, seed: int = 0) -> list[tuple[bytes, bytes]]:
    """Single-digit addition prompts: b"3+4=" -> b"7"."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        a, b = int(rng.integers(0, 10)), int(rng.integers(0, 10))
        samples.append((f"{a}+{b}=".encode(), str(a + b).encode()))
    return samples


def easy_hard_split(
    params, config: ModelConfig, samples: list[tuple[bytes, bytes]], rope=None
) -> tuple[list[int], list[int]]:
    """Greedy-decode each prompt; exact target match is easy, else hard."""
    if not samples:
        raise ValueError("easy_hard_split: empty evaluation set")
    if rope is None:
        rope = build_rope_cache(config.max_seq_len, config.head_dim)
    easy, hard = [], []
    with no_grad():
        for i, (prompt, target) in enumerate(samples):
            prompt_ids = np.frombuffer(prompt, dtype=np.uint8).astype(np.int64)
            out, _ = generate_greedy(params, config, prompt_ids, len(target), rope=rope)
            decoded = bytes(out[len(prompt_ids):].astype(np.uint8).tolist())
            (easy if decoded == target else hard).append(i)
    return easy, hard


def gnn_report(
    params, config: ModelConfig, samples: list[tuple[bytes, bytes]], rope=None
) -> list[GnnRow]:
    """Per-sample, per-layer gradient nuclear norms labeled easy/hard."""
    easy, hard = easy_hard_split(params, config, samples, rope=rope)
    labels = {i: "easy" for i in easy}
    labels.update({i: "hard" for i in hard})
    rows: list[GnnRow] = []
    for i, (prompt, target) in enumerate(samples):
        ids = np.frombuffer(prompt + target, dtype=np.uint8).astype(np.int64)
        rows.extend(
            gradient_nuclear_norm(
                params, config, ids[:-1], ids[1:], sample_id=i, label=labels[i], rope=rope
            )
        )
    return rows


def gnn_report_csv(rows: list[GnnRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(GNN_CSV_HEADER)
    for r in rows:
        writer.writerow(
            [r.sample_id, r.label, r.layer]
            + [f"{r.norms[w]:.10g}" for w in ATTN_MATRICES]
            + [f"{r.total:.10g}"]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Early-exit probe
# ---------------------------------------------------------------------------


def early_exit_probe(
    params,
    config: ModelConfig,
    tokens,
    epsilon: float,
    capacities=None,
    rope=None,
) -> dict:
    """First refinement step whose accumulated state decodes each target.

    The probe watches the deepest thinking layer: after each step t, the
    partial accumulation y0*phi0 + sum_{i<=t} out_i*phi_i is pushed
    through the final norm and LM head, and a token exits at the first t
    where its cross-entropy against the next token drops below epsilon
    (math.inf means every token exits at step 0). Tokens that never do
    get -1. The model itself is not altered.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0 (math.inf is the always-exit sentinel)")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("early_exit_probe needs at least two tokens")
    if config.variant != "itt":
        raise ValueError("early_exit_probe requires a thinking-layer model")
    if rope is None:
        rope = build_rope_cache(config.max_seq_len, config.head_dim)
    capture: dict = {}
    with no_grad():
        model_forward(
            params, config, ids[:-1], mode="train", capacities=capacities,
            rope=rope, capture=capture,
        )
        targets = ids[1:]
        n = targets.shape[0]
        accum = capture["y0"] * capture["encodings"][0]
        first_step = np.full(n, -1, dtype=np.int64)
        per_step_ce: list[np.ndarray] = []
        for t in range(len(capture["steps"]) + 1):
            if t > 0:
                state = capture["steps"][t - 1]
                if state is not None:
                    accum = accum + state * capture["encodings"][t]
            head_in = Tensor(accum)
            logits = add(
                matmul(rms_norm(head_in, params["final_norm"]), params["head.w"]),
                params["head.b"],
            ).data
            m = logits.max(axis=1, keepdims=True)
            z = logits - m
            ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(n), targets]
            per_step_ce.append(ce)
            exited = (ce < epsilon) & (first_step < 0)
            first_step[exited] = t
    hist = {
        t: int((first_step == t).sum()) for t in range(len(capture["steps"]) + 1)
    }
    hist[-1] = int((first_step < 0).sum())
    return {
        "layer": capture["layer"],
        "epsilon": epsilon,
        "first_step": first_step.tolist(),
        "histogram": hist,
        "per_step_ce": [c.tolist() for c in per_step_ce],
    }


# ---------------------------------------------------------------------------
# Routing trace export
# ---------------------------------------------------------------------------


def export_routing_trace(
    params, config: ModelConfig, text: str, capacities=None, rope=None
) -> dict:
    """Run one forward pass and export routing decisions as a JSON-able dict."""
    if not text:
        raise ValueError("export_routing_trace: empty text")
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    trace = RoutingTrace()
    with no_grad():
        model_forward(
            params, config, ids, mode="train", capacities=capacities,
            rope=rope, trace=trace,
        )
    all_weights = np.concatenate(
        [s.weights for s in trace.steps if s.capacity > 0.0]
    ) if trace.steps else np.zeros(0)
    edges = np.linspace(0.0, 1.0, 11)
    hist = np.histogram(all_weights, bins=edges)[0] if all_weights.size else np.zeros(10, int)
    layers = []
    for layer in sorted({s.layer for s in trace.steps}):
        layers.append(
            {
                "layer": layer,
                "flops": trace.layer_flops.get(layer),
                "steps": [
                    {
                        "step": s.step,
                        "capacity": s.capacity,
                        "selected": s.selected,
                        "weights": [float(w) for w in s.weights],
                    }
                    for s in trace.steps
                    if s.layer == layer
                ],
            }
        )
    return {
        "text": text,
        "tokens": ids.tolist(),
        "layers": layers,
        "layer_flops": {str(k): v for k, v in sorted(trace.layer_flops.items())},
        "weight_histogram": {
            "edges": [float(e) for e in edges],
            "counts": hist.tolist(),
        },
    }


# ---------------------------------------------------------------------------
# Elastic sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    capacities: list[float]
    eval_loss: float
    eval_ppl: float
    flops_per_token: float
    wall_ms: float


def default_sweep_grid(n_routed: int, trained: list[float] | None = None) -> list[list[float]]:
    """Reference grid: uniform settings, a deep-final variant, and
    step-removal variants of the training configuration."""
    if trained is None:
        trained = [0.7] * n_routed
    grid = [[0.5] * n_routed, [0.7] * n_routed]
    if n_routed >= 1:
        deep = [0.7] * n_routed
        deep[-1] = 0.9
        grid.append(deep)
    for t in range(n_routed):
        removed = list(trained)
        removed[t] = 0.0
        grid.append(removed)
    seen, out = set(), []
    for caps in grid:
        key = tuple(caps)
        if key not in seen:
            seen.add(key)
            out.append(list(key))
    return out


def elastic_sweep(
    params,
    config: ModelConfig,
    ids: np.ndarray,
    grid: list[list[float]],
    seq_len: int,
    batch_size: int = 8,
    max_batches: int | None = None,
) -> list[SweepRow]:
    """Evaluate every capacity vector; rows come back sorted by FLOPs."""
    from .training import evaluate_perplexity

    if not grid:
        raise ValueError("elastic_sweep: empty grid")
    if config.variant != "itt":
        raise ValueError("elastic_sweep requires a thinking-layer model")
    rope = build_rope_cache(config.max_seq_len, config.head_dim)
    rows = []
    for caps in grid:
        t0 = time.monotonic()
        loss, ppl = evaluate_perplexity(
            params, None, ids, model_config=config, capacities=list(caps),
            seq_len=seq_len, batch_size=batch_size, max_batches=max_batches, rope=rope,
        )
        breakdown = flops_mod.count_flops(config, list(caps), seq_len=seq_len)
        rows.append(
            SweepRow(
                capacities=list(caps),
                eval_loss=loss,
                eval_ppl=ppl,
                flops_per_token=breakdown.total / seq_len,
                wall_ms=(time.monotonic() - t0) * 1e3,
            )
        )
    rows.sort(key=lambda r: (r.flops_per_token, r.capacities))
    return rows


def sweep_csv(rows: list[SweepRow], grid: list[list[float]], threads=None) -> str:
    buf = io.StringIO()
    buf.write(f"# grid: {json.dumps(grid)}\n")
    if threads is not None:
        buf.write(f"# threads: {threads}\n")
    writer = csv.writer(buf)
    writer.writerow(SWEEP_CSV_HEADER)
    for r in rows:
        writer.writerow(
            [
                "|".join(f"{c:g}" for c in r.capacities),
                f"{r.eval_loss:.10g}",
                f"{r.eval_ppl:.10g}",
                f"{r.flops_per_token:.10g}",
                f"{r.wall_ms:.3f}",
            ]
        )
    return buf.getvalue()


def fit_log_linear(values) -> tuple[float, float, float]:
    """Least-squares fit of log(values) against the step index.

    Returns (slope, intercept, r_squared); used to verify geometric error
    decay of contractive refinement.
    """
    y = np.log(np.asarray(values, dtype=np.float64))
    x = np.arange(y.shape[0], dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
