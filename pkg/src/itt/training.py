"""Training loop, evaluation, and metrics emission.

One logical thread: batches arrive in a seeded deterministic order,
capacities for thinking layers come from the policy schedule at each
step, and a metrics record is appended (JSON Lines) every ``eval_every``
steps and at the end. Reruns with the same seed and thread count
reproduce every numeric field bitwise (wall_ms is wall clock and exempt).

Failure policy: a non-finite gradient skips the parameter update for that
step and training continues; a non-finite loss aborts the run and the
checkpoint written is the last healthy snapshot.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .model import build_rope_cache, init_params, sequence_loss
from .optim import AdamWState, adamw_step, clip_gradients, grads_finite, lr_at
from .routing import capacity_schedule
from .tensor import NonFiniteError, Tape, Tensor, backward, set_default_dtype, zero_grads

__all__ = ["TrainResult", "TrainingAborted", "train", "evaluate_perplexity", "batch_loss"]


class TrainingAborted(RuntimeError):
    """Loss became non-finite; the saved checkpoint is the last good state."""


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    final_train_loss: float
    final_eval_loss: float | None
    final_eval_ppl: float | None
    steps_run: int
    skipped_steps: int
    aborted: bool = False


def batch_loss(params, config, inputs, targets, mode="train", capacities=None, rope=None):
    """Mean cross-entropy over a [batch, seq] pair of id arrays."""
    total = None
    for b in range(inputs.shape[0]):
        loss = sequence_loss(
            params, config, inputs[b], targets[b], mode=mode, capacities=capacities, rope=rope
        )
        total = loss if total is None else total + loss
    return total * (1.0 / inputs.shape[0])


def evaluate_perplexity(
    params,
    config: TrainConfig | None,
    ids: np.ndarray,
    model_config=None,
    capacities=None,
    seq_len: int | None = None,
    batch_size: int = 8,
    max_batches: int | None = None,
    rope=None,
) -> tuple[float, float]:
    """Teacher-forced eval loss and perplexity (exp of mean token CE).

    Uses the whole-sequence routing rule at the configured capacities
    unless ``capacities`` overrides them (elastic evaluation); overrides
    never touch parameters. Batch order is fixed, never shuffled.
    """
    mc = model_config if model_config is not None else config.model
    n = seq_len if seq_len is not None else (config.seq_len if config else mc.max_seq_len)
    if capacities is not None:
        if len(capacities) != mc.n_routed:
            raise ValueError(
                f"capacity override has {len(capacities)} entries for "
                f"{mc.n_routed} routed steps"
            )
        for c in capacities:
            if not (0.0 <= c <= 1.0):
                raise ValueError(f"capacity override {c} outside [0, 1]")
    if rope is None:
        rope = build_rope_cache(mc.max_seq_len, mc.head_dim)
    total_ce = 0.0
    total_tokens = 0
    for i, (inputs, targets) in enumerate(
        data_mod.epoch_batches(ids, n, batch_size, seed=None)
    ):
        if max_batches is not None and i >= max_batches:
            break
        for b in range(inputs.shape[0]):
            loss = sequence_loss(
                params, mc, inputs[b], targets[b], mode="train",
                capacities=capacities, rope=rope,
            )
            total_ce += loss.item() * n
            total_tokens += n
    if total_tokens == 0:
        raise ValueError("evaluation corpus yielded no batches")
    mean_ce = total_ce / total_tokens
    return mean_ce, math.exp(mean_ce)


def train(cfg: TrainConfig, out_dir: str, threads: int | None = None) -> TrainResult:
    """Run the configured training job, writing checkpoint and metrics."""
    set_default_dtype(cfg.dtype)
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(out_dir, "model.ittc")

    if cfg.train_data is None:
        raise ValueError("train_data path is required")
    with open(cfg.train_data, "rb") as fh:
        train_ids = data_mod.byte_tokenize(fh.read())
    eval_ids = None
    if cfg.eval_data is not None:
        with open(cfg.eval_data, "rb") as fh:
            eval_ids = data_mod.byte_tokenize(fh.read())

    mc = cfg.model
    params = init_params(mc, seed=cfg.seed)
    opt = AdamWState.init(params)
    rope = build_rope_cache(mc.max_seq_len, mc.head_dim)
    batches = data_mod.batch_stream(train_ids, cfg.seq_len, cfg.batch_size, cfg.seed)

    last_good = {k: t.data.copy() for k, t in params.items()}
    metrics = open(metrics_path, "w", encoding="utf-8")
    start = time.monotonic()
    train_loss = float("nan")
    eval_loss = eval_ppl = None
    skipped = 0
    aborted = False

    def emit(step: int, capacities) -> None:
        record = {
            "step": step,
            "train_loss": train_loss,
            "eval_loss": eval_loss,
            "eval_ppl": eval_ppl,
            "lr": lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps, cfg.min_lr),
            "tokens_seen": (step + 1) * cfg.batch_size * cfg.seq_len,
            "capacities": list(capacities),
            "threads": threads,
            "wall_ms": (time.monotonic() - start) * 1e3,
        }
        metrics.write(json.dumps(record) + "\n")
        metrics.flush()

    step = 0
    try:
        for step in range(cfg.steps):
            capacities = capacity_schedule(mc.routing, mc.n_routed, step)
            inputs, targets = next(batches)
            zero_grads(params.values())
            try:
                with Tape() as tape:
                    loss = batch_loss(
                        params, mc, inputs, targets, mode="train",
                        capacities=capacities, rope=rope,
                    )
                train_loss = loss.item()
                if not math.isfinite(train_loss):
                    raise NonFiniteError("loss is non-finite")
                backward(tape, loss)
            except NonFiniteError as exc:
                aborted = True
                for k, t in params.items():
                    t.data = last_good[k].copy()
                save_checkpoint(ckpt_path, cfg, params, opt)
                metrics.close()
                raise TrainingAborted(
                    f"aborted at step {step}: {exc}; last good checkpoint saved"
                ) from exc

            clip_gradients(params, cfg.grad_clip)
            if not grads_finite(params):
                skipped += 1
                print(f"step {step}: non-finite gradient, skipping update", flush=True)
                continue
            adamw_step(
                params,
                opt,
                lr=lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps, cfg.min_lr),
                betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay,
            )

            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
                if eval_ids is not None:
                    eval_caps = capacity_schedule(mc.routing, mc.n_routed, None)
                    eval_loss, eval_ppl = evaluate_perplexity(
                        params, cfg, eval_ids, capacities=eval_caps or None,
                        max_batches=cfg.eval_batches, rope=rope,
                    )
                emit(step, capacities)
                last_good = {k: t.data.copy() for k, t in params.items()}
    finally:
        if not metrics.closed:
            metrics.close()

    save_checkpoint(ckpt_path, cfg, params, opt)
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        final_train_loss=train_loss,
        final_eval_loss=eval_loss,
        final_eval_ppl=eval_ppl,
        steps_run=step + 1 if cfg.steps else 0,
        skipped_steps=skipped,
        aborted=aborted,
    )
