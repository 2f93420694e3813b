"""Command-line entry point.

Subcommands: train, eval, sweep, trace, probe-gnn, gradcheck, flops.
Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; data goes to --out or stdout. No environment variables are read;
--threads caps BLAS parallelism and is recorded in outputs.

Heavy imports happen inside the handlers so the thread cap can be applied
before numpy initializes its BLAS thread pools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="itt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, out=True):
        p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
        if out:
            p.add_argument("--out", default=None, help="output path (default: stdout)")

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="flat JSON run config")
    p.add_argument("--data", default=None, help="override train_data path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--capacity-override",
        default=None,
        help='per-step capacities, e.g. "s1=0.7,s2=0.7,s3=0.9" (0 removes a step)',
    )
    common(p)

    p = sub.add_parser("sweep", help="elastic capacity sweep over a grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default=None, help="JSON file with a list of capacity vectors")
    common(p)

    p = sub.add_parser("trace", help="export routing decisions for a text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument(
        "--epsilon",
        type=float,
        default=None,
        help="also run the early-exit probe at this loss threshold",
    )
    common(p)

    p = sub.add_parser("probe-gnn", help="easy/hard gradient nuclear norm report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=60)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")

    p = sub.add_parser("flops", help="compute accounting for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--capacity-override", default=None)
    common(p)

    return parser


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_capacity_override(text: str, n_routed: int) -> list[float]:
    """'s1=0.7,s2=0.5' -> per-step capacity list; steps are 1-based labels."""
    caps: dict[int, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, _, value = part.partition("=")
        if not key.startswith("s") or not value:
            raise ValueError(f"bad capacity override {part!r}; expected sN=VALUE")
        try:
            step = int(key[1:])
            cap = float(value)
        except ValueError as exc:
            raise ValueError(f"bad capacity override {part!r}") from exc
        if not (1 <= step <= n_routed):
            raise ValueError(
                f"capacity override names step s{step}, but the model has "
                f"routed steps s1..s{n_routed}"
            )
        if not (0.0 <= cap <= 1.0):
            raise ValueError(f"capacity {cap} outside [0, 1]")
        caps[step] = cap
    return [caps.get(t, None) for t in range(1, n_routed + 1)]


def _emit(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_checkpoint(path: str):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)


def _resolved_override(arg: str | None, cfg_model) -> list[float] | None:
    if arg is None:
        return None
    partial = _parse_capacity_override(arg, cfg_model.n_routed)
    base = cfg_model.routing.resolved_capacities(cfg_model.n_routed)
    return [b if p is None else p for p, b in zip(partial, base)]


def _cmd_train(args) -> int:
    from .config import load_config
    from .training import train

    cfg = load_config(args.config)
    if args.data is not None:
        cfg.train_data = args.data
    if args.seed is not None:
        cfg.seed = args.seed
    result = train(cfg, args.out, threads=args.threads)
    print(
        f"trained {result.steps_run} steps; final train loss "
        f"{result.final_train_loss:.4f}; checkpoint {result.checkpoint_path}",
        file=sys.stderr,
    )
    return 0


def _cmd_eval(args) -> int:
    from .data import byte_tokenize
    from .training import evaluate_perplexity

    cfg, params, _ = _load_checkpoint(args.ckpt)
    capacities = _resolved_override(args.capacity_override, cfg.model)
    with open(args.data, "rb") as fh:
        ids = byte_tokenize(fh.read())
    loss, ppl = evaluate_perplexity(params, cfg, ids, capacities=capacities)
    _emit(
        json.dumps(
            {
                "eval_loss": loss,
                "eval_ppl": ppl,
                "capacities": capacities,
                "threads": args.threads,
            }
        ),
        args.out,
    )
    return 0


def _cmd_sweep(args) -> int:
    from .data import byte_tokenize
    from .probes import default_sweep_grid, elastic_sweep, sweep_csv

    cfg, params, _ = _load_checkpoint(args.ckpt)
    if args.grid is not None:
        with open(args.grid, "r", encoding="utf-8") as fh:
            grid = json.load(fh)
        if not isinstance(grid, list) or not all(isinstance(g, list) for g in grid):
            raise ValueError("--grid file must hold a JSON list of capacity vectors")
    else:
        grid = default_sweep_grid(
            cfg.model.n_routed,
            cfg.model.routing.resolved_capacities(cfg.model.n_routed),
        )
    with open(args.data, "rb") as fh:
        ids = byte_tokenize(fh.read())
    rows = elastic_sweep(
        params, cfg.model, ids, grid, seq_len=cfg.seq_len, max_batches=cfg.eval_batches
    )
    _emit(sweep_csv(rows, grid, threads=args.threads), args.out)
    return 0


def _cmd_trace(args) -> int:
    from .probes import early_exit_probe, export_routing_trace

    cfg, params, _ = _load_checkpoint(args.ckpt)
    doc = export_routing_trace(params, cfg.model, args.text)
    doc["threads"] = args.threads
    if args.epsilon is not None:
        import numpy as np

        ids = np.frombuffer(args.text.encode("utf-8"), dtype=np.uint8)
        doc["early_exit"] = early_exit_probe(
            params, cfg.model, ids.astype(np.int64), args.epsilon
        )
    _emit(json.dumps(doc, indent=2), args.out)
    return 0


def _cmd_probe_gnn(args) -> int:
    from .probes import gnn_report, gnn_report_csv, make_addition_samples

    cfg, params, _ = _load_checkpoint(args.ckpt)
    samples = make_addition_samples(args.samples, seed=args.seed)
    rows = gnn_report(params, cfg.model, samples)
    easy = len({r.sample_id for r in rows if r.label == "easy"})
    print(
        f"split: {easy} easy / {args.samples - easy} hard over {args.samples} samples",
        file=sys.stderr,
    )
    _emit(gnn_report_csv(rows), args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<24} max_rel_err {r.max_rel_err:.3e}  tol {r.tolerance:.0e}  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed", file=sys.stderr)
    return 0 if failed == 0 else 2


def _cmd_flops(args) -> int:
    from .config import load_config
    from .flops import count_flops

    cfg = load_config(args.config)
    capacities = _resolved_override(args.capacity_override, cfg.model)
    breakdown = count_flops(cfg.model, capacities, seq_len=cfg.seq_len)
    _emit(json.dumps(breakdown.to_dict(), indent=2), args.out)
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "trace": _cmd_trace,
    "probe-gnn": _cmd_probe_gnn,
    "gradcheck": _cmd_gradcheck,
    "flops": _cmd_flops,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime errors: diagnostic to stderr, exit 2
        print(f"itt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
