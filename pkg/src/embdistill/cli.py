"""``embdistill`` command line.

Exit codes: 0 success, 1 invalid input or config, 2 failure while running.
Failures while running also leave ``error.txt`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import __version__
from .data import (
    PRESETS, generate_synthetic, generate_transposition_task, load_embeddings, preset,
    save_embeddings, write_manifest,
)
from .errors import ConfigError, EmbDistillError
from .experiment import OutputDirLock, execute, load_config, parse_config, summary_table
from .retrieval import bench_retrieval, bench_table, evaluate
from .trainer import METRIC_LOSSES, OPTIMIZERS

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TRANSPOSITION_DIM = 12 * 16    # raw width must split into 12 equal bins


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = {"seed": args.seed}
    if args.teacher_dim is not None:
        overrides["teacher_dim"] = args.teacher_dim
    elif args.task == "transposition":
        overrides["teacher_dim"] = TRANSPOSITION_DIM
    cfg = preset(args.preset, **overrides)
    out = Path(args.out)
    with OutputDirLock(out, args.force):
        if args.task == "transposition":
            sets = generate_transposition_task(cfg)
        else:
            train, val = generate_synthetic(cfg)
            sets = {"train": train, "val": val}
        for name, es in sets.items():
            save_embeddings(out / f"{name}.emb", es)
        write_manifest(out / "manifest.txt", "train.emb", "val.emb",
                       **{k: f"{k}.emb" for k in sets if k.startswith("raw_")})
        for name, es in sorted(sets.items()):
            print(f"{name:10s} {es.n:7d} items  d={es.d}  cliques={len(es.clique_members)}")
    return EXIT_OK


def _data_section(args) -> dict:
    if args.data:
        return {"manifest": str(Path(args.data).resolve())}
    if args.train and args.val:
        return {"train": str(Path(args.train).resolve()), "val": str(Path(args.val).resolve())}
    raise ConfigError("pass --data MANIFEST or both --train and --val")


def _train_section(args) -> dict:
    t = {}
    for key in ("epochs", "lr", "optimizer", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            t[key] = v
    if getattr(args, "steps_per_epoch", None):
        t["steps_per_epoch"] = args.steps_per_epoch
    return t


def _run_experiment(raw: dict, force: bool) -> int:
    cfg = parse_config(raw, Path.cwd())
    summary = execute(cfg, force=force)
    print(summary_table([summary]))
    return EXIT_OK


def _experiment(args, method, loss, dims, **sections) -> dict:
    exp = {"method": method, "dims": dims, "output": str(Path(args.out).resolve()), "seed": args.seed}
    if loss is not None:
        exp["loss"] = loss
    if getattr(args, "metric", None):
        exp["metric"] = args.metric
    raw = {"experiment": exp, "data": _data_section(args)}
    raw.update({k: v for k, v in sections.items() if v})
    return raw


def cmd_reduce(args) -> int:
    return _run_experiment(_experiment(args, args.method, None, args.dims), args.force)


def cmd_train(args) -> int:
    method = "baseline" if args.baseline else "reconfigure"
    raw = _experiment(args, method, args.loss, args.dims or [args.dim], train=_train_section(args))
    if args.baseline:
        raw["data"].update(raw_train=str(Path(args.raw_train).resolve()) if args.raw_train else None,
                           raw_val=str(Path(args.raw_val).resolve()) if args.raw_val else None)
        raw["data"] = {k: v for k, v in raw["data"].items() if v}
    return _run_experiment(raw, args.force)


def cmd_prune(args) -> int:
    prune = {"max_iterations": args.max_iterations, "max_map_drop": args.max_map_drop}
    if args.start_dim:
        prune["start_dim"] = args.start_dim
    raw = _experiment(args, "prune", args.loss, args.dims, train=_train_section(args), prune=prune)
    return _run_experiment(raw, args.force)


def cmd_distill(args) -> int:
    raw = _experiment(args, args.method, args.loss, args.dims, train=_train_section(args))
    return _run_experiment(raw, args.force)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.output = Path(args.output)
    summary = execute(cfg, force=args.force)
    print(summary_table([summary]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    es = load_embeddings(args.embeddings)
    rep = evaluate(es, args.metric)
    if args.out:
        rep.to_json(args.out, per_query=args.per_query, timing=not args.no_timing)
    if args.csv:
        rep.to_csv(args.csv)
    print(rep.table())
    return EXIT_OK


def cmd_bench(args) -> int:
    rows, _ = bench_retrieval(args.n_refs, args.dims, repeats=args.repeats, seed=args.seed)
    print(bench_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"dim": r.dim, "median_seconds": r.median_seconds, "ratio": r.ratio, "times": r.times}
             for r in rows], indent=2) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        p = Path(run)
        p = p / "summary.json" if p.is_dir() else p
        if not p.exists():
            raise ConfigError(f"{run}: no summary.json found")
        rows.append(json.loads(p.read_text()))
    table = summary_table(rows)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _add_data(p):
    p.add_argument("--data", help="manifest listing train/val embedding files")
    p.add_argument("--train", help="training embeddings (instead of --data)")
    p.add_argument("--val", help="validation embeddings (instead of --data)")


def _add_output(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    p.add_argument("--seed", type=int, default=0)


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--metric", choices=("eq2", "cosine"), help="evaluation distance (default: by loss)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embdistill", description="Compress embeddings and evaluate retrieval.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic clique dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="separable")
    p.add_argument("--task", choices=("clusters", "transposition"), default="clusters")
    p.add_argument("--teacher-dim", type=int,
                   help=f"raw feature width (default: preset's, or {TRANSPOSITION_DIM} for --task transposition)")
    _add_output(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reduce", help="PCA, ICA or Gaussian random projection")
    p.add_argument("--method", choices=("pca", "ica", "grp"), required=True)
    p.add_argument("--dims", type=_int_list, required=True)
    p.add_argument("--metric", choices=("eq2", "cosine"))
    _add_data(p)
    _add_output(p)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("train", help="train a projection head with a metric-learning loss")
    p.add_argument("--loss", choices=METRIC_LOSSES, required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--dims", type=_int_list, help="several sizes (overrides --dim)")
    p.add_argument("--baseline", action="store_true", help="train on random features of the raw inputs")
    p.add_argument("--raw-train")
    p.add_argument("--raw-val")
    _add_data(p)
    _add_training(p)
    _add_output(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="iterative magnitude pruning with rewinding")
    p.add_argument("--loss", choices=METRIC_LOSSES, required=True)
    p.add_argument("--dims", type=_int_list, required=True, help="sizes to report")
    p.add_argument("--start-dim", type=int)
    p.add_argument("--max-iterations", type=int, default=8)
    p.add_argument("--max-map-drop", type=float, default=0.05)
    _add_data(p)
    _add_training(p)
    _add_output(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("distill", help="teacher-student distillation")
    p.add_argument("--method", choices=("distance-match", "cluster-match"), required=True)
    p.add_argument("--loss", choices=METRIC_LOSSES, help="optional metric loss added to the distillation term")
    p.add_argument("--dims", type=_int_list, required=True)
    _add_data(p)
    _add_training(p)
    _add_output(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="MAP / MR1 of an embedding file")
    p.add_argument("embeddings")
    p.add_argument("--metric", choices=("eq2", "cosine"), default="eq2")
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--csv", help="write per-query results as CSV")
    p.add_argument("--per-query", action="store_true", help="include per-query AP in the JSON")
    p.add_argument("--no-timing", action="store_true", help="omit timing from the JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="brute-force retrieval latency per dimensionality")
    p.add_argument("--dims", type=_int_list, default=[256, 4096])
    p.add_argument("--n-refs", type=int, default=100_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the measurements as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="merge run summaries into one table")
    p.add_argument("runs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--out", help="write the table to this file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run an experiment from a TOML config")
    p.add_argument("config")
    p.add_argument("--output", help="override the configured output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def _error_dir(args) -> Path | None:
    for attr in ("out", "output"):
        v = getattr(args, attr, None)
        if v and Path(v).is_dir():
            return Path(v)
    if getattr(args, "command", None) == "run":
        try:
            return load_config(args.config).output
        except Exception:
            return None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EmbDistillError, ArithmeticError, ValueError, OSError, MemoryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        where = _error_dir(args)
        if where is not None:
            (where / "error.txt").write_text(
                f"command: {' '.join(sys.argv if argv is None else ['embdistill', *argv])}\n"
                f"{traceback.format_exc()}")
            print(f"details in {where / 'error.txt'}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
