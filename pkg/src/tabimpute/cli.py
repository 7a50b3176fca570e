"""Command-line entry point.

Every command writes a JSON manifest recording its fully resolved argument
list, configuration, seed, and SHA-256 hashes of inputs and outputs.
``tabimpute replay MANIFEST`` re-runs a manifest into a scratch directory and
checks that every output is reproduced byte for byte.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numerical
failure, 4 replay mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .assoc import association_report, write_report_csv
from .bench import (
    SyntheticSpec,
    compare_strategies,
    design_matrix,
    gen_mixed_synthetic,
    imputation_quality,
    write_report,
)
from .completion import ImputeConfig, impute
from .errors import DataError, NumericalError, UnknownColumnError
from .gbt import GbtModel, GbtParams, fit
from .shap import explain, global_importance, write_explanations_csv, write_importance_csv
from .tabular import MixedTable, Role, load_csv, load_schema, save_schema, write_csv

logger = logging.getLogger("tabimpute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_REPLAY = 0, 1, 2, 3, 4
THREADS_ENV = "TABIMPUTE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load_json_arg(path: str | None, what: str) -> dict:
    """JSON object from a config file; malformed files are usage errors."""
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"{what}: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: malformed JSON in {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{what}: expected a JSON object in {path}")
    return obj


def _build(cls, obj: dict, what: str, **overrides):
    try:
        return cls(**{**obj, **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{what}: {exc}") from exc


def _stem(path: str) -> str:
    p = Path(path)
    return str(p.with_suffix("")) if p.suffix else str(p)


def _load_table(args) -> MixedTable:
    schema = load_schema(args.schema)
    return load_csv(args.data, schema, args.missing_token)


# Each command returns (config snapshot, seed, input files, output files).
CommandResult = tuple[dict, int, list[str], list[str]]


def cmd_impute(args) -> CommandResult:
    config = ImputeConfig(grid_size=args.grid, folds=args.folds, tolerance=args.tol,
                          max_iterations=args.max_iter, seed=args.seed,
                          include_target=args.include_target)
    table = _load_table(args)
    t0 = time.perf_counter()
    result = impute(table, config, threads=args.threads)
    elapsed = time.perf_counter() - t0

    write_csv(result.completed, args.out, args.missing_token)
    with open(args.trace, "w", encoding="utf-8") as fh:
        fh.write("iteration,fit_rmse,delta\n")
        for i, step in enumerate(result.trace, start=1):
            fh.write(f"{i},{step.fit_rmse!r},{step.delta!r}\n")
    with open(args.cv_out, "w", encoding="utf-8") as fh:
        fh.write("lambda,mean_mse\n")
        for lam, mse in result.cv_table.rows():
            fh.write(f"{lam!r},{mse!r}\n")

    print(f"lambda_star {result.lambda_star!r}")
    print(f"iterations {result.iterations}")
    print(f"final_delta {result.trace.final_delta!r}")
    inputs = [args.data, args.schema]
    if args.truth:
        truth = load_csv(args.truth, list(table.schema), args.missing_token).select(table.names)
        rmse, acc = imputation_quality(result.completed, truth, table)
        print(f"heldout_rmse_cont {rmse!r}")
        print(f"heldout_acc_cat {acc!r}")
        inputs.append(args.truth)
    print(f"seconds {elapsed:.3f}")
    return config.to_dict(), args.seed, inputs, [args.out, args.trace, args.cv_out]


def cmd_bench(args) -> CommandResult:
    spec_obj = _load_json_arg(args.spec, "spec")
    spec = _build(SyntheticSpec, spec_obj, "spec", **({"seed": args.seed} if args.seed is not None else {}))
    impute_cfg = _build(ImputeConfig, {"seed": spec.seed, **_load_json_arg(args.impute, "impute")}, "impute")
    gbt = _build(GbtParams, {"seed": spec.seed, **_load_json_arg(args.gbt, "gbt")}, "gbt")
    t0 = time.perf_counter()
    report = compare_strategies(spec, impute_cfg, gbt, folds=args.folds, threads=args.threads)
    elapsed = time.perf_counter() - t0
    paths = write_report(report, args.out_dir)
    sys.stdout.write(report.to_text())
    print(f"seconds {elapsed:.3f}")
    inputs = [p for p in (args.spec, args.impute, args.gbt) if p]
    return report.config, spec.seed, inputs, [str(p) for p in paths]


def cmd_synth(args) -> CommandResult:
    spec = _build(SyntheticSpec, _load_json_arg(args.spec, "spec"), "spec",
                  **({"seed": args.seed} if args.seed is not None else {}))
    masked, truth = gen_mixed_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "masked.csv", out / "truth.csv", out / "schema.json"]
    write_csv(masked, paths[0])
    write_csv(truth, paths[1])
    save_schema(masked.schema, paths[2])
    print(f"wrote {masked.n_rows} rows x {masked.n_cols} columns ({masked.n_missing} missing) to {out}")
    return spec.to_dict(), spec.seed, [p for p in (args.spec,) if p], [str(p) for p in paths]


def cmd_explain(args) -> CommandResult:
    table = _load_table(args)
    if args.group_by is not None and args.group_by not in table.names:
        raise UnknownColumnError(f"--group-by: unknown column {args.group_by!r}")
    X, y, names = design_matrix(table)
    if np.isnan(X).any():
        raise DataError("feature columns contain missing cells; run `tabimpute impute` first")
    inputs = [args.data, args.schema]
    outputs = [args.out, args.ranking_out]
    config: dict = {"background": args.background, "seed": args.seed}
    if args.model == "train":
        if y is None:
            raise DataError("training needs a target column in the schema")
        if np.isnan(y).any():
            keep = ~np.isnan(y)
            logger.warning("dropping %d rows with missing target for training", int((~keep).sum()))
            Xt, yt = X[keep], y[keep]
        else:
            Xt, yt = X, y
        gbt = _build(GbtParams, {**_load_json_arg(args.gbt, "gbt"), "seed": args.seed}, "gbt")
        model = fit(Xt, yt, gbt, names)
        Path(args.model_out).write_text(model.to_json() + "\n", encoding="utf-8")
        outputs.append(args.model_out)
        config["gbt"] = gbt.to_dict()
    else:
        try:
            model = GbtModel.from_json(Path(args.model).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"model: cannot read {args.model}: {exc.strerror}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"model: invalid model file {args.model}: {exc}") from exc
        missing = [n for n in model.feature_names if n not in names]
        if missing:
            raise DataError(f"model features not in data: {missing}")
        X = X[:, [names.index(n) for n in model.feature_names]]
        inputs.append(args.model)
        config["gbt"] = model.params.to_dict()

    rng = np.random.default_rng(args.seed)
    n_bg = min(args.background, X.shape[0])
    bg_rows = np.sort(rng.choice(X.shape[0], size=n_bg, replace=False))
    explanations = explain(model, X, X[bg_rows])
    write_explanations_csv(explanations, args.out)

    rankings = {"all": global_importance(explanations)}
    if args.group_by is not None:
        col = table.column_schema(args.group_by)
        if col.is_categorical:
            labels = table.labels(args.group_by)
        else:
            labels = [None if np.isnan(v) else repr(float(v)) for v in table.column(args.group_by)]
        for g in sorted({lv for lv in labels if lv is not None}):
            members = [e for e, lv in zip(explanations, labels) if lv == g]
            rankings[f"{args.group_by}={g}"] = global_importance(members)
    write_importance_csv(rankings, args.ranking_out)
    for name, imp in rankings.items():
        print(f"{name}: " + ", ".join(f"{f} ({v:.4g})" for f, v in imp.ranking()[:5]))
    return config, args.seed, inputs, outputs


def cmd_assoc(args) -> CommandResult:
    table = _load_table(args)
    report = association_report(table, args.anchor)
    write_report_csv(report, args.out)
    for r in report.rows[:10]:
        print(f"{r.other_column:<20} {r.statistic_kind:<10} {r.value: .4f}")
    return {"anchor": args.anchor}, 0, [args.data, args.schema], [args.out]


def _add_common(p: argparse.ArgumentParser, seed_default: int | None = 0) -> None:
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default ${THREADS_ENV} or 1); never changes outputs")
    p.add_argument("--manifest", default=None, help="manifest path (default derived from outputs)")


def _add_table_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--missing-token", default="")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabimpute", description="Low-rank imputation, boosted trees and Shapley attribution.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("impute", help="impute missing cells by hard-thresholded SVD")
    _add_table_args(p)
    p.add_argument("--out", default="imputed.csv")
    p.add_argument("--trace", default=None)
    p.add_argument("--cv-out", default=None)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--include-target", action="store_true")
    p.add_argument("--truth", default=None, help="complete table; prints held-out imputation error")
    _add_common(p)
    p.set_defaults(func=cmd_impute, output_flags=("out", "trace", "cv_out"))

    p = sub.add_parser("bench", help="compare SVD and median/mode imputation on synthetic data")
    p.add_argument("--spec", default=None, help="SyntheticSpec JSON (defaults if omitted)")
    p.add_argument("--gbt", default=None)
    p.add_argument("--impute", default=None)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out-dir", default="bench_out")
    _add_common(p, seed_default=None)
    p.set_defaults(func=cmd_bench, output_flags=("out_dir",))

    p = sub.add_parser("synth", help="write a masked synthetic table, its ground truth and schema")
    p.add_argument("--spec", default=None)
    p.add_argument("--out-dir", default="synth_out")
    _add_common(p, seed_default=None)
    p.set_defaults(func=cmd_synth, output_flags=("out_dir",))

    p = sub.add_parser("explain", help="exact Shapley attributions and mean-|SHAP| rankings")
    _add_table_args(p)
    p.add_argument("--model", default="train", help='model JSON path, or "train"')
    p.add_argument("--gbt", default=None)
    p.add_argument("--background", type=int, default=128)
    p.add_argument("--group-by", default=None)
    p.add_argument("--out", default="shap.csv")
    p.add_argument("--ranking-out", default=None)
    p.add_argument("--model-out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_explain, output_flags=("out", "ranking_out", "model_out"))

    p = sub.add_parser("assoc", help="association of every column with an anchor column")
    _add_table_args(p)
    p.add_argument("--anchor", required=True)
    p.add_argument("--out", default="assoc.csv")
    _add_common(p)
    p.set_defaults(func=cmd_assoc, output_flags=("out",))

    p = sub.add_parser("replay", help="re-run a manifest and verify outputs are reproduced")
    p.add_argument("manifest")
    p.add_argument("--keep", default=None, help="directory to keep the replayed outputs in")
    p.set_defaults(func=None)
    return parser


def _resolve_defaults(args) -> None:
    """Fill derived output paths so the recorded argv names every output."""
    if args.command == "impute":
        stem = _stem(args.out)
        args.trace = args.trace or f"{stem}.trace.csv"
        args.cv_out = args.cv_out or f"{stem}.lambda_cv.csv"
    elif args.command == "explain":
        stem = _stem(args.out)
        args.ranking_out = args.ranking_out or f"{stem}.ranking.csv"
        args.model_out = args.model_out or f"{stem}.model.json"
    if args.manifest is None:
        base = args.out_dir if hasattr(args, "out_dir") else _stem(args.out)
        args.manifest = str(Path(base) / "manifest.json") if hasattr(args, "out_dir") else f"{base}.manifest.json"


def _resolved_argv(parser: argparse.ArgumentParser, args) -> list[str]:
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    argv = [args.command]
    for action in sp._actions:
        if not action.option_strings or action.dest in ("help", "manifest", "threads"):
            continue
        value = getattr(args, action.dest)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, str(value)]
    return argv


def _write_manifest(path: str, argv: list[str], args, result: CommandResult) -> None:
    config, seed, inputs, outputs = result
    manifest = {
        "tool": "tabimpute",
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "output_flags": list(args.output_flags),
        "config_snapshot": config,
        "seed": seed,
        "input_hashes": {p: _sha256(p) for p in inputs},
        "artifact_paths": {p: _sha256(p) for p in outputs},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _replay(manifest_path: str, keep: str | None) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"tabimpute: replay: cannot read manifest {manifest_path}: {exc}", file=sys.stderr)
        return EXIT_DATA
    for p, digest in manifest["input_hashes"].items():
        if not Path(p).exists() or _sha256(p) != digest:
            print(f"tabimpute: replay: input {p} is missing or changed", file=sys.stderr)
            return EXIT_DATA
    scratch = Path(keep) if keep else Path(tempfile.mkdtemp(prefix="tabimpute-replay-"))
    scratch.mkdir(parents=True, exist_ok=True)
    argv = list(manifest["argv"])
    parser = build_parser()
    sp_args = parser.parse_args(argv)
    remap: dict[str, str] = {}
    for i, dest in enumerate(manifest["output_flags"]):
        old = getattr(sp_args, dest)
        if old is None:
            continue
        new = str(scratch / f"{i}_{Path(old).name}")
        remap[old] = new
        flag = "--" + dest.replace("_", "-")
        argv[argv.index(flag) + 1] = new
    argv += ["--manifest", str(scratch / "replay.manifest.json")]
    try:
        code = main(argv)
        if code != EXIT_OK:
            return code
        mismatches = []
        for old, digest in manifest["artifact_paths"].items():
            new = next((remap[o] + old[len(o):] for o in sorted(remap, key=len, reverse=True)
                        if old == o or old.startswith(o.rstrip("/") + "/")), None)
            if new is None or not Path(new).exists() or _sha256(new) != digest:
                mismatches.append(old)
        if mismatches:
            print(f"tabimpute: replay: outputs differ: {mismatches}", file=sys.stderr)
            return EXIT_REPLAY
        print(f"replay OK: {len(manifest['artifact_paths'])} outputs reproduced bit-exact")
        return EXIT_OK
    finally:
        if not keep:
            shutil.rmtree(scratch, ignore_errors=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        return _replay(args.manifest, args.keep)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    _resolve_defaults(args)
    func: Callable[..., CommandResult] = args.func
    try:
        for dest in args.output_flags:
            value = getattr(args, dest, None)
            if value and dest == "out_dir":
                Path(value).mkdir(parents=True, exist_ok=True)
            elif value:
                Path(value).parent.mkdir(parents=True, exist_ok=True)
        result = func(args)
    except UsageError as exc:
        print(f"tabimpute: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"tabimpute: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tabimpute: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"tabimpute: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_manifest(args.manifest, _resolved_argv(parser, args), args, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
