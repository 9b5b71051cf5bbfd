"""Command-line entry point: ``crashsev <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 an estimation stopped without
converging (its artifacts are still written).  Set ``CRASHSEV_LOG_LEVEL``
(DEBUG, INFO, WARNING, ...) to control log output on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import pipeline
from .data import Dataset, Schema, summarize
from .estimation import EstimationOptions, EstimationResult
from .halton import build_draws
from .inference import (SpecificationMismatchError, lr_pooled_test,
                        lr_transferability, marginal_effects, pooled_df)
from .modelspec import ModelSpec, SpecError, validate_spec
from .pipeline import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, StageError
from .report import render_estimation_table, render_report_text, write_report
from .synthetic import CovariateLaw, GenConfig, generate_dataset, write_theta_sidecar

logger = logging.getLogger("crashsev")
LOG_ENV = "CRASHSEV_LOG_LEVEL"


def bundled_config() -> Path:
    return Path(str(resources.files("crashsev") / "fixtures" / "config.json"))


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _overrides(args) -> dict:
    return {"n_draws": getattr(args, "draws", None), "skip": getattr(args, "skip", None),
            "max_iterations": getattr(args, "max_iter", None)}


def _options(args, base: dict | None = None) -> EstimationOptions:
    opts = dict(base or {})
    opts.update({k: v for k, v in _overrides(args).items() if v is not None})
    if getattr(args, "covariance", None):
        opts["covariance_method"] = args.covariance
    try:
        return EstimationOptions.from_dict(opts)
    except (TypeError, ValueError) as exc:
        raise StageError("options", str(exc)) from exc


def _load_spec(path) -> ModelSpec:
    try:
        return ModelSpec.load(path)
    except (OSError, json.JSONDecodeError, SpecError, KeyError, TypeError) as exc:
        raise StageError("spec", f"cannot load {path}: {exc}") from exc


def _load_dataset(path) -> Dataset:
    try:
        return Dataset.read_jsonl(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise StageError("dataset", f"cannot load {path}: {exc}") from exc


def _load_result(path) -> EstimationResult:
    try:
        return EstimationResult.load(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise StageError("result", f"cannot load {path}: {exc}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _pairs(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise StageError("arguments", f"{what} must look like NAME=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    schema = Schema.default()
    if args.schema:
        try:
            schema = Schema.load(args.schema)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise StageError("ingest", f"bad schema: {exc}") from exc
    parsed, strat = pipeline.ingest(Path(args.input), schema, Path(args.out_dir), args.strict)
    sizes = strat.sizes()
    print(f"records {len(parsed.records)}, rejected {len(parsed.rejects)}, "
          f"filtered {len(parsed.filtered)}, excluded {len(strat.excluded)}")
    for name, n in sizes.items():
        print(f"  {name:<7} {n}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    ds = _load_dataset(args.dataset)
    try:
        table = summarize(ds)
    except ValueError as exc:
        raise StageError("summarize", str(exc)) from exc
    _emit(json.dumps(table.to_dict(), indent=2) + "\n" if args.json else table.render(), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    spec, ds = _load_spec(args.spec), _load_dataset(args.dataset)
    problems = validate_spec(spec, ds)
    if problems:
        raise StageError("validate", "; ".join(problems))
    res = pipeline.estimate_stage(spec, ds, _options(args), ds.stratum)
    out = Path(args.out or f"result_{ds.stratum}.json")
    res.dump(out)
    if args.trace:
        res.write_trace(args.trace)
    print(render_estimation_table(res))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_margins(args) -> int:
    res, ds = _load_result(args.result), _load_dataset(args.dataset)
    spec = _load_spec(args.spec) if args.spec else res.spec
    try:
        me = marginal_effects(spec, res, ds, variables=args.variables or None)
    except (ValueError, KeyError) as exc:
        raise StageError("margins", str(exc)) from exc
    if args.out:
        me.dump(args.out)
    print(render_estimation_table(res, me))
    return EXIT_OK


def cmd_lrtest(args) -> int:
    try:
        if args.full:
            full = _load_result(args.full)
            strata = [_load_result(p) for p in args.strata]
            df = args.df or pooled_df([r.n_params for r in strata], full.n_params)
            lr = lr_pooled_test(full.ll_converged, [r.ll_converged for r in strata], df)
        elif args.ll_full is not None:
            if args.df is None:
                raise StageError("lrtest", "--df is required with raw log-likelihoods")
            lr = lr_pooled_test(args.ll_full, args.ll_strata, args.df)
        elif args.ll_a_on_b is not None:
            if args.df is None or args.ll_b is None:
                raise StageError("lrtest", "--ll-b and --df are required for a transferability test")
            lr = lr_transferability(args.ll_a_on_b, args.ll_b, args.df)
        else:
            raise StageError("lrtest", "give --full/--strata, --ll-full/--ll-strata or --ll-a-on-b/--ll-b")
    except (SpecificationMismatchError, ValueError) as exc:
        raise StageError("lrtest", str(exc)) from exc
    payload = lr.to_dict()
    if args.out:
        pipeline.write_json(Path(args.out), payload)
    print(f"{lr.kind}: statistic {lr.statistic:.2f}, df {lr.df}, p {payload['p_display']}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    specs = {k: _load_spec(v) for k, v in _pairs(args.spec, "--spec").items()}
    data = {k: _load_dataset(v) for k, v in _pairs(args.dataset, "--dataset").items()}
    if set(specs) != set(data) or len(specs) < 2:
        raise StageError("transfer", "need matching --spec and --dataset entries for at least two strata")
    pipeline.check_specs(specs, data)
    options = _options(args)
    own = {s: pipeline.estimate_stage(specs[s], data[s], options, s) for s in specs}
    matrix = pipeline.transfer_matrix(specs, data, own, options)
    if args.out:
        pipeline.write_json(Path(args.out), matrix)
    text = render_report_text({"strata": {}, "transfer": matrix})
    print(text, end="")
    converged = matrix["converged"] and all(r.converged for r in own.values())
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    spec = _load_spec(args.spec)
    try:
        with open(args.theta, encoding="utf-8") as fh:
            raw = json.load(fh)
        theta = np.asarray(raw["theta_true"] if isinstance(raw, dict) else raw, dtype=float)
        law = CovariateLaw()
        if args.law:
            with open(args.law, encoding="utf-8") as fh:
                law = CovariateLaw.from_dict(json.load(fh))
        config = GenConfig(spec, theta, args.n_obs, args.seed, law, args.stratum)
        ds = generate_dataset(config)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise StageError("simulate", str(exc)) from exc
    ds.write_jsonl(args.out)
    write_theta_sidecar(args.sidecar or str(Path(args.out).with_suffix(".theta.json")), config)
    print(f"wrote {len(ds)} observations to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.dir)
    doc = pipeline.report_from_dir(out_dir, args.significance)
    write_report(doc, out_dir)
    print(render_report_text(doc), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    config_path = Path(args.config) if args.config else bundled_config()
    config = pipeline.RunConfig.load(config_path, _overrides(args))
    if args.output_dir:
        config.output_dir = Path(args.output_dir)
    outcome = pipeline.run_pipeline(config)
    print(render_report_text(outcome.report), end="")
    if outcome.not_converged:
        print(f"not converged: {', '.join(outcome.not_converged)}", file=sys.stderr)
    print(f"artifacts written to {config.output_dir}", file=sys.stderr)
    return outcome.exit_code


def cmd_draws_export(args) -> int:
    try:
        draws = build_draws(args.n_obs, args.n_draws, args.dims, args.skip)
    except (ValueError, OverflowError) as exc:
        raise StageError("draws", str(exc)) from exc
    draws.export(args.out)
    print(json.dumps(draws.header()))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _estimation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--draws", type=int, help="Halton draws per observation")
    p.add_argument("--skip", type=int, help="leading Halton points to discard")
    p.add_argument("--max-iter", type=int, help="iteration cap for the optimizer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crashsev", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a crash CSV and write stratified datasets")
    p.add_argument("input")
    p.add_argument("--schema")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--strict", action="store_true", help="treat any rejected row as fatal")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("summarize", help="descriptive statistics of a dataset")
    p.add_argument("dataset")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("estimate", help="fit a specification by simulated maximum likelihood")
    p.add_argument("dataset")
    p.add_argument("spec")
    p.add_argument("--out")
    p.add_argument("--trace")
    p.add_argument("--covariance", choices=("numerical_hessian", "bhhh"))
    _estimation_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("margins", help="marginal effects for a fitted model")
    p.add_argument("dataset")
    p.add_argument("result")
    p.add_argument("--spec")
    p.add_argument("--variables", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_margins)

    p = sub.add_parser("lrtest", help="likelihood-ratio tests")
    p.add_argument("--full", help="pooled-model result JSON")
    p.add_argument("--strata", nargs="*", default=[], help="stratum result JSONs")
    p.add_argument("--ll-full", type=float)
    p.add_argument("--ll-strata", type=float, nargs="*")
    p.add_argument("--ll-a-on-b", type=float)
    p.add_argument("--ll-b", type=float)
    p.add_argument("--df", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lrtest)

    p = sub.add_parser("transfer", help="matrix of parameter transferability tests")
    p.add_argument("--spec", action="append", metavar="NAME=PATH")
    p.add_argument("--dataset", action="append", metavar="NAME=PATH")
    p.add_argument("--out")
    _estimation_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("simulate", help="synthetic choice data from known parameters")
    p.add_argument("--spec", required=True)
    p.add_argument("--theta", required=True, help="JSON list or object with 'theta_true'")
    p.add_argument("--n-obs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--law", help="covariate law JSON")
    p.add_argument("--stratum", default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="rebuild report.json and report.txt from saved artifacts")
    p.add_argument("dir")
    p.add_argument("--significance", type=float, default=0.90)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from a JSON config (bundled example by default)")
    p.add_argument("config", nargs="?")
    p.add_argument("--output-dir")
    _estimation_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("draws", help="Halton draw utilities")
    dsub = p.add_subparsers(dest="draws_command", required=True)
    q = dsub.add_parser("export", help="dump a draw matrix to .npz or .json")
    q.add_argument("--n-obs", type=int, required=True)
    q.add_argument("--n-draws", type=int, required=True)
    q.add_argument("--dims", type=int, default=1)
    q.add_argument("--skip", type=int, default=100)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_draws_export)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (SpecError, ValueError, OSError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
