"""End-to-end orchestration: ingest, stratify, estimate, test, margins, report.

Every failure is raised as :class:`StageError`, which names the stage and the
cause and carries the process exit code.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .data import STRATA, Dataset, Schema, SchemaError, read_csv, stratify, summarize
from .estimation import EstimationError, EstimationOptions, EstimationResult, estimate
from .inference import (MarginalEffectsTable, SpecificationMismatchError, lr_pooled_test,
                        lr_transferability, marginal_effects, pooled_df)
from .modelspec import ModelSpec, SpecError, validate_spec
from .report import build_report, write_report

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2
CONFIG_KEYS = {"input", "schema", "strata", "specs", "options", "output_dir", "pooled_spec",
               "transfer", "significance_level", "strict", "margins"}


class StageError(Exception):
    def __init__(self, stage: str, cause: str, exit_code: int = EXIT_INVALID):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code


@dataclass
class RunConfig:
    input: Path
    specs: dict[str, ModelSpec]
    output_dir: Path
    schema: Schema = field(default_factory=Schema.default)
    strata: tuple[str, ...] = STRATA
    options: EstimationOptions = field(default_factory=EstimationOptions)
    pooled_spec: ModelSpec | None = None
    transfer: bool = False
    significance_level: float = 0.90
    strict: bool = False
    margins: bool = True

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping | None = None) -> "RunConfig":
        """Read a JSON run config; relative paths resolve against the config's directory."""
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise StageError("config", f"cannot read {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent, overrides)

    @classmethod
    def from_dict(cls, raw: Mapping, base: Path, overrides: Mapping | None = None) -> "RunConfig":
        unknown = set(raw) - CONFIG_KEYS
        if unknown:
            raise StageError("config", f"unknown config keys: {sorted(unknown)}")
        for key in ("input", "specs", "output_dir"):
            if key not in raw:
                raise StageError("config", f"missing required key {key!r}")

        def resolve(p) -> Path:
            p = Path(p)
            return p if p.is_absolute() else base / p

        def load_spec(entry) -> ModelSpec:
            try:
                return ModelSpec.from_dict(entry) if isinstance(entry, Mapping) else ModelSpec.load(resolve(entry))
            except (OSError, json.JSONDecodeError, SpecError, KeyError, TypeError) as exc:
                raise StageError("config", f"bad model specification {entry!r}: {exc}") from exc

        strata = tuple(raw.get("strata", STRATA))
        bad = [s for s in strata if s not in STRATA]
        if bad:
            raise StageError("config", f"unknown strata {bad}; choose from {list(STRATA)}")
        specs = {s: load_spec(raw["specs"][s]) for s in strata if s in raw["specs"]}
        missing = [s for s in strata if s not in specs]
        if missing:
            raise StageError("config", f"no specification for strata {missing}")
        opts = dict(raw.get("options", {}))
        opts.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            options = EstimationOptions.from_dict(opts)
        except (TypeError, ValueError) as exc:
            raise StageError("config", f"bad options: {exc}") from exc
        try:
            schema = Schema.load(resolve(raw["schema"])) if raw.get("schema") else Schema.default()
        except (OSError, json.JSONDecodeError, SchemaError) as exc:
            raise StageError("config", f"bad schema: {exc}") from exc
        pooled = load_spec(raw["pooled_spec"]) if raw.get("pooled_spec") else None
        return cls(input=resolve(raw["input"]), specs=specs, output_dir=resolve(raw["output_dir"]),
                   schema=schema, strata=strata, options=options, pooled_spec=pooled,
                   transfer=bool(raw.get("transfer", False)),
                   significance_level=float(raw.get("significance_level", 0.90)),
                   strict=bool(raw.get("strict", False)), margins=bool(raw.get("margins", True)))


# --------------------------------------------------------------------------
# stages


def ingest(input_path: Path, schema: Schema, out_dir: Path | None = None, strict: bool = False):
    """Parse, stratify and optionally write datasets, summaries and the reject log."""
    try:
        parsed = read_csv(input_path, schema, strict=strict)
    except FileNotFoundError as exc:
        raise StageError("ingest", f"input not found: {input_path}") from exc
    except SchemaError as exc:
        raise StageError("ingest", f"schema error: {exc}") from exc
    except ValueError as exc:
        raise StageError("ingest", str(exc)) from exc
    strat = stratify(parsed.records)
    logger.info("parsed %d records, %d rejected, %d filtered, %d excluded",
                len(parsed.records), len(parsed.rejects), len(parsed.filtered), len(strat.excluded))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "rejects.tsv", "w", encoding="utf-8") as fh:
            fh.write("line\tcrash_id\treason\n")
            for r in parsed.rejects + parsed.filtered:
                fh.write(f"{r.line}\t{r.crash_id}\t{r.reason}\n")
        with open(out_dir / "excluded.tsv", "w", encoding="utf-8") as fh:
            fh.write("crash_id\treason\n")
            for crash_id, reason in strat.excluded:
                fh.write(f"{crash_id}\t{reason}\n")
        for name, ds in strat.datasets.items():
            ds.write_jsonl(out_dir / f"dataset_{name}.jsonl")
            if len(ds):
                with open(out_dir / f"summary_{name}.json", "w", encoding="utf-8") as fh:
                    json.dump(summarize(ds).to_dict(), fh, indent=2)
                    fh.write("\n")
    return parsed, strat


def check_specs(specs: Mapping[str, ModelSpec], datasets: Mapping[str, Dataset]) -> None:
    problems = []
    for name, spec in specs.items():
        problems += [f"{name}: {v}" for v in validate_spec(spec, datasets[name])]
    if problems:
        raise StageError("validate", "; ".join(problems))


def estimate_stage(spec: ModelSpec, dataset: Dataset, options: EstimationOptions, label: str) -> EstimationResult:
    if len(dataset) == 0:
        raise StageError("estimate", f"{label}: dataset has no observations")
    try:
        res = estimate(spec, dataset, options)
    except SpecError as exc:
        raise StageError("validate", f"{label}: {exc}") from exc
    except (EstimationError, ValueError, ArithmeticError) as exc:
        raise StageError("estimate", f"{label}: {exc}") from exc
    logger.info("%s: LL %.4f after %d iterations (%s)", label, res.ll_converged, res.iterations,
                res.stop_reason)
    if not res.converged:
        logger.warning("%s did not converge: %s", label, res.stop_reason)
    return res


def pooled_lr(pooled_spec: ModelSpec, pooled_data: Dataset, results: Mapping[str, EstimationResult],
              options: EstimationOptions) -> tuple[dict, EstimationResult]:
    full = estimate_stage(pooled_spec, pooled_data, options, "pooled")
    df = pooled_df([r.n_params for r in results.values()], full.n_params)
    out = {"ll_full": full.ll_converged, "ll_strata": {s: r.ll_converged for s, r in results.items()},
           "converged": full.converged}
    try:
        out.update(lr_pooled_test(full.ll_converged, [r.ll_converged for r in results.values()], df).to_dict())
    except (SpecificationMismatchError, ValueError) as exc:
        out.update({"error": str(exc), "df": df})
    return out, full


def transfer_matrix(specs: Mapping[str, ModelSpec], datasets: Mapping[str, Dataset],
                    own: Mapping[str, EstimationResult], options: EstimationOptions) -> dict:
    """Re-estimate every stratum's specification on every other stratum's data.

    Cell ``[a][b]`` compares spec ``a`` fitted to ``b``'s data against ``b``'s
    own model; df is the parameter count of spec ``a``.  A negative statistic
    is recorded in the cell rather than aborting the matrix.
    """
    strata = list(specs)
    cells: dict[str, dict[str, dict]] = {a: {} for a in strata}
    all_converged = True
    for a in strata:
        for b in strata:
            if a == b:
                cells[a][b] = {"statistic": 0.0, "df": own[a].n_params, "p_value": 1.0}
                continue
            res = estimate_stage(specs[a], datasets[b], options, f"transfer {a} on {b}")
            all_converged &= res.converged
            cell = {"ll_a_on_b": res.ll_converged, "ll_b": own[b].ll_converged, "converged": res.converged}
            try:
                cell.update(lr_transferability(res.ll_converged, own[b].ll_converged, res.n_params).to_dict())
            except SpecificationMismatchError as exc:
                cell.update({"error": str(exc), "df": res.n_params})
            cells[a][b] = cell
    return {"strata": strata, "cells": cells, "converged": all_converged}


def write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


@dataclass
class RunOutcome:
    exit_code: int
    results: dict[str, EstimationResult]
    margins: dict[str, MarginalEffectsTable]
    report: dict
    not_converged: list[str]


def run_pipeline(config: RunConfig) -> RunOutcome:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _, strat = ingest(config.input, config.schema, out, config.strict)
    datasets = strat.datasets
    check_specs(config.specs, datasets)
    if config.pooled_spec is not None:
        check_specs({"pooled": config.pooled_spec}, datasets)

    results: dict[str, EstimationResult] = {}
    margins: dict[str, MarginalEffectsTable] = {}
    not_converged = []
    for s in config.strata:
        res = estimate_stage(config.specs[s], datasets[s], config.options, s)
        res.dump(out / f"result_{s}.json")
        res.write_trace(out / f"trace_{s}.tsv")
        results[s] = res
        if not res.converged:
            not_converged.append(s)
        if config.margins:
            try:
                me = marginal_effects(config.specs[s], res, datasets[s])
            except (ValueError, KeyError, ArithmeticError) as exc:
                raise StageError("margins", f"{s}: {exc}") from exc
            me.dump(out / f"margins_{s}.json")
            margins[s] = me

    lr = None
    if config.pooled_spec is not None:
        lr, full = pooled_lr(config.pooled_spec, datasets["pooled"], results, config.options)
        full.dump(out / "result_pooled.json")
        if not full.converged:
            not_converged.append("pooled")
        write_json(out / "lrtest.json", lr)

    transfer = None
    if config.transfer:
        transfer = transfer_matrix(config.specs, {s: datasets[s] for s in config.strata}, results, config.options)
        if not transfer["converged"]:
            not_converged.append("transfer")
        write_json(out / "transfer.json", transfer)

    doc = build_report(results, margins, lr, transfer, config.significance_level)
    write_report(doc, out)
    code = EXIT_NOT_CONVERGED if not_converged else EXIT_OK
    return RunOutcome(code, results, margins, doc, not_converged)


def report_from_dir(out_dir: Path, significance_level: float = 0.90) -> dict:
    """Rebuild the report from saved result, margins and test artifacts."""
    results, margins = {}, {}
    for path in sorted(out_dir.glob("result_*.json")):
        name = path.stem[len("result_"):]
        if name == "pooled":
            continue
        results[name] = EstimationResult.load(path)
        mpath = out_dir / f"margins_{name}.json"
        if mpath.exists():
            margins[name] = MarginalEffectsTable.load(mpath)
    if not results:
        raise StageError("report", f"no result_*.json files in {out_dir}")
    order = [s for s in STRATA if s in results] + [s for s in results if s not in STRATA]
    results = {s: results[s] for s in order}

    def maybe(name):
        p = out_dir / name
        if not p.exists():
            return None
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)

    return build_report(results, margins, maybe("lrtest.json"), maybe("transfer.json"), significance_level)
