"""Estimation tables, model comparison matrices and the combined report.

The JSON report document is the contract; the text rendering is built from it
alone, so ``crashsev report`` can re-render saved artifacts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import LEVELS
from .estimation import EstimationResult, pseudo_r2
from .halton import standard_normal_quantile
from .inference import MarginalEffectsTable, format_p, share_above_zero, share_below_zero
from .modelspec import CONSTANT, parameter_layout

LEVEL_TITLES = {"major": "major injury", "minor": "minor injury", "none": "no injury"}
ZERO_SUM_TOL = 1e-10


class ReportError(ValueError):
    pass


def critical_t(significance_level: float) -> float:
    """Two-tailed normal critical value, rounded as in printed tables (0.90 -> 1.645)."""
    if not 0 < significance_level < 1:
        raise ValueError("significance level must lie in (0, 1)")
    return round(standard_normal_quantile(1.0 - (1.0 - significance_level) / 2.0), 3)


def _num(v):
    return None if v is None or not math.isfinite(v) else float(v)


def stratum_section(result: EstimationResult, margins: MarginalEffectsTable | None) -> dict:
    """Machine-readable estimation table for one stratum."""
    spec = result.spec
    if margins is not None:
        extra = set(margins.variables) - set(spec.variables)
        if extra:
            raise ReportError(f"marginal effects for variables outside the model: {sorted(extra)}")
    layout = parameter_layout(spec)
    rows = []
    for d, sl in zip(spec.defs, layout.slices):
        i = sl.start
        row = {
            "name": d.name, "level": d.target_level, "variable": d.variable, "kind": d.kind,
            "coefficient": _num(result.theta_hat[i]), "se": _num(result.std_errors[i]),
            "t": _num(result.t_stats[i]), "p": _num(result.p_values[i]),
            "marginal_effects": None,
        }
        if d.is_random:
            j = i + 1
            row["distribution"] = d.distribution
            row["sd"] = {"coefficient": _num(abs(result.theta_hat[j])), "se": _num(result.std_errors[j]),
                         "t": _num(abs(result.t_stats[j])) if math.isfinite(result.t_stats[j]) else None,
                         "p": _num(result.p_values[j])}
            mu, sd = float(result.theta_hat[i]), abs(float(result.theta_hat[j]))
            if d.distribution == "normal" and sd > 0:
                row["share_below_zero"] = share_below_zero(mu, sd)
                row["share_above_zero"] = share_above_zero(mu, sd)
        if margins is not None and d.variable != CONSTANT and d.variable in margins.variables:
            row["marginal_effects"] = [float(e) for e in margins.row(d.variable)]
        rows.append(row)
    return {
        "stratum": result.stratum,
        "n_obs": result.n_obs,
        "ll_zero": result.ll_zero,
        "ll_converged": result.ll_converged,
        "rho_squared": result.rho_squared,
        "converged": result.converged,
        "stop_reason": result.stop_reason,
        "iterations": result.iterations,
        "covariance_method": result.covariance_method,
        "n_params": result.n_params,
        "rows": rows,
    }


def _fmt(v, spec=".2f"):
    return "n/a" if v is None else format(v, spec)


def _fmt_p(v):
    return "n/a" if v is None else f"{v:.3f}"


def _fmt_me(v):
    return "" if v is None else f"{v:.3f}"


def render_section(section: dict) -> str:
    """Text table in the layout of a published estimation table."""
    w = 34
    head = (f"{'Variable':<{w}}{'Coefficient':>12}{'t-statistic':>13}{'p-value':>9}"
            f"{'Major':>9}{'Minor':>9}{'No':>9}")
    title = f"Parameter estimates and marginal effects: {section['stratum']}"
    lines = [title, "=" * len(head), f"{'':<{w}}{'':>12}{'':>13}{'':>9}{'Marginal effects':>27}", head,
             "-" * len(head)]
    for level in LEVELS:
        level_rows = [r for r in section["rows"] if r["level"] == level]
        if not level_rows:
            continue
        lines.append(f"Defined for {LEVEL_TITLES[level]}")
        for r in level_rows:
            me = r["marginal_effects"] or [None, None, None]
            label = "Constant" if r["variable"] == CONSTANT else r["name"]
            lines.append(f"  {label:<{w - 2}}{_fmt(r['coefficient']):>12}{_fmt(r['t']):>13}"
                         f"{_fmt_p(r['p']):>9}{_fmt_me(me[0]):>9}{_fmt_me(me[1]):>9}{_fmt_me(me[2]):>9}")
            if r["kind"] == "random":
                sd = r["sd"]
                lines.append(f"  {'  (standard deviation of parameter distribution)':<{w - 2}}"
                             f"{'(' + _fmt(sd['coefficient']) + ')':>12}{'(' + _fmt(sd['t']) + ')':>13}"
                             f"{'(' + _fmt_p(sd['p']) + ')':>9}")
                if "share_below_zero" in r:
                    lines.append(f"      {r['distribution']} mixing: "
                                 f"{100 * r['share_below_zero']:.1f}% below zero, "
                                 f"{100 * r['share_above_zero']:.1f}% above zero")
    ll0 = round(section["ll_zero"], 2)
    llb = round(section["ll_converged"], 2)
    # rho^2 is printed from the printed LL pair so the table checks itself
    rho = pseudo_r2(ll0, llb)
    lines += [
        "Model statistics",
        f"  {'Number of observations':<{w - 2}}{section['n_obs']:>12,}",
        f"  {'Log-likelihood at zero, LL(0)':<{w - 2}}{ll0:>12,.2f}",
        f"  {'Log-likelihood at convergence':<{w - 2}}{llb:>12,.2f}",
        f"  {'rho^2 = 1 - LL(beta)/LL(0)':<{w - 2}}{rho:>12.2f}",
    ]
    if not section["converged"]:
        lines.append(f"  WARNING: estimation did not converge ({section['stop_reason']})")
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_estimation_table(result: EstimationResult, margins: MarginalEffectsTable | None = None) -> str:
    return render_section(stratum_section(result, margins))


# --------------------------------------------------------------------------
# comparison matrix

ARROWS = {"up": "↑", "down": "↓", "absent": ""}


@dataclass(frozen=True)
class ComparisonMatrix:
    variables: tuple[str, ...]
    strata: tuple[str, ...]
    cells: Mapping[tuple[str, str, str], str]

    def get(self, variable: str, stratum: str, level: str) -> str:
        return self.cells.get((variable, stratum, level), "absent")

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "strata": list(self.strata), "levels": list(LEVELS),
                "cells": {v: {s: [self.get(v, s, lvl) for lvl in LEVELS] for s in self.strata}
                          for v in self.variables}}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonMatrix":
        cells = {}
        for v, per in d["cells"].items():
            for s, vals in per.items():
                for lvl, val in zip(LEVELS, vals):
                    cells[(v, s, lvl)] = val
        return cls(tuple(d["variables"]), tuple(d["strata"]), cells)


def significant_variables(result: EstimationResult, threshold: float) -> set[str]:
    """Variables with at least one retained slot (|t| >= threshold)."""
    out = set()
    layout = parameter_layout(result.spec)
    for d, sl in zip(result.spec.defs, layout.slices):
        if d.is_constant:
            continue
        t = np.nan_to_num(result.t_stats[sl])
        if np.any(np.abs(t) >= threshold):
            out.add(d.variable)
    return out


def render_comparison(results: Mapping[str, EstimationResult], margins: Mapping[str, MarginalEffectsTable],
                      significance_level: float = 0.90, min_abs_effect: float = 0.0) -> ComparisonMatrix:
    """Arrows from marginal-effect signs of significant variables; everything else is absent."""
    threshold = critical_t(significance_level)
    strata = tuple(results)
    variables: list[str] = []
    for s in strata:
        for v in results[s].spec.variables:
            if v not in variables:
                variables.append(v)
    cells = {}
    for s in strata:
        sig = significant_variables(results[s], threshold)
        me = margins.get(s)
        for v in variables:
            for lvl in LEVELS:
                state = "absent"
                if v in sig and me is not None and v in me.variables:
                    e = me.effect(v, lvl)
                    if abs(e) > min_abs_effect:
                        state = "up" if e > 0 else "down" if e < 0 else "absent"
                cells[(v, s, lvl)] = state
    return ComparisonMatrix(tuple(variables), strata, cells)


def render_comparison_text(matrix: ComparisonMatrix) -> str:
    w = 20
    short = {"major": "Major", "minor": "Minor", "none": "No"}
    head1 = f"{'Variable':<{w}}" + "".join(f"{s:^21}" for s in matrix.strata)
    head2 = f"{'':<{w}}" + "".join("".join(f"{short[l]:^7}" for l in LEVELS) for _ in matrix.strata)
    lines = ["Model comparisons", head1.rstrip(), head2.rstrip(), "-" * len(head2)]
    for v in matrix.variables:
        cells = "".join(f"{ARROWS[matrix.get(v, s, l)]:^7}" for s in matrix.strata for l in LEVELS)
        lines.append(f"{v:<{w}}{cells}".rstrip())
    lines.append("↑ increase, ↓ decrease in the probability of a severity level")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# report document


def build_report(results: Mapping[str, EstimationResult],
                 margins: Mapping[str, MarginalEffectsTable] | None = None,
                 lr_pooled: dict | None = None, transfer: dict | None = None,
                 significance_level: float = 0.90) -> dict:
    margins = margins or {}
    doc = {
        "significance_level": significance_level,
        "critical_t": critical_t(significance_level),
        "strata": {s: stratum_section(r, margins.get(s)) for s, r in results.items()},
        "lr_pooled": lr_pooled,
        "transfer": transfer,
        "comparison": None,
    }
    if len(results) >= 2:
        doc["comparison"] = render_comparison(results, margins, significance_level).to_dict()
    check_report(doc)
    return doc


def check_report(doc: dict) -> None:
    """Recompute rho^2, t-ratios and marginal-effect zero-sums from the document itself."""
    for name, sec in doc["strata"].items():
        if pseudo_r2(sec["ll_zero"], sec["ll_converged"]) != sec["rho_squared"]:
            raise ReportError(f"{name}: rho^2 does not match its log-likelihoods")
        for r in sec["rows"]:
            for part in (r, r.get("sd")):
                if part and part["se"] and part["coefficient"] is not None and part["t"] is not None:
                    if part["coefficient"] / part["se"] != part["t"]:
                        raise ReportError(f"{name}/{r['name']}: t-ratio inconsistent")
            me = r["marginal_effects"]
            if me is not None and abs(math.fsum(me)) > ZERO_SUM_TOL:
                raise ReportError(f"{name}/{r['name']}: marginal effects do not sum to zero")


def render_report_text(doc: dict) -> str:
    parts = [render_section(sec) for sec in doc["strata"].values()]
    lr = doc.get("lr_pooled")
    if lr:
        parts.append("Likelihood-ratio test, pooled model vs separate strata\n"
                     f"  statistic {lr['statistic']:.2f}, df = {lr['df']}, p {lr['p_display']}\n")
    tr = doc.get("transfer")
    if tr:
        strata = tr["strata"]
        w = 30
        lines = ["Parameter transferability tests (rows: model a, columns: data b)",
                 f"{'a / b':<10}" + "".join(f"{s:>{w}}" for s in strata)]
        for a in strata:
            cells = []
            for b in strata:
                cell = tr["cells"][a][b]
                if a == b:
                    txt = "-"
                elif "error" in cell:
                    txt = "mismatch"
                else:
                    p = format_p(cell["p_value"])
                    txt = f"{cell['statistic']:.2f}, df={cell['df']} (p {p})" if p.startswith("<") \
                        else f"{cell['statistic']:.2f}, df={cell['df']} (p={p})"
                cells.append(f"{txt:>{w}}")
            lines.append(f"{a:<10}" + "".join(cells))
        parts.append("\n".join(lines) + "\n")
    if doc.get("comparison"):
        parts.append(render_comparison_text(ComparisonMatrix.from_dict(doc["comparison"])))
    return "\n".join(parts)


def write_report(doc: dict, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path, text_path = out_dir / "report.json", out_dir / "report.txt"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(render_report_text(doc))
    return json_path, text_path
