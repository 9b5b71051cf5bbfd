"""Marginal effects, random-parameter shares and likelihood-ratio tests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import EXCLUSIVE_GROUPS, LEVELS, Dataset, ExclusiveGroup
from .estimation import EstimationResult, draws_for
from .halton import DrawMatrix, norm_cdf
from .likelihood import SimulatedLikelihood, design_columns
from .modelspec import ModelSpec


class SpecificationMismatchError(ValueError):
    """An LR statistic came out negative beyond numerical noise."""


LR_NOISE = 1e-6


# --------------------------------------------------------------------------
# chi-square tail

_EPS = 1e-16
_TINY = 1e-300


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi_square_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution, ``Q(df/2, x/2)``."""
    if df < 1 or not math.isfinite(df):
        raise ValueError("df must be >= 1")
    if x < 0 or math.isnan(x):
        raise ValueError("x must be >= 0")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    a, half = 0.5 * df, 0.5 * x
    if half < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, half))
    return _gamma_q_contfrac(a, half)


def format_p(p: float) -> str:
    return "< 0.001" if p < 0.001 else f"{p:.3f}"


# --------------------------------------------------------------------------
# shares of a normal mixing distribution


def share_below_zero(mu: float, sigma: float) -> float:
    """Mass of N(mu, sigma^2) below zero."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return float(norm_cdf(-mu / sigma))


def share_above_zero(mu: float, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return float(norm_cdf(mu / sigma))


# --------------------------------------------------------------------------
# likelihood-ratio tests


@dataclass(frozen=True)
class LRTestResult:
    statistic: float
    df: int
    p_value: float
    kind: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "statistic": self.statistic, "df": self.df,
                "p_value": self.p_value, "p_display": format_p(self.p_value)}


def _lr(statistic: float, df: int, kind: str, message: str) -> LRTestResult:
    if df < 1:
        raise ValueError("df must be >= 1")
    if statistic < -LR_NOISE:
        raise SpecificationMismatchError(f"{message} (statistic {statistic:.6g})")
    statistic = max(statistic, 0.0)
    return LRTestResult(statistic, int(df), chi_square_sf(statistic, df), kind)


def lr_pooled_test(ll_full: float, ll_strata: Sequence[float], df: int) -> LRTestResult:
    """-2 [LL(pooled) - sum of stratum LLs], all fitted with the same specification."""
    stat = -2.0 * (ll_full - math.fsum(ll_strata))
    return _lr(stat, df, "pooled_vs_strata", "strata fit worse than pooled: specification mismatch")


def pooled_df(n_params_strata: Iterable[int], n_params_full: int) -> int:
    return sum(n_params_strata) - n_params_full


def lr_transferability(ll_a_on_b_data: float, ll_b: float, df: int) -> LRTestResult:
    """-2 [LL(spec a re-estimated on b's data) - LL(b's own converged model)].

    ``df`` is the parameter count of specification a.
    """
    stat = -2.0 * (ll_a_on_b_data - ll_b)
    return _lr(stat, df, "transferability",
               "transferred specification fits better than the destination's own model")


# --------------------------------------------------------------------------
# marginal effects


@dataclass(frozen=True)
class MarginalEffectsTable:
    variables: tuple[str, ...]
    effects: np.ndarray          # (n_variables, 3), columns follow LEVELS
    stratum: str = ""

    def effect(self, variable: str, level: str) -> float:
        return float(self.effects[self.variables.index(variable), LEVELS.index(level)])

    def row(self, variable: str) -> np.ndarray:
        return self.effects[self.variables.index(variable)]

    def to_dict(self) -> dict:
        return {"stratum": self.stratum, "levels": list(LEVELS),
                "effects": {v: [float(e) for e in row] for v, row in zip(self.variables, self.effects)}}

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalEffectsTable":
        variables = tuple(d["effects"])
        effects = np.array([d["effects"][v] for v in variables], dtype=float).reshape(-1, len(LEVELS))
        return cls(variables, effects, d.get("stratum", ""))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "MarginalEffectsTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _group_of(variable: str, groups: Sequence[ExclusiveGroup]) -> ExclusiveGroup | None:
    for g in groups:
        if variable in g.members:
            return g
    return None


def counterfactual_indicators(X: np.ndarray, names: Sequence[str], variable: str, value: int,
                              groups: Sequence[ExclusiveGroup] = ()) -> np.ndarray:
    """Copy of ``X`` with ``variable`` forced to ``value``, keeping exclusive groups coherent.

    Switching on zeroes the siblings.  Switching off leaves rows that were
    already 0 untouched; rows that had the variable on move to the group's
    reference category (or the first other member when the variable is the
    reference), or to all-zero in a partial group.
    """
    names = list(names)
    X = np.array(X, dtype=float, copy=True)
    k = names.index(variable)
    group = _group_of(variable, groups)
    siblings = [] if group is None else [m for m in group.members if m != variable and m in names]
    if value == 1:
        for m in siblings:
            X[:, names.index(m)] = 0.0
        X[:, k] = 1.0
        return X
    was_on = X[:, k] == 1.0
    X[:, k] = 0.0
    if group is not None and group.complete:
        ref = group.reference if group.reference != variable else next(
            m for m in group.members if m != variable)
        if ref in names:
            X[was_on, names.index(ref)] = 1.0
    return X


def default_groups(names: Sequence[str]) -> tuple[ExclusiveGroup, ...]:
    present = set(names)
    return tuple(g for g in EXCLUSIVE_GROUPS if set(g.members) <= present)


def marginal_effects(spec: ModelSpec, result: EstimationResult, dataset: Dataset,
                     draws: DrawMatrix | None = None, variables: Sequence[str] | None = None,
                     groups: Sequence[ExclusiveGroup] | None = None) -> MarginalEffectsTable:
    """Sample-averaged discrete change in each level's probability as an indicator goes 0 -> 1.

    Random parameters stay integrated over their estimated distributions.
    """
    if spec != result.spec:
        raise ValueError("result was estimated with a different specification")
    if variables is None:
        variables = spec.variables
    for v in variables:
        if v not in spec.variables:
            raise KeyError(f"variable {v!r} is not in the model specification")
    if groups is None:
        groups = default_groups(dataset.indicator_names)
    if draws is None:
        draws = draws_for(spec, len(dataset), result.options)
    lik = SimulatedLikelihood(spec, dataset, draws)
    names = dataset.indicator_names
    rows = []
    for v in variables:
        on = design_columns(spec, names, counterfactual_indicators(dataset.X, names, v, 1, groups))
        off = design_columns(spec, names, counterfactual_indicators(dataset.X, names, v, 0, groups))
        diff = lik.probabilities(result.theta_hat, on) - lik.probabilities(result.theta_hat, off)
        rows.append(diff.mean(axis=0))
    effects = np.array(rows, dtype=float).reshape(len(rows), len(LEVELS))
    return MarginalEffectsTable(tuple(variables), effects, dataset.stratum)
