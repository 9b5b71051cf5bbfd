"""Synthetic choice data from known parameters, and brute-force probability oracles.

Generation uses numpy's seeded PCG64 generator, never the Halton sequence, so
the data and the estimation draws are unrelated.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import LEVELS, CrashRecord, Dataset, ChoiceObservation, derive_indicators
from .modelspec import CONSTANT, ModelSpec, parameter_layout, validate_spec


@dataclass(frozen=True)
class CovariateLaw:
    """Bernoulli rates for free indicators and categorical laws for exclusive groups.

    ``groups`` maps a tuple of member names to their probabilities; when the
    probabilities sum to less than one the remainder is the all-zero category.
    """

    rates: Mapping[str, float] = field(default_factory=dict)
    groups: Mapping[tuple[str, ...], Sequence[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.rates.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"rate for {name!r} outside [0, 1]")
        for members, probs in self.groups.items():
            if len(members) != len(probs):
                raise ValueError(f"group {members} has {len(probs)} probabilities")
            if min(probs) < 0 or sum(probs) > 1 + 1e-12:
                raise ValueError(f"group {members} probabilities are not a distribution")

    @property
    def names(self) -> tuple[str, ...]:
        out = list(self.rates)
        for members in self.groups:
            out += [m for m in members if m not in out]
        return tuple(out)

    def to_dict(self) -> dict:
        return {"rates": dict(self.rates),
                "groups": [{"members": list(m), "probs": list(p)} for m, p in self.groups.items()]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateLaw":
        groups = {tuple(g["members"]): tuple(g["probs"]) for g in d.get("groups", [])}
        return cls(dict(d.get("rates", {})), groups)


@dataclass(frozen=True)
class GenConfig:
    spec: ModelSpec
    theta_true: np.ndarray
    n_obs: int
    seed: int
    covariate_law: CovariateLaw = field(default_factory=CovariateLaw)
    stratum: str = "synthetic"

    def indicator_names(self) -> tuple[str, ...]:
        names = list(self.covariate_law.names)
        for v in self.spec.variables:
            if v not in names:
                names.append(v)
        return tuple(names)


def _draw_covariates(rng: np.random.Generator, names, law: CovariateLaw, n: int) -> np.ndarray:
    X = np.zeros((n, len(names)))
    for members, probs in law.groups.items():
        probs = np.asarray(probs, dtype=float)
        full = np.append(probs, max(0.0, 1.0 - probs.sum()))
        cat = rng.choice(len(full), size=n, p=full / full.sum())
        for j, m in enumerate(members):
            X[:, names.index(m)] = cat == j
    grouped = {m for members in law.groups for m in members}
    for j, name in enumerate(names):
        if name in grouped:
            continue
        X[:, j] = rng.random(n) < law.rates.get(name, 0.5)
    return X


def _realized_coefficients(rng, d, mean, sd, n):
    z = rng.standard_normal(n)
    scale = abs(sd)
    if d.distribution == "normal":
        return mean + scale * z
    if d.distribution == "lognormal":
        return np.exp(mean + scale * z)
    u = rng.random(n)
    if d.distribution == "uniform":
        return mean + scale * (2.0 * u - 1.0)
    if d.distribution == "triangular":
        return mean + scale * np.where(u < 0.5, np.sqrt(2 * u) - 1, 1 - np.sqrt(2 * (1 - u)))
    raise ValueError(f"unknown distribution {d.distribution!r}")


def generate_dataset(config: GenConfig) -> Dataset:
    """Draw covariates, realise each observation's coefficients, then its chosen level."""
    spec = config.spec
    names = config.indicator_names()
    problems = validate_spec(spec, names)
    if problems:
        raise ValueError("; ".join(problems))
    theta = np.asarray(config.theta_true, dtype=float)
    layout = parameter_layout(spec)
    if theta.shape != (layout.length,):
        raise ValueError(f"theta_true has length {theta.size}, layout needs {layout.length}")
    rng = np.random.default_rng(config.seed)
    n = config.n_obs
    X = _draw_covariates(rng, names, config.covariate_law, n)
    V = np.zeros((n, len(LEVELS)))
    for d, sl in zip(spec.defs, layout.slices):
        x = np.ones(n) if d.variable == CONSTANT else X[:, names.index(d.variable)]
        if d.is_random:
            beta = _realized_coefficients(rng, d, theta[sl.start], theta[sl.start + 1], n)
        else:
            beta = theta[sl.start]
        V[:, LEVELS.index(d.target_level)] += beta * x
    e = np.exp(V - V.max(axis=1, keepdims=True))
    P = e / e.sum(axis=1, keepdims=True)
    u = rng.random(n)
    chosen = (u[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    return Dataset(config.stratum, names, X, chosen)


def write_theta_sidecar(path: str | Path, config: GenConfig) -> None:
    layout = parameter_layout(config.spec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"names": list(layout.names),
                   "theta_true": [float(v) for v in config.theta_true],
                   "n_obs": config.n_obs, "seed": config.seed,
                   "spec": config.spec.to_dict(),
                   "covariate_law": config.covariate_law.to_dict()}, fh, indent=2)
        fh.write("\n")


# --------------------------------------------------------------------------
# quadrature oracle


def _hermite_rule(n: int):
    """Nodes and weights for E[f(Z)], Z standard normal (probabilists' Hermite)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / math.sqrt(2.0 * math.pi)


def _coefficient_at(d, mean, sd, z):
    scale = abs(sd)
    if d.distribution == "normal":
        return mean + scale * z
    if d.distribution == "lognormal":
        return math.exp(mean + scale * z)
    u = 0.5 * math.erfc(-z / math.sqrt(2.0))
    if d.distribution == "uniform":
        return mean + scale * (2.0 * u - 1.0)
    if d.distribution == "triangular":
        t = math.sqrt(2 * u) - 1 if u < 0.5 else 1 - math.sqrt(2 * (1 - u))
        return mean + scale * t
    raise ValueError(f"unknown distribution {d.distribution!r}")


def _logit_at(spec, theta, covariates, z_point):
    layout = parameter_layout(spec)
    V = [0.0] * len(LEVELS)
    k = 0
    for d, sl in zip(spec.defs, layout.slices):
        x = 1.0 if d.variable == CONSTANT else float(covariates[d.variable])
        if d.is_random:
            beta = _coefficient_at(d, theta[sl.start], theta[sl.start + 1], z_point[k])
            k += 1
        else:
            beta = theta[sl.start]
        V[LEVELS.index(d.target_level)] += beta * x
    m = max(V)
    e = [math.exp(v - m) for v in V]
    s = sum(e)
    return np.array([v / s for v in e])


def brute_force_mixed_prob(spec: ModelSpec, theta, observation, n_grid: int = 201) -> np.ndarray:
    """Mixed-logit probabilities by tensor-product Gauss-Hermite quadrature.

    Independent of the simulation code path; supports at most two random
    parameters.
    """
    if spec.n_random > 2:
        raise NotImplementedError("quadrature oracle supports at most 2 random parameters")
    if n_grid < 51:
        raise ValueError("n_grid must be >= 51")
    theta = np.asarray(theta, dtype=float)
    cov = observation.covariates if isinstance(observation, ChoiceObservation) else observation
    if spec.n_random == 0:
        return _logit_at(spec, theta, cov, ())
    nodes, weights = _hermite_rule(n_grid)
    total = np.zeros(len(LEVELS))
    if spec.n_random == 1:
        for z, w in zip(nodes, weights):
            if w > 0:
                total += w * _logit_at(spec, theta, cov, (z,))
    else:
        for z1, w1 in zip(nodes, weights):
            for z2, w2 in zip(nodes, weights):
                w = w1 * w2
                if w > 0:
                    total += w * _logit_at(spec, theta, cov, (z1, z2))
    return total


# --------------------------------------------------------------------------
# raw crash records for end-to-end pipeline fixtures

# Rough category shares in the spirit of the published descriptive statistics.
_RAW_LAW = {
    "area": (("rural", "urban"), (0.38, 0.62)),
    "alignment": (("straight", "curve"), (0.89, 0.11)),
    "manner": (("rear_end", "sideswipe", "other_manner"), (0.19, 0.32, 0.49)),
    "harmful_event": (("motor_vehicle_in_transport", "fixed_or_other_object", "ran_off_road",
                       "other_event"), (0.63, 0.15, 0.12, 0.10)),
    "lighting": (("daylight", "dark_lighted", "dark_unlighted", "other_light"),
                 (0.74, 0.10, 0.14, 0.02)),
    "truck_type": (("single_unit", "truck_trailer", "tractor_semi", "tractor_double"),
                   (0.28, 0.10, 0.60, 0.02)),
    "surface": (("asphalt", "other_surface"), (0.95, 0.05)),
    "route": (("interstate", "non_interstate"), (0.52, 0.48)),
    "driver_sex": (("male", "female"), (0.96, 0.04)),
}
_SPEEDS = (25, 35, 40, 45, 50, 55, 60, 65, 70)
_SPEED_P = (0.05, 0.09, 0.06, 0.09, 0.10, 0.13, 0.07, 0.28, 0.13)
_LANES = (2, 3, 4, 5, 6)
_LANE_P = (0.22, 0.06, 0.50, 0.07, 0.15)


def simulate_crash_records(counts: Mapping[str, int], models: Mapping[str, tuple[ModelSpec, Sequence[float]]],
                           seed: int, n_intersection: int = 0) -> list[CrashRecord]:
    """Raw crash rows whose coded severity follows a known logit model per weather.

    ``counts`` gives rows per weather value (including ``other``); ``models``
    maps a weather value to ``(spec, theta)``, used on the coded indicators.
    Weather values without a model draw severity from an intercept-free
    uniform law.  Intersection rows are appended at the end.
    """
    rng = np.random.default_rng(seed)
    records = []
    start = _dt.date(2011, 1, 1)
    serial = 0
    plan = [(w, c, "segment") for w, c in counts.items()]
    plan.append(("normal", n_intersection, "intersection"))
    for weather, count, location in plan:
        spec_theta = models.get(weather)
        for _ in range(count):
            serial += 1
            fields = {name: opts[rng.choice(len(opts), p=p)] for name, (opts, p) in _RAW_LAW.items()}
            fields["speed_limit"] = int(rng.choice(_SPEEDS, p=_SPEED_P))
            fields["lane_count"] = int(rng.choice(_LANES, p=_LANE_P))
            fields["aadt"] = int(round(math.exp(rng.normal(10.2, 1.0))))
            fields["crash_time"] = int(rng.integers(0, 1440))
            date = start + _dt.timedelta(days=int(rng.integers(0, 1826)))
            fields["day"] = "weekend" if date.weekday() >= 5 else "weekday"
            fields["restraint_used"] = bool(rng.random() < 0.94)
            rec = CrashRecord(crash_id=f"C{serial:06d}", severity5="none", weather=weather,
                              location_type=location, **fields)
            if spec_theta is None:
                probs = np.full(len(LEVELS), 1.0 / len(LEVELS))
            else:
                spec, theta = spec_theta
                probs = _realized_logit(rng, spec, np.asarray(theta, float), derive_indicators(rec))
            level = LEVELS[min(int((rng.random() > np.cumsum(probs)[:-1]).sum()), 2)]
            sev5 = {"major": ("fatal", "disabling"), "minor": ("evident", "possible"),
                    "none": ("none",)}[level]
            severity = sev5[int(rng.integers(0, len(sev5)))]
            records.append(CrashRecord(**{**rec.__dict__, "severity5": severity}))
    return records


def _realized_logit(rng, spec, theta, covariates):
    layout = parameter_layout(spec)
    V = np.zeros(len(LEVELS))
    for d, sl in zip(spec.defs, layout.slices):
        x = 1.0 if d.variable == CONSTANT else covariates[d.variable]
        if d.is_random:
            beta = _realized_coefficients(rng, d, theta[sl.start], theta[sl.start + 1], 1)[0]
        else:
            beta = theta[sl.start]
        V[LEVELS.index(d.target_level)] += beta * x
    e = np.exp(V - V.max())
    return e / e.sum()
