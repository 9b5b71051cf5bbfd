"""Model specifications and the packed parameter layout.

A specification lists parameter definitions.  Each definition puts one
variable (or the constant) into the utility of one severity level, either with
a fixed coefficient or with a random one drawn from a mixing distribution.

Layout: definitions in declaration order; a fixed definition takes one slot,
a random one takes two adjacent slots ``<name>.mean`` and ``<name>.sd``.

Mixing distributions, for a standard-normal draw ``z`` and ``u = Phi(z)``:

* ``normal``: ``mean + |sd| * z``
* ``lognormal``: ``exp(mean + |sd| * z)`` (mean and sd of the underlying normal)
* ``uniform``: ``mean + |sd| * (2u - 1)`` (centre and half-width)
* ``triangular``: ``mean + |sd| * t(u)`` with ``t`` the symmetric triangular
  quantile on [-1, 1] (centre and half-width)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset, LEVELS

CONSTANT = "CONSTANT"
KINDS = ("fixed", "random")
DISTRIBUTIONS = ("normal", "lognormal", "triangular", "uniform")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterDef:
    name: str
    target_level: str
    variable: str
    kind: str = "fixed"
    distribution: str | None = None

    @property
    def is_random(self) -> bool:
        return self.kind == "random"

    @property
    def is_constant(self) -> bool:
        return self.variable == CONSTANT

    def to_dict(self) -> dict:
        d = {"name": self.name, "level": self.target_level, "variable": self.variable,
             "kind": self.kind}
        if self.distribution is not None:
            d["distribution"] = self.distribution
        return d


_DEF_KEYS = {"name", "level", "variable", "kind", "distribution"}


@dataclass(frozen=True)
class ModelSpec:
    defs: tuple[ParameterDef, ...]
    base_level: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "defs", tuple(self.defs))

    @property
    def levels(self) -> tuple[str, ...]:
        return LEVELS

    @property
    def random_defs(self) -> tuple[ParameterDef, ...]:
        return tuple(d for d in self.defs if d.is_random)

    @property
    def n_random(self) -> int:
        return len(self.random_defs)

    @property
    def variables(self) -> tuple[str, ...]:
        """Non-constant variables in first-appearance order."""
        seen: list[str] = []
        for d in self.defs:
            if not d.is_constant and d.variable not in seen:
                seen.append(d.variable)
        return tuple(seen)

    def to_dict(self) -> dict:
        return {"base_level": self.base_level, "defs": [d.to_dict() for d in self.defs]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        unknown = set(d) - {"base_level", "defs"}
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        defs = []
        for i, raw in enumerate(d.get("defs", [])):
            unknown = set(raw) - _DEF_KEYS
            if unknown:
                raise SpecError(f"def {i}: unknown keys {sorted(unknown)}")
            missing = {"name", "level", "variable"} - set(raw)
            if missing:
                raise SpecError(f"def {i}: missing keys {sorted(missing)}")
            defs.append(ParameterDef(raw["name"], raw["level"], raw["variable"],
                                     raw.get("kind", "fixed"), raw.get("distribution")))
        return cls(tuple(defs), d.get("base_level", "none"))

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def validate_spec(spec: ModelSpec, dataset: Dataset | Iterable[str] | None = None) -> list[str]:
    """Return every violated rule; an empty list means the model can be estimated."""
    if isinstance(dataset, Dataset):
        names = set(dataset.indicator_names)
    elif dataset is None:
        names = None
    else:
        names = set(dataset)

    violations = []
    if spec.base_level not in LEVELS:
        violations.append(f"unknown base level {spec.base_level!r}")
    if not spec.defs:
        violations.append("no parameters")
    seen_names: set[str] = set()
    seen_pairs: set[tuple[str, str]] = set()
    n_constants = 0
    for d in spec.defs:
        if d.name in seen_names:
            violations.append(f"duplicate parameter name {d.name!r}")
        seen_names.add(d.name)
        if d.target_level not in LEVELS:
            violations.append(f"unknown level {d.target_level!r} in {d.name!r}")
        pair = (d.target_level, d.variable)
        if pair in seen_pairs:
            violations.append(f"duplicate variable {d.variable!r} on level {d.target_level!r}")
        seen_pairs.add(pair)
        if d.is_constant:
            n_constants += 1
            if d.target_level == spec.base_level:
                violations.append(f"constant on base level ({d.name!r})")
        elif names is not None and d.variable not in names:
            violations.append(f"unknown variable {d.variable!r} in {d.name!r}")
        if d.kind not in KINDS:
            violations.append(f"unknown kind {d.kind!r} in {d.name!r}")
        if d.is_random and d.distribution not in DISTRIBUTIONS:
            violations.append(f"random parameter {d.name!r} needs a distribution from {DISTRIBUTIONS}")
        if not d.is_random and d.distribution is not None:
            violations.append(f"fixed parameter {d.name!r} must not carry a distribution")
    if n_constants > 2:
        violations.append(f"{n_constants} constants; at most 2 are identified")
    return violations


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    slices: tuple[slice, ...]  # one per def
    length: int

    def index(self, name: str) -> int:
        return self.names.index(name)


def parameter_layout(spec: ModelSpec) -> Layout:
    names, slices = [], []
    pos = 0
    for d in spec.defs:
        if d.is_random:
            names += [f"{d.name}.mean", f"{d.name}.sd"]
            slices.append(slice(pos, pos + 2))
            pos += 2
        else:
            names.append(d.name)
            slices.append(slice(pos, pos + 1))
            pos += 1
    return Layout(tuple(names), tuple(slices), pos)


def unpack(spec: ModelSpec, theta: Sequence[float]) -> dict[str, float | tuple[float, float]]:
    """``{def name: beta}`` for fixed defs and ``{def name: (mean, sd)}`` for random ones."""
    layout = parameter_layout(spec)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.length,):
        raise SpecError(f"theta has length {theta.size}, layout needs {layout.length}")
    out: dict[str, float | tuple[float, float]] = {}
    for d, sl in zip(spec.defs, layout.slices):
        vals = theta[sl]
        out[d.name] = (float(vals[0]), float(vals[1])) if d.is_random else float(vals[0])
    return out


def pack(spec: ModelSpec, values: Mapping[str, float | Sequence[float]]) -> np.ndarray:
    layout = parameter_layout(spec)
    theta = np.empty(layout.length)
    for d, sl in zip(spec.defs, layout.slices):
        v = values[d.name]
        theta[sl] = v if d.is_random else [v]
    return theta


def start_point(spec: ModelSpec, sd_start: float = 0.1) -> np.ndarray:
    """Zeros, except spread slots at ``sd_start`` (zero spread is a stationary point)."""
    theta = np.zeros(parameter_layout(spec).length)
    for d, sl in zip(spec.defs, parameter_layout(spec).slices):
        if d.is_random:
            theta[sl.start + 1] = sd_start
    return theta
