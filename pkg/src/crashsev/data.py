"""Crash record ingestion, indicator coding, weather stratification and summaries.

Raw crash rows come in as CSV. A schema (JSON) maps CSV columns onto
:class:`CrashRecord` fields and raw cell codes onto the enum values used here.
Records are then coded into 0/1 indicators, split by weather condition and
written out as JSON lines, one :class:`ChoiceObservation` per line.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

LEVELS = ("major", "minor", "none")

SEVERITY5 = ("fatal", "disabling", "evident", "possible", "none")
WEATHER = ("normal", "rain", "snow", "other")
STRATA = ("normal", "rain", "snow")

ENUMS: dict[str, tuple[str, ...]] = {
    "severity5": SEVERITY5,
    "weather": WEATHER,
    "area": ("rural", "urban"),
    "alignment": ("straight", "curve"),
    "manner": ("rear_end", "sideswipe", "other_manner"),
    "harmful_event": ("motor_vehicle_in_transport", "fixed_or_other_object",
                      "ran_off_road", "other_event"),
    "lighting": ("daylight", "dark_lighted", "dark_unlighted", "other_light"),
    "truck_type": ("single_unit", "truck_trailer", "tractor_semi", "tractor_double"),
    "surface": ("asphalt", "other_surface"),
    "route": ("interstate", "non_interstate"),
    "day": ("weekday", "weekend"),
    "driver_sex": ("male", "female"),
    "location_type": ("segment", "intersection"),
}
INTEGER_FIELDS = ("speed_limit", "lane_count", "aadt")
RECORD_FIELDS = (
    "crash_id", "severity5", "weather", "area", "alignment", "manner",
    "harmful_event", "lighting", "truck_type", "speed_limit", "lane_count",
    "aadt", "surface", "route", "crash_time", "day", "driver_sex",
    "restraint_used", "location_type",
)

INDICATOR_NAMES = (
    "male", "restraint", "rural", "urban", "curve", "rear_end", "sideswipe",
    "object", "mvit", "ran_off", "daylight", "dark_lighted", "dark_unlighted",
    "single_unit", "truck_trailer", "truck_semi", "speed1", "speed2", "speed3",
    "lane1", "lane2", "aadt1", "aadt2", "aadt3", "aadt4", "asphalt",
    "interstate", "time1", "time2", "time3", "time4", "weekday", "weekend",
)


@dataclass(frozen=True)
class ExclusiveGroup:
    """Indicators of which at most one is 1.

    ``reference`` is the category switched on when a member is toggled off in a
    complete group (exactly one member is always 1).  Partial groups have no
    reference: all members may be 0 at once.
    """

    members: tuple[str, ...]
    reference: str | None = None

    @property
    def complete(self) -> bool:
        return self.reference is not None


EXCLUSIVE_GROUPS = (
    ExclusiveGroup(("rural", "urban"), reference="urban"),
    ExclusiveGroup(("speed1", "speed2", "speed3"), reference="speed1"),
    ExclusiveGroup(("lane1", "lane2"), reference="lane1"),
    ExclusiveGroup(("aadt1", "aadt2", "aadt3", "aadt4"), reference="aadt1"),
    ExclusiveGroup(("time1", "time2", "time3", "time4"), reference="time4"),
    ExclusiveGroup(("weekday", "weekend"), reference="weekday"),
    ExclusiveGroup(("daylight", "dark_lighted", "dark_unlighted")),
    ExclusiveGroup(("rear_end", "sideswipe")),
    ExclusiveGroup(("object", "mvit", "ran_off")),
    ExclusiveGroup(("single_unit", "truck_trailer", "truck_semi")),
)


class SchemaError(ValueError):
    """The CSV header or schema file cannot be used at all."""


@dataclass(frozen=True)
class CrashRecord:
    crash_id: str
    severity5: str
    weather: str
    area: str
    alignment: str
    manner: str
    harmful_event: str
    lighting: str
    truck_type: str
    speed_limit: int
    lane_count: int
    aadt: int
    surface: str
    route: str
    crash_time: int
    day: str
    driver_sex: str
    restraint_used: bool
    location_type: str

    def __post_init__(self):
        for name, allowed in ENUMS.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not 5 <= self.speed_limit <= 85:
            raise ValueError("speed_limit out of range")
        if self.lane_count < 1:
            raise ValueError("lane_count out of range")
        if self.aadt < 0:
            raise ValueError("aadt out of range")
        if not 0 <= self.crash_time <= 1439:
            raise ValueError("crash_time out of range")


@dataclass(frozen=True)
class ChoiceObservation:
    chosen: str
    covariates: Mapping[str, int]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable coded observations for one stratum.

    ``X`` holds the indicators (rows follow ingestion order, columns follow
    ``indicator_names``) and ``chosen`` the level index into :data:`LEVELS`.
    """

    stratum: str
    indicator_names: tuple[str, ...]
    X: np.ndarray
    chosen: np.ndarray

    def __post_init__(self):
        chosen = np.array(self.chosen, dtype=np.int64).reshape(-1)
        X = np.array(self.X, dtype=float)
        X = X.reshape(chosen.size if X.size == 0 else -1, len(self.indicator_names))
        if X.shape[0] != chosen.shape[0]:
            raise ValueError("X and chosen disagree on the number of observations")
        if chosen.size and (chosen.min() < 0 or chosen.max() >= len(LEVELS)):
            raise ValueError("chosen level index out of range")
        X.flags.writeable = False
        chosen.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "chosen", chosen)
        object.__setattr__(self, "indicator_names", tuple(self.indicator_names))

    def __len__(self) -> int:
        return int(self.chosen.shape[0])

    @property
    def n_obs(self) -> int:
        return len(self)

    @property
    def observations(self) -> list[ChoiceObservation]:
        names = self.indicator_names
        return [
            ChoiceObservation(LEVELS[c], dict(zip(names, (int(v) for v in row))))
            for row, c in zip(self.X, self.chosen)
        ]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.indicator_names.index(name)]

    @classmethod
    def from_observations(cls, stratum: str, observations: Sequence[ChoiceObservation],
                          indicator_names: Sequence[str] | None = None) -> "Dataset":
        if indicator_names is None:
            indicator_names = tuple(observations[0].covariates) if observations else ()
        names = tuple(indicator_names)
        X = np.zeros((len(observations), len(names)))
        chosen = np.zeros(len(observations), dtype=np.int64)
        for n, obs in enumerate(observations):
            if set(obs.covariates) != set(names):
                raise ValueError(f"observation {n} does not carry indicators {names}")
            X[n] = [obs.covariates[k] for k in names]
            chosen[n] = LEVELS.index(obs.chosen)
        return cls(stratum, names, X, chosen)

    def with_stratum(self, stratum: str) -> "Dataset":
        return Dataset(stratum, self.indicator_names, self.X, self.chosen)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            self.dump_jsonl(fh)

    def dump_jsonl(self, fh: TextIO) -> None:
        names = self.indicator_names
        for row, c in zip(self.X, self.chosen):
            line = {
                "stratum": self.stratum,
                "chosen": LEVELS[c],
                "covariates": {k: int(v) for k, v in zip(names, row)},
            }
            fh.write(json.dumps(line) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path, stratum: str | None = None) -> "Dataset":
        observations = []
        found_stratum = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                found_stratum = rec.get("stratum", found_stratum)
                observations.append(ChoiceObservation(rec["chosen"], rec["covariates"]))
        return cls.from_observations(stratum or found_stratum or "pooled", observations)


# --------------------------------------------------------------------------
# parsing


@dataclass(frozen=True)
class RejectedRow:
    line: int
    crash_id: str
    reason: str


@dataclass
class ParseResult:
    records: list[CrashRecord] = field(default_factory=list)
    rejects: list[RejectedRow] = field(default_factory=list)
    filtered: list[RejectedRow] = field(default_factory=list)


@dataclass(frozen=True)
class Schema:
    """Maps CSV columns and raw codes onto :class:`CrashRecord` fields.

    ``columns`` maps a record field to its CSV header name.  ``day`` may be
    replaced by a ``crash_date`` column (ISO date), from which Saturday and
    Sunday are coded as weekend.  ``codings`` maps a field to ``{raw: value}``;
    a raw code mapped to ``null`` drops the row as out of scope (e.g. vehicle
    types that are not trucks).
    """

    columns: Mapping[str, str]
    codings: Mapping[str, Mapping[str, str | None]] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "Schema":
        return cls({f: f for f in RECORD_FIELDS})

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        unknown = set(d) - {"columns", "codings"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        columns = dict(d.get("columns") or {f: f for f in RECORD_FIELDS})
        allowed = set(RECORD_FIELDS) | {"crash_date"}
        bad = set(columns) - allowed
        if bad:
            raise SchemaError(f"schema maps unknown fields: {sorted(bad)}")
        codings = {k: dict(v) for k, v in (d.get("codings") or {}).items()}
        bad = set(codings) - allowed
        if bad:
            raise SchemaError(f"schema codes unknown fields: {sorted(bad)}")
        return cls(columns, codings)

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"columns": dict(self.columns), "codings": {k: dict(v) for k, v in self.codings.items()}}

    def required_fields(self) -> list[str]:
        fields = [f for f in RECORD_FIELDS if f != "day"]
        if "crash_date" not in self.columns:
            fields.append("day")
        return fields


class _RowError(Exception):
    pass


class _RowFiltered(Exception):
    pass


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_time(raw: str) -> int:
    if ":" in raw:
        hh, mm = raw.split(":")[:2]
        return int(hh) * 60 + int(mm)
    return int(raw)


def _parse_int(raw: str) -> int:
    value = float(raw.replace(",", ""))
    if not value.is_integer():
        raise ValueError(raw)
    return int(value)


def _decode(schema: Schema, name: str, raw: str):
    raw = raw.strip()
    coding = schema.codings.get(name)
    if coding is not None:
        if raw not in coding:
            raise _RowError(f"{name} code {raw!r} not in schema coding")
        value = coding[raw]
        if value is None:
            raise _RowFiltered(f"filtered {name}={raw}")
        raw = str(value)
    try:
        if name in ENUMS:
            value = raw.lower()
            if value not in ENUMS[name]:
                raise ValueError(raw)
            return value
        if name in INTEGER_FIELDS:
            return _parse_int(raw)
        if name == "crash_time":
            return _parse_time(raw)
        if name == "restraint_used":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if name == "crash_date":
            return "weekend" if _dt.date.fromisoformat(raw).weekday() >= 5 else "weekday"
        return raw
    except ValueError:
        raise _RowError(f"{name} unparseable") from None


def parse_records(csv_stream: TextIO | Iterable[str], schema: Schema | None = None,
                  strict: bool = False) -> ParseResult:
    """Read crash rows, collecting rejected rows instead of stopping on them.

    Raises :class:`SchemaError` when a required column is missing, and
    ``ValueError`` on the first bad row when ``strict`` is set.
    """
    schema = schema or Schema.default()
    reader = csv.DictReader(csv_stream)
    header = reader.fieldnames or []
    for name in schema.required_fields():
        column = schema.columns.get(name)
        if column is None or column not in header:
            raise SchemaError(f"missing required column {column or name!r} for field {name!r}")

    result = ParseResult()
    date_column = schema.columns.get("crash_date")
    for line_no, row in enumerate(reader, start=2):
        crash_id = (row.get(schema.columns["crash_id"]) or "").strip()
        try:
            values = {}
            for name in RECORD_FIELDS:
                if name == "day" and date_column is not None:
                    values["day"] = _decode(schema, "crash_date", row.get(date_column) or "")
                    continue
                cell = row.get(schema.columns[name])
                if cell is None:
                    raise _RowError(f"{name} missing")
                values[name] = _decode(schema, name, cell)
            try:
                record = CrashRecord(**values)
            except ValueError as exc:
                raise _RowError(str(exc)) from None
        except _RowFiltered as exc:
            result.filtered.append(RejectedRow(line_no, crash_id, str(exc)))
            continue
        except _RowError as exc:
            if strict:
                raise ValueError(f"line {line_no}: {exc}") from None
            result.rejects.append(RejectedRow(line_no, crash_id, str(exc)))
            logger.info("rejected line %d (%s): %s", line_no, crash_id, exc)
            continue
        result.records.append(record)
    return result


def read_csv(path: str | Path, schema: Schema | None = None, strict: bool = False) -> ParseResult:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_records(fh, schema, strict=strict)


def write_csv(records: Sequence[CrashRecord], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for rec in records:
        row = []
        for name in RECORD_FIELDS:
            value = getattr(rec, name)
            if name == "restraint_used":
                value = int(value)
            elif name == "crash_time":
                value = f"{value // 60:02d}:{value % 60:02d}"
            row.append(value)
        writer.writerow(row)


# --------------------------------------------------------------------------
# coding


def consolidate_severity(severity5: str) -> str:
    if severity5 in ("fatal", "disabling"):
        return "major"
    if severity5 in ("evident", "possible"):
        return "minor"
    if severity5 == "none":
        return "none"
    raise ValueError(f"unknown severity {severity5!r}")


def _speed_bin(speed: int) -> str:
    if speed <= 40:
        return "speed1"
    if speed >= 65:
        return "speed3"
    # 41-44 and 61-64 fall between the published bins; both go to the middle one
    return "speed2"


def _aadt_bin(aadt: int) -> str:
    if aadt <= 15_000:
        return "aadt1"
    if aadt <= 50_000:
        return "aadt2"
    if aadt <= 100_000:
        return "aadt3"
    return "aadt4"


def _time_bin(minutes: int) -> str:
    if 420 <= minutes < 600:
        return "time1"
    if 600 <= minutes < 960:
        return "time2"
    if 960 <= minutes < 1140:
        return "time3"
    return "time4"


def derive_indicators(record: CrashRecord) -> dict[str, int]:
    on = {
        _speed_bin(record.speed_limit),
        "lane1" if record.lane_count < 4 else "lane2",
        _aadt_bin(record.aadt),
        _time_bin(record.crash_time),
        record.day,
        record.area,
    }
    if record.driver_sex == "male":
        on.add("male")
    if record.restraint_used:
        on.add("restraint")
    if record.alignment == "curve":
        on.add("curve")
    if record.manner in ("rear_end", "sideswipe"):
        on.add(record.manner)
    on.add({"motor_vehicle_in_transport": "mvit", "fixed_or_other_object": "object",
            "ran_off_road": "ran_off"}.get(record.harmful_event, ""))
    if record.lighting != "other_light":
        on.add(record.lighting)
    on.add({"single_unit": "single_unit", "truck_trailer": "truck_trailer",
            "tractor_semi": "truck_semi"}.get(record.truck_type, ""))
    if record.surface == "asphalt":
        on.add("asphalt")
    if record.route == "interstate":
        on.add("interstate")
    return {name: int(name in on) for name in INDICATOR_NAMES}


def code_observation(record: CrashRecord) -> ChoiceObservation:
    return ChoiceObservation(consolidate_severity(record.severity5), derive_indicators(record))


def _records_to_dataset(stratum: str, records: Sequence[CrashRecord]) -> Dataset:
    X = np.array([[ind[k] for k in INDICATOR_NAMES] for ind in map(derive_indicators, records)],
                 dtype=float).reshape(len(records), len(INDICATOR_NAMES))
    chosen = np.array([LEVELS.index(consolidate_severity(r.severity5)) for r in records],
                      dtype=np.int64)
    return Dataset(stratum, INDICATOR_NAMES, X, chosen)


@dataclass
class StratifyResult:
    datasets: dict[str, Dataset]
    excluded: list[tuple[str, str]]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.datasets.items()}


def stratify(records: Sequence[CrashRecord]) -> StratifyResult:
    """Split segment crashes by weather; 'other' weather and intersections are excluded."""
    kept: dict[str, list[CrashRecord]] = {s: [] for s in STRATA}
    pooled: list[CrashRecord] = []
    excluded = []
    for rec in records:
        if rec.location_type == "intersection":
            excluded.append((rec.crash_id, "intersection"))
        elif rec.weather == "other":
            excluded.append((rec.crash_id, "weather other"))
        else:
            kept[rec.weather].append(rec)
            pooled.append(rec)
    datasets = {s: _records_to_dataset(s, kept[s]) for s in STRATA}
    datasets["pooled"] = _records_to_dataset("pooled", pooled)
    for s in STRATA:
        if not kept[s]:
            warnings.warn(f"stratum {s!r} is empty", stacklevel=2)
    return StratifyResult(datasets, excluded)


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryTable:
    n: int
    level_counts: dict[str, int]
    level_percent: dict[str, float]
    means: dict[str, float]
    sds: dict[str, float]

    def to_dict(self) -> dict:
        return {"n": self.n, "level_counts": self.level_counts,
                "level_percent": self.level_percent, "means": self.means, "sds": self.sds}

    def render(self) -> str:
        lines = [f"Observations: {self.n:,}", "", f"{'Level':<8}{'Count':>10}{'%':>8}"]
        for lvl in LEVELS:
            lines.append(f"{lvl:<8}{self.level_counts[lvl]:>10,}{self.level_percent[lvl]:>8.1f}")
        lines += ["", f"{'Indicator':<16}{'Mean':>8}{'SD':>8}"]
        for name in self.means:
            lines.append(f"{name:<16}{self.means[name]:>8.2f}{self.sds[name]:>8.2f}")
        return "\n".join(lines) + "\n"


def summarize(dataset: Dataset) -> SummaryTable:
    n = len(dataset)
    if n == 0:
        raise ValueError("no observations")
    counts = np.bincount(dataset.chosen, minlength=len(LEVELS))
    level_counts = {lvl: int(c) for lvl, c in zip(LEVELS, counts)}
    level_percent = {lvl: 100.0 * c / n for lvl, c in level_counts.items()}
    # sums of 0/1 data are exact integers, so row order cannot change them
    sums = dataset.X.sum(axis=0)
    sumsq = (dataset.X ** 2).sum(axis=0)
    means, sds = {}, {}
    for k, name in enumerate(dataset.indicator_names):
        means[name] = float(sums[k] / n)
        if n > 1:
            ss = (sumsq[k] * n - sums[k] ** 2) / n
            sds[name] = math.sqrt(max(ss, 0.0) / (n - 1))
        else:
            sds[name] = 0.0
    return SummaryTable(n, level_counts, level_percent, means, sds)
