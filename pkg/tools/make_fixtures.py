"""Regenerate the bundled synthetic crash file, specifications and run config.

    python3 tools/make_fixtures.py
"""
from __future__ import annotations

import io
import json
from pathlib import Path

from crashsev.data import Schema, write_csv
from crashsev.modelspec import CONSTANT, ModelSpec, ParameterDef
from crashsev.synthetic import simulate_crash_records

OUT = Path(__file__).resolve().parents[1] / "src" / "crashsev" / "fixtures"
SEED = 20140601
COUNTS = {"normal": 6000, "rain": 2500, "snow": 2000, "other": 80}
N_INTERSECTION = 40


def fixed(name, level, variable):
    return ParameterDef(name, level, variable)


def random(name, level, variable):
    return ParameterDef(name, level, variable, kind="random", distribution="normal")


SPECS = {
    "normal": (ModelSpec((
        fixed("constant_major", "major", CONSTANT),
        fixed("constant_minor", "minor", CONSTANT),
        fixed("male", "major", "male"),
        fixed("lane2", "major", "lane2"),
        random("interstate", "minor", "interstate"),
        fixed("curve", "minor", "curve"),
        fixed("rural", "none", "rural"),
        fixed("daylight", "none", "daylight"),
    )), [-1.6, -0.9, -0.6, -0.8, 0.4, 1.6, 0.5, -0.5, 0.3]),
    "rain": (ModelSpec((
        fixed("constant_major", "major", CONSTANT),
        fixed("constant_minor", "minor", CONSTANT),
        fixed("weekend", "major", "weekend"),
        random("speed3", "minor", "speed3"),
        fixed("object", "major", "object"),
    )), [-1.8, -0.8, -0.7, 0.6, 1.5, 0.6]),
    "snow": (ModelSpec((
        fixed("constant_major", "major", CONSTANT),
        fixed("constant_minor", "minor", CONSTANT),
        fixed("truck_semi", "none", "truck_semi"),
        fixed("asphalt", "major", "asphalt"),
        fixed("curve", "minor", "curve"),
    )), [-2.2, -0.9, 0.4, 0.6, 0.7]),
}

POOLED = ModelSpec((
    fixed("constant_major", "major", CONSTANT),
    fixed("constant_minor", "minor", CONSTANT),
    fixed("male", "major", "male"),
    fixed("speed3", "minor", "speed3"),
    fixed("rural", "none", "rural"),
))

# rows a real extract would carry: one unparseable speed, one impossible time
BAD_ROWS = [
    "X000001,none,normal,rural,straight,rear_end,motor_vehicle_in_transport,daylight,"
    "tractor_semi,ninety,4,12000,asphalt,interstate,08:15,weekday,male,1,segment",
    "X000002,possible,rain,urban,curve,sideswipe,ran_off_road,dark_lighted,"
    "single_unit,55,2,9000,asphalt,non_interstate,25:10,weekend,female,0,segment",
]


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    records = simulate_crash_records(COUNTS, SPECS, SEED, N_INTERSECTION)
    buf = io.StringIO()
    write_csv(records, buf)
    lines = buf.getvalue().splitlines()
    lines[1 + 500:1 + 500] = BAD_ROWS
    (OUT / "crashes.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(OUT / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(Schema.default().to_dict(), fh, indent=2)
        fh.write("\n")
    for name, (spec, _) in SPECS.items():
        spec.dump(OUT / f"spec_{name}.json")
    POOLED.dump(OUT / "spec_pooled.json")
    config = {
        "input": "crashes.csv",
        "schema": "schema.json",
        "strata": ["normal", "rain", "snow"],
        "specs": {name: f"spec_{name}.json" for name in SPECS},
        "pooled_spec": "spec_pooled.json",
        "transfer": True,
        "options": {"n_draws": 100, "skip": 100, "max_iterations": 300},
        "significance_level": 0.90,
        "output_dir": "crashsev-output",
    }
    with open(OUT / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    truth = {name: {"spec": spec.to_dict(), "theta_true": theta} for name, (spec, theta) in SPECS.items()}
    with open(OUT / "truth.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": SEED, "counts": COUNTS, "n_intersection": N_INTERSECTION, "models": truth},
                  fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
