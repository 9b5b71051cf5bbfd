import numpy as np
import pytest

from crashsev.data import CrashRecord
from crashsev.modelspec import CONSTANT, ModelSpec, ParameterDef

BASE_RECORD = dict(
    crash_id="C1", severity5="none", weather="normal", area="urban", alignment="straight",
    manner="other_manner", harmful_event="motor_vehicle_in_transport", lighting="daylight",
    truck_type="tractor_semi", speed_limit=55, lane_count=2, aadt=20_000, surface="asphalt",
    route="interstate", crash_time=12 * 60, day="weekday", driver_sex="male",
    restraint_used=True, location_type="segment",
)


def make_record(**overrides) -> CrashRecord:
    return CrashRecord(**{**BASE_RECORD, **overrides})


def fixed(name, level, variable=None):
    return ParameterDef(name, level, variable or name)


def constant(level):
    return ParameterDef(f"constant_{level}", level, CONSTANT)


def rand(name, level, variable=None, dist="normal"):
    return ParameterDef(name, level, variable or name, kind="random", distribution=dist)


def intercept_spec():
    return ModelSpec((constant("major"), constant("minor")))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def normal_condition_spec():
    """The row structure of the normal-weather estimates: 13 defs, 2 of them random."""
    return ModelSpec((
        fixed("male_major", "major", "male"),
        fixed("rear_end_major", "major", "rear_end"),
        fixed("dark_lighted_major", "major", "dark_lighted"),
        fixed("time1_major", "major", "time1"),
        constant("minor"),
        fixed("rural_minor", "minor", "rural"),
        fixed("single_unit_minor", "minor", "single_unit"),
        rand("lane2_minor", "minor", "lane2"),
        fixed("asphalt_minor", "minor", "asphalt"),
        rand("weekend_minor", "minor", "weekend"),
        fixed("sideswipe_none", "none", "sideswipe"),
        fixed("object_none", "none", "object"),
        fixed("speed2_none", "none", "speed2"),
    ))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
