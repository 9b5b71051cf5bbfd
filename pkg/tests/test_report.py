"""Estimation tables, the comparison matrix and the report document."""
import json
import math

import numpy as np
import pytest

from conftest import constant, fixed, intercept_spec, normal_condition_spec, rand
from crashsev.data import LEVELS
from crashsev.estimation import EstimationOptions, EstimationResult, pseudo_r2, wald_stats
from crashsev.inference import MarginalEffectsTable
from crashsev.modelspec import ModelSpec, parameter_layout
from crashsev.report import (ComparisonMatrix, ReportError, build_report, check_report, critical_t,
                             render_comparison, render_comparison_text, render_estimation_table,
                             render_report_text, stratum_section, write_report)


def make_result(spec, theta, se, ll_zero=-44_448.77, ll_converged=-14_687.87, n_obs=40_459,
                stratum="normal", converged=True):
    theta = np.asarray(theta, dtype=float)
    cov = np.diag(np.asarray(se, dtype=float) ** 2)
    w = wald_stats(theta, cov)
    return EstimationResult(
        spec=spec, stratum=stratum, names=parameter_layout(spec).names, theta_hat=theta, covariance=cov,
        std_errors=w.se, t_stats=w.t, p_values=w.p, n_obs=n_obs, ll_zero=ll_zero, ll_start=ll_zero,
        ll_converged=ll_converged, rho_squared=pseudo_r2(ll_zero, ll_converged), iterations=10,
        converged=converged, stop_reason="gradient tolerance" if converged else "iteration limit",
        gradient_norm=0.0, covariance_method="numerical_hessian", options=EstimationOptions(),
        fingerprint="0" * 16)


def margins(stratum, rows):
    variables = tuple(rows)
    return MarginalEffectsTable(variables, np.array([rows[v] for v in variables], dtype=float), stratum)


MALE_SPEC = ModelSpec((constant("minor"), fixed("male_major", "major", "male"),
                       rand("weekend_minor", "minor", "weekend")))


class TestCriticalT:
    def test_ninety(self):
        assert critical_t(0.90) == 1.645

    def test_other_levels(self):
        assert critical_t(0.95) == 1.96 and critical_t(0.99) == 2.576

    def test_domain(self):
        with pytest.raises(ValueError):
            critical_t(1.0)


class TestEstimationTable:
    def test_statistics_block(self):
        res = make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05])
        text = render_estimation_table(res)
        assert "40,459" in text and "-44,448.77" in text and "-14,687.87" in text
        rho_line = next(line for line in text.splitlines() if line.strip().startswith("rho^2"))
        assert rho_line.split()[-1] == "0.67"

    @pytest.mark.parametrize("ll0, llb, printed", [(-5_345.85, -1_844.82, "0.65"), (-4_309.86, -1_594.62, "0.63")])
    def test_other_strata_rho(self, ll0, llb, printed):
        res = make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05], ll0, llb, 100)
        rho_line = [line for line in render_estimation_table(res).splitlines() if "rho^2" in line][0]
        assert rho_line.split()[-1] == printed

    def test_random_row(self):
        res = make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.10, 0.2574, 0.2414])
        text = render_estimation_table(res)
        assert "77.4% below zero" in text and "22.6% above zero" in text
        assert "(standard deviation of parameter distribution)" in text
        sd_line = next(line for line in text.splitlines() if "standard deviation" in line)
        assert "(2.54)" in sd_line and "(10.52)" in sd_line

    def test_grouping_and_constant_label(self):
        res = make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.10, 0.2574, 0.2414])
        lines = render_estimation_table(res).splitlines()
        major = lines.index("Defined for major injury")
        minor = lines.index("Defined for minor injury")
        assert major < minor and "Defined for no injury" not in lines
        assert lines[major + 1].split()[0] == "male_major"
        assert lines[minor + 1].split()[0] == "Constant"

    def test_coefficient_t_and_p_columns(self):
        res = make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.1008, 0.2574, 0.2414])
        row = next(line for line in render_estimation_table(res).splitlines() if line.strip().startswith("male"))
        assert row.split()[1:4] == ["-4.49", "-44.54", "0.000"]

    def test_marginal_effect_columns(self):
        res = make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.10, 0.2574, 0.2414])
        me = margins("normal", {"male": [-0.048, 0.004, 0.044], "weekend": [-0.0001, 0.021, -0.0209]})
        row = next(line for line in render_estimation_table(res, me).splitlines()
                   if line.strip().startswith("male"))
        assert row.split()[-3:] == ["-0.048", "0.004", "0.044"]

    def test_constants_only(self):
        res = make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05])
        text = render_estimation_table(res)
        body = [line for line in text.splitlines() if line.startswith("  ") and line.strip() and not line.lstrip().startswith("Marginal") and "Constant" not in line]
        assert all(any(k in line for k in ("Number of observations", "Log-likelihood", "rho^2")) for line in body)
        assert text.count("Constant") == 2

    def test_non_convergence_warning(self):
        res = make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05], converged=False)
        assert "WARNING: estimation did not converge (iteration limit)" in render_estimation_table(res)

    def test_missing_standard_errors(self):
        res = make_result(intercept_spec(), [-4.0, -2.0], [math.nan, math.nan])
        row = next(line for line in render_estimation_table(res).splitlines() if "Constant" in line)
        assert row.split()[1:4] == ["-4.00", "n/a", "n/a"]

    def test_margins_outside_model(self):
        res = make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05])
        with pytest.raises(ReportError):
            stratum_section(res, margins("normal", {"male": [0.1, -0.1, 0.0]}))

    def test_normal_condition_layout(self):
        spec = normal_condition_spec()
        res = make_result(spec, np.linspace(-1, 1, 15), np.full(15, 0.1))
        text = render_estimation_table(res)
        assert text.count("(standard deviation of parameter distribution)") == 2
        assert text.count("below zero") == 2


class TestComparison:
    def test_significant_only_in_rain(self):
        spec = ModelSpec((constant("minor"), fixed("daylight_none", "none", "daylight")))
        results = {"normal": make_result(spec, [-1.0, 0.05], [0.1, 0.1], stratum="normal"),
                   "rain": make_result(spec, [-1.0, -0.40], [0.1, 0.1], stratum="rain")}
        me = {"normal": margins("normal", {"daylight": [0.0001, 0.0002, -0.0003]}),
              "rain": margins("rain", {"daylight": [0.0006, 0.0064, -0.007]})}
        m = render_comparison(results, me)
        assert m.get("daylight", "rain", "none") == "down"
        assert all(m.get("daylight", "normal", lvl) == "absent" for lvl in LEVELS)
        # every nonzero effect of a retained variable carries an arrow
        assert m.get("daylight", "rain", "minor") == "up"
        thresholded = render_comparison(results, me, min_abs_effect=0.0065)
        assert [thresholded.get("daylight", "rain", lvl) for lvl in LEVELS] == ["absent", "absent", "down"]

    def test_male_row(self):
        results = {"normal": make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.10, 0.2574, 0.2414]),
                   "rain": make_result(MALE_SPEC, [-1.0, -0.1, -1.0, 1.0], [0.1, 0.5, 0.5, 0.5], stratum="rain")}
        me = {"normal": margins("normal", {"male": [-0.048, 0.004, 0.044], "weekend": [-0.0001, 0.021, -0.0209]}),
              "rain": margins("rain", {"male": [-0.01, 0.0, 0.01], "weekend": [0.0, 0.01, -0.01]})}
        m = render_comparison(results, me)
        assert m.get("male", "normal", "major") == "down" and m.get("male", "normal", "none") == "up"
        assert all(m.get("male", "rain", lvl) == "absent" for lvl in LEVELS)
        # the random weekend slot is retained through its spread
        assert m.get("weekend", "rain", "minor") == "up"

    def test_nothing_significant(self):
        results = {s: make_result(MALE_SPEC, [-1.0, 0.1, 0.1, 0.1], [1.0, 1.0, 1.0, 1.0], stratum=s)
                   for s in ("normal", "rain", "snow")}
        me = {s: margins(s, {"male": [0.1, -0.05, -0.05], "weekend": [-0.1, 0.05, 0.05]}) for s in results}
        m = render_comparison(results, me)
        assert set(m.cells.values()) == {"absent"}
        rows = render_comparison_text(m).splitlines()[4:-1]
        assert rows == ["male", "weekend"]

    def test_threshold_follows_level(self):
        spec = ModelSpec((constant("minor"), fixed("male_major", "major", "male")))
        results = {s: make_result(spec, [-1.0, 0.18], [0.1, 0.1], stratum=s) for s in ("normal", "rain")}
        me = {s: margins(s, {"male": [0.01, -0.005, -0.005]}) for s in results}
        assert render_comparison(results, me, 0.90).get("male", "rain", "major") == "up"
        assert render_comparison(results, me, 0.95).get("male", "rain", "major") == "absent"

    def test_round_trip_and_text(self):
        cells = {("male", "normal", "major"): "down", ("male", "rain", "none"): "up"}
        m = ComparisonMatrix(("male",), ("normal", "rain"), cells)
        back = ComparisonMatrix.from_dict(json.loads(json.dumps(m.to_dict())))
        assert back.to_dict() == m.to_dict()
        row = render_comparison_text(m).splitlines()[4]
        assert row.startswith("male") and row.index("↓") < row.index("↑")


def sample_doc():
    results = {"normal": make_result(MALE_SPEC, [-1.30, -4.49, -1.91, 2.54], [0.13, 0.10, 0.2574, 0.2414]),
               "rain": make_result(MALE_SPEC, [-1.2, -1.70, -2.94, 3.35], [0.2, 0.155, 1.04, 0.93],
                                   -5_345.85, -1_844.82, 4_866, "rain")}
    me = {"normal": margins("normal", {"male": [-0.048, 0.004, 0.044], "weekend": [-0.0001, 0.021, -0.0209]}),
          "rain": margins("rain", {"male": [-0.032, 0.002, 0.030], "weekend": [-0.0002, 0.033, -0.0328]})}
    lr = {"kind": "pooled_vs_strata", "statistic": 801.78, "df": 26, "p_value": 1e-150, "p_display": "< 0.001"}
    transfer = {"strata": ["normal", "rain"], "converged": True, "cells": {
        "normal": {"normal": {"statistic": 0.0, "df": 4, "p_value": 1.0},
                   "rain": {"statistic": 51.46, "df": 4, "p_value": 1e-10}},
        "rain": {"normal": {"error": "mismatch"}, "rain": {"statistic": 0.0, "df": 4, "p_value": 1.0}}}}
    return build_report(results, me, lr, transfer)


class TestReportDocument:
    def test_contents(self):
        doc = sample_doc()
        assert doc["critical_t"] == 1.645 and list(doc["strata"]) == ["normal", "rain"]
        assert doc["comparison"]["cells"]["male"]["normal"] == ["down", "up", "up"]

    def test_json_round_trip_checks(self):
        doc = json.loads(json.dumps(sample_doc()))
        check_report(doc)
        for sec in doc["strata"].values():
            assert pseudo_r2(sec["ll_zero"], sec["ll_converged"]) == sec["rho_squared"]

    def test_check_catches_tampering(self):
        doc = sample_doc()
        doc["strata"]["normal"]["rho_squared"] += 1e-9
        with pytest.raises(ReportError, match="rho"):
            check_report(doc)
        doc = sample_doc()
        doc["strata"]["rain"]["rows"][1]["t"] += 0.01
        with pytest.raises(ReportError, match="t-ratio"):
            check_report(doc)
        doc = sample_doc()
        doc["strata"]["rain"]["rows"][1]["marginal_effects"][0] += 1e-6
        with pytest.raises(ReportError, match="sum to zero"):
            check_report(doc)

    def test_text_sections(self):
        text = render_report_text(sample_doc())
        assert "statistic 801.78, df = 26, p < 0.001" in text
        assert "51.46, df=4 (p < 0.001)" in text and "mismatch" in text
        assert "Model comparisons" in text and text.count("Parameter estimates and marginal effects") == 2

    def test_single_stratum_has_no_comparison(self):
        doc = build_report({"normal": make_result(intercept_spec(), [-4.0, -2.0], [0.1, 0.05])})
        assert doc["comparison"] is None and "Model comparisons" not in render_report_text(doc)

    def test_render_from_saved_document(self, tmp_path):
        doc = sample_doc()
        json_path, text_path = write_report(doc, tmp_path)
        again = render_report_text(json.loads(json_path.read_text()))
        assert again == text_path.read_text()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        write_report(sample_doc(), a)
        write_report(sample_doc(), b)
        for name in ("report.json", "report.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_no_trailing_whitespace(self):
        text = render_report_text(sample_doc())
        assert all(line == line.rstrip() for line in text.splitlines())
