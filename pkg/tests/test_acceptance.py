"""Acceptance criteria 1-13, each reported as a single PASS/FAIL line."""
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, constant, fixed, intercept_spec, rand
from crashsev.cli import main
from crashsev.data import EXCLUSIVE_GROUPS, LEVELS, SEVERITY5, Dataset, consolidate_severity, summarize
from crashsev.estimation import EstimationOptions, draws_for, estimate, pseudo_r2
from crashsev.halton import build_draws, radical_inverse, radical_inverse_array
from crashsev.inference import lr_pooled_test, lr_transferability, marginal_effects, share_below_zero
from crashsev.likelihood import (SimulatedLikelihood, mnl_probabilities, null_log_likelihood,
                                 simulated_probabilities, systematic_utility)
from crashsev.modelspec import ModelSpec, parameter_layout
from crashsev.synthetic import GenConfig, brute_force_mixed_prob, generate_dataset
from test_data import TABLE1, _dataset_from_counts
from test_estimation import MIXED_SPEC, MNL_SPEC, MNL_THETA, mixed_dataset
from test_inference import CHOSEN10, NAMES, SPEC10, THETA10, X10, toggled
from test_likelihood import central_difference


def verdict(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES[number] = line
    assert ok, line


def test_01_null_log_likelihood():
    printed = {40_459: -44_448.77, 4_866: -5_345.85, 3_923: -4_309.86}
    got = {n: null_log_likelihood(n, 3) for n in printed}
    worst = max(abs(got[n] - printed[n]) for n in printed)
    ok = worst <= 0.1 and all(round(got[n], 2) == v for n, v in
                              {40_459: -44_448.75, 4_866: -5_345.85, 3_923: -4_309.86}.items())
    verdict(1, ok, f"LL(0) = {', '.join(f'{v:.2f}' for v in got.values())}; max gap to printed {worst:.3f}")


def test_02_pseudo_r2():
    pairs = [(-44_448.77, -14_687.87, 0.6696, 0.67), (-5_345.85, -1_844.82, 0.6549, 0.65),
             (-4_309.86, -1_594.62, 0.6300, 0.63)]
    values = [pseudo_r2(ll0, llb) for ll0, llb, _, _ in pairs]
    ok = all(abs(v - exact) < 1e-4 and round(v, 2) == shown for v, (_, _, exact, shown) in zip(values, pairs))
    verdict(2, ok, "rho^2 = " + ", ".join(f"{v:.4f}" for v in values))


def test_03_share_below_zero():
    cases = [(-1.91, 2.54, 77.4), (-1.90, 3.67, 69.8), (-2.94, 3.35, 81.0), (-1.32, 2.00, 74.5), (0.78, 1.53, 30.5)]
    shares = [100 * share_below_zero(mu, s) for mu, s, _ in cases]
    gaps = [abs(v - printed) for v, (_, _, printed) in zip(shares, cases)]
    verdict(3, max(gaps) <= 0.1, "shares = " + ", ".join(f"{v:.2f}%" for v in shares)
            + f"; max gap {max(gaps):.3f} pp")


def test_04_likelihood_ratio():
    strata = {"normal": -14_687.87, "rain": -1_844.82, "snow": -1_594.62}
    pooled = lr_pooled_test(-18_528.20, list(strata.values()), 26)
    # printed transferability statistics and the parameter count of each row's model
    table3 = {("normal", "rain"): 51.46, ("normal", "snow"): 38.09, ("rain", "normal"): 414.12,
              ("rain", "snow"): 32.92, ("snow", "normal"): 664.08, ("snow", "rain"): 37.30}
    df_a = {"normal": 15, "rain": 10, "snow": 13}
    cells = {}
    for (a, b), stat in table3.items():
        ll_a_on_b = strata[b] - stat / 2
        cells[a, b] = lr_transferability(ll_a_on_b, strata[b], df_a[a])
    cell_gap = max(abs(cells[k].statistic - table3[k]) for k in table3)
    ok = (abs(pooled.statistic - 801.78) <= 0.01 and pooled.p_value < 0.001 and cell_gap <= 0.01
          and all(c.p_value < 0.001 for c in cells.values()))
    verdict(4, ok, f"pooled {pooled.statistic:.2f} (df 26, p {pooled.p_value:.1e}); "
                   f"transfer cells max gap {cell_gap:.1e}")


def test_05_halton():
    first = {2: [Fraction(n, d) for n, d in [(1, 2), (1, 4), (3, 4), (1, 8), (5, 8), (3, 8), (7, 8), (1, 16)]],
             3: [Fraction(n, d) for n, d in [(1, 3), (2, 3), (1, 9), (4, 9), (7, 9), (2, 9), (5, 9), (8, 9)]]}
    exact = all(radical_inverse(i + 1, b) == float(v) for b, vals in first.items() for i, v in enumerate(vals))
    pts = radical_inverse_array(np.arange(1, 17), 2)
    cells = np.floor(pts * 16).astype(int)
    stratified = sorted(cells.tolist()) == list(range(16))
    column = build_draws(1, 16, 1, skip=0)
    verdict(5, exact and stratified and column.values.shape == (1, 16, 1),
            f"first 8 values exact: {exact}; one point per 1/16 cell: {stratified}")


def test_06_gradient_check():
    rng = np.random.default_rng(2006)
    names = ("male", "rural", "lane2")
    spec = ModelSpec((constant("major"), fixed("male_major", "major", "male"), fixed("rural_none", "none", "rural"),
                      rand("lane2_minor", "minor", "lane2")))
    ds = Dataset("grad", names, (rng.random((200, 3)) < 0.5).astype(float), rng.integers(0, 3, 200))
    lik = SimulatedLikelihood(spec, ds, build_draws(200, 50, 1))
    worst = 0.0
    for _ in range(5):
        theta = rng.normal(scale=0.8, size=5)
        theta[4] = rng.uniform(0.2, 2.0)
        numeric = central_difference(lik.loglike, theta)
        rel = np.abs(lik.score(theta) - numeric) / np.maximum(np.abs(numeric), 1.0)
        worst = max(worst, float(rel.max()))
    verdict(6, worst < 1e-5, f"max relative error over 5 parameter points x 5 slots {worst:.2e}")


def test_07_mnl_reduction():
    rng = np.random.default_rng(2007)
    spec = ModelSpec((constant("major"), constant("minor"), fixed("male_major", "major", "male"),
                      rand("lane2_minor", "minor", "lane2"), rand("rural_none", "none", "rural")))
    mnl = ModelSpec(tuple(fixed(d.name, d.target_level, d.variable) if d.is_random else d for d in spec.defs))
    worst = 0.0
    for _ in range(1000):
        obs = {v: int(rng.integers(0, 2)) for v in ("male", "lane2", "rural")}
        means = rng.normal(size=5)
        theta = np.concatenate([means[:3], [means[3], 0.0, means[4], 0.0]])
        p = simulated_probabilities(spec, theta, obs, rng.normal(size=(20, 2)))
        q = mnl_probabilities(systematic_utility(mnl, means, obs))
        worst = max(worst, float(np.max(np.abs(p - q))))
    verdict(7, worst < 1e-12, f"max |P_sim(sigma=0) - P_mnl| over 1000 observations {worst:.1e}")


def test_08_quadrature_oracle():
    rng = np.random.default_rng(2008)
    spec = ModelSpec((constant("major"), constant("minor"), fixed("male_major", "major", "male"),
                      rand("lane2_minor", "minor", "lane2")))
    z = build_draws(1, 10_000, 1).values[0]
    worst = 0.0
    for _ in range(100):
        theta = np.array([*rng.uniform(-2, 2, 4), rng.uniform(0.1, 3.0)])
        obs = {"male": int(rng.integers(0, 2)), "lane2": 1}
        p = simulated_probabilities(spec, theta, obs, z)
        q = brute_force_mixed_prob(spec, theta, obs, n_grid=201)
        worst = max(worst, float(np.max(np.abs(p - q))))
    verdict(8, worst < 1e-3, f"max |P_halton(R=10000) - P_quadrature(201)| over 100 settings {worst:.2e}")


def test_09_mnl_recovery():
    ds = generate_dataset(GenConfig(MNL_SPEC, MNL_THETA, 50_000, seed=2009))
    res = estimate(MNL_SPEC, ds)
    z = (res.theta_hat - MNL_THETA) / res.std_errors
    counts = np.bincount(ds.chosen, minlength=3)
    shares_ds = Dataset("shares", ("male",), np.zeros((len(ds), 1)), ds.chosen)
    icpt = estimate(intercept_spec(), shares_ds)
    closed = np.log(counts[:2] / counts[2])
    gap = float(np.max(np.abs(icpt.theta_hat - closed)))
    ok = res.converged and icpt.converged and bool(np.all(np.abs(z) < 3)) and gap < 1e-4
    verdict(9, ok, f"max |z| over 6 parameters {np.max(np.abs(z)):.2f}; intercept gap {gap:.1e}")


def test_10_mixed_recovery():
    ds = mixed_dataset(0.8, 20_000, seed=2010)
    options = EstimationOptions(n_draws=500)
    res = estimate(MIXED_SPEC, ds, options)
    layout = parameter_layout(MIXED_SPEC)
    i_mu, i_sd = layout.index("x.mean"), layout.index("x.sd")
    mu, sd = res.theta_hat[i_mu], abs(res.theta_hat[i_sd])
    se_mu, se_sd = res.std_errors[i_mu], res.std_errors[i_sd]
    lik = SimulatedLikelihood(MIXED_SPEC, ds, draws_for(MIXED_SPEC, len(ds), options))
    flipped = res.theta_hat.copy()
    flipped[i_sd] = -flipped[i_sd]
    symmetric = lik.loglike(flipped) == lik.loglike(res.theta_hat)
    ok = (res.converged and abs(mu - 1.0) < 3 * se_mu and abs(sd - 0.8) < 3 * se_sd and symmetric)
    verdict(10, ok, f"mu {mu:.3f} (se {se_mu:.3f}), |sigma| {sd:.3f} (se {se_sd:.3f}); "
                    f"LL unchanged under sigma -> -sigma: {symmetric}")


def test_11_marginal_effects():
    ds = Dataset("ten", NAMES, X10, CHOSEN10)
    res = estimate(SPEC10, ds, EstimationOptions(n_draws=40, max_iterations=1))
    res.theta_hat = THETA10.copy()
    draws = build_draws(10, 40, 1)
    table = marginal_effects(SPEC10, res, ds, draws, groups=EXCLUSIVE_GROUPS)
    exact = True
    for v in SPEC10.variables:
        diffs = [simulated_probabilities(SPEC10, THETA10, toggled(X10[n], v, 1), draws.values[n])
                 - simulated_probabilities(SPEC10, THETA10, toggled(X10[n], v, 0), draws.values[n])
                 for n in range(10)]
        exact = exact and np.array_equal(table.row(v), np.mean(diffs, axis=0))
    zero_sum = max(abs(math.fsum(r)) for r in table.effects)
    printed = abs(math.fsum([-0.048, 0.004, 0.044]))
    verdict(11, exact and zero_sum < 1e-10 and printed < 1e-10,
            f"brute force identical: {exact}; max row sum {zero_sum:.1e}; printed male row sum {printed:.1e}")


def test_12_data_pipeline():
    mapping = {s: consolidate_severity(s) for s in SEVERITY5}
    mapping_ok = mapping == {"fatal": "major", "disabling": "major", "evident": "minor",
                             "possible": "minor", "none": "none"}
    shown = {}
    for stratum, (counts, printed) in TABLE1.items():
        table = summarize(_dataset_from_counts(counts))
        shown[stratum] = tuple(round(table.level_percent[lvl], 1) for lvl in LEVELS)
    table_ok = all(shown[s] == TABLE1[s][1] for s in TABLE1)
    verdict(12, mapping_ok and table_ok,
            "percentages " + "; ".join(f"{s} {'/'.join(map(str, v))}" for s, v in shown.items()))


@pytest.mark.slow
def test_13_determinism(tmp_path):
    codes, docs, texts = [], [], []
    for k in range(2):
        out = tmp_path / f"run{k}"
        codes.append(main(["run", "--output-dir", str(out)]))
        docs.append((out / "report.json").read_bytes())
        texts.append((out / "report.txt").read_bytes())
    json.loads(docs[0])
    ok = codes == [0, 0] and docs[0] == docs[1] and texts[0] == texts[1]
    verdict(13, ok, f"exit codes {codes}; report.json identical: {docs[0] == docs[1]}; "
                    f"report.txt identical: {texts[0] == texts[1]}")
