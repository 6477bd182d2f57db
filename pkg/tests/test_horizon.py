import numpy as np
import pytest
from hypothesis import given, strategies as st

from reghorizon.errors import AnalysisError, ConfigError, InsufficientDataError, UsageError
from reghorizon.horizon import (DEFAULT_BASE, RegressionFit, SweepSpec, aggregate_seeds,
                                collapse_csv, collapse_export, design_matrix, expand_grid,
                                family_of, fit_family, fit_regression, ols,
                                over_regularized_points, paired_bootstrap,
                                select_over_regularized, total_R)
from reghorizon.losses import LossWeights
from reghorizon.trainer import RunRecord, TrainConfig

from planted import REFERENCE, OTHER, TUNING_GRID, coverage, factorial_records, family_records

BASE = TrainConfig(weights=LossWeights(alpha_cr=1.0, alpha_rd=5.0, alpha_t=1.0))
BETAS = ("beta_cr", "beta_rd", "beta_t", "beta_do", "beta_B")


def reference_fit():
    return RegressionFit(beta_cr=0.245, beta_rd=0.159, beta_t=-0.814, beta_do=13.8,
                         beta_f=0.814, beta_B=32.6, n_points=0, residual_rms=0.0)


def test_grid_count_single_family():
    spec = SweepSpec(BASE, {"alpha_cr": [0.2, 1.0, 5.0], "dropout": TUNING_GRID["dropout"]})
    assert len(expand_grid(spec)) == 18


def test_grid_single_point():
    assert len(expand_grid(SweepSpec(BASE, {"alpha_rd": [2.0]}))) == 1


def test_grid_dedups_base_point():
    spec = SweepSpec(BASE, {"alpha_cr": [0.2, 1.0], "alpha_rd": [5.0, 8.0]}, seeds=[0, 1])
    grid = expand_grid(spec)
    keys = [(c.weights.alpha_cr, c.weights.alpha_rd, c.dropout, c.seed) for c in grid]
    assert len(keys) == len(set(keys)) == 6
    assert keys.count((1.0, 5.0, 0.1, 0)) == 1


def test_grid_rejects_unknown_axis():
    with pytest.raises(ConfigError):
        expand_grid(SweepSpec(BASE, {"alpha_s": [1.0]}))


def test_select_fixture():
    series = list(zip([0.05, 0.10, 0.15, 0.20], [1, 3, 2, 1]))
    assert select_over_regularized(series) == [(0.15, 2), (0.20, 1)]


def test_select_monotone_cases():
    drops = [0.05, 0.1, 0.15, 0.2]
    assert select_over_regularized(list(zip(drops, [4, 3, 2, 1]))) == list(zip(drops, [4, 3, 2, 1]))[1:]
    assert select_over_regularized(list(zip(drops, [1, 2, 3, 4]))) == []


def test_select_tie_goes_to_smaller_dropout():
    assert select_over_regularized([(0.1, 2), (0.2, 2), (0.3, 1)]) == [(0.2, 2), (0.3, 1)]


def test_select_needs_sorted_series():
    with pytest.raises(UsageError):
        select_over_regularized([(0.2, 1), (0.1, 2)])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=12))
def test_select_returns_suffix(metrics):
    series = [(0.05 * (i + 1), m) for i, m in enumerate(metrics)]
    out = select_over_regularized(series)
    assert out == series[len(series) - len(out):]
    assert len(out) < len(series)


def test_aggregate_seeds_averages():
    recs = [RunRecord(1, 5, 1, 0.1, dev_metric=m, test_metric=0, seed=s)
            for s, m in enumerate([2.0, 4.0])]
    recs.append(RunRecord(1, 5, 1, 0.1, dev_metric=99, test_metric=0, seed=9, failed=True))
    (agg,) = aggregate_seeds(recs)
    assert agg.dev_metric == 3.0


@pytest.mark.parametrize("betas", [REFERENCE, OTHER])
def test_planted_recovery(betas):
    fit = fit_regression(over_regularized_points(factorial_records(betas)))
    for k in BETAS:
        assert getattr(fit, k) == pytest.approx(betas[k], abs=1e-9)
    assert fit.beta_f == -fit.beta_t
    assert total_R(fit, (0, 0, 1, 0)) == 0.0
    assert fit.residual_rms < 1e-9
    assert fit.beta_R == -1.0


def test_report_fields():
    fit = fit_regression(factorial_records(OTHER))
    assert set(fit.report()) == {"beta_cr", "beta_rd", "beta_t", "beta_do", "beta_f", "beta_B",
                                 "residual_rms", "n_points"}


def test_fit_order_invariant():
    recs = factorial_records(OTHER, noise=0.1, gen=np.random.default_rng(0))
    a = fit_regression(recs).report()
    shuffled = [recs[i] for i in np.random.default_rng(1).permutation(len(recs))]
    assert fit_regression(shuffled).report() == a


def test_ols_residuals_orthogonal():
    recs = factorial_records(OTHER, noise=0.2, gen=np.random.default_rng(3))
    x = design_matrix(recs)
    y = np.array([r.dev_metric for r in recs])
    coef, _ = ols(x, y)
    assert np.abs(x.T @ (y - x @ coef)).max() < 1e-9


def test_rank_deficiency_names_columns():
    recs = [r for r in factorial_records(OTHER) if r.alpha_rd == 5.0]
    with pytest.raises(AnalysisError, match="alpha_rd"):
        fit_regression(recs)


def test_too_few_points():
    with pytest.raises(InsufficientDataError) as exc:
        fit_regression(factorial_records(OTHER)[:5])
    assert exc.value.count == 5


def test_noisy_coverage():
    cov = coverage(OTHER, trials=200)
    assert min(cov.values()) >= 0.95


def test_reference_fit_arithmetic():
    fit = reference_fit()
    assert total_R(fit, (1.0, 5.0, 1.0, 0.05)) == pytest.approx(1.73, abs=1e-9)
    assert total_R(fit, (0, 0, 1, 0)) == pytest.approx(0.0, abs=1e-15)
    assert fit.beta_f == -fit.beta_t
    assert total_R(fit, (2.0, 5.0, 1.0, 0.05)) > total_R(fit, (1.0, 5.0, 1.0, 0.05))


def test_family_labels():
    assert family_of(RunRecord(1, 5, 1, 0.1, 0, 0, 0)) == "base"
    assert family_of(RunRecord(0.2, 5, 1, 0.1, 0, 0, 0)) == "alpha_cr"
    assert family_of(RunRecord(0.2, 8, 1, 0.1, 0, 0, 0)) == "mixed"
    assert family_of(RunRecord(0.2, 5, 1, 0.1, 0, 0, 0), {**DEFAULT_BASE, "alpha_cr": 0.2}) == "base"


def test_collapse_single_line():
    recs = family_records(REFERENCE)
    fit = fit_regression(over_regularized_points(recs))
    rows = collapse_export(fit, recs)
    assert len(rows) == len(recs)
    r = np.array([row.R for row in rows])
    m = np.array([row.metric for row in rows])
    slope, icept = np.polyfit(r, m, 1)
    assert np.abs(m - (slope * r + icept)).max() <= 1e-9
    assert {row.family for row in rows} == {"alpha_cr", "alpha_rd", "alpha_t", "base"}


def test_collapse_equal_hparams_equal_R():
    fit = reference_fit()
    a = RunRecord(1, 5, 0.5, 0.2, dev_metric=1, test_metric=0, seed=0)
    b = RunRecord(1, 5, 0.5, 0.2, dev_metric=2, test_metric=0, seed=1)
    ra, rb = collapse_export(fit, [a, b])
    assert ra.R == rb.R


def test_collapse_csv_header():
    text = collapse_csv(collapse_export(reference_fit(), family_records(OTHER)))
    lines = text.splitlines()
    assert lines[0] == "R,metric,family,dropout"
    assert len(lines) == 1 + len(family_records(OTHER))


def test_family_fit():
    recs = [r for r in family_records(OTHER) if family_of(r) in ("alpha_cr", "base")]
    out = fit_family(over_regularized_points(recs), "alpha_cr")
    assert out["beta_cr"] == pytest.approx(OTHER["beta_cr"], abs=1e-9)
    assert out["beta_do"] == pytest.approx(OTHER["beta_do"], abs=1e-9)


def test_bootstrap_conventions():
    a = list(np.linspace(0, 1, 50))
    assert paired_bootstrap(a, a, 1000, 0) == 1.0
    assert paired_bootstrap([1.0] * 20, [0.0] * 20, 1000, 0) == 0.0
    gen = np.random.default_rng(0)
    x, y = gen.random(40), gen.random(40)
    assert paired_bootstrap(x, y, 1000, 7) == paired_bootstrap(x, y, 1000, 7)


def test_bootstrap_errors():
    with pytest.raises(UsageError):
        paired_bootstrap([1.0] * 10, [1.0] * 11)
    with pytest.raises(UsageError):
        paired_bootstrap([1.0] * 10, [1.0] * 10, n_resamples=10)


def test_bootstrap_power():
    gen = np.random.default_rng(42)
    hits = 0
    for trial in range(100):
        b = gen.random(100)
        a = b + gen.normal(0.05, 0.01, size=100)
        hits += paired_bootstrap(a, b, 1000, seed=trial) < 0.05
    assert hits >= 99
