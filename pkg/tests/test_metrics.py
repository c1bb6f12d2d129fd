"""Error metrics over detection histories."""

import math

import numpy as np
import pytest

from edetect import metrics as mt
from edetect.errors import RejectedConfiguration, RejectedInput
from edetect.metrics import ChangeConfiguration, DetectionHistory

INF = math.inf


def history_from_rows(rows):
    return DetectionHistory(np.array(rows, dtype=bool))


class TestChangeConfiguration:
    def test_global_null_predicate(self):
        xi = ChangeConfiguration.global_null(3)
        assert xi.is_global_null
        assert not ChangeConfiguration((5, INF)).is_global_null

    def test_null_set(self):
        xi = ChangeConfiguration((INF, 5, INF))
        assert xi.null_set(4) == (0, 1, 2)
        assert xi.null_set(5) == (0, 2)
        assert xi.null_set(10) == (0, 2)

    def test_rejects_changepoint_at_or_before_one(self):
        with pytest.raises(RejectedConfiguration):
            ChangeConfiguration((1, INF))
        with pytest.raises(RejectedConfiguration):
            ChangeConfiguration((0,))

    def test_none_means_no_change(self):
        xi = ChangeConfiguration((None, 7))
        assert xi.changepoints == (INF, 7)


class TestPointwiseMetrics:
    def test_fdp_example(self):
        hist = history_from_rows([[1, 1, 0]] * 10)
        xi = ChangeConfiguration((INF, 5, INF))
        assert mt.fdp_at(hist, xi, 10) == pytest.approx(0.5)

    def test_fdp_no_detections_guard(self):
        hist = history_from_rows([[0, 0, 0]])
        assert mt.fdp_at(hist, ChangeConfiguration.global_null(3), 1) == 0.0

    def test_fdp_is_one_under_global_null_with_detections(self):
        hist = history_from_rows([[0, 1, 1]])
        assert mt.fdp_at(hist, ChangeConfiguration.global_null(3), 1) == 1.0

    def test_pfer_examples(self):
        xi = ChangeConfiguration((INF, 5, INF))
        hist = history_from_rows([[1, 1, 0]] * 10)
        assert mt.pfer_at(hist, xi, 10) == 1
        assert mt.pfer_at(history_from_rows([[0, 0, 0]]), xi, 1) == 0
        all_on = history_from_rows([[1, 1, 1]])
        assert mt.pfer_at(all_on, ChangeConfiguration.global_null(3), 1) == 3

    def test_fwer_indicator(self):
        xi = ChangeConfiguration.global_null(2)
        assert not mt.fwer_indicator_at(history_from_rows([[0, 0]]), xi, 1)
        hist = history_from_rows([[0, 1]] * 5)
        assert mt.fwer_indicator_at(hist, xi, 5)

    def test_ger_indicator(self):
        flags = np.array([1, 1, 0], dtype=bool)
        assert mt.ger_indicator_at(flags, ChangeConfiguration.global_null(2), 1)
        xi = ChangeConfiguration((2, INF))
        assert not mt.ger_indicator_at(flags, xi, 2)  # a change already happened
        assert not mt.ger_indicator_at(flags, ChangeConfiguration.global_null(2), 3)

    def test_ccd_examples(self):
        xi = ChangeConfiguration((5, 7))
        hist = history_from_rows([[1, 0]] * 10)
        assert mt.ccd_at(hist, xi, 10) == pytest.approx(0.5)
        early = ChangeConfiguration((50, 70))
        assert mt.ccd_at(hist, early, 10) == 0.0
        both = history_from_rows([[1, 1]] * 10)
        assert mt.ccd_at(both, xi, 10) == 1.0

    def test_time_bounds_checked(self):
        hist = history_from_rows([[0, 0]])
        with pytest.raises(RejectedInput):
            mt.fdp_at(hist, ChangeConfiguration.global_null(2), 2)
        with pytest.raises(RejectedInput):
            mt.fdp_at(hist, ChangeConfiguration.global_null(2), 0)


class TestTauStar:
    def test_first_detection_scan(self):
        rows = [[0, 0]] * 6 + [[1, 0]] + [[0, 0]] * 3
        hist = history_from_rows(rows)
        assert mt.tau_star(hist, eta=1) == 7

    def test_no_detection_returns_inf(self):
        hist = history_from_rows([[0, 0]] * 4)
        assert mt.tau_star(hist, eta=1) == INF

    def test_global_null_variants_coincide(self):
        rng = np.random.default_rng(0)
        hist = DetectionHistory(rng.random((20, 4)) < 0.2)
        xi = ChangeConfiguration.global_null(4)
        for eta in (1, 2, 4):
            assert mt.tau_star(hist, eta=eta) == mt.tau_star(
                hist, eta=eta, xi=xi, false_only=True)

    def test_monotone_in_eta_and_false_only(self):
        rng = np.random.default_rng(1)
        xi = ChangeConfiguration((10, INF, 4, INF))
        for _ in range(50):
            hist = DetectionHistory(rng.random((30, 4)) < 0.25)
            taus = [mt.tau_star(hist, eta=e) for e in (1, 2, 3, 4)]
            assert taus == sorted(taus)
            for e in (1, 2, 3, 4):
                assert (mt.tau_star(hist, eta=e, xi=xi, false_only=True)
                        >= mt.tau_star(hist, eta=e))

    def test_eta_bounds(self):
        hist = history_from_rows([[0, 0]])
        with pytest.raises(RejectedInput):
            mt.tau_star(hist, eta=0)
        with pytest.raises(RejectedInput):
            mt.tau_star(hist, eta=3)


class TestSeriesAgreeWithScalars:
    def test_all_series_match_pointwise_functions(self):
        rng = np.random.default_rng(2)
        decisions = rng.random((8, 25, 5)) < 0.3
        xi = ChangeConfiguration((10, INF, 3, INF, 20))
        fdp = mt.fdp_series(decisions, xi)
        pfer = mt.pfer_series(decisions, xi)
        fwer = mt.fwer_series(decisions, xi)
        ccd = mt.ccd_series(decisions, xi)
        for r in range(8):
            hist = DetectionHistory(decisions[r])
            for t in (1, 3, 10, 25):
                assert fdp[r, t - 1] == mt.fdp_at(hist, xi, t)
                assert pfer[r, t - 1] == mt.pfer_at(hist, xi, t)
                assert fwer[r, t - 1] == mt.fwer_indicator_at(hist, xi, t)
                assert ccd[r, t - 1] == mt.ccd_at(hist, xi, t)

    def test_tau_series_matches_scalar(self):
        rng = np.random.default_rng(3)
        decisions = rng.random((10, 15, 3)) < 0.15
        xi = ChangeConfiguration((5, INF, INF))
        taus = mt.tau_star_series(decisions, eta=1, xi=xi, false_only=True)
        for r in range(10):
            hist = DetectionHistory(decisions[r])
            assert taus[r] == mt.tau_star(hist, eta=1, xi=xi, false_only=True)

    def test_ordering_invariant(self):
        rng = np.random.default_rng(4)
        decisions = rng.random((20, 30, 6)) < 0.4
        xi = ChangeConfiguration((7, INF, 12, INF, INF, 3))
        fdp = mt.fdp_series(decisions, xi)
        fwer = mt.fwer_series(decisions, xi).astype(float)
        pfer = mt.pfer_series(decisions, xi).astype(float)
        assert np.all(fdp <= fwer + 1e-12)
        assert np.all(fwer <= pfer + 1e-12)


class TestAggregation:
    def test_values_at_taus(self):
        series = np.arange(12, dtype=float).reshape(3, 4)
        taus = np.array([1.0, np.inf, 4.0])
        out = mt.values_at_taus(series, taus)
        assert out[0] == 0.0 and math.isnan(out[1]) and out[2] == 11.0

    def test_run_length_summary_censoring(self):
        taus = np.array([3.0, np.inf, 5.0, np.inf])
        rep = mt.summarize_run_length("arl", "edbh", taus, horizon=10, label="eta=1")
        assert rep.estimate == pytest.approx((3 + 10 + 5 + 10) / 4)
        assert rep.censored_frac == 0.5
        assert rep.lower_bound

    def test_stop_summary_conditions_on_stopping(self):
        series = np.array([[1.0, 0.5], [0.2, 0.4], [0.9, 0.1]])
        taus = np.array([2.0, np.inf, 1.0])
        rep = mt.summarize_at_stop("fdr", "edbh", series, taus, "tau1")
        assert rep.estimate == pytest.approx((0.5 + 0.9) / 2)
        assert rep.reps == 2
        assert rep.censored_frac == pytest.approx(1 / 3)

    def test_empirical_eop(self):
        reports = [
            mt.MetricReport("fdr", "edbh", "tau1", 0.05, 0.0, 100),
            mt.MetricReport("fdr", "edbh", "t=10", 0.0, 0.0, 100),
        ]
        assert mt.empirical_eop(reports, [100.0, 10.0]) == pytest.approx(0.0005)
        assert mt.empirical_eop(reports[1:], [10.0]) == 0.0
        with pytest.raises(RejectedInput):
            mt.empirical_eop(reports, [100.0])
        with pytest.raises(RejectedInput):
            mt.empirical_eop(reports, [0.0, 1.0])

    def test_patience_sum(self):
        taus = np.array([10.0, 20.0])
        xi = ChangeConfiguration((6, INF))
        # stream 0 capped at xi - 1 = 5; stream 1 at tau itself
        expected = 5.0 + 15.0
        assert mt.patience_sum(taus, xi, horizon=100) == pytest.approx(expected)
        tiny = mt.patience_sum(np.array([0.5]), ChangeConfiguration((2,)), 10)
        assert tiny == 1.0  # floored at one

    def test_mc_mean(self):
        mean, se = mt.mc_mean(np.array([1.0, 2.0, 3.0]))
        assert mean == 2.0
        assert se == pytest.approx(1.0 / math.sqrt(3))


class TestReportCSV:
    def test_roundtrip_exact_floats(self, tmp_path):
        reports = [
            mt.MetricReport("fdr", "edbh", "t=1", 1 / 3, 0.1234567890123456789, 100),
            mt.MetricReport("arl", "edbh", "eta=1", 311.25, math.nan, 500, 0.25),
        ]
        path = tmp_path / "metrics.csv"
        mt.write_reports_csv(reports, str(path))
        import csv

        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["estimate"]) == 1 / 3
        assert float(rows[1]["censored_frac"]) == 0.25
        assert rows[0]["metric"] == "fdr" and rows[1]["t_or_stop"] == "eta=1"

    def test_write_is_atomic(self, tmp_path):
        path = tmp_path / "metrics.csv"
        mt.write_reports_csv([], str(path))
        assert path.exists()
        assert not (tmp_path / "metrics.csv.tmp").exists()
