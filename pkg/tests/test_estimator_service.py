import json
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from services.estimator_service import (
    FitResult,
    RegressionSpec,
    assemble_table,
    cluster_vcov,
    coefficient_frame,
    demean_two_way,
    did_battery,
    did_estimate,
    event_study,
    fit_twfe,
    imputation_att,
    summarize_fit,
    weekly_interactions,
)
from services.synth_service import SynthConfig, generate_panel
from utils.exceptions import (
    ConvergenceError,
    EmptySelectionError,
    IdentificationError,
    InferenceError,
    SpecificationError,
)
from tests.conftest import BAN, dummy_ols


def _fit(beta=-0.05, se=0.01):
    return FitResult(
        spec=RegressionSpec(outcome="avg_slant"),
        terms=["eu_x_ban"],
        coefficients={"eu_x_ban": beta},
        vcov=np.array([[se * se]]),
        n_obs=100,
        n_clusters=10,
        n_users=10,
        n_days=10,
        k=20,
        r2_within=0.1,
    )


def _noiseless(**overrides):
    cfg = SynthConfig(n_users=30, noise_sd=0.0, rate=3.0, seed=5, **overrides)
    panel, _ = generate_panel(cfg)
    return panel, cfg


class TestDemeaning:
    def test_balanced_two_by_two(self):
        y = np.array([1.0, 2.0, 4.0, 7.0])
        users = np.array([0, 0, 1, 1])
        days = np.array([0, 1, 0, 1])
        out = demean_two_way(y, users, days)
        grid = y.reshape(2, 2)
        expected = grid - grid.mean(axis=1, keepdims=True) - grid.mean(axis=0, keepdims=True) + grid.mean()
        assert np.allclose(out.values[:, 0], expected.ravel(), atol=1e-12)

    def test_unbalanced_matches_dummy_residuals(self):
        rng = np.random.default_rng(8)
        users, days = np.meshgrid(np.arange(50), np.arange(20), indexing="ij")
        keep = rng.random(users.shape) < 0.7
        keep[:, 0] = True
        keep[0, :] = True
        u, d = users[keep], days[keep]
        y = rng.normal(size=u.size) + 0.3 * u - 0.1 * d
        out = demean_two_way(y, u, d)
        D = np.column_stack([np.eye(50)[u], np.eye(20)[d][:, 1:]])
        beta, *_ = np.linalg.lstsq(D, y, rcond=None)
        assert np.allclose(out.values[:, 0], y - D @ beta, atol=1e-8)
        assert out.final_delta < 1e-10

    def test_iteration_cap(self):
        rng = np.random.default_rng(1)
        u = rng.integers(0, 30, 200)
        d = rng.integers(0, 15, 200)
        with pytest.raises(ConvergenceError) as excinfo:
            demean_two_way(rng.normal(size=200), u, d, max_iter=1)
        assert excinfo.value.iterations == 1

    def test_non_finite_rejected(self):
        with pytest.raises(SpecificationError):
            demean_two_way(np.array([1.0, np.nan]), np.array([0, 1]), np.array([0, 0]))


class TestClusterVcov:
    def test_sandwich_matches_loop(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(60, 2))
        resid = rng.normal(size=60)
        clusters = [f"c{i % 7}" for i in range(60)]
        bread = np.linalg.inv(X.T @ X)
        meat = np.zeros((2, 2))
        for g in sorted(set(clusters)):
            rows = [i for i, c in enumerate(clusters) if c == g]
            s = X[rows].T @ resid[rows]
            meat += np.outer(s, s)
        n, G, k = 60, 7, 2 + 5
        expected = (G / (G - 1)) * ((n - 1) / (n - k)) * bread @ meat @ bread
        got = cluster_vcov(X, resid, clusters, "absorb-adjusted", n_absorbed=5)
        assert np.allclose(got, expected, atol=1e-10, rtol=0)

    def test_slopes_only_convention(self):
        rng = np.random.default_rng(2)
        X, resid = rng.normal(size=(30, 1)), rng.normal(size=30)
        clusters = [i % 5 for i in range(30)]
        adjusted = cluster_vcov(X, resid, clusters, "absorb-adjusted", n_absorbed=10)
        slopes = cluster_vcov(X, resid, clusters, "slopes-only", n_absorbed=10)
        assert adjusted[0, 0] / slopes[0, 0] == pytest.approx((30 - 1) / (30 - 11) / ((30 - 1) / (30 - 1)))

    def test_single_cluster(self):
        with pytest.raises(InferenceError):
            cluster_vcov(np.ones((4, 1)), np.ones(4), ["a"] * 4)


class TestTwfe:
    def test_matches_dummy_regression(self, synth_panel):
        panel, _, _ = synth_panel
        fit = did_estimate(panel, "avg_slant")
        oracle = dummy_ols(panel.assign(eu_x_ban=panel["treated"] * panel["post"]), "avg_slant", ["eu_x_ban"])
        assert fit.coefficients["eu_x_ban"] == pytest.approx(oracle[0], abs=1e-8)
        assert fit.n_clusters == panel["user_id"].nunique()
        assert fit.n_obs == len(panel)

    def test_noiseless_panel_recovers_effect(self):
        panel, cfg = _noiseless()
        fit = did_estimate(panel, "avg_slant")
        assert fit.coefficients["eu_x_ban"] == pytest.approx(cfg.true_effect, abs=1e-8)

    def test_no_effect_no_noise(self):
        panel, _ = _noiseless(true_effect=0.0)
        assert abs(did_estimate(panel, "avg_slant").coefficients["eu_x_ban"]) < 1e-8

    def test_row_order_does_not_matter(self, synth_panel):
        panel, _, _ = synth_panel
        shuffled = panel.sample(frac=1.0, random_state=3)
        assert did_estimate(shuffled, "avg_slant").coefficients == did_estimate(panel, "avg_slant").coefficients

    def test_constant_outcome(self, synth_panel):
        panel, _, _ = synth_panel
        fit = did_estimate(panel.assign(avg_slant=0.4), "avg_slant")
        assert fit.coefficients["eu_x_ban"] == pytest.approx(0.0, abs=1e-12)
        assert fit.r2_within == 0.0

    def test_absorbed_control_is_dropped(self, synth_panel):
        panel, _, _ = synth_panel
        fit = did_estimate(panel.assign(user_level=panel["treated"] * 2.0), "avg_slant", controls=["user_level"])
        assert fit.dropped_collinear == ["user_level"]
        assert "eu_x_ban" in fit.coefficients

    def test_missing_outcome_cells_are_left_out(self, synth_panel):
        panel, _, _ = synth_panel
        fit = did_estimate(panel, "share_proR_tweets")
        assert fit.dropped_missing == int(panel["share_proR_tweets"].isna().sum())
        assert fit.n_obs == int(panel["share_proR_tweets"].notna().sum())

    def test_no_control_users(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(IdentificationError):
            did_estimate(panel[panel["treated"] == 1], "avg_slant")

    def test_missing_column(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(SpecificationError):
            fit_twfe(panel, RegressionSpec(outcome="not_a_column"))

    def test_empty_panel(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(EmptySelectionError):
            did_estimate(panel.iloc[:0], "avg_slant")

    def test_matches_dummy_regression_on_fifty_panels(self):
        for seed in range(50):
            panel, _ = generate_panel(SynthConfig(n_users=12, noise_sd=0.3, rate=1.5, seed=seed))
            fit = did_estimate(panel, "avg_slant")
            oracle = dummy_ols(panel.assign(eu_x_ban=panel["treated"] * panel["post"]), "avg_slant", ["eu_x_ban"])
            assert fit.coefficients["eu_x_ban"] == pytest.approx(oracle[0], abs=1e-8), seed

    def test_user_and_day_constants_are_absorbed(self, synth_panel):
        panel, _, _ = synth_panel
        rng = np.random.default_rng(4)
        user_shift = dict(zip(panel["user_id"].unique(), rng.normal(0.0, 5.0, panel["user_id"].nunique())))
        day_shift = dict(zip(panel["day"].unique(), rng.normal(0.0, 5.0, panel["day"].nunique())))
        shifted = panel.assign(
            avg_slant=panel["avg_slant"] + panel["user_id"].map(user_shift) + panel["day"].map(day_shift)
        )
        before = did_estimate(panel, "avg_slant").coefficients["eu_x_ban"]
        after = did_estimate(shifted, "avg_slant").coefficients["eu_x_ban"]
        assert after == pytest.approx(before, abs=1e-8)

    def test_duplicated_clusters_keep_the_coefficient(self, synth_panel):
        panel, _, _ = synth_panel
        copy = panel.assign(user_id=panel["user_id"] + "_copy")
        doubled = pd.concat([panel, copy], ignore_index=True)
        fit = did_estimate(doubled, "avg_slant")
        assert fit.coefficients["eu_x_ban"] == pytest.approx(
            did_estimate(panel, "avg_slant").coefficients["eu_x_ban"], abs=1e-8
        )
        assert fit.n_clusters == 2 * panel["user_id"].nunique()

    def test_clustered_errors_widen_the_standard_error(self):
        panel, _ = generate_panel(SynthConfig(n_users=60, noise_sd=0.0, rate=3.0, seed=21))
        rng = np.random.default_rng(21)
        shock = dict(zip(panel["user_id"].unique(), rng.normal(0.0, 1.0, panel["user_id"].nunique())))
        panel = panel.assign(
            avg_slant=panel["avg_slant"] + panel["user_id"].map(shock) * panel["post"]
            + rng.normal(0.0, 0.05, len(panel))
        )
        fit = did_estimate(panel, "avg_slant")

        users, _ = pd.factorize(panel["user_id"])
        days, _ = pd.factorize(panel["day"])
        x = (panel["treated"] * panel["post"]).to_numpy(dtype=float)
        demeaned = demean_two_way(np.column_stack([panel["avg_slant"].to_numpy(), x]), users, days).values
        y_tilde, x_tilde = demeaned[:, 0], demeaned[:, 1]
        beta = x_tilde @ y_tilde / (x_tilde @ x_tilde)
        resid = y_tilde - beta * x_tilde
        dof = len(panel) - 1 - users.max() - 1 - days.max()
        classical = np.sqrt(resid @ resid / dof / (x_tilde @ x_tilde))

        assert fit.coefficients["eu_x_ban"] == pytest.approx(beta, abs=1e-8)
        assert fit.se["eu_x_ban"] > 2.0 * classical

    def test_confidence_interval_uses_clusters(self):
        fit = _fit(beta=0.2, se=0.05)
        lo, hi = fit.ci(0.95)["eu_x_ban"]
        crit = stats.t.ppf(0.975, 9)
        assert (lo, hi) == (pytest.approx(0.2 - crit * 0.05), pytest.approx(0.2 + crit * 0.05))
        assert fit.p_values()["eu_x_ban"] == pytest.approx(2 * stats.t.sf(4.0, 9))


class TestPercentOfMean:
    @pytest.mark.parametrize(
        "beta, mean, expected",
        [(-0.043, -0.068, -63.2), (-0.050, -0.068, -73.5), (0.0, 0.5, 0.0)],
    )
    def test_percent(self, beta, mean, expected):
        assert summarize_fit(_fit(beta), mean).pct_of_mean == pytest.approx(expected, abs=0.05)

    def test_zero_mean_is_undefined(self):
        fit = summarize_fit(_fit(-0.05), 0.0)
        assert fit.pct_of_mean is None
        assert fit.pre_period_mean == 0.0

    def test_pooled_versus_treated_mean(self, synth_panel):
        panel, _, _ = synth_panel
        pooled = did_estimate(panel, "avg_slant")
        treated = did_estimate(panel, "avg_slant", pre_mean="treated")
        pre = panel[panel["post"] == 0]
        assert pooled.pre_period_mean == pytest.approx(pre["avg_slant"].mean())
        assert treated.pre_period_mean == pytest.approx(pre.loc[pre["treated"] == 1, "avg_slant"].mean())


class TestBattery:
    def test_outcome_order_and_threads(self, synth_panel):
        panel, _, _ = synth_panel
        outcomes = ["avg_slant", "n_proR_tweets", "share_proR_tweets"]
        serial = did_battery(panel, outcomes, threads=1)
        parallel = did_battery(panel, outcomes, threads=3)
        assert list(parallel) == outcomes
        for outcome in outcomes:
            assert parallel[outcome].coefficients == serial[outcome].coefficients

    def test_failures_are_recorded(self, synth_panel):
        panel, _, _ = synth_panel
        failures = {}
        fits = did_battery(panel.drop(columns=["n_proR_tweets"]), ["avg_slant", "n_proR_tweets"], failures=failures)
        assert list(fits) == ["avg_slant"]
        assert failures["n_proR_tweets"].startswith("SpecificationError")

    def test_failures_raise_without_a_sink(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(SpecificationError):
            did_battery(panel.drop(columns=["n_proR_tweets"]), ["n_proR_tweets"])


class TestEventStudy:
    REFERENCE = BAN - timedelta(days=1)

    def test_reference_row_is_zero(self, synth_panel):
        panel, _, _ = synth_panel
        result = event_study(panel, "avg_slant", self.REFERENCE)
        reference = result.table[result.table["label"] == "reference"].iloc[0]
        assert (reference["coef"], reference["se"], reference["start"]) == (0.0, 0.0, self.REFERENCE)
        assert len(result.table) == panel["day"].nunique()
        assert list(result.plot_data().columns) == ["day", "coef", "lo", "hi"]

    def test_singleton_bins_equal_daily(self, synth_panel):
        panel, _, _ = synth_panel
        days = sorted(panel["day"].unique())
        daily = event_study(panel, "avg_slant", self.REFERENCE)
        binned = event_study(panel, "avg_slant", self.REFERENCE, bins=[(d, d) for d in days if d != self.REFERENCE])
        assert binned.fit.coefficients == pytest.approx(daily.fit.coefficients, abs=1e-12)

    def test_noiseless_post_days_carry_the_effect(self):
        panel, cfg = _noiseless()
        result = event_study(panel, "avg_slant", self.REFERENCE)
        table = result.table.set_index("start")
        for day in cfg.window.days:
            expected = cfg.true_effect if day >= BAN else 0.0
            assert table.loc[day, "coef"] == pytest.approx(expected, abs=1e-8)

    def test_bins(self, synth_panel):
        panel, _, cfg = synth_panel
        days = cfg.window.days
        bins = [(days[0], self.REFERENCE - timedelta(days=1)), (BAN, BAN + timedelta(days=6)), (BAN + timedelta(days=7), days[-1])]
        result = event_study(panel, "avg_slant", self.REFERENCE, bins=bins)
        assert result.fit.terms == [f"eu_x_{lo}_{hi}" for lo, hi in bins]

    @pytest.mark.parametrize("make_bins", [
        lambda days, ref: [(days[0], ref)],
        lambda days, ref: [(days[0], days[3]), (days[3], ref - timedelta(days=1)), (ref + timedelta(days=1), days[-1])],
        lambda days, ref: [(ref + timedelta(days=1), days[-1])],
        lambda days, ref: [(days[4], days[2])],
    ])
    def test_invalid_bins(self, synth_panel, make_bins):
        panel, _, cfg = synth_panel
        with pytest.raises(SpecificationError):
            event_study(panel, "avg_slant", self.REFERENCE, bins=make_bins(cfg.window.days, self.REFERENCE))

    def test_reference_day_without_cells(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(SpecificationError):
            event_study(panel, "avg_slant", date(2021, 1, 1))


class TestWeekly:
    def test_two_week_terms(self):
        panel, cfg = _noiseless(effect_profile="first_week")
        fit = weekly_interactions(panel, "avg_slant", cfg.window)
        assert fit.terms == ["eu_x_week1", "eu_x_week2"]
        assert fit.coefficients["eu_x_week1"] == pytest.approx(cfg.true_effect, abs=1e-8)
        assert fit.coefficients["eu_x_week2"] == pytest.approx(0.0, abs=1e-8)

    def test_short_post_period(self, synth_panel, short_window):
        panel, _, _ = synth_panel
        short = panel[panel["day"].map(short_window.contains)]
        with pytest.raises(SpecificationError):
            weekly_interactions(short, "avg_slant", short_window)


class TestImputation:
    def test_noiseless_panel_matches_twfe(self):
        panel, cfg = _noiseless()
        result = imputation_att(panel, "avg_slant", n_boot=19, seed=1)
        assert result.att == pytest.approx(cfg.true_effect, abs=1e-8)
        assert result.att == pytest.approx(did_estimate(panel, "avg_slant").coefficients["eu_x_ban"], abs=1e-8)
        assert result.n_failed_draws == 0

    def test_bootstrap_independent_of_threads(self, synth_panel):
        panel, _, _ = synth_panel
        one = imputation_att(panel, "avg_slant", n_boot=29, seed=4, threads=1)
        four = imputation_att(panel, "avg_slant", n_boot=29, seed=4, threads=4)
        assert one.se == four.se
        assert one.se > 0
        lo, hi = one.ci(0.95)
        assert lo < one.att < hi

    def test_treated_user_without_pre_cells(self, synth_panel):
        panel, truth, _ = synth_panel
        victim = sorted(truth.treated)[0]
        trimmed = panel[~((panel["user_id"] == victim) & (panel["post"] == 0))]
        result = imputation_att(trimmed, "avg_slant", n_boot=9, seed=0)
        assert result.dropped_users == [victim]

    def test_no_treated_post_cells(self, synth_panel):
        panel, _, _ = synth_panel
        with pytest.raises(IdentificationError):
            imputation_att(panel[panel["post"] == 0], "avg_slant", n_boot=9)


class TestTables:
    def test_stored_fit_rebuilds(self, synth_panel):
        panel, _, _ = synth_panel
        fit = did_estimate(panel, "avg_slant")
        back = FitResult.from_dict(json.loads(json.dumps(fit.to_dict())))
        assert back.coefficients == fit.coefficients
        assert back.se == pytest.approx(fit.se)
        assert back.ci(0.95) == pytest.approx(fit.ci(0.95))
        assert assemble_table({"avg_slant": back}).equals(assemble_table({"avg_slant": fit}))

    def test_table_layout(self):
        fit = summarize_fit(_fit(beta=-0.05, se=0.01), 0.25)
        table = assemble_table({"avg_slant": fit, "n_proR_tweets": summarize_fit(_fit(0.3, 0.5), 0.0)})
        assert list(table.index) == ["eu_x_ban", "", "Observations", "R2 (within)", "Pre-period mean of DV", "% of mean"]
        column = table["avg_slant"].tolist()
        assert column[0] == "-0.050***"
        assert column[1] == "[0.010]"
        assert column[2] == "100"
        assert column[5] == "-20.00"
        assert table["n_proR_tweets"].tolist()[5] == ""

    def test_coefficient_frame(self, synth_panel):
        panel, _, _ = synth_panel
        frame = coefficient_frame(did_battery(panel, ["avg_slant", "n_proR_tweets"]))
        assert frame["outcome"].tolist() == ["avg_slant", "n_proR_tweets"]
        assert (frame["lo95"] < frame["coef"]).all() and (frame["coef"] < frame["hi95"]).all()
        assert isinstance(frame, pd.DataFrame)
