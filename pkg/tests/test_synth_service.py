from datetime import date

import numpy as np
import pandas as pd
import pytest

from config import StudyConfig, config_hash
from services.artifact_service import ArtifactStore, read_json
from services.estimator_service import did_estimate, event_study
from services.panel_service import read_flags
from services.pipeline_service import FLAGS, RunContext, run_panel, run_score, run_synth
from services.synth_service import (
    MonteCarloSpec,
    SynthConfig,
    derive_seed,
    generate_corpus,
    generate_panel,
    make_anchors,
    monte_carlo,
)
from utils.exceptions import ConfigurationError, DomainError
from tests.conftest import corpus_config


class TestSeeds:
    def test_derived_seeds_are_stable_and_distinct(self):
        seeds = [derive_seed(7, i) for i in range(100)]
        assert seeds == [derive_seed(7, i) for i in range(100)]
        assert len(set(seeds)) == 100
        assert derive_seed(8, 0) != derive_seed(7, 0)


class TestDirectPanel:
    def test_deterministic(self):
        cfg = SynthConfig(n_users=25, seed=3)
        first, truth_a = generate_panel(cfg)
        second, truth_b = generate_panel(cfg)
        pd.testing.assert_frame_equal(first, second)
        assert truth_a.to_dict() == truth_b.to_dict()
        third, _ = generate_panel(cfg, seed=4)
        assert not first["avg_slant"].equals(third["avg_slant"])

    def test_layout(self):
        cfg = SynthConfig(n_users=30, rate=3.0, seed=1)
        panel, truth = generate_panel(cfg)
        assert panel["day"].between(cfg.start, cfg.end).all()
        assert set(panel.loc[panel["treated"] == 1, "user_id"]) <= truth.treated
        assert (panel["post"] == (panel["day"] >= cfg.ban_date).astype(int)).all()
        assert len(truth.treated) == 15
        assert not panel.duplicated(["user_id", "day"]).any()

    def test_no_effect_no_noise(self):
        panel, _ = generate_panel(SynthConfig(n_users=30, true_effect=0.0, noise_sd=0.0, rate=3.0, seed=2))
        assert abs(did_estimate(panel, "avg_slant").coefficients["eu_x_ban"]) < 1e-8

    def test_expected_cells_match_noiseless_outcome(self):
        panel, truth = generate_panel(SynthConfig(n_users=10, noise_sd=0.0, seed=5))
        merged = panel.merge(truth.expected, on=["user_id", "day"])
        assert np.allclose(merged["avg_slant"], merged["expected"])

    def test_pretrend_shows_up_before_the_ban(self):
        cfg = SynthConfig(n_users=40, noise_sd=0.0, true_effect=0.0, pretrend=0.01, rate=3.0, seed=6)
        panel, _ = generate_panel(cfg)
        fit = did_estimate(panel, "avg_slant")
        assert fit.coefficients["eu_x_ban"] > 0.0

    def test_flags_frame_groups(self):
        cfg = SynthConfig(n_users=80, interaction_share=0.5, supplier_share=0.5, seed=9)
        panel, truth = generate_panel(cfg)
        users = sorted(panel["user_id"].unique())
        flags = truth.flags_frame(users).set_index("user_id")
        assert set(flags.index[flags["is_interaction"]]) == set(truth.interaction) & set(users)
        assert flags.loc[flags["slant_group"].notna()].index.isin(list(truth.interaction)).all()
        assert set(flags["activity_group"].dropna()) <= {"moderate", "high", "top05"}


class TestPoleAnchoredCorpus:
    def test_anchor_cosine(self):
        a, b = make_anchors(32, 0.2, np.random.default_rng(0))
        assert float(a @ b) == pytest.approx(0.2)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        with pytest.raises(DomainError):
            make_anchors(8, 0.995, np.random.default_rng(0))

    def test_needs_pole_mode(self):
        with pytest.raises(ConfigurationError):
            generate_corpus(SynthConfig(mode="direct-outcome"))

    def test_corpus_shape(self):
        cfg = SynthConfig(mode="pole-anchored", n_users=20, dim=8, seed=4)
        generated = generate_corpus(cfg)
        ids = [t["id"] for t in generated.tweets] + [t["id"] for t in generated.pole_r + generated.pole_u]
        assert set(ids) == set(generated.embeddings)
        assert all(v.shape == (8,) for v in generated.embeddings.values())
        corpus = generated.corpus()
        assert len(corpus) == len(generated.tweets)
        assert corpus.frame["day"].between(cfg.start, cfg.end).all()
        late = generated.truth.late_accounts
        created = {p["user_id"]: date.fromisoformat(p["account_created"]) for p in generated.profiles}
        assert all(created[u] >= cfg.ban_date for u in late)

    @staticmethod
    def _recovered_flags(root, seed):
        cfg = StudyConfig.model_validate(corpus_config(root, seed=seed))
        ctx = RunContext(cfg, ArtifactStore(cfg.output_dir), cfg.seed, 2, config_hash(cfg), "test")
        run_synth(ctx)
        run_score(ctx)
        run_panel(ctx)
        truth = read_json(ctx.store.path("synth/truth.json"))
        flags = read_flags(ctx.store.path(FLAGS)).set_index("user_id")
        return truth, flags

    def _assert_recovered(self, truth, flags):
        def flagged(column):
            return set(flags.index[flags[column]])

        assert flagged("is_interaction") == set(truth["interaction"])
        assert flagged("is_supplier") == set(truth["suppliers"])
        assert flagged("is_bot") == set(truth["bots"])
        # a late account may post nothing before the window closes
        assert flagged("created_after_ban") == set(truth["late_accounts"]) & set(flags.index)

    def test_pipeline_recovers_cohorts(self, tmp_path):
        self._assert_recovered(*self._recovered_flags(tmp_path, 3))

    @pytest.mark.slow
    def test_cohorts_are_recovered_across_seeds(self, tmp_path):
        for seed in range(50):
            truth, flags = self._recovered_flags(tmp_path / f"seed{seed}", seed)
            self._assert_recovered(truth, flags)


class TestMonteCarlo:
    def test_too_few_replications(self):
        with pytest.raises(ConfigurationError):
            monte_carlo(SynthConfig(n_users=20), MonteCarloSpec(), reps=10)

    def test_pole_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            monte_carlo(SynthConfig(mode="pole-anchored"), MonteCarloSpec(), reps=50)

    @pytest.mark.slow
    def test_twfe_is_unbiased(self):
        cfg = SynthConfig(n_users=40, noise_sd=0.2, rate=2.0)
        result = monte_carlo(cfg, MonteCarloSpec(estimator="twfe"), reps=60, master_seed=1, threads=4, progress=False)
        assert result.n_failed == 0
        assert abs(result.bias) < 4 * result.mc_se
        assert 0.8 <= result.coverage_95 <= 1.0

    @pytest.mark.slow
    def test_draws_do_not_depend_on_threads(self):
        cfg = SynthConfig(n_users=20, rate=2.0)
        one = monte_carlo(cfg, MonteCarloSpec(), reps=50, master_seed=3, threads=1, progress=False)
        four = monte_carlo(cfg, MonteCarloSpec(), reps=50, master_seed=3, threads=4, progress=False)
        assert one.draws["estimate"].tolist() == four.draws["estimate"].tolist()
        assert one.bias == four.bias

    @pytest.mark.slow
    def test_placebo_coverage(self):
        cfg = SynthConfig(n_users=40, noise_sd=0.2, rate=2.0, true_effect=0.0)
        result = monte_carlo(cfg, MonteCarloSpec(), reps=300, master_seed=11, threads=4, progress=False)
        assert result.n_failed == 0
        assert 0.92 <= result.coverage_95 <= 0.98

    @pytest.mark.slow
    def test_ban_effect_is_recovered(self):
        cfg = SynthConfig(n_users=200, noise_sd=0.2, rate=1.0, true_effect=-0.05)
        assert len(cfg.window.days) == 25
        result = monte_carlo(cfg, MonteCarloSpec(), reps=200, master_seed=5, threads=4, progress=False)
        assert result.n_failed == 0
        assert abs(result.mean_estimate - (-0.05)) <= 2 * result.mc_se

    @pytest.mark.slow
    def test_imputation_is_unbiased_without_effect(self):
        cfg = SynthConfig(n_users=40, noise_sd=0.2, rate=2.0, true_effect=0.0)
        spec = MonteCarloSpec(estimator="imputation", n_boot=19)
        result = monte_carlo(cfg, spec, reps=60, master_seed=2, threads=4, progress=False)
        assert result.n_failed == 0
        assert abs(result.bias) <= 3 * result.mc_se


class TestEventStudyMonteCarlo:
    REFERENCE = date(2022, 3, 1)

    def _pre_coefficients(self, cfg, reps, master_seed=4):
        draws = []
        for rep in range(reps):
            panel, _ = generate_panel(cfg, derive_seed(master_seed, rep))
            table = event_study(panel, "avg_slant", self.REFERENCE).table
            draws.append(table[table["start"] < self.REFERENCE].set_index("start")["coef"])
        return pd.DataFrame(draws)

    @pytest.mark.slow
    def test_parallel_trends_center_pre_coefficients(self):
        cfg = SynthConfig(n_users=60, noise_sd=0.2, rate=2.0)
        draws = self._pre_coefficients(cfg, reps=100)
        mean_pre = draws.mean(axis=1)
        mc_se = mean_pre.std(ddof=1) / np.sqrt(len(mean_pre))
        assert abs(mean_pre.mean()) <= 3 * mc_se

    @pytest.mark.slow
    def test_pretrend_is_detected(self):
        cfg = SynthConfig(n_users=60, noise_sd=0.2, rate=2.0, pretrend=0.03)
        detected = 0
        for rep in range(50):
            panel, _ = generate_panel(cfg, derive_seed(6, rep))
            table = event_study(panel, "avg_slant", self.REFERENCE).table.set_index("start")
            detected += int(table.loc[cfg.start, "hi95"] < 0.0)
        assert detected >= 45
