import numpy as np
import pytest

from paneltrends.errors import SchemaError
from paneltrends.fe import twfe_att
from paneltrends.imputation import estimate_imputation
from paneltrends.panel import SettingClass, classify_setting, compute_event_structure
from paneltrends.simulate import (
    DgpSpec,
    adversarial_negative_weighting,
    simulate_panel,
    true_estimands,
)


class TestSimulatePanel:
    def test_noiseless_block_constant_effect(self):
        sp = simulate_panel(DgpSpec(n_units=10, n_periods=6, assignment="block",
                                    block_start=4, never_treated_share=0.5,
                                    effect="constant", effect_base=2.0, noise_sd=0.0, seed=1))
        treated = sp.dataset.treatment == 1
        gap = sp.dataset.outcome[treated] - sp.outcome_untreated[treated]
        assert np.all(np.abs(gap - 2.0) < 1e-12)

    def test_same_seed_reproduces_panel(self):
        spec = DgpSpec(n_units=15, n_periods=7, assignment="reversal", noise_sd=1.0, seed=77)
        a, b = simulate_panel(spec), simulate_panel(spec)
        np.testing.assert_array_equal(a.dataset.outcome, b.dataset.outcome)
        np.testing.assert_array_equal(a.dataset.treatment, b.dataset.treatment)

    def test_pretrend_visible_in_truth_grids(self):
        spec = DgpSpec(n_units=12, n_periods=6, assignment="block", block_start=4,
                       never_treated_share=0.5, noise_sd=0.0, pretrend_slope=0.5, seed=2)
        sp = simulate_panel(spec)
        ever = np.isfinite(sp.cohort_of)
        y0 = sp.outcome_untreated
        drift = np.diff(y0[ever], axis=1) - np.diff(y0[~ever], axis=1).mean(axis=0)
        assert np.allclose(drift, 0.5)

    def test_observed_outcome_is_potential_outcome_switch(self):
        sp = simulate_panel(DgpSpec(n_units=20, n_periods=8, assignment="reversal",
                                    noise_sd=0.7, seed=5))
        d = sp.dataset.treatment
        want = np.where(d == 1, sp.outcome_treated, sp.outcome_untreated)
        np.testing.assert_array_equal(sp.dataset.outcome, want)

    def test_degenerate_spec_rejected(self):
        with pytest.raises(SchemaError, match="no variation"):
            simulate_panel(DgpSpec(n_units=4, n_periods=4, assignment="staggered",
                                   never_treated_share=1.0, seed=1))

    def test_missing_rate_blanks_outcomes(self):
        sp = simulate_panel(DgpSpec(n_units=30, n_periods=10, assignment="block",
                                    block_start=5, missing_rate=0.2, seed=6))
        share = np.isnan(sp.dataset.outcome).mean()
        assert 0.1 < share < 0.3
        assert not np.isnan(sp.dataset.treatment).any()

    def test_settings_realized(self):
        block = simulate_panel(DgpSpec(n_units=10, n_periods=5, assignment="block",
                                       block_start=3, seed=1))
        assert classify_setting(compute_event_structure(block.dataset)) is SettingClass.MULTI_PERIOD_BLOCK
        rev = simulate_panel(DgpSpec(n_units=20, n_periods=8, assignment="reversal", seed=3))
        assert classify_setting(compute_event_structure(rev.dataset)) is SettingClass.GENERAL


class TestTrueEstimands:
    def test_constant_effect(self):
        sp = simulate_panel(DgpSpec(n_units=12, n_periods=6, assignment="staggered",
                                    cohort_periods=(3, 4), effect="constant",
                                    effect_base=2.0, seed=4))
        tr = true_estimands(sp)
        assert tr["att"] == 2.0
        assert all(v == 2.0 for v in tr["dynamic"].values())

    def test_ramp_effect_matches_relative_period(self):
        sp = simulate_panel(DgpSpec(n_units=12, n_periods=8, assignment="staggered",
                                    cohort_periods=(3, 5), effect="ramp", effect_base=1.0,
                                    effect_slope=1.0, seed=4))
        tr = true_estimands(sp)
        for l, v in tr["dynamic"].items():
            assert v == float(l)
        d = sp.dataset.treatment
        rel = sp.relative_period
        assert abs(tr["att"] - rel[d == 1].mean()) < 1e-12

    def test_cohort_effect_matches_pointwise(self):
        sp = simulate_panel(DgpSpec(n_units=20, n_periods=8, assignment="staggered",
                                    cohort_periods=(3, 6), effect="cohort", effect_base=1.0,
                                    effect_cohort_gap=3.0, seed=4))
        tr = true_estimands(sp)
        for (g, l), v in tr["group_time"].items():
            want = 1.0 if g == 3 else 4.0
            assert v == want


class TestAdversarialFixture:
    def test_every_effect_at_least_one(self):
        sp = adversarial_negative_weighting()
        assert sp.effect_grid[sp.dataset.treatment == 1].min() >= 1.0

    def test_twfe_is_negative(self):
        sp = adversarial_negative_weighting()
        assert twfe_att(sp.dataset).estimate < 0.0

    def test_imputation_recovers_truth(self):
        sp = adversarial_negative_weighting()
        assert abs(estimate_imputation(sp.dataset).att - sp.true_att) < 1e-8
