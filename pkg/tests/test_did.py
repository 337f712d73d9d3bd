import numpy as np
import pytest

from paneltrends.did import (
    bacon_decompose,
    csdid,
    did_multiple,
    iw,
    panel_match,
    stacked_did,
)
from paneltrends.errors import EstimatorError
from paneltrends.fe import twfe_att
from paneltrends.simulate import DgpSpec, simulate_panel

from conftest import additive_panel, panel_from_grids


def staggered_panel(seed, effect="constant", base=1.0, slope=0.0, noise=0.0,
                    n=24, t=8, cohorts=(3, 5), never=0.25):
    return simulate_panel(
        DgpSpec(n_units=n, n_periods=t, assignment="staggered", cohort_periods=cohorts,
                never_treated_share=never, effect=effect, effect_base=base,
                effect_slope=slope, noise_sd=noise, seed=seed)
    ).dataset


class TestCsdid:
    def test_constant_effect_every_cell_is_one(self):
        ds = staggered_panel(1)
        for mode in ("never", "notyet"):
            grid = csdid(ds, mode)
            for (g, l), cell in grid.cells.items():
                want = 1.0 if l >= 1 else 0.0
                assert abs(cell["estimate"] - want) < 1e-10, (mode, g, l)
            assert abs(grid.att - 1.0) < 1e-10

    def test_ramp_effect_cells_equal_relative_period(self):
        ds = staggered_panel(2, effect="ramp", base=1.0, slope=1.0)
        grid = csdid(ds, "never")
        for (g, l), cell in grid.cells.items():
            want = float(l) if l >= 1 else 0.0
            assert abs(cell["estimate"] - want) < 1e-10

    def test_two_period_single_cohort_reduces_to_did_of_means(self, rng):
        y = rng.normal(size=(6, 2))
        d = np.zeros((6, 2))
        d[:3, 1] = 1
        ds = panel_from_grids(y, d)
        grid = csdid(ds, "never")
        did = (y[:3, 1].mean() - y[:3, 0].mean()) - (y[3:, 1].mean() - y[3:, 0].mean())
        assert abs(grid.att - did) < 1e-12

    def test_small_comparison_cells_flagged_sparse(self, rng):
        d = np.zeros((6, 5))
        d[:4, 2:] = 1  # only two never-treated comparison units
        ds, _ = additive_panel(rng, 6, 5, d, effect=1.0)
        grid = csdid(ds, "never")
        assert all(c["sparse"] for c in grid.cells.values())

    def test_never_mode_requires_never_treated(self):
        ds = staggered_panel(3, never=0.0)
        with pytest.raises(EstimatorError, match="never-treated"):
            csdid(ds, "never")

    def test_reversal_data_rejected(self):
        ds = panel_from_grids(np.random.default_rng(0).normal(size=(4, 5)),
                              [[0, 1, 0, 0, 0], [0, 0, 1, 1, 1], [0, 0, 0, 0, 0], [0, 0, 0, 1, 1]])
        with pytest.raises(EstimatorError, match="staggered"):
            csdid(ds, "never")

    def test_earlier_base_period_option(self, rng):
        ds = staggered_panel(4, noise=0.5)
        grid = csdid(ds, "never", base_period=-1)
        assert all(l != -1 for (_, l) in grid.cells)
        assert any(l == 0 for (_, l) in grid.cells)

    def test_empty_comparison_cell_omitted_and_reported(self, rng):
        # only cohorts, no never-treated: the last cohort's final periods
        # have no not-yet-treated comparison
        d = np.zeros((6, 6))
        d[:3, 2:] = 1
        d[3:, 4:] = 1
        ds, _ = additive_panel(rng, 6, 6, d, effect=1.0)
        with pytest.warns(UserWarning, match="omitted"):
            grid = csdid(ds, "notyet")
        assert grid.omitted_cells
        assert all(g == 5 or l < 3 for (g, l) in grid.cells)


class TestIw:
    def test_matches_csdid_never_on_balanced_panels(self, rng):
        for seed in range(5):
            ds = staggered_panel(100 + seed, effect="ramp", base=1.0, slope=0.7, noise=1.0)
            assert abs(iw(ds).att - csdid(ds, "never").att) < 1e-8

    def test_no_never_treated_uses_last_cohort(self, rng):
        ds = staggered_panel(6, never=0.0, cohorts=(3, 6), noise=0.5)
        r = iw(ds)
        assert r.comparison_cohort == 6
        # nothing estimable at or after the comparison cohort's adoption
        assert all(g + l - 1 < 6 for (g, l) in r.group_time)

    def test_constant_noiseless_recovers_effect(self):
        ds = staggered_panel(7)
        assert abs(iw(ds).att - 1.0) < 1e-8

    def test_single_cohort_without_never_rejected(self, rng):
        d = np.zeros((4, 5))
        d[:, 3:] = 1
        ds, _ = additive_panel(rng, 4, 5, d, effect=1.0)
        with pytest.raises(EstimatorError):
            iw(ds)

    def test_missingness_warns_about_saturated_regression(self, rng):
        ds = staggered_panel(8, noise=0.5)
        y = ds.outcome.copy()
        y[0, 0] = np.nan
        ds2 = panel_from_grids(y, ds.treatment)
        with pytest.warns(UserWarning, match="missing data"):
            iw(ds2)


def stacked_ols_oracle(ds, cohorts, never_units, t_max):
    """Independent dense OLS on the stacked design."""
    rows = []
    for g, members in cohorts.items():
        for kind, idx in (("c", members), ("n", never_units)):
            for i in idx:
                for j in range(t_max):
                    if np.isnan(ds.outcome[i, j]):
                        continue
                    rel = j + 1 - g + 1 if kind == "c" else None
                    rows.append((g, i, j, rel, ds.outcome[i, j]))
    sub_units = sorted({(g, i) for g, i, *_ in rows})
    sub_times = sorted({(g, j) for g, _, j, _, _ in rows})
    rels = sorted({r[3] for r in rows if r[3] is not None and r[3] != 0})
    uix = {k: p for p, k in enumerate(sub_units)}
    tix = {k: p for p, k in enumerate(sub_times)}
    rix = {k: p for p, k in enumerate(rels)}
    X = np.zeros((len(rows), len(sub_units) + len(sub_times) + len(rels)))
    y = np.zeros(len(rows))
    for n_, (g, i, j, rel, val) in enumerate(rows):
        X[n_, uix[(g, i)]] = 1.0
        X[n_, len(sub_units) + tix[(g, j)]] = 1.0
        if rel is not None and rel != 0:
            X[n_, len(sub_units) + len(sub_times) + rix[rel]] = 1.0
        y[n_] = val
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return {r: coef[len(sub_units) + len(sub_times) + p] for r, p in rix.items()}


class TestStackedDid:
    def test_constant_noiseless(self):
        ds = staggered_panel(9)
        st = stacked_did(ds)
        for row in st.dynamic:
            want = 1.0 if row["period"] >= 1 else 0.0
            assert abs(row["estimate"] - want) < 1e-8

    def test_equal_cohorts_average_heterogeneous_effects(self, rng):
        # two equal-size cohorts with effects 1 and 3 at the same relative
        # period and equal residual variance: the variance-weighted estimate
        # at that period is the midpoint 2
        y = np.zeros((6, 5))
        d = np.zeros((6, 5))
        alpha = rng.normal(size=6)
        xi = rng.normal(size=5)
        d[:2, 2:] = 1
        d[2:4, 3:] = 1
        for i in range(6):
            for j in range(5):
                eff = 0.0
                if d[i, j]:
                    eff = 1.0 if i < 2 else 3.0
                y[i, j] = alpha[i] + xi[j] + eff
        ds = panel_from_grids(y, d)
        st = stacked_did(ds)
        assert abs(st.dynamic_estimate(1) - 2.0) < 1e-8

    def test_matches_dense_ols_oracle(self, rng):
        ds = staggered_panel(10, effect="cohort", base=1.0, noise=0.8, cohorts=(3, 5))
        from paneltrends.panel import compute_event_structure

        es = compute_event_structure(ds)
        cohorts = {g: idx for g, idx in es.cohorts().items()}
        never = es.never_treated_units()
        got = stacked_did(ds)
        want = stacked_ols_oracle(ds, cohorts, never, ds.n_periods)
        for row in got.dynamic:
            assert abs(row["estimate"] - want[row["period"]]) < 1e-8

    def test_unequal_cohorts_differ_from_share_weighted_mean(self, rng):
        # variance weights are not cohort-share weights
        y = np.zeros((8, 5))
        d = np.zeros((8, 5))
        alpha = rng.normal(size=8)
        xi = rng.normal(size=5)
        d[:1, 2:] = 1  # cohort of 1, effect 1
        d[1:5, 3:] = 1  # cohort of 4, effect 3
        for i in range(8):
            for j in range(5):
                eff = 0.0
                if d[i, j]:
                    eff = 1.0 if i < 1 else 3.0
                y[i, j] = alpha[i] + xi[j] + eff
        ds = panel_from_grids(y, d)
        st = stacked_did(ds)
        share_weighted = (1 * 1.0 + 4 * 3.0) / 5
        got = st.dynamic_estimate(1)
        oracle = stacked_ols_oracle(
            ds, {3: np.array([0]), 4: np.array([1, 2, 3, 4])}, np.array([5, 6, 7]), 5
        )
        assert abs(got - oracle[1]) < 1e-8
        assert abs(got - share_weighted) > 1e-3

    def test_requires_never_treated(self):
        ds = staggered_panel(11, never=0.0)
        with pytest.raises(EstimatorError, match="never-treated"):
            stacked_did(ds)

    def test_truncated_window_reported(self):
        ds = staggered_panel(12, cohorts=(3,), t=6)
        st = stacked_did(ds, leads=5, lags=10)
        assert st.truncated_cohorts == [3]


class TestPanelMatch:
    def test_matches_csdid_notyet_in_staggered_setting(self):
        for seed in range(5):
            ds = staggered_panel(200 + seed, effect="ramp", base=0.5, slope=1.0, noise=1.0)
            pm = panel_match(ds, history=1, max_lead=ds.n_periods)
            cs = csdid(ds, "notyet")
            for row in pm.dynamic:
                assert abs(row["estimate"] - cs.dynamic_estimate(row["period"])) < 1e-8

    def test_hand_enumerable_matched_set_with_reversal(self):
        # focal u1 switches in at t=3 with history (0,0); u2 shares it and
        # stays control; u3 was treated at t=2 (history differs); u4 is
        # treated at t=3 (not under control)
        d = [
            [0, 0, 1, 1],
            [0, 0, 0, 0],
            [0, 1, 0, 0],
            [0, 0, 1, 1],
        ]
        y = np.arange(16, dtype=float).reshape(4, 4)
        ds = panel_from_grids(y, d)
        pm = panel_match(ds, history=2, max_lead=2)
        sets = {(s.focal_unit, s.switch_period): s for s in pm.matched_sets}
        s1 = sets[(0, 3)]
        assert s1.members.tolist() == [1]
        assert (3, 3) not in sets or sets[(3, 3)].members.tolist() == [1]

    def test_history_longer_than_available_excludes_focal(self):
        d = np.zeros((4, 6))
        d[0, 1:] = 1  # switch at t=2: no room for a 3-period history
        d[1, 4:] = 1  # switch at t=5: window fits
        ds = panel_from_grids(np.random.default_rng(0).normal(size=(4, 6)), d)
        pm = panel_match(ds, history=3, max_lead=2)
        assert pm.n_empty_sets == 1
        assert all(s.focal_unit != 0 for s in pm.matched_sets)

    def test_all_focal_windows_out_of_panel_rejected(self):
        d = np.zeros((4, 5))
        d[0, 2:] = 1  # only switch-in, history window leaves the panel
        ds = panel_from_grids(np.random.default_rng(0).normal(size=(4, 5)), d)
        with pytest.raises(EstimatorError, match="nonempty matched"):
            panel_match(ds, history=4, max_lead=2)

    def test_survivors_shrink_with_leads(self):
        d = np.zeros((5, 6))
        d[0, 2:] = 1
        d[1, 4:] = 1  # member that later adopts: survives leads 1-2 only
        ds = panel_from_grids(np.random.default_rng(1).normal(size=(5, 6)), d)
        pm = panel_match(ds, history=1, max_lead=4)
        s = [m for m in pm.matched_sets if m.focal_unit == 0][0]
        assert 1 in s.survivors_by_lead[1] and 1 in s.survivors_by_lead[2]
        assert 1 not in s.survivors_by_lead[3]


class TestDidMultiple:
    def test_equals_panel_match_lead_one_when_staggered(self):
        for seed in range(5):
            ds = staggered_panel(300 + seed, effect="ramp", base=1.0, slope=0.4, noise=1.0)
            dm = did_multiple(ds)
            pm = panel_match(ds, history=1, max_lead=1)
            assert abs(dm.estimate - pm.dynamic_estimate(1)) < 1e-8

    def test_joiner_and_leaver_sign_convention(self):
        # joiner gains +2 on entry; leaver loses the same effect on exit;
        # stable units pin down the counterfactual change of zero
        d = [
            [0, 1],  # joiner
            [0, 0],  # stable control
            [1, 0],  # leaver
            [1, 1],  # stable treated
        ]
        y = [
            [0.0, 2.0],  # +2 from joining
            [0.0, 0.0],
            [5.0, 3.0],  # -2 from leaving
            [5.0, 5.0],
        ]
        ds = panel_from_grids(y, d)
        r = did_multiple(ds)
        assert abs(r.estimate - 2.0) < 1e-12
        assert r.n_joiners == 1 and r.n_leavers == 1

    def test_no_switchers_rejected(self):
        ds = panel_from_grids(np.zeros((2, 3)), [[1, 1, 1], [0, 0, 0]])
        with pytest.raises(EstimatorError, match="switcher"):
            did_multiple(ds)


class TestBaconDecompose:
    def test_single_cohort_plus_never_single_component(self, rng):
        d = np.zeros((6, 6))
        d[:3, 3:] = 1
        ds, _ = additive_panel(rng, 6, 6, d, effect=1.0, noise_sd=0.5)
        b = bacon_decompose(ds)
        assert len(b.components) == 1
        assert b.components[0]["kind"] == "treated_vs_never"
        assert abs(b.components[0]["weight"] - 1.0) < 1e-12
        assert abs(b.twfe_from_components - twfe_att(ds).estimate) < 1e-8

    def test_constant_effect_components_all_equal(self, rng):
        d = np.zeros((9, 8))
        d[:3, 2:] = 1
        d[3:6, 5:] = 1
        ds, _ = additive_panel(rng, 9, 8, d, effect=2.0)
        b = bacon_decompose(ds)
        for c in b.components:
            assert abs(c["estimate"] - 2.0) < 1e-10

    def test_reconstructs_twfe_on_random_balanced_panels(self, rng):
        for seed in range(10):
            ds = staggered_panel(400 + seed, effect="ramp", base=1.0, slope=0.6, noise=1.0,
                                 cohorts=(3, 4, 6), never=0.2)
            b = bacon_decompose(ds)
            assert abs(b.total_weight() - 1.0) < 1e-10
            assert abs(b.twfe_from_components - twfe_att(ds).estimate) < 1e-8

    def test_adversarial_panel_has_negative_timing_component(self):
        from paneltrends.simulate import adversarial_negative_weighting

        sp = adversarial_negative_weighting()
        b = bacon_decompose(sp.dataset)
        later = b.by_kind("later_vs_earlier")
        assert any(c["estimate"] < 0 for c in later)
        assert sp.effect_grid[sp.dataset.treatment == 1].min() >= 1.0

    def test_unbalanced_panel_rejected(self, rng):
        d = np.zeros((4, 5))
        d[:2, 3:] = 1
        y = rng.normal(size=(4, 5))
        y[0, 0] = np.nan
        ds = panel_from_grids(y, d)
        with pytest.raises(EstimatorError, match="balanced"):
            bacon_decompose(ds)


class TestSharedInvariances:
    def test_aggregation_weights_are_convex(self):
        ds = staggered_panel(500, effect="ramp", base=1.0, slope=0.5, noise=1.0)
        grid = csdid(ds, "notyet")
        total = sum(c["n_treated"] for (g, l), c in grid.cells.items() if l >= 1)
        assert total > 0  # weights n/total are nonnegative and sum to one
        b = bacon_decompose(ds)
        assert all(c["weight"] >= 0 for c in b.components)
        assert abs(b.total_weight() - 1.0) < 1e-10

    def test_unit_relabeling_invariance(self, rng):
        ds = staggered_panel(501, noise=0.7)
        rows = ds.to_long_rows()
        mapping = {u: f"z{k:03d}" for k, u in enumerate(reversed(ds.unit_ids))}
        for r in rows:
            r["unit"] = mapping[r["unit"]]
        from paneltrends.panel import build_dataset

        ds2 = build_dataset(rows)
        assert abs(csdid(ds, "never").att - csdid(ds2, "never").att) < 1e-10
        assert abs(iw(ds).att - iw(ds2).att) < 1e-10
        assert abs(panel_match(ds, 1, 8).att - panel_match(ds2, 1, 8).att) < 1e-10

    def test_common_period_shift_invariance(self):
        ds = staggered_panel(502, noise=0.7)
        y = ds.outcome + np.linspace(0, 5, ds.n_periods)[None, :]
        ds2 = panel_from_grids(y, ds.treatment)
        assert abs(csdid(ds, "never").att - csdid(ds2, "never").att) < 1e-10
        assert abs(stacked_did(ds).att - stacked_did(ds2).att) < 1e-8
        assert abs(did_multiple(ds).estimate - did_multiple(ds2).estimate) < 1e-10
