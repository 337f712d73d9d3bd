import numpy as np
import pytest

from paneltrends.errors import EstimatorError
from paneltrends.fe import cluster_vcov, fit_fe, twfe_att, twfe_event_study
from paneltrends.simulate import DgpSpec, simulate_panel

from conftest import additive_panel, panel_from_grids


def dummy_ols(y, xgrids, mask):
    """Dense dummy-variable OLS oracle: intercept + unit/time dummies."""
    n, t = mask.shape
    rows, cols = np.nonzero(mask)
    design = [np.ones(rows.size)]
    design += [(rows == i).astype(float) for i in range(1, n)]
    design += [(cols == j).astype(float) for j in range(1, t)]
    for g in xgrids:
        design.append(np.asarray(g, dtype=float)[rows, cols])
    xm = np.column_stack(design)
    coef, *_ = np.linalg.lstsq(xm, np.asarray(y, dtype=float)[rows, cols], rcond=None)
    resid = np.asarray(y, dtype=float)[rows, cols] - xm @ coef
    return coef[-len(xgrids):] if xgrids else np.array([]), resid


class TestFitFe:
    def test_saturated_two_by_two_has_zero_residuals(self, rng):
        alpha, xi = rng.normal(size=2), rng.normal(size=2)
        y = alpha[:, None] + xi[None, :]
        fit = fit_fe(y, {}, np.ones((2, 2), dtype=bool))
        assert np.nanmax(np.abs(fit.residuals)) < 1e-12

    def test_balanced_panel_matches_dense_ols_oracle(self, rng):
        n, t = 6, 5
        x = rng.normal(size=(n, t))
        y = rng.normal(size=n)[:, None] + rng.normal(size=t)[None, :] + 0.8 * x + rng.normal(size=(n, t))
        mask = np.ones((n, t), dtype=bool)
        fit = fit_fe(y, {"x": x}, mask)
        beta, resid = dummy_ols(y, [x], mask)
        assert abs(fit.coef["x"] - beta[0]) < 1e-8
        np.testing.assert_allclose(fit.residuals[mask], resid, atol=1e-10)

    def test_unbalanced_mask_matches_dense_ols_oracle(self, rng):
        n, t = 8, 6
        x1 = rng.normal(size=(n, t))
        x2 = rng.normal(size=(n, t))
        y = (rng.normal(size=n)[:, None] + rng.normal(size=t)[None, :]
             + 0.5 * x1 - 1.2 * x2 + rng.normal(size=(n, t)))
        mask = rng.random((n, t)) > 0.25
        mask[:, 0] = True
        mask[0, :] = True
        fit = fit_fe(y, {"x1": x1, "x2": x2}, mask)
        beta, resid = dummy_ols(y, [x1, x2], mask)
        assert abs(fit.coef["x1"] - beta[0]) < 1e-8
        assert abs(fit.coef["x2"] - beta[1]) < 1e-8
        np.testing.assert_allclose(fit.residuals[mask], resid, atol=1e-8)

    def test_regressor_constant_within_units_dropped(self, rng):
        n, t = 5, 4
        z = np.repeat(rng.normal(size=n)[:, None], t, axis=1)  # unit-level only
        y = rng.normal(size=(n, t))
        with pytest.warns(UserWarning, match="collinear"):
            fit = fit_fe(y, {"z": z}, np.ones((n, t), dtype=bool))
        assert fit.dropped == ("z",)
        assert "z" not in fit.coef

    def test_unit_trends_absorb_per_unit_drift(self, rng):
        n, t = 6, 8
        slopes = rng.normal(size=n)
        ranks = np.arange(1, t + 1)
        y = rng.normal(size=n)[:, None] + slopes[:, None] * ranks[None, :]
        fit = fit_fe(y, {}, np.ones((n, t), dtype=bool), unit_trends=True)
        assert np.nanmax(np.abs(fit.residuals)) < 1e-9

    def test_unit_trends_match_dense_oracle(self, rng):
        n, t = 5, 7
        x = rng.normal(size=(n, t))
        ranks = np.arange(1, t + 1, dtype=float)
        y = (rng.normal(size=n)[:, None] + rng.normal(size=t)[None, :]
             + rng.normal(size=n)[:, None] * ranks[None, :] + 0.7 * x + rng.normal(size=(n, t)))
        mask = np.ones((n, t), dtype=bool)
        mask[2, 5] = False
        fit = fit_fe(y, {"x": x}, mask, unit_trends=True)
        rows, cols = np.nonzero(mask)
        design = [np.ones(rows.size)]
        design += [(rows == i).astype(float) for i in range(1, n)]
        design += [(cols == j).astype(float) for j in range(1, t)]
        design += [((rows == i) * (cols + 1)).astype(float) for i in range(n)]
        design.append(x[rows, cols])
        xm = np.column_stack(design)
        coef, *_ = np.linalg.lstsq(xm, y[rows, cols], rcond=None)
        assert abs(fit.coef["x"] - coef[-1]) < 1e-7

    def test_demeaning_fixed_point(self, rng):
        n, t = 7, 5
        y = rng.normal(size=(n, t))
        mask = rng.random((n, t)) > 0.2
        mask[:, 0] = True
        fit = fit_fe(y, {}, mask)
        resid = np.where(mask, np.nan_to_num(fit.residuals), 0.0)
        refit = fit_fe(resid, {}, mask)
        # projecting already-projected values changes nothing
        assert np.nanmax(np.abs(refit.residuals[mask] - fit.residuals[mask])) < 1e-9

    def test_balanced_equals_two_pass_within_transform(self, rng):
        n, t = 6, 4
        y = rng.normal(size=(n, t))
        fit = fit_fe(y, {}, np.ones((n, t), dtype=bool))
        closed = y - y.mean(axis=1, keepdims=True) - y.mean(axis=0, keepdims=True) + y.mean()
        np.testing.assert_allclose(fit.residuals, closed, atol=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fit_fe(np.zeros((2, 2)), {}, np.zeros((2, 2), dtype=bool))

    def test_nonconvergence_error_carries_achieved_tolerance(self, rng):
        from paneltrends.errors import ConvergenceError

        n, t = 8, 6
        y = rng.normal(size=(n, t))
        x = rng.normal(size=(n, t))
        mask = rng.random((n, t)) > 0.3
        mask[:, 0] = True
        with pytest.raises(ConvergenceError) as err:
            fit_fe(y, {"x": x}, mask, unit_trends=True, max_sweeps=1, tol=1e-14)
        assert err.value.achieved_tol > 1e-14


class TestTwfeAtt:
    def test_two_by_two_equals_did_of_means(self):
        ds = panel_from_grids([[0.0, 3.0], [0.0, 1.0]], [[0, 1], [0, 0]])
        r = twfe_att(ds)
        assert abs(r.estimate - 2.0) < 1e-12  # (3-0)-(1-0)

    def test_unit_level_shift_is_absorbed(self):
        ds = panel_from_grids([[10.0, 13.0], [0.0, 1.0]], [[0, 1], [0, 0]])
        r = twfe_att(ds)
        assert abs(r.estimate - 2.0) < 1e-12

    def test_exact_fit_property(self, rng):
        for _ in range(10):
            n, t = 8, 6
            d = np.zeros((n, t))
            adopt = rng.integers(2, t, size=n)
            never = rng.random(n) < 0.3
            for i in range(n):
                if not never[i]:
                    d[i, adopt[i] - 1:] = 1
            if not d.any() or d.all():
                continue
            tau = rng.normal()
            ds, _ = additive_panel(rng, n, t, d, effect=tau)
            assert abs(twfe_att(ds).estimate - tau) < 1e-8

    def test_no_treatment_variation_rejected(self):
        ds = panel_from_grids(np.zeros((2, 2)), [[0, 0], [0, 0]])
        with pytest.raises(EstimatorError, match="treated and control"):
            twfe_att(ds)

    def test_adversarial_panel_flips_sign(self):
        from paneltrends.simulate import adversarial_negative_weighting

        sp = adversarial_negative_weighting()
        assert twfe_att(sp.dataset).estimate < 0
        assert sp.effect_grid[sp.dataset.treatment == 1].min() >= 1.0


class TestTwfeEventStudy:
    def test_constant_effect_noiseless_recovers_step(self, rng):
        sp = simulate_panel(DgpSpec(n_units=20, n_periods=8, assignment="staggered",
                                    cohort_periods=(4, 6), never_treated_share=0.3,
                                    effect="constant", effect_base=1.0, noise_sd=0.0, seed=3))
        study = twfe_event_study(sp.dataset, leads=3, lags=5)
        for row in study.rows:
            want = 1.0 if row["period"] >= 1 else 0.0
            assert abs(row["estimate"] - want) < 1e-8, row
        if study.long_run is not None:
            assert abs(study.long_run["estimate"] - 1.0) < 1e-8

    def test_pure_pretrend_shows_in_leads(self):
        sp = simulate_panel(DgpSpec(n_units=40, n_periods=10, assignment="block",
                                    block_start=7, never_treated_share=0.5,
                                    effect="constant", effect_base=0.0, noise_sd=0.0,
                                    pretrend_slope=0.5, seed=4))
        study = twfe_event_study(sp.dataset, leads=5, lags=4)
        pre = [r for r in study.rows if r["period"] < 0]
        ests = [r["estimate"] for r in sorted(pre, key=lambda r: r["period"])]
        assert all(e != 0 for e in ests)
        assert all(b > a for a, b in zip(ests, ests[1:]))  # drifting toward adoption

    def test_degenerate_two_period_panel_reports_omitted_lead(self):
        ds = panel_from_grids([[0.0, 1.0], [0.0, 0.5]], [[0, 1], [0, 0]])
        with pytest.warns(UserWarning, match="omitted"):
            study = twfe_event_study(ds, leads=1, lags=1)
        assert -1 in study.omitted
        assert [r["period"] for r in study.rows] == [1]

    def test_never_switching_panel_rejected(self):
        ds = panel_from_grids(np.zeros((2, 3)), [[0, 0, 0], [0, 0, 0]])
        with pytest.raises(EstimatorError):
            twfe_event_study(ds, leads=1, lags=1)


class TestClusterVcov:
    def test_single_cluster_rejected(self, rng):
        y = rng.normal(size=(3, 3))
        x = rng.normal(size=(3, 3))
        fit = fit_fe(y, {"x": x}, np.ones((3, 3), dtype=bool))
        with pytest.raises(EstimatorError, match="2 clusters"):
            cluster_vcov(fit, np.zeros(3, dtype=int))

    def test_invariant_to_cluster_relabeling(self, rng):
        n, t = 12, 5
        x = rng.normal(size=(n, t))
        y = 0.4 * x + rng.normal(size=(n, t))
        fit = fit_fe(y, {"x": x}, np.ones((n, t), dtype=bool))
        labels = np.arange(n) % 4
        v1 = cluster_vcov(fit, labels)
        v2 = cluster_vcov(fit, (labels * 17 + 3) % 23)  # same partition, new names
        np.testing.assert_allclose(v1.matrix, v2.matrix, atol=1e-14)

    def test_iid_errors_cluster_se_close_to_plain_ols_se(self, rng):
        # Monte-Carlo oracle: with iid errors and many clusters the cluster
        # SE and the homoskedastic OLS SE agree on average.
        n, t = 200, 4
        ratios = []
        for _ in range(500):
            x = rng.normal(size=(n, t))
            y = 0.5 * x + rng.normal(size=(n, t))
            fit = fit_fe(y, {"x": x}, np.ones((n, t), dtype=bool))
            v = cluster_vcov(fit, np.arange(n))
            xd = fit._xd[:, 0]
            dof = n * t - (n + t - 1) - 1
            s2 = (fit._resid_vec @ fit._resid_vec) / dof
            ols_se = np.sqrt(s2 / (xd @ xd))
            ratios.append(v.se("x") / ols_se)
        assert 0.85 < np.mean(ratios) < 1.15

    def test_serial_correlation_inflates_cluster_se(self, rng):
        # persistent within-unit processes in both x and the error make the
        # within-cluster scores positively correlated
        def ar1(rho, shape):
            out = np.empty(shape)
            out[:, 0] = rng.normal(size=shape[0])
            for j in range(1, shape[1]):
                out[:, j] = rho * out[:, j - 1] + np.sqrt(1 - rho**2) * rng.normal(size=shape[0])
            return out

        n, t = 80, 6
        bigger = 0
        reps = 200
        for _ in range(reps):
            x = ar1(0.9, (n, t))
            y = 0.5 * x + ar1(0.9, (n, t))
            fit = fit_fe(y, {"x": x}, np.ones((n, t), dtype=bool))
            v = cluster_vcov(fit, np.arange(n))
            xd = fit._xd[:, 0]
            dof = n * t - (n + t - 1) - 1
            s2 = (fit._resid_vec @ fit._resid_vec) / dof
            ols_se = np.sqrt(s2 / (xd @ xd))
            bigger += v.se("x") > ols_se
        assert bigger / reps > 0.8
