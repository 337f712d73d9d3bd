"""End-to-end analysis pipelines shared by the CLI and the test suite.

Gates estimators by setting class (reversal data restrict the menu to
TWFE, imputation, and panel matching), attaches cluster-bootstrap
percentile intervals to every reported estimate, and assembles the
sensitivity analysis from a placebo run with jointly bootstrapped
statistics.
"""

from __future__ import annotations

import numpy as np

from .diagnostics import _placebo_point, resolve_placebo_periods
from .did import bacon_decompose, csdid, did_multiple, iw, panel_match, stacked_did
from .errors import EstimatorError
from .fe import twfe_att, twfe_event_study
from .imputation import estimate_imputation
from .inference import bootstrap_vcov, cluster_bootstrap, cluster_count_guidance, percentile_ci
from .panel import PanelDataset, SettingClass, classify_setting, compute_event_structure
from .sensitivity import max_placebo_violation, sensitivity_curve

__all__ = ["ALL_ESTIMATORS", "REVERSAL_SAFE", "allowed_estimators", "run_estimators", "run_sensitivity"]

ALL_ESTIMATORS = (
    "twfe",
    "imputation",
    "csdid_never",
    "csdid_notyet",
    "iw",
    "stacked",
    "panel_match",
    "did_multiple",
)
REVERSAL_SAFE = ("twfe", "imputation", "panel_match")


def allowed_estimators(setting: SettingClass) -> tuple[str, ...]:
    return REVERSAL_SAFE if setting is SettingClass.GENERAL else ALL_ESTIMATORS


def _point_run(name: str, ds: PanelDataset, es, cfg: dict):
    """One estimator's point estimates: returns (att, dynamic rows, extras)."""
    covs = cfg.get("covariates", ())
    if name == "twfe":
        t = twfe_att(ds, covs)
        rel = es.relative_period
        fin = rel[ds.complete_mask() & np.isfinite(rel)]
        dyn = None
        if fin.size and fin.min() <= -1 and fin.max() >= 1:
            study = twfe_event_study(ds, leads=int(-fin.min()), lags=int(fin.max()))
            dyn = [
                {"period": r["period"], "estimate": r["estimate"], "n_cells": r["n_cells"]}
                for r in study.rows
            ]
        return t.estimate, dyn, {"analytic_se": t.se, "n_clusters": t.n_clusters}
    if name == "imputation":
        r = estimate_imputation(ds, covs, es=es)
        return r.att, r.dynamic, {
            "n_dropped_cells": r.n_dropped_cells,
            "dropped_share": r.dropped_share,
            "inestimable_units": list(r.inestimable_units),
        }
    if name == "csdid_never":
        r = csdid(ds, "never", es=es)
        return r.att, r.dynamic, {"omitted_cells": len(r.omitted_cells)}
    if name == "csdid_notyet":
        r = csdid(ds, "notyet", es=es)
        return r.att, r.dynamic, {"omitted_cells": len(r.omitted_cells)}
    if name == "iw":
        r = iw(ds, es=es)
        return r.att, r.dynamic, {"comparison_cohort": str(r.comparison_cohort)}
    if name == "stacked":
        r = stacked_did(ds, es=es)
        return r.att, r.dynamic, {
            "n_subdatasets": r.n_subdatasets,
            "truncated_cohorts": r.truncated_cohorts,
        }
    if name == "panel_match":
        r = panel_match(ds, cfg.get("panel_match_history", 4), cfg.get("panel_match_max_lead", 4), es=es)
        return r.att, r.dynamic, {"n_empty_sets": r.n_empty_sets}
    if name == "did_multiple":
        r = did_multiple(ds, es=es)
        return r.estimate, None, {
            "n_joiners": r.n_joiners,
            "n_leavers": r.n_leavers,
            "n_skipped": r.n_skipped,
        }
    raise ValueError(f"unknown estimator {name!r}")


def run_estimators(
    ds: PanelDataset,
    names: tuple[str, ...] | str = "auto",
    *,
    n_replicates: int = 1000,
    master_seed: int = 0,
    alpha: float = 0.05,
    workers: int = 1,
    config: dict | None = None,
) -> dict:
    """Run the requested estimators with bootstrap percentile intervals.

    ``names='auto'`` selects every estimator admissible for the setting.
    Requesting a staggered-only estimator on reversal data raises
    :class:`EstimatorError` naming the setting.
    """
    cfg = dict(config or {})
    es = compute_event_structure(ds)
    setting = classify_setting(es)
    allowed = allowed_estimators(setting)
    if names == "auto":
        names = allowed
    else:
        if isinstance(names, str):
            names = tuple(s.strip() for s in names.split(",") if s.strip())
        for n in names:
            if n not in ALL_ESTIMATORS:
                raise ValueError(f"unknown estimator {n!r}; choose from {ALL_ESTIMATORS}")
            if n not in allowed:
                raise EstimatorError(
                    f"estimator {n!r} requires a staggered setting; this panel is "
                    f"{setting.value} (treatment reversal present). Admissible here: "
                    f"{', '.join(allowed)}"
                )

    results = []
    for k, name in enumerate(names):
        att, dyn, extras = _point_run(name, ds, es, cfg)
        periods = [r["period"] for r in dyn] if dyn else []

        def statistic(d: PanelDataset, _name=name, _periods=tuple(periods)) -> np.ndarray:
            a, dd, _ = _point_run(_name, d, compute_event_structure(d), cfg)
            if not _periods:
                return np.asarray([a])
            by_p = {r["period"]: r["estimate"] for r in (dd or [])}
            # a resample may lack sparse bins entirely; NaN marks them
            return np.asarray([a] + [by_p.get(p, np.nan) for p in _periods])

        draws = cluster_bootstrap(
            ds,
            statistic,
            n_replicates,
            master_seed + k,
            names=("att",) + tuple(f"dyn[{p}]" for p in periods),
            workers=workers,
        )
        ci = percentile_ci(draws, 1 - alpha)
        se = np.std(draws.successful(), axis=0, ddof=1)
        row = {
            "estimator": name,
            "att": att,
            "bootstrap_se": float(se[0]),
            "ci_low": float(ci[0, 0]),
            "ci_high": float(ci[0, 1]),
            "n_failed_replicates": draws.n_failed,
        }
        row.update(extras)
        dynamic = None
        if dyn:
            dynamic = []
            for i, r in enumerate(dyn, start=1):
                out = dict(r)
                out["ci_low"], out["ci_high"] = float(ci[i, 0]), float(ci[i, 1])
                dynamic.append(out)
        results.append({"summary": row, "dynamic": dynamic})

    bacon = None
    if setting is not SettingClass.GENERAL and ds.complete_mask().all() and not ds.covariates:
        try:
            b = bacon_decompose(ds, es=es)
            bacon = {
                "components": b.components,
                "twfe_from_components": b.twfe_from_components,
                "total_weight": b.total_weight(),
            }
        except EstimatorError:
            bacon = None
    return {
        "setting": setting.value,
        "estimators": list(names),
        "results": results,
        "bacon": bacon,
        "variance_guidance": cluster_count_guidance(len(set(ds.cluster_of))),
    }


def run_sensitivity(
    ds: PanelDataset,
    *,
    placebo_periods: tuple[int, ...] | None = None,
    magnitude_grid: tuple[float, ...] = (0.0, 0.5),
    alpha: float = 0.05,
    n_replicates: int = 1000,
    master_seed: int = 0,
    covariates: tuple[str, ...] = (),
    workers: int = 1,
) -> dict:
    """Placebo-benchmarked robust confidence sets for the ATT and each
    post-treatment dynamic effect, with the breakdown magnitude.

    Returns a JSON-ready mapping whose ATT block uses the report keys
    {delta0, Delta, Mbar_grid, intervals, breakdown}.
    """
    es = compute_event_structure(ds)
    periods = resolve_placebo_periods(ds, es) if placebo_periods is None else tuple(sorted(placebo_periods))
    if len(periods) < 2:
        raise EstimatorError("sensitivity analysis needs at least 2 placebo periods")
    deltas, att, per_l, excluded, n_holdout = _placebo_point(
        ds, periods, covariates, False, es, with_dynamic=True
    )
    post_levels = sorted(per_l)
    counts = np.array([per_l[l]["n_cells"] for l in post_levels], dtype=float)
    levels = np.array(post_levels, dtype=float)
    mean_horizon = float((levels * counts).sum() / counts.sum())

    def statistic(d: PanelDataset) -> np.ndarray:
        dl, a, pl, _, _ = _placebo_point(d, periods, covariates, False, None, with_dynamic=True)
        missing = [l for l in post_levels if l not in pl]
        if missing:
            raise EstimatorError(f"replicate lacks post periods {missing}")
        return np.concatenate([dl, [a], [pl[l]["estimate"] for l in post_levels]])

    names = tuple(f"placebo[{s}]" for s in periods) + ("att",) + tuple(
        f"dyn[{l}]" for l in post_levels
    )
    draws = cluster_bootstrap(ds, statistic, n_replicates, master_seed, names=names, workers=workers)
    vcov = bootstrap_vcov(draws)

    anchor_idx = len(periods) - 1  # the last placebo period
    anchor = float(deltas[anchor_idx])
    violation = max_placebo_violation({s: float(deltas[i]) for i, s in enumerate(periods)})
    att_idx = len(periods)

    def debiased_se(target_idx: int) -> float:
        return float(
            np.sqrt(
                vcov[target_idx, target_idx]
                + vcov[anchor_idx, anchor_idx]
                - 2.0 * vcov[target_idx, anchor_idx]
            )
        )

    att_curve = sensitivity_curve(
        att,
        anchor,
        violation,
        debiased_se(att_idx),
        magnitude_grid,
        level=1 - alpha,
        horizon=mean_horizon,
        target="att",
        placebo_periods=periods,
    )
    dynamic = []
    for j, l in enumerate(post_levels):
        idx = att_idx + 1 + j
        curve = sensitivity_curve(
            float(per_l[l]["estimate"]),
            anchor,
            violation,
            debiased_se(idx),
            magnitude_grid,
            level=1 - alpha,
            horizon=float(l),
            target=f"dynamic[{l}]",
            placebo_periods=periods,
        )
        dynamic.append(
            {
                "period": int(l),
                "estimate": float(per_l[l]["estimate"]),
                "delta0": curve.anchor,
                "Delta": curve.max_violation,
                "Mbar_grid": list(magnitude_grid),
                "intervals": curve.intervals,
                "breakdown": curve.breakdown,
            }
        )
    return {
        "target": "att",
        "estimate": att,
        "delta0": att_curve.anchor,
        "Delta": att_curve.max_violation,
        "Mbar_grid": list(magnitude_grid),
        "intervals": att_curve.intervals,
        "breakdown": att_curve.breakdown,
        "breakdown_note": att_curve.breakdown_note,
        "se_debiased": att_curve.se_debiased,
        "mean_horizon": mean_horizon,
        "placebo_periods": list(periods),
        "placebo_estimates": {str(s): float(deltas[i]) for i, s in enumerate(periods)},
        "n_holdout_cells": n_holdout,
        "excluded_units": list(excluded),
        "dynamic": dynamic,
        "caveat": att_curve.caveat,
    }
