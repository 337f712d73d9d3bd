"""Assumption diagnostics built on the imputation machinery.

The placebo test removes treated units' last pre-adoption periods from the
control fit and asks whether the imputed pseudo-effects there are zero;
the carryover test does the same with the first periods after each exit
from treatment. Joint tests use the covariance of jointly bootstrapped
statistics, so the placebo-versus-ATT covariance needed by the
sensitivity module comes for free.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimatorError
from .imputation import estimate_imputation, fit_control_model
from .inference import BootstrapDraws, bootstrap_vcov, cluster_bootstrap, wald_joint_test
from .panel import (
    EventStructure,
    PanelDataset,
    SettingClass,
    classify_setting,
    compute_event_structure,
)

__all__ = [
    "DiagnosticsReport",
    "PlaceboResult",
    "CarryoverResult",
    "event_study_table",
    "pretrend_f_test",
    "placebo_test",
    "carryover_test",
    "run_diagnostics",
    "resolve_placebo_periods",
]

DEFAULT_PLACEBO_PERIODS = (-2, -1, 0)
DEFAULT_CARRYOVER_HOLDOUT = 2


def event_study_table(dynamic: list[dict], cis: dict | None = None, *, method: str = "imputation") -> dict:
    """Plot-ready event-study series.

    Rows are sorted by relative period. DID-style estimators have no row
    at the reference period 0; the imputation route reports all pre
    periods with the all-pre-average-zero convention recorded instead.
    """
    rows = []
    for r in sorted(dynamic, key=lambda r: r["period"]):
        row = dict(r)
        if cis and r["period"] in cis:
            lo, hi = cis[r["period"]]
            row["ci_low"], row["ci_high"] = float(lo), float(hi)
        rows.append(row)
    has_pre = any(r["period"] <= 0 for r in rows)
    return {
        "method": method,
        "rows": rows,
        "reference": "all pre-treatment periods" if method == "imputation" else "period 0",
        "pre_periods_empty": not has_pre,
    }


def pretrend_f_test(pre_estimates: np.ndarray, vcov: np.ndarray) -> dict:
    """Joint Wald test that every pre-treatment dynamic estimate is zero."""
    est = np.asarray(pre_estimates, dtype=float).ravel()
    if est.size < 1:
        raise EstimatorError("no pre-treatment estimates to test")
    return wald_joint_test(est, vcov)


def supported_pre_periods(
    dynamic: list[dict],
    *,
    min_cells: int = 5,
    share_of_max: float = 0.5,
    max_window: int | None = 3,
) -> list[int]:
    """Pre periods eligible for the joint pretrend test.

    Sparse far-pre bins (a handful of cells from the latest adopters) have
    unreliable bootstrap variances that blow up the joint statistic, so the
    test keeps periods with at least ``min_cells`` cells and at least
    ``share_of_max`` of the best-supported pre period's count, and then at
    most the last ``max_window`` of them (the placebo depth): beyond a few
    strongly coupled within-fit residual means, the bootstrap covariance is
    too noisy for the chi-square reference to hold its size. All periods
    still appear in the event-study output.
    """
    pre = [r for r in dynamic if r["period"] <= 0]
    if not pre:
        return []
    cap = max(r["n_cells"] for r in pre)
    floor = max(min_cells, share_of_max * cap)
    kept = [r["period"] for r in pre if r["n_cells"] >= floor]
    if max_window is not None:
        kept = kept[-max_window:]
    return kept


def resolve_placebo_periods(
    ds: PanelDataset,
    es: EventStructure,
    requested: tuple[int, ...] = DEFAULT_PLACEBO_PERIODS,
) -> tuple[int, ...]:
    """Shrink the placebo set when the panel is short on pre periods.

    With at most 3 observed pre-adoption periods overall the set shrinks
    to the last two placebo periods, leaving at least one pre period to
    anchor treated units' fixed effects; fewer than 2 is an error.
    """
    rel = es.relative_period
    pre_obs = np.isfinite(rel) & (rel <= 0) & ~np.isnan(ds.outcome)
    depth = int((-rel[pre_obs]).max() + 1) if pre_obs.any() else 0
    if depth < 2:
        raise EstimatorError(
            f"placebo test needs at least 2 observed pre-adoption periods; found {depth}"
        )
    if depth <= 3 and len(requested) > 2:
        shrunk = tuple(sorted(requested))[-2:]
        warnings.warn(
            f"only {depth} pre-adoption periods available; placebo set shrunk to {shrunk}"
        )
        return shrunk
    return tuple(sorted(requested))


def _placebo_point(
    ds: PanelDataset,
    periods: tuple[int, ...],
    covariates: tuple[str, ...],
    unit_trends: bool,
    es: EventStructure | None = None,
    with_dynamic: bool = False,
):
    """Placebo pseudo-effects and the holdout-fit ATT.

    Returns (deltas, att, excluded, n_holdout), with a per-post-period
    estimate dict inserted after ``att`` when ``with_dynamic`` is set.
    """
    if es is None:
        es = compute_event_structure(ds)
    rel = es.relative_period
    observed = ~np.isnan(ds.outcome) & ~np.isnan(ds.treatment)
    window = np.isfinite(rel) & np.isin(rel, periods) & (ds.treatment == 0) & observed
    per_unit = window.sum(axis=1)
    ever = np.isfinite(es.cohort_of) & ~np.isposinf(es.cohort_of)
    lacking = ever & (per_unit < len(periods))
    excluded = tuple(ds.unit_ids[i] for i in np.flatnonzero(lacking))
    window[lacking] = False

    if not window.any():
        raise EstimatorError("no unit has the full placebo window; cannot run the placebo test")
    fit = fit_control_model(ds, covariates, unit_trends=unit_trends, exclude_cells=window)
    pred = fit.counterfactual_grid({name: ds.covariates[name] for name in covariates} if covariates else None)
    pseudo = ds.outcome - pred

    deltas = []
    for s in periods:
        sel = window & (rel == s) & np.isfinite(pseudo)
        if not sel.any():
            raise EstimatorError(f"no estimable holdout cell at relative period {s}")
        deltas.append(float(pseudo[sel].mean()))
    treated = (ds.treatment == 1) & ~np.isnan(ds.outcome) & np.isfinite(pseudo)
    if not treated.any():
        raise EstimatorError("no estimable treated cell under the placebo holdout")
    att = float(pseudo[treated].mean())
    if not with_dynamic:
        return np.asarray(deltas), att, excluded, int(window.sum())
    per_level: dict[int, dict] = {}
    for l in np.unique(rel[treated]).astype(int):
        sel = treated & (rel == l)
        per_level[int(l)] = {"estimate": float(pseudo[sel].mean()), "n_cells": int(sel.sum())}
    return np.asarray(deltas), att, per_level, excluded, int(window.sum())


@dataclass
class PlaceboResult:
    """Held-out pre-period pseudo-effects with a joint zero test."""

    periods: tuple[int, ...]
    estimates: dict  # relative period -> pseudo-effect
    att: float  # ATT re-estimated under the holdout fit
    joint: dict  # statistic, df, p
    cis: dict  # relative period -> (low, high)
    att_ci: tuple
    excluded_units: tuple
    n_holdout_cells: int
    draws: BootstrapDraws | None = None

    @property
    def p(self) -> float:
        return self.joint["p"]


def placebo_test(
    ds: PanelDataset,
    periods: tuple[int, ...] | None = None,
    *,
    covariates: tuple[str, ...] = (),
    unit_trends: bool = False,
    n_replicates: int = 1000,
    master_seed: int = 0,
    level: float = 0.95,
    es: EventStructure | None = None,
) -> PlaceboResult:
    """Hold out late pre-adoption periods, refit, and test the pseudo-effects.

    Treated units' cells at the requested relative periods leave the
    control-model fitting mask (the data themselves are untouched); the
    mean imputed "effect" at each held-out period should be zero under
    parallel trends. The ATT is also re-estimated under the holdout fit,
    and its joint bootstrap draws with the placebo estimates feed the
    sensitivity analysis.
    """
    if es is None:
        es = compute_event_structure(ds)
    if periods is None:
        periods = resolve_placebo_periods(ds, es)
    else:
        periods = tuple(sorted(periods))
    if len(periods) == 0:
        res = estimate_imputation(ds, covariates, unit_trends=unit_trends, es=es)
        return PlaceboResult(
            periods=(),
            estimates={},
            att=res.att,
            joint={"statistic": 0.0, "df": 0, "p": 1.0},
            cis={},
            att_ci=(np.nan, np.nan),
            excluded_units=(),
            n_holdout_cells=0,
        )

    deltas, att, excluded, n_holdout = _placebo_point(ds, periods, covariates, unit_trends, es)

    def statistic(d: PanelDataset) -> np.ndarray:
        dl, a, _, _ = _placebo_point(d, periods, covariates, unit_trends)
        return np.concatenate([dl, [a]])

    names = tuple(f"placebo[{s}]" for s in periods) + ("att",)
    draws = cluster_bootstrap(ds, statistic, n_replicates, master_seed, names=names)
    vcov = bootstrap_vcov(draws)
    joint = wald_joint_test(deltas, vcov[: len(periods), : len(periods)])
    from .inference import percentile_ci

    intervals = percentile_ci(draws, level)
    cis = {s: (float(intervals[i, 0]), float(intervals[i, 1])) for i, s in enumerate(periods)}
    att_ci = (float(intervals[-1, 0]), float(intervals[-1, 1]))
    return PlaceboResult(
        periods=periods,
        estimates={s: float(deltas[i]) for i, s in enumerate(periods)},
        att=att,
        joint=joint,
        cis=cis,
        att_ci=att_ci,
        excluded_units=excluded,
        n_holdout_cells=n_holdout,
        draws=draws,
    )


def _carryover_point(
    ds: PanelDataset,
    k: int,
    covariates: tuple[str, ...],
    unit_trends: bool,
) -> tuple[np.ndarray, tuple, int]:
    """Mean pseudo-effects on the first k observed post-exit periods."""
    d = ds.treatment
    n, t = d.shape
    position = np.zeros((n, t), dtype=int)  # 1..k within each exit window, 0 outside
    for i in range(n):
        row = d[i]
        obs = np.flatnonzero(~np.isnan(row))
        for a, b in zip(obs[:-1], obs[1:]):
            if row[a] == 1 and row[b] == 0:
                for idx, j in enumerate(obs[obs >= b][:k], start=1):
                    if row[j] == 0:  # window truncated by re-entry
                        position[i, j] = idx
    window = (position > 0) & ~np.isnan(ds.outcome)
    if not window.any():
        raise EstimatorError("no observed post-exit period to hold out")
    fit = fit_control_model(ds, covariates, unit_trends=unit_trends, exclude_cells=window)
    pred = fit.counterfactual_grid({name: ds.covariates[name] for name in covariates} if covariates else None)
    pseudo = ds.outcome - pred
    estimates = []
    for pos in range(1, k + 1):
        sel = (position == pos) & window & np.isfinite(pseudo)
        if not sel.any():
            raise EstimatorError(f"no estimable held-out cell {pos} period(s) after exit")
        estimates.append(float(pseudo[sel].mean()))
    excluded = tuple(
        ds.unit_ids[i]
        for i in range(n)
        if (position[i] > 0).any() and not np.isfinite(pseudo[i, position[i] > 0]).any()
    )
    return np.asarray(estimates), excluded, int(window.sum())


@dataclass
class CarryoverResult:
    """Held-out post-exit pseudo-effects with a joint zero test."""

    holdout_length: int
    estimates: dict  # periods-after-exit -> pseudo-effect
    joint: dict
    cis: dict
    excluded_units: tuple
    n_holdout_cells: int
    draws: BootstrapDraws | None = None

    @property
    def p(self) -> float:
        return self.joint["p"]


def carryover_test(
    ds: PanelDataset,
    k: int = DEFAULT_CARRYOVER_HOLDOUT,
    *,
    covariates: tuple[str, ...] = (),
    unit_trends: bool = False,
    n_replicates: int = 1000,
    master_seed: int = 0,
    level: float = 0.95,
    es: EventStructure | None = None,
) -> CarryoverResult:
    """Test for effects persisting after units exit treatment.

    The first ``k`` observed post-exit periods of each exiting unit leave
    the control-fitting mask; nonzero imputed effects there indicate
    carryover. Requires at least one treatment reversal.
    """
    if k < 1:
        raise ValueError("holdout length k must be >= 1")
    if es is None:
        es = compute_event_structure(ds)
    if classify_setting(es) is not SettingClass.GENERAL:
        raise EstimatorError("carryover test requires treatment reversal; none found")

    estimates, excluded, n_holdout = _carryover_point(ds, k, covariates, unit_trends)

    def statistic(d: PanelDataset) -> np.ndarray:
        return _carryover_point(d, k, covariates, unit_trends)[0]

    names = tuple(f"post_exit[{j}]" for j in range(1, k + 1))
    draws = cluster_bootstrap(ds, statistic, n_replicates, master_seed, names=names)
    vcov = bootstrap_vcov(draws)
    joint = wald_joint_test(estimates, vcov)
    from .inference import percentile_ci

    intervals = percentile_ci(draws, level)
    cis = {j + 1: (float(intervals[j, 0]), float(intervals[j, 1])) for j in range(k)}
    return CarryoverResult(
        holdout_length=k,
        estimates={j + 1: float(estimates[j]) for j in range(k)},
        joint=joint,
        cis=cis,
        excluded_units=excluded,
        n_holdout_cells=n_holdout,
        draws=draws,
    )


@dataclass
class DiagnosticsReport:
    """Event-study series plus the pretrend, placebo, and carryover tests."""

    event_study: dict
    f_test: dict | None
    placebo: PlaceboResult | None
    carryover: CarryoverResult | None
    carryover_skipped: str | None
    pt_suspect: bool
    carryover_suspect: bool
    alpha: float
    notes: list[str] = field(default_factory=list)


def run_diagnostics(
    ds: PanelDataset,
    *,
    covariates: tuple[str, ...] = (),
    unit_trends: bool = False,
    placebo_periods: tuple[int, ...] | None = None,
    carryover_k: int = DEFAULT_CARRYOVER_HOLDOUT,
    n_replicates: int = 1000,
    master_seed: int = 0,
    alpha: float = 0.05,
) -> DiagnosticsReport:
    """Run the full diagnostic battery with the imputation estimator."""
    from .inference import percentile_ci

    es = compute_event_structure(ds)
    setting = classify_setting(es)
    result = estimate_imputation(ds, covariates, unit_trends=unit_trends, es=es)
    periods = [r["period"] for r in result.dynamic]

    def statistic(d: PanelDataset) -> np.ndarray:
        r = estimate_imputation(d, covariates, unit_trends=unit_trends)
        by_p = {row["period"]: row["estimate"] for row in r.dynamic}
        return np.asarray([r.att] + [by_p.get(p, np.nan) for p in periods])

    names = ("att",) + tuple(f"dyn[{p}]" for p in periods)
    draws = cluster_bootstrap(ds, statistic, n_replicates, master_seed, names=names)
    intervals = percentile_ci(draws, 1 - alpha)
    cis = {p: (float(intervals[i + 1, 0]), float(intervals[i + 1, 1])) for i, p in enumerate(periods)}
    table = event_study_table(result.dynamic, cis, method="imputation")
    table["att"] = result.att
    table["att_ci"] = (float(intervals[0, 0]), float(intervals[0, 1]))

    notes: list[str] = []
    tested = supported_pre_periods(result.dynamic)
    pre_idx = [i + 1 for i, p in enumerate(periods) if p in tested]
    f_test = None
    if pre_idx:
        vcov = bootstrap_vcov(draws, columns=pre_idx)
        pre_est = np.asarray([result.dynamic_estimate(periods[i - 1]) for i in pre_idx])
        f_test = pretrend_f_test(pre_est, vcov)
        f_test["periods"] = tested
    else:
        notes.append("no adequately supported pre-treatment periods; pretrend F test skipped")

    placebo = None
    try:
        placebo = placebo_test(
            ds,
            placebo_periods,
            covariates=covariates,
            unit_trends=unit_trends,
            n_replicates=n_replicates,
            master_seed=master_seed + 1,
            level=1 - alpha,
            es=es,
        )
    except EstimatorError as exc:
        notes.append(f"placebo test skipped: {exc}")

    carryover = None
    carryover_skipped = None
    if setting is SettingClass.GENERAL:
        try:
            carryover = carryover_test(
                ds,
                carryover_k,
                covariates=covariates,
                unit_trends=unit_trends,
                n_replicates=n_replicates,
                master_seed=master_seed + 2,
                level=1 - alpha,
                es=es,
            )
        except EstimatorError as exc:
            carryover_skipped = str(exc)
    else:
        carryover_skipped = "carryover test requires treatment reversal; setting is " + setting.value

    pt_suspect = bool(
        (f_test is not None and f_test["p"] < alpha)
        or (placebo is not None and placebo.p < alpha)
    )
    carryover_suspect = bool(carryover is not None and carryover.p < alpha)
    return DiagnosticsReport(
        event_study=table,
        f_test=f_test,
        placebo=placebo,
        carryover=carryover,
        carryover_skipped=carryover_skipped,
        pt_suspect=pt_suspect,
        carryover_suspect=carryover_suspect,
        alpha=alpha,
        notes=notes,
    )
