"""Counterfactual-imputation estimator.

Fits the fixed-effects outcome model on control cells only, imputes the
untreated outcome for every treated cell, and averages the differences.
Works in any setting, including treatment reversal, and is the engine
behind the placebo and carryover diagnostics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EstimatorError
from .fe import FEFit, fit_fe
from .panel import EventStructure, PanelDataset, compute_event_structure

__all__ = [
    "ImputationResult",
    "fit_control_model",
    "impute_and_difference",
    "aggregate_effects",
    "estimate_imputation",
]

SPARSE_CELL_FLOOR = 5


@dataclass
class ImputationResult:
    """Cell-level effects and their aggregates from the imputation route.

    ``dynamic`` covers both sides of adoption: rows with period >= 1 are
    means of imputed treated-cell effects, rows with period <= 0 are mean
    control-cell residuals of eventually treated units (pre-trend
    estimates). The ATT is the equal-weight mean over all imputed treated
    cells, so the count-weighted mean of the post rows reproduces it.
    """

    att: float
    cell_effects: np.ndarray
    dynamic: list[dict]
    group_time: dict
    control_fit: FEFit
    n_treated_cells: int
    n_dropped_cells: int
    inestimable_units: tuple
    method: str = "imputation"

    @property
    def dropped_share(self) -> float:
        total = self.n_treated_cells + self.n_dropped_cells
        return self.n_dropped_cells / total if total else 0.0

    def dynamic_estimate(self, period: int) -> float:
        for row in self.dynamic:
            if row["period"] == period:
                return row["estimate"]
        raise KeyError(period)

    def pre_periods(self) -> list[dict]:
        return [r for r in self.dynamic if r["period"] <= 0]

    def post_periods(self) -> list[dict]:
        return [r for r in self.dynamic if r["period"] >= 1]


def fit_control_model(
    ds: PanelDataset,
    covariates: tuple[str, ...] = (),
    *,
    extra_groups: dict | None = None,
    unit_trends: bool = False,
    exclude_cells: np.ndarray | None = None,
) -> FEFit:
    """Fit the outcome model using only control observations.

    ``exclude_cells`` removes additional cells from the fitting mask (used
    by the placebo and carryover holdouts); it never alters the data.
    Units or periods without any control cell are inestimable and reported.
    """
    mask = (ds.treatment == 0) & ~np.isnan(ds.outcome)
    regressors = {}
    for name in covariates:
        grid = ds.covariates[name]
        regressors[name] = grid
        mask &= ~np.isnan(grid)
    if exclude_cells is not None:
        mask &= ~exclude_cells
    units = np.flatnonzero(mask.any(axis=1))
    periods = np.flatnonzero(mask.any(axis=0))
    if units.size < 2 or periods.size < 2:
        raise EstimatorError(
            f"control cells span {units.size} unit(s) and {periods.size} period(s); need 2 of each"
        )
    fit = fit_fe(ds.outcome, regressors, mask, extra_groups=extra_groups, unit_trends=unit_trends)
    missing_units = [ds.unit_ids[i] for i in range(ds.n_units) if not mask[i].any()]
    if missing_units:
        warnings.warn(
            f"no control cells for unit(s) {missing_units}; their treated cells cannot be imputed"
        )
    return fit


def impute_and_difference(
    ds: PanelDataset,
    fit: FEFit,
    covariates: tuple[str, ...] = (),
) -> np.ndarray:
    """Observed minus imputed outcome for every estimable treated cell.

    Returns an (N, T) grid holding the effect estimate at treated cells and
    NaN elsewhere (including treated cells whose unit or period effect is
    inestimable or whose covariates are missing).
    """
    regressors = {name: ds.covariates[name] for name in covariates}
    pred = fit.counterfactual_grid(regressors if covariates else None)
    treated = (ds.treatment == 1) & ~np.isnan(ds.outcome)
    tau = np.where(treated, ds.outcome - pred, np.nan)
    return tau


def aggregate_effects(
    tau: np.ndarray,
    es: EventStructure,
    *,
    control_fit: FEFit | None = None,
    inestimable_units: tuple = (),
    sparse_floor: int = SPARSE_CELL_FLOOR,
) -> ImputationResult:
    """Aggregate cell-level effects to the ATT, per-period, and
    cohort-by-period means. All averages weight cells equally."""
    finite = np.isfinite(tau) & np.isfinite(es.relative_period)
    if not finite.any():
        raise EstimatorError("no estimable treated cells")
    att = float(tau[finite].mean())
    rel = es.relative_period

    def level_means(values: np.ndarray, sel: np.ndarray) -> list[tuple[int, float, int]]:
        levels, inv = np.unique(rel[sel].astype(int), return_inverse=True)
        sums = np.bincount(inv, weights=values[sel])
        counts = np.bincount(inv)
        return [(int(l), float(s / c), int(c)) for l, s, c in zip(levels, sums, counts)]

    dynamic = [
        {"period": l, "estimate": e, "n_cells": c, "sparse": c < sparse_floor}
        for l, e, c in level_means(tau, finite)
    ]
    if control_fit is not None:
        resid = control_fit.residuals
        pre = np.isfinite(resid) & np.isfinite(rel) & (rel <= 0)
        if pre.any():
            dynamic.extend(
                {"period": l, "estimate": e, "n_cells": c, "sparse": c < sparse_floor}
                for l, e, c in level_means(resid, pre)
            )
    dynamic.sort(key=lambda r: r["period"])

    ii, jj = np.nonzero(finite)
    gvals = es.cohort_of[ii]
    keep = np.isfinite(gvals)
    codes = gvals[keep].astype(np.int64) * 100_000 + rel[ii[keep], jj[keep]].astype(np.int64)
    uniq, inv = np.unique(codes, return_inverse=True)
    sums = np.bincount(inv, weights=tau[ii[keep], jj[keep]])
    counts = np.bincount(inv)
    group_time = {
        (int(code // 100_000), int(code % 100_000)): {
            "estimate": float(s / c),
            "n_cells": int(c),
        }
        for code, s, c in zip(uniq, sums, counts)
    }

    n_treated = int(finite.sum())
    return ImputationResult(
        att=att,
        cell_effects=tau,
        dynamic=dynamic,
        group_time=group_time,
        control_fit=control_fit,
        n_treated_cells=n_treated,
        n_dropped_cells=0,
        inestimable_units=inestimable_units,
    )


def estimate_imputation(
    ds: PanelDataset,
    covariates: tuple[str, ...] = (),
    *,
    unit_trends: bool = False,
    extra_groups: dict | None = None,
    es: EventStructure | None = None,
    exclude_cells: np.ndarray | None = None,
) -> ImputationResult:
    """Full imputation pipeline: control fit, imputation, aggregation."""
    if es is None:
        es = compute_event_structure(ds)
    fit = fit_control_model(
        ds,
        covariates,
        unit_trends=unit_trends,
        extra_groups=extra_groups,
        exclude_cells=exclude_cells,
    )
    tau = impute_and_difference(ds, fit, covariates)
    treated_observed = (ds.treatment == 1) & ~np.isnan(ds.outcome)
    dropped = treated_observed & ~np.isfinite(tau)
    inestimable = tuple(
        ds.unit_ids[i] for i in np.flatnonzero(dropped.any(axis=1) & ~np.isfinite(fit.unit_effects))
    )
    result = aggregate_effects(tau, es, control_fit=fit, inestimable_units=inestimable)
    result.n_dropped_cells = int(dropped.sum())
    return result
