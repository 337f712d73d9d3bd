"""Fixed-effects least squares on possibly unbalanced panels.

Unit and time effects (plus optional extra grouping dimensions and
unit-specific linear trends) are absorbed by alternating-projections
demeaning over the included cells. On a complete rectangular mask the
classic two-pass within transformation is used directly since the unit and
time projections then commute. Cluster-robust covariance uses the standard
sandwich with cluster-level score sums.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, EstimatorError
from .panel import PanelDataset, compute_event_structure

__all__ = [
    "FEFit",
    "ClusterVcov",
    "EventStudyResult",
    "fit_fe",
    "twfe_att",
    "twfe_event_study",
    "cluster_vcov",
]

DEMEAN_TOL = 1e-10
MAX_SWEEPS = 10_000
PIVOT_RTOL = 1e-9


class _GroupMeans:
    """Group-mean subtraction over cell vectors, one group dimension.

    Cells are pre-sorted by group code so that per-sweep work is a single
    reduceat over contiguous segments.
    """

    def __init__(self, codes: np.ndarray):
        self.order = np.argsort(codes, kind="stable")
        sorted_codes = codes[self.order]
        boundaries = np.flatnonzero(np.diff(sorted_codes)) + 1
        self.starts = np.concatenate([[0], boundaries])
        self.counts = np.diff(np.concatenate([self.starts, [codes.size]])).astype(float)
        self.codes_compact = sorted_codes[self.starts]
        # position of each cell's group in the compact ordering
        self.inverse = np.searchsorted(self.codes_compact, codes)

    def means(self, v: np.ndarray) -> np.ndarray:
        sums = np.add.reduceat(v[self.order], self.starts)
        return sums / self.counts

    def subtract(self, v: np.ndarray) -> float:
        m = self.means(v)[self.inverse]
        v -= m
        return float(np.max(np.abs(m))) if m.size else 0.0


class _TwoFESolver:
    """Exact least squares for the plain unit+time two-effect layout.

    Profiles the unit effects out of the normal equations and solves the
    remaining period-level system directly (the pseudo-inverse handles the
    level redundancy and any disconnected mask components), so no
    demeaning iteration is needed in the most common configuration.
    """

    def __init__(self, gm_unit: _GroupMeans, gm_time: _GroupMeans):
        self.gu, self.gt = gm_unit, gm_time
        u, t = gm_unit.counts.size, gm_time.counts.size
        m = np.zeros((u, t))
        np.add.at(m, (gm_unit.inverse, gm_time.inverse), 1.0)
        self.m = m
        self.m_over_ni = m / gm_unit.counts[:, None]
        a = np.diag(gm_time.counts) - self.m_over_ni.T @ m
        self.a_pinv = np.linalg.pinv(a, rcond=1e-12)

    def solve(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        su = self.gu.means(v) * self.gu.counts
        st = self.gt.means(v) * self.gt.counts
        xi = self.a_pinv @ (st - self.m_over_ni.T @ su)
        alpha = (su - self.m @ xi) / self.gu.counts
        return alpha, xi

    def fitted(self, v: np.ndarray) -> np.ndarray:
        alpha, xi = self.solve(v)
        return alpha[self.gu.inverse] + xi[self.gt.inverse]


class _TrendProjector:
    """Per-unit projection onto the within-unit linear time trend."""

    def __init__(self, unit_means: _GroupMeans, ranks: np.ndarray):
        self.gm = unit_means
        centered = ranks - unit_means.means(ranks)[unit_means.inverse]
        ss = unit_means.means(centered * centered) * unit_means.counts
        self.centered = centered
        self.ss = ss  # per-unit sum of squared centered ranks
        self.estimable = ss > 0

    def subtract(self, v: np.ndarray) -> float:
        cross = self.gm.means(v * self.centered) * self.gm.counts
        slope = np.where(self.estimable, cross / np.where(self.ss > 0, self.ss, 1.0), 0.0)
        adj = slope[self.gm.inverse] * self.centered
        v -= adj
        return float(np.max(np.abs(adj))) if adj.size else 0.0

    def slopes(self, v: np.ndarray) -> np.ndarray:
        cross = self.gm.means(v * self.centered) * self.gm.counts
        return np.where(self.estimable, cross / np.where(self.ss > 0, self.ss, 1.0), 0.0)


@dataclass
class FEFit:
    """Result of a fixed-effects regression on masked cells.

    ``unit_effects`` and ``time_effects`` are normalized to mean zero over
    the levels present in the fit, with ``intercept`` absorbing the rest;
    NaN marks levels with no included cells (inestimable). Residuals are
    NaN outside the included mask.
    """

    coef: dict[str, float]
    dropped: tuple[str, ...]
    intercept: float
    unit_effects: np.ndarray
    time_effects: np.ndarray
    residuals: np.ndarray
    mask: np.ndarray
    iterations: int
    achieved_tol: float
    trend_slopes: np.ndarray | None = None
    trend_centers: np.ndarray | None = None
    extra_effects: list[dict] = field(default_factory=list)
    extra_grids: list[np.ndarray] = field(default_factory=list)
    _xd: np.ndarray | None = None  # demeaned kept regressors, cell rows
    _resid_vec: np.ndarray | None = None
    _rows: np.ndarray | None = None  # unit index per cell
    _cols: np.ndarray | None = None

    def counterfactual_grid(self, regressors: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Model prediction at every cell; NaN where any component is inestimable."""
        n, t = self.mask.shape
        pred = np.full((n, t), self.intercept)
        pred += self.unit_effects[:, None] + self.time_effects[None, :]
        if self.trend_slopes is not None:
            ranks = np.arange(1, t + 1, dtype=float)[None, :]
            pred += self.trend_slopes[:, None] * (ranks - self.trend_centers[:, None])
        for grid, effects in zip(self.extra_grids, self.extra_effects):
            lookup = np.vectorize(lambda c: effects.get(c, np.nan))
            pred += lookup(grid)
        for name, beta in self.coef.items():
            if regressors is None or name not in regressors:
                raise ValueError(f"prediction needs regressor grid {name!r}")
            pred += beta * regressors[name]
        return pred

    @property
    def n_cells(self) -> int:
        return int(self.mask.sum())


@dataclass
class ClusterVcov:
    """Cluster-robust covariance of the regression coefficients."""

    matrix: np.ndarray
    names: tuple[str, ...]
    n_clusters: int
    scale: float

    def se(self, name: str) -> float:
        i = self.names.index(name)
        return float(np.sqrt(self.matrix[i, i]))


def fit_fe(
    response: np.ndarray,
    regressors: dict[str, np.ndarray],
    mask: np.ndarray,
    *,
    extra_groups: dict[str, np.ndarray] | None = None,
    unit_trends: bool = False,
    tol: float = DEMEAN_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> FEFit:
    """Least squares of ``response`` on ``regressors`` absorbing unit and
    time effects (plus optional extra groupings and unit trends) on the
    cells selected by ``mask``.

    Regressors that are collinear with the absorbed effects (or with each
    other) are dropped and reported by name in ``FEFit.dropped``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty estimation mask")
    n, t = mask.shape
    rows, cols = np.nonzero(mask)
    y = np.asarray(response, dtype=float)[rows, cols]
    if np.isnan(y).any():
        raise ValueError("response missing on masked cells")
    names = list(regressors)
    xcols = []
    for name in names:
        v = np.asarray(regressors[name], dtype=float)[rows, cols]
        if np.isnan(v).any():
            raise ValueError(f"regressor {name!r} missing on masked cells")
        xcols.append(v)

    extra_groups = extra_groups or {}
    extra_grids = [np.asarray(g) for g in extra_groups.values()]
    balanced = bool(mask.all()) and not extra_grids and not unit_trends

    gm_unit = _GroupMeans(rows)
    gm_time = _GroupMeans(cols)
    gm_extra = []
    for grid in extra_grids:
        codes_raw = grid[rows, cols]
        _, codes = np.unique(codes_raw, return_inverse=True)
        gm_extra.append(_GroupMeans(codes))
    ranks = (cols + 1).astype(float)
    trend = _TrendProjector(gm_unit, ranks) if unit_trends else None

    plain_two_fe = not extra_grids and not unit_trends
    solver = None
    work = [y.copy()] + [x.copy() for x in xcols]
    if not xcols and plain_two_fe:
        iterations, achieved = 0, 0.0  # no regression: nothing to demean
    elif balanced:
        grand = [v.mean() for v in work]
        for v, g in zip(work, grand):
            um = gm_unit.means(v)
            tm = gm_time.means(v)
            v -= um[gm_unit.inverse]
            v -= tm[gm_time.inverse]
            v += g
        iterations, achieved = 1, 0.0
    elif plain_two_fe:
        solver = _TwoFESolver(gm_unit, gm_time)
        for v in work:
            v -= solver.fitted(v)
        iterations, achieved = 1, 0.0
    else:
        iterations, achieved = _alternate(work, [gm_unit, gm_time, *gm_extra], trend, tol, max_sweeps)

    yd, xds = work[0], work[1:]
    kept_idx, dropped_idx = _collinearity(xds)
    kept_names = [names[i] for i in kept_idx]
    dropped_names = tuple(names[i] for i in dropped_idx)
    if dropped_names:
        warnings.warn(f"regressors dropped as collinear after demeaning: {list(dropped_names)}")

    if kept_idx:
        xmat = np.column_stack([xds[i] for i in kept_idx])
        beta, *_ = np.linalg.lstsq(xmat, yd, rcond=None)
        coef = {kept_names[j]: float(beta[j]) for j in range(len(kept_idx))}
        # effects come from the partial residual against the ORIGINAL
        # regressors, so predictions decompose as X*beta + effects
        x_orig = np.column_stack([xcols[i] for i in kept_idx])
        partial = y - x_orig @ beta
    else:
        xmat = np.empty((y.size, 0))
        coef = {}
        partial = y.copy()

    effects = _extract_effects(
        partial, rows, cols, gm_unit, gm_time, gm_extra, extra_grids, trend, n, t, tol,
        solver=solver if plain_two_fe else None,
        make_solver=plain_two_fe,
    )
    intercept, alpha, xi, slopes, centers, extra_effects, resid_vec = effects

    residuals = np.full((n, t), np.nan)
    residuals[rows, cols] = resid_vec
    return FEFit(
        coef=coef,
        dropped=dropped_names,
        intercept=intercept,
        unit_effects=alpha,
        time_effects=xi,
        residuals=residuals,
        mask=mask,
        iterations=iterations,
        achieved_tol=achieved,
        trend_slopes=slopes,
        trend_centers=centers,
        extra_effects=extra_effects,
        extra_grids=extra_grids,
        _xd=xmat,
        _resid_vec=resid_vec,
        _rows=rows,
        _cols=cols,
    )


def _alternate(work, means_blocks, trend, tol, max_sweeps):
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for v in work:
            for gm in means_blocks:
                delta = max(delta, gm.subtract(v))
            if trend is not None:
                delta = max(delta, trend.subtract(v))
        if delta < tol:
            return sweep, delta
    raise ConvergenceError(
        f"demeaning did not converge in {max_sweeps} sweeps (last change {delta:.3e})",
        achieved_tol=delta,
    )


def _collinearity(xds: list[np.ndarray]) -> tuple[list[int], list[int]]:
    if not xds:
        return [], []
    xmat = np.column_stack(xds)
    scale = np.sqrt((xmat * xmat).sum(axis=0))
    # columns absorbed entirely by the fixed effects have ~zero demeaned norm
    alive = [i for i in range(len(xds)) if scale[i] > PIVOT_RTOL * max(scale.max(), 1.0)]
    if not alive:
        return [], list(range(len(xds)))
    sub = xmat[:, alive] / scale[alive]
    _, r, piv = scipy.linalg.qr(sub, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > PIVOT_RTOL * diag[0]).sum()) if diag.size else 0
    kept = sorted(alive[p] for p in piv[:rank])
    dropped = sorted(set(range(len(xds))) - set(kept))
    return kept, dropped


def _extract_effects(
    partial, rows, cols, gm_unit, gm_time, gm_extra, extra_grids, trend, n, t, tol,
    solver=None, make_solver=False,
):
    """Least squares for intercept, unit/time effects, optional unit trends
    and extra group effects: direct solve in the plain two-effect layout,
    block-coordinate descent otherwise."""
    if solver is None and make_solver:
        solver = _TwoFESolver(gm_unit, gm_time)
    if solver is not None:
        alpha_c, xi_c = solver.solve(partial)
        mu = float(alpha_c.mean() + xi_c.mean())
        alpha_c = alpha_c - alpha_c.mean()
        xi_c = xi_c - xi_c.mean()
        alpha = np.full(n, np.nan)
        alpha[gm_unit.codes_compact.astype(int)] = alpha_c
        xi = np.full(t, np.nan)
        xi[gm_time.codes_compact.astype(int)] = xi_c
        resid_vec = partial - (mu + alpha[rows] + xi[cols])
        return mu, alpha, xi, None, None, [], resid_vec
    alpha_c = np.zeros(gm_unit.codes_compact.size)
    xi_c = np.zeros(gm_time.codes_compact.size)
    slopes_c = np.zeros(gm_unit.codes_compact.size) if trend is not None else None
    extra_c = [np.zeros(gm.codes_compact.size) for gm in gm_extra]
    centered = trend.centered if trend is not None else None

    fitted_other = np.zeros_like(partial)
    for _ in range(MAX_SWEEPS):
        delta = 0.0
        # unit block (with trend when requested)
        other = xi_c[gm_time.inverse]
        for gm, e in zip(gm_extra, extra_c):
            other = other + e[gm.inverse]
        r = partial - other
        new_alpha = gm_unit.means(r)
        if trend is not None:
            resid_alpha = r - new_alpha[gm_unit.inverse]
            new_slope = trend.slopes(resid_alpha)
            delta = max(delta, float(np.max(np.abs(new_slope - slopes_c), initial=0.0)))
            slopes_c = new_slope
        delta = max(delta, float(np.max(np.abs(new_alpha - alpha_c), initial=0.0)))
        alpha_c = new_alpha
        # time block
        unit_part = alpha_c[gm_unit.inverse]
        if trend is not None:
            unit_part = unit_part + slopes_c[gm_unit.inverse] * centered
        r = partial - unit_part
        for gm, e in zip(gm_extra, extra_c):
            r = r - e[gm.inverse]
        new_xi = gm_time.means(r)
        delta = max(delta, float(np.max(np.abs(new_xi - xi_c), initial=0.0)))
        xi_c = new_xi
        # extra blocks
        base = unit_part + xi_c[gm_time.inverse]
        for b, gm in enumerate(gm_extra):
            r = partial - base
            for b2, gm2 in enumerate(gm_extra):
                if b2 != b:
                    r = r - extra_c[b2][gm2.inverse]
            new_e = gm.means(r)
            delta = max(delta, float(np.max(np.abs(new_e - extra_c[b]), initial=0.0)))
            extra_c[b] = new_e
        if delta < tol * 0.1:
            break

    # normalization: mean-zero unit and time effects, intercept absorbs the rest
    mu = float(alpha_c.mean() + xi_c.mean())
    alpha_c = alpha_c - alpha_c.mean()
    xi_c = xi_c - xi_c.mean()
    extra_effects = []
    for b, gm in enumerate(gm_extra):
        m = extra_c[b].mean()
        mu += float(m)
        extra_c[b] = extra_c[b] - m

    alpha = np.full(n, np.nan)
    alpha[gm_unit.codes_compact.astype(int)] = alpha_c
    xi = np.full(t, np.nan)
    xi[gm_time.codes_compact.astype(int)] = xi_c
    slopes = centers = None
    if trend is not None:
        slopes = np.full(n, np.nan)
        centers = np.full(n, np.nan)
        unit_levels = gm_unit.codes_compact.astype(int)
        slopes[unit_levels] = np.where(trend.estimable, slopes_c, np.nan)
        centers[unit_levels] = gm_unit.means((cols + 1).astype(float))
    for b, gm in enumerate(gm_extra):
        raw = extra_grids[b][rows, cols]
        levels = {}
        seen = gm.codes_compact.astype(int)
        uniq = np.unique(raw)
        for code, label in enumerate(uniq):
            if code in seen:
                levels[label] = float(extra_c[b][np.searchsorted(gm.codes_compact, code)])
        extra_effects.append(levels)

    fitted = mu + alpha[rows] + xi[cols]
    if trend is not None:
        fitted = fitted + np.where(
            np.isnan(slopes[rows]), 0.0, slopes[rows] * ((cols + 1) - centers[rows])
        )
    for b, gm in enumerate(gm_extra):
        fitted = fitted + extra_c[b][gm.inverse]
    resid_vec = partial - fitted
    return mu, alpha, xi, slopes, centers, extra_effects, resid_vec


def cluster_vcov(fit: FEFit, clusters, *, small_sample: bool = True) -> ClusterVcov:
    """Sandwich covariance of the coefficients with cluster-level score sums.

    ``clusters`` gives one label per unit (or a full per-cell grid). The
    small-sample factor is G/(G-1) * (n-1)/(n-k); k counts the regressors
    and the absorbed effect dimensions, except dimensions nested within the
    clusters (unit effects under unit-level clustering), which do not
    consume cluster-level degrees of freedom. Pass ``small_sample=False``
    for the raw sandwich.
    """
    if fit._xd is None or fit._xd.shape[1] == 0:
        raise ValueError("fit has no retained regressors")
    rows, cols = fit._rows, fit._cols
    labels = np.asarray(clusters)
    cell_labels = labels[rows, cols] if labels.ndim == 2 else labels[rows]
    _, codes = np.unique(cell_labels, return_inverse=True)
    g = int(codes.max()) + 1
    if g < 2:
        raise EstimatorError("cluster-robust covariance needs at least 2 clusters")
    x = fit._xd
    e = fit._resid_vec
    k = x.shape[1]
    nobs = x.shape[0]
    bread = np.linalg.inv(x.T @ x)
    scores = np.zeros((g, k))
    np.add.at(scores, codes, x * e[:, None])
    meat = scores.T @ scores
    k_total = k + _absorbed_dof(fit, rows, cols, codes)
    scale = 1.0
    if small_sample:
        denom = max(nobs - k_total, 1)
        scale = (g / (g - 1)) * ((nobs - 1) / denom)
    v = scale * bread @ meat @ bread
    return ClusterVcov(matrix=v, names=tuple(fit.coef), n_clusters=g, scale=scale)


def _nested_in_clusters(dim_codes: np.ndarray, cluster_codes: np.ndarray) -> bool:
    """True when every level of the dimension lies inside one cluster."""
    seen: dict[int, int] = {}
    for d, c in zip(dim_codes, cluster_codes):
        prev = seen.setdefault(int(d), int(c))
        if prev != c:
            return False
    return True


def _absorbed_dof(fit: FEFit, rows: np.ndarray, cols: np.ndarray, cluster_codes: np.ndarray) -> int:
    dof = 1  # intercept
    units_nested = _nested_in_clusters(rows, cluster_codes)
    if not units_nested:
        dof += int(np.isfinite(fit.unit_effects).sum()) - 1
        if fit.trend_slopes is not None:
            dof += int(np.isfinite(fit.trend_slopes).sum())
    if not _nested_in_clusters(cols, cluster_codes):
        dof += int(np.isfinite(fit.time_effects).sum()) - 1
    for effects in fit.extra_effects:
        dof += max(len(effects) - 1, 0)
    return dof


@dataclass
class TwfeEstimate:
    """Static treatment coefficient with its cluster-robust uncertainty."""

    estimate: float
    se: float
    n_clusters: int
    fit: FEFit

    def conf_int(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.estimate - z * self.se, self.estimate + z * self.se


def twfe_att(
    ds: PanelDataset,
    covariates: tuple[str, ...] | None = None,
    *,
    unit_trends: bool = False,
) -> TwfeEstimate:
    """Static two-way fixed-effects coefficient on the treatment dummy.

    Included cells need observed outcome, treatment, and all requested
    covariates. Errors if treatment has no variation left after demeaning.
    """
    cov_names = list(covariates) if covariates is not None else list(ds.covariates)
    mask = ds.complete_mask()
    regressors: dict[str, np.ndarray] = {"treatment": ds.treatment}
    for name in cov_names:
        grid = ds.covariates[name]
        mask = mask & ~np.isnan(grid)
        regressors[name] = grid
    if not (ds.treatment[mask] == 1).any() or not (ds.treatment[mask] == 0).any():
        raise EstimatorError("panel needs both treated and control cells")
    fit = fit_fe(ds.outcome, regressors, mask, unit_trends=unit_trends)
    if "treatment" not in fit.coef:
        raise EstimatorError("treatment collinear with fixed effects")
    if len(fit.coef) > 0 and len(set(ds.cluster_of)) >= 2:
        vcov = cluster_vcov(fit, _unit_cluster_codes(ds))
        se = vcov.se("treatment")
        ncl = vcov.n_clusters
    else:
        se = float("nan")
        ncl = 1
    return TwfeEstimate(estimate=fit.coef["treatment"], se=se, n_clusters=ncl, fit=fit)


def _unit_cluster_codes(ds: PanelDataset) -> np.ndarray:
    _, codes = np.unique(np.asarray(ds.cluster_of, dtype=object), return_inverse=True)
    return codes


@dataclass
class EventStudyResult:
    """Dynamic lag/lead coefficients from the event-study regression."""

    rows: list[dict]  # period, estimate, se, ci_low, ci_high, n_cells
    long_run: dict | None
    omitted: tuple[int, ...]
    reference_periods: tuple[int, ...]
    fit: FEFit

    def estimate(self, period: int) -> float:
        for r in self.rows:
            if r["period"] == period:
                return r["estimate"]
        raise KeyError(period)


def twfe_event_study(ds: PanelDataset, leads: int, lags: int) -> EventStudyResult:
    """Lags-and-leads regression with the period before adoption (relative
    period 0) as the reference; lags beyond ``lags`` pool into a long-run
    term. Bins with no supporting cells are omitted and reported.
    """
    if leads < 1 or lags < 1:
        raise ValueError("leads and lags must both be >= 1")
    es = compute_event_structure(ds)
    rel = es.relative_period
    mask = ds.complete_mask()
    if not np.isfinite(rel[mask]).any():
        raise EstimatorError("no unit ever switches into treatment")

    regressors: dict[str, np.ndarray] = {}
    wanted: list[tuple[str, int]] = []
    omitted: list[int] = []
    d = ds.treatment
    for l in range(-leads, lags + 1):
        if l == 0:
            continue
        ind = (rel == l) if l < 0 else ((rel == l) & (d == 1))
        ind = ind & mask
        if ind.sum() == 0:
            omitted.append(l)
            continue
        name = f"rel[{l}]"
        regressors[name] = ind.astype(float)
        wanted.append((name, l))
    long_ind = (rel > lags) & (d == 1) & mask
    has_long = bool(long_ind.sum())
    if has_long:
        regressors["rel[long]"] = long_ind.astype(float)
    if not regressors:
        raise EstimatorError("all relative periods identical; nothing to estimate")
    if omitted:
        warnings.warn(f"event-study bins with no supporting cells omitted: {omitted}")

    fit = fit_fe(ds.outcome, regressors, mask)
    vcov = None
    if len(set(ds.cluster_of)) >= 2 and fit.coef:
        vcov = cluster_vcov(fit, _unit_cluster_codes(ds))
    z = 1.959963984540054
    rows = []
    for name, l in wanted:
        if name not in fit.coef:
            omitted.append(l)
            continue
        est = fit.coef[name]
        se = vcov.se(name) if vcov is not None and name in vcov.names else float("nan")
        rows.append(
            {
                "period": l,
                "estimate": est,
                "se": se,
                "ci_low": est - z * se,
                "ci_high": est + z * se,
                "n_cells": int(regressors[name].sum()),
            }
        )
    rows.sort(key=lambda r: r["period"])
    long_run = None
    if has_long and "rel[long]" in fit.coef:
        se = vcov.se("rel[long]") if vcov is not None else float("nan")
        long_run = {
            "estimate": fit.coef["rel[long]"],
            "se": se,
            "n_cells": int(long_ind.sum()),
            "min_period": lags + 1,
        }
    return EventStudyResult(
        rows=rows,
        long_run=long_run,
        omitted=tuple(sorted(omitted)),
        reference_periods=(0,),
        fit=fit,
    )
