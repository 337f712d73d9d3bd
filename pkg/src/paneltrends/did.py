"""DID-extension estimators built from local two-by-two comparisons.

Implements cohort-by-period DID with never- or not-yet-treated comparison
groups, the saturated interaction-weighted regression, stacked DID with
sub-dataset-specific effects, history-matched panel matching, the
switcher estimator that also uses treatment leavers, and the timing-group
decomposition of the static two-way fixed-effects coefficient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EstimatorError
from .fe import fit_fe
from .panel import (
    EventStructure,
    PanelDataset,
    SettingClass,
    classify_setting,
    compute_event_structure,
)

__all__ = [
    "GroupTimeGrid",
    "StackedResult",
    "MatchedSet",
    "PanelMatchResult",
    "DidMultipleResult",
    "BaconDecomposition",
    "csdid",
    "iw",
    "stacked_did",
    "panel_match",
    "did_multiple",
    "bacon_decompose",
]

SPARSE_CELL_FLOOR = 5  # comparisons smaller than this are flagged, not dropped


def _require_staggered(es: EventStructure, who: str) -> None:
    setting = classify_setting(es)
    if setting is SettingClass.GENERAL:
        raise EstimatorError(
            f"{who} requires a staggered setting (no treatment reversal); data are general"
        )


def _usable_cohorts(ds: PanelDataset, es: EventStructure) -> dict[int, np.ndarray]:
    """Adoption cohorts with a pre-adoption reference period available.

    Units adopting in the first period (or always treated) have no
    reference period and are excluded, as are units whose history is only
    known up to a missing gap.
    """
    cohorts = es.cohorts()
    out = {}
    skipped = []
    for g, idx in cohorts.items():
        idx = idx[~es.ambiguous_history[idx]]
        if g < 2:
            skipped.extend(ds.unit_ids[i] for i in idx)
            continue
        if idx.size:
            out[g] = idx
    if skipped:
        warnings.warn(
            f"units treated from the first period have no reference period and are excluded: {skipped}"
        )
    return out


@dataclass
class GroupTimeGrid:
    """Cohort-by-relative-period DID estimates and their aggregates."""

    comparison: str  # "never" or "notyet"
    cells: dict  # (cohort, period) -> {estimate, n_treated, n_comparison}
    dynamic: list[dict]  # period, estimate, n_cells, n_cohorts
    att: float
    omitted_cells: list[tuple]
    excluded_units: tuple
    method: str = "csdid"

    def cell_estimate(self, cohort: int, period: int) -> float:
        return self.cells[(cohort, period)]["estimate"]

    def dynamic_estimate(self, period: int) -> float:
        for row in self.dynamic:
            if row["period"] == period:
                return row["estimate"]
        raise KeyError(period)


def csdid(
    ds: PanelDataset,
    comparison: str = "never",
    *,
    base_period: int = 0,
    es: EventStructure | None = None,
) -> GroupTimeGrid:
    """Cohort-by-period DID against never- or not-yet-treated units.

    Each estimate contrasts the outcome change from the reference period
    (relative period ``base_period``, default the last period before
    adoption) with the same change among comparison units. Per-period
    aggregates weight cohorts by treated-unit counts; the ATT weights
    cohort-period cells by treated-cell counts.
    """
    if comparison not in ("never", "notyet"):
        raise ValueError(f"comparison must be 'never' or 'notyet', got {comparison!r}")
    if base_period > 0:
        raise ValueError("base_period must be a pre-adoption relative period (<= 0)")
    if es is None:
        es = compute_event_structure(ds)
    _require_staggered(es, "csdid")
    cohorts = _usable_cohorts(ds, es)
    if not cohorts:
        raise EstimatorError("no usable adoption cohort")
    never = es.never_treated_units()
    if comparison == "never" and never.size == 0:
        raise EstimatorError("comparison='never' needs at least one never-treated unit")

    t_max = ds.n_periods
    y = ds.outcome
    cells: dict = {}
    omitted: list[tuple] = []
    for g, members in sorted(cohorts.items()):
        jb = g + base_period - 2  # 0-based column of the reference period
        if jb < 0:
            omitted.append((g, "no-reference-period"))
            continue
        for l in range(2 - g, t_max - g + 2):
            if l == base_period:
                continue
            jt = g + l - 2
            if not 0 <= jt < t_max:
                continue
            tr = members[~np.isnan(y[members, jt]) & ~np.isnan(y[members, jb])]
            if tr.size == 0:
                omitted.append((g, l))
                continue
            later = max(jt, jb) + 1  # 1-based rank of the later period involved
            if comparison == "never":
                comp = never
            else:
                comp = np.flatnonzero(es.cohort_of > later)
            comp = comp[~np.isnan(y[comp, jt]) & ~np.isnan(y[comp, jb])]
            if comp.size == 0:
                omitted.append((g, l))
                continue
            est = (y[tr, jt].mean() - y[tr, jb].mean()) - (y[comp, jt].mean() - y[comp, jb].mean())
            cells[(g, l)] = {
                "estimate": float(est),
                "n_treated": int(tr.size),
                "n_comparison": int(comp.size),
                "sparse": bool(min(tr.size, comp.size) < SPARSE_CELL_FLOOR),
            }
    if omitted:
        warnings.warn(f"cohort-period cells without usable data omitted: {omitted}")
    if not cells:
        raise EstimatorError("no estimable cohort-period cell")

    dynamic = _aggregate_dynamic(cells)
    att = _aggregate_att(cells)
    excluded = tuple(
        ds.unit_ids[i]
        for i in range(ds.n_units)
        if es.ambiguous_history[i] or (np.isfinite(es.cohort_of[i]) and es.cohort_of[i] < 2)
    )
    return GroupTimeGrid(
        comparison=comparison,
        cells=cells,
        dynamic=dynamic,
        att=att,
        omitted_cells=omitted,
        excluded_units=excluded,
    )


def _aggregate_dynamic(cells: dict) -> list[dict]:
    by_l: dict[int, list] = {}
    for (g, l), c in cells.items():
        by_l.setdefault(l, []).append(c)
    rows = []
    for l in sorted(by_l):
        group = by_l[l]
        w = np.array([c["n_treated"] for c in group], dtype=float)
        est = np.array([c["estimate"] for c in group])
        rows.append(
            {
                "period": int(l),
                "estimate": float((w * est).sum() / w.sum()),
                "n_cells": int(w.sum()),
                "n_cohorts": len(group),
            }
        )
    return rows


def _aggregate_att(cells: dict) -> float:
    post = [(c["n_treated"], c["estimate"]) for (g, l), c in cells.items() if l >= 1]
    if not post:
        raise EstimatorError("no post-adoption cell estimable")
    w = np.array([p[0] for p in post], dtype=float)
    est = np.array([p[1] for p in post])
    return float((w * est).sum() / w.sum())


@dataclass
class IwResult:
    """Aggregates from the saturated cohort-by-relative-period regression."""

    group_time: dict  # (cohort, period) -> {estimate, n_cells}
    dynamic: list[dict]
    att: float
    comparison_cohort: str  # "never" or the adoption rank of the last cohort
    excluded_units: tuple
    method: str = "iw"

    def dynamic_estimate(self, period: int) -> float:
        for row in self.dynamic:
            if row["period"] == period:
                return row["estimate"]
        raise KeyError(period)


def iw(ds: PanelDataset, *, es: EventStructure | None = None) -> IwResult:
    """Interaction-weighted estimator from the saturated regression.

    Cohort dummies are fully interacted with relative-period indicators
    (reference period 0); the comparison cohort is the never-treated one
    or, failing that, the last adopters with their post-adoption cells
    removed. Per-period aggregation weights cohorts by their share of
    treated cells at that period.
    """
    if es is None:
        es = compute_event_structure(ds)
    _require_staggered(es, "iw")
    cohorts = _usable_cohorts(ds, es)
    never = es.never_treated_units()
    mask = ds.complete_mask()
    if never.size:
        comparison = "never"
        treated_cohorts = dict(cohorts)
    else:
        if len(cohorts) < 2:
            raise EstimatorError("iw needs a never-treated cohort or at least 2 adoption cohorts")
        comparison = max(cohorts)
        treated_cohorts = {g: m for g, m in cohorts.items() if g != comparison}
        # effects are only identified while the comparison cohort is still
        # under control, so its post periods leave the sample entirely
        mask = mask.copy()
        mask[:, comparison - 1:] = False
    if np.isnan(ds.outcome).any() or np.isnan(ds.treatment).any():
        warnings.warn(
            "missing data present: the saturated regression can differ from "
            "directly assembled local DIDs"
        )

    rel = es.relative_period
    cohort_of = es.cohort_of
    dummies: dict[str, np.ndarray] = {}
    keys: list[tuple[int, int]] = []
    for g, members in sorted(treated_cohorts.items()):
        in_cohort = np.zeros(ds.n_units, dtype=bool)
        in_cohort[members] = True
        for l in range(2 - g, ds.n_periods - g + 2):
            if l == 0:
                continue
            ind = in_cohort[:, None] & (rel == l) & mask
            if not ind.any():
                continue
            dummies[f"c{g}l{l}"] = ind.astype(float)
            keys.append((g, l))
    if not dummies:
        raise EstimatorError("no cohort-period interaction estimable")

    fit = fit_fe(ds.outcome, dummies, mask)
    if fit.dropped:
        warnings.warn(f"collinear cohort-period interactions dropped: {list(fit.dropped)}")
    group_time = {}
    for g, l in keys:
        name = f"c{g}l{l}"
        if name in fit.coef:
            group_time[(g, l)] = {
                "estimate": fit.coef[name],
                "n_cells": int(dummies[name].sum()),
            }

    by_l: dict[int, list] = {}
    for (g, l), c in group_time.items():
        by_l.setdefault(l, []).append(c)
    dynamic = []
    for l in sorted(by_l):
        grp = by_l[l]
        w = np.array([c["n_cells"] for c in grp], dtype=float)
        est = np.array([c["estimate"] for c in grp])
        dynamic.append(
            {
                "period": int(l),
                "estimate": float((w * est).sum() / w.sum()),
                "n_cells": int(w.sum()),
                "n_cohorts": len(grp),
            }
        )
    post = [r for r in dynamic if r["period"] >= 1]
    if not post:
        raise EstimatorError("no post-adoption interaction estimable")
    w = np.array([r["n_cells"] for r in post], dtype=float)
    est = np.array([r["estimate"] for r in post])
    att = float((w * est).sum() / w.sum())
    excluded = tuple(
        ds.unit_ids[i]
        for i in range(ds.n_units)
        if es.ambiguous_history[i] or (np.isfinite(es.cohort_of[i]) and es.cohort_of[i] < 2)
    )
    return IwResult(
        group_time=group_time,
        dynamic=dynamic,
        att=att,
        comparison_cohort=comparison,
        excluded_units=excluded,
    )


@dataclass
class StackedResult:
    """Variance-weighted dynamic effects from the stacked regression."""

    dynamic: list[dict]  # period, estimate, n_cells
    att: float
    n_subdatasets: int
    subdataset_sizes: dict  # cohort -> n rows
    truncated_cohorts: list[int]
    method: str = "stacked"

    def dynamic_estimate(self, period: int) -> float:
        for row in self.dynamic:
            if row["period"] == period:
                return row["estimate"]
        raise KeyError(period)


def stacked_did(
    ds: PanelDataset,
    leads: int | None = None,
    lags: int | None = None,
    *,
    es: EventStructure | None = None,
) -> StackedResult:
    """Stacked DID: one sub-dataset per cohort (cohort plus never-treated
    units over the cohort's window), stacked, with sub-dataset-specific
    unit and period effects and shared relative-period dummies.

    ``leads``/``lags`` bound the window around adoption; by default the
    full available range is used. Cohorts whose window is truncated by the
    panel edge are retained and reported.
    """
    if es is None:
        es = compute_event_structure(ds)
    _require_staggered(es, "stacked_did")
    cohorts = _usable_cohorts(ds, es)
    never = es.never_treated_units()
    if never.size == 0:
        raise EstimatorError("stacked_did needs a never-treated cohort")
    if not cohorts:
        raise EstimatorError("no usable adoption cohort")
    t_max = ds.n_periods
    maximal = leads is None and lags is None
    a = leads if leads is not None else t_max
    b = lags if lags is not None else t_max

    blocks_y, blocks_rel, blocks_sub, blocks_treat = [], [], [], []
    sizes = {}
    truncated = []
    for g, members in sorted(cohorts.items()):
        lo, hi = g - a, g + b - 1
        if not maximal and (lo < 1 or hi > t_max):
            truncated.append(g)
        lo, hi = max(lo, 1), min(hi, t_max)
        window = np.zeros(t_max, dtype=bool)
        window[lo - 1: hi] = True
        rows = np.concatenate([members, never])
        y = ds.outcome[rows][:, :]
        seg_mask = ~np.isnan(y) & window[None, :] & ~np.isnan(ds.treatment[rows])
        rel = np.full(y.shape, np.nan)
        rel[: members.size] = np.arange(1, t_max + 1)[None, :] - g + 1
        blocks_y.append(y)
        blocks_rel.append(np.where(seg_mask, rel, np.nan))
        blocks_sub.append(np.full(y.shape, g))
        blocks_treat.append(seg_mask)
        sizes[g] = int(seg_mask.sum())
    y_st = np.vstack(blocks_y)
    rel_st = np.vstack(blocks_rel)
    sub_st = np.vstack(blocks_sub)
    mask_st = np.vstack(blocks_treat)

    dummies = {}
    levels = np.unique(rel_st[np.isfinite(rel_st)]).astype(int)
    for l in levels:
        if l == 0:
            continue
        ind = (rel_st == l) & mask_st
        if ind.any():
            dummies[f"rel{l}"] = ind.astype(float)
    if not any(l >= 1 for l in levels):
        raise EstimatorError("no post-adoption period inside the stacking window")
    subtime = sub_st * (t_max + 1) + np.arange(t_max)[None, :]
    fit = fit_fe(y_st, dummies, mask_st, extra_groups={"subperiod": subtime})

    dynamic = []
    for l in sorted(levels):
        name = f"rel{l}"
        if name in fit.coef:
            dynamic.append(
                {
                    "period": int(l),
                    "estimate": fit.coef[name],
                    "n_cells": int(dummies[name].sum()),
                }
            )
    post = [r for r in dynamic if r["period"] >= 1]
    w = np.array([r["n_cells"] for r in post], dtype=float)
    est = np.array([r["estimate"] for r in post])
    att = float((w * est).sum() / w.sum())
    return StackedResult(
        dynamic=dynamic,
        att=att,
        n_subdatasets=len(sizes),
        subdataset_sizes=sizes,
        truncated_cohorts=truncated,
    )


@dataclass
class MatchedSet:
    """Units sharing a switching unit's recent treatment history."""

    focal_unit: int  # unit index
    switch_period: int  # 1-based rank of the switch-in
    members: np.ndarray  # unit indices under control at the switch with matching history
    survivors_by_lead: dict  # lead -> unit indices still under control through that lead


@dataclass
class PanelMatchResult:
    """History-matched local DID estimates by lead."""

    matched_sets: list[MatchedSet]
    dynamic: list[dict]  # period (lead), estimate, n_cells
    att: float
    n_empty_sets: int
    history: int
    max_lead: int
    method: str = "panel_match"

    def dynamic_estimate(self, period: int) -> float:
        for row in self.dynamic:
            if row["period"] == period:
                return row["estimate"]
        raise KeyError(period)


def panel_match(
    ds: PanelDataset,
    history: int = 4,
    max_lead: int = 4,
    *,
    es: EventStructure | None = None,
) -> PanelMatchResult:
    """Local DIDs for each switch into treatment against units that share
    the switching unit's treatment history over the trailing ``history``
    periods and stay under control through each lead.

    Works with treatment reversal. Focal observations whose matched set is
    empty (or whose trailing window leaves the panel) are excluded and
    counted. The per-lead estimate averages local DIDs with equal weight
    over focal observations.
    """
    if history < 1:
        raise ValueError("history length must be >= 1")
    if max_lead < 1:
        raise ValueError("max_lead must be >= 1")
    if es is None:
        es = compute_event_structure(ds)
    d = ds.treatment
    y = ds.outcome
    n, t = d.shape
    ambiguous = es.ambiguous_history

    focal: list[tuple[int, int]] = []  # (unit index, 0-based switch column)
    for i in range(n):
        if ambiguous[i]:
            continue
        for j in range(1, t):
            if d[i, j] == 1 and d[i, j - 1] == 0:
                focal.append((i, j))
    if not focal:
        raise EstimatorError("no switch into treatment found")

    sets: list[MatchedSet] = []
    n_empty = 0
    per_lead: dict[int, list[float]] = {l: [] for l in range(1, max_lead + 1)}
    eligible_member = ~ambiguous
    for i, j in focal:
        w0 = j - history
        if w0 < 0 or np.isnan(d[i, w0:j]).any() or np.isnan(y[i, j - 1]):
            n_empty += 1
            continue
        hist = d[i, w0:j]
        ok = eligible_member.copy()
        ok[i] = False
        window = d[:, w0:j]
        ok &= ~np.isnan(window).any(axis=1) & (window == hist[None, :]).all(axis=1)
        ok &= d[:, j] == 0
        ok &= ~np.isnan(y[:, j - 1])
        members = np.flatnonzero(ok)
        if members.size == 0:
            n_empty += 1
            continue
        survivors: dict[int, np.ndarray] = {}
        alive = members
        focal_treated = True
        for l in range(1, max_lead + 1):
            col = j + l - 1
            if col >= t:
                break
            focal_treated = focal_treated and d[i, col] == 1
            if not focal_treated:
                break
            alive = alive[d[alive, col] == 0]
            survivors[l] = alive
            usable = alive[~np.isnan(y[alive, col])]
            if usable.size and not np.isnan(y[i, col]):
                own = y[i, col] - y[i, j - 1]
                comp = (y[usable, col] - y[usable, j - 1]).mean()
                per_lead[l].append(own - comp)
        sets.append(
            MatchedSet(focal_unit=i, switch_period=j + 1, members=members, survivors_by_lead=survivors)
        )

    dynamic = []
    for l in range(1, max_lead + 1):
        vals = per_lead[l]
        if vals:
            dynamic.append(
                {"period": l, "estimate": float(np.mean(vals)), "n_cells": len(vals)}
            )
    if not dynamic:
        raise EstimatorError("no lead with a nonempty matched comparison")
    w = np.array([r["n_cells"] for r in dynamic], dtype=float)
    est = np.array([r["estimate"] for r in dynamic])
    att = float((w * est).sum() / w.sum())
    return PanelMatchResult(
        matched_sets=sets,
        dynamic=dynamic,
        att=att,
        n_empty_sets=n_empty,
        history=history,
        max_lead=max_lead,
    )


@dataclass
class DidMultipleResult:
    """Average contemporaneous switching effect from joiners and leavers."""

    estimate: float
    n_joiners: int
    n_leavers: int
    n_skipped: int  # switchers without a stable comparison group
    method: str = "did_multiple"


def did_multiple(ds: PanelDataset, *, es: EventStructure | None = None) -> DidMultipleResult:
    """Local DIDs at the moment of switching, pooling units that join the
    treatment with (sign-flipped) units that leave it. Comparison units are
    those whose treatment status is stable across the two periods.
    """
    if es is None:
        es = compute_event_structure(ds)
    d = ds.treatment
    y = ds.outcome
    n, t = d.shape
    contributions: list[float] = []
    n_join = n_leave = n_skip = 0
    for j in range(1, t):
        prev, cur = d[:, j - 1], d[:, j]
        dy = y[:, j] - y[:, j - 1]
        valid = ~np.isnan(prev) & ~np.isnan(cur) & ~np.isnan(dy)
        joiners = np.flatnonzero(valid & (prev == 0) & (cur == 1))
        leavers = np.flatnonzero(valid & (prev == 1) & (cur == 0))
        stable_c = np.flatnonzero(valid & (prev == 0) & (cur == 0))
        stable_t = np.flatnonzero(valid & (prev == 1) & (cur == 1))
        if joiners.size:
            if stable_c.size:
                base = dy[stable_c].mean()
                contributions.extend(dy[joiners] - base)
                n_join += joiners.size
            else:
                n_skip += joiners.size
        if leavers.size:
            if stable_t.size:
                base = dy[stable_t].mean()
                contributions.extend(base - dy[leavers])  # leaving removes the effect
                n_leave += leavers.size
            else:
                n_skip += leavers.size
    if not contributions:
        raise EstimatorError("no switcher with a stable comparison group")
    return DidMultipleResult(
        estimate=float(np.mean(contributions)),
        n_joiners=n_join,
        n_leavers=n_leave,
        n_skipped=n_skip,
    )


@dataclass
class BaconDecomposition:
    """Timing-group decomposition of the static TWFE coefficient."""

    components: list[dict]  # kind, treated, comparison, estimate, weight
    twfe_from_components: float

    def total_weight(self) -> float:
        return float(sum(c["weight"] for c in self.components))

    def by_kind(self, kind: str) -> list[dict]:
        return [c for c in self.components if c["kind"] == kind]


def bacon_decompose(ds: PanelDataset, *, es: EventStructure | None = None) -> BaconDecomposition:
    """All timing-group two-by-two DIDs with variance-based weights.

    Requires a balanced complete staggered panel without covariates; the
    weighted combination of the components reproduces the static two-way
    fixed-effects coefficient.
    """
    if es is None:
        es = compute_event_structure(ds)
    _require_staggered(es, "bacon_decompose")
    if not ds.complete_mask().all():
        raise EstimatorError(
            "decomposition needs a balanced complete panel; compare estimators directly instead"
        )
    if es.always_treated:
        raise EstimatorError(
            f"always-treated units present ({list(es.always_treated)}); drop them first"
        )
    cohorts = es.cohorts()
    if not cohorts:
        raise EstimatorError("no adoption cohort")
    n, t = ds.n_units, ds.n_periods
    never = es.never_treated_units()
    y = ds.outcome

    def group_mean(rows: np.ndarray, cols: np.ndarray) -> float:
        return float(y[np.ix_(rows, cols)].mean())

    share = {g: len(m) / n for g, m in cohorts.items()}
    dbar = {g: (t - g + 1) / t for g in cohorts}
    periods = np.arange(t)

    raw: list[tuple[str, object, object, float, float]] = []
    for g, members in sorted(cohorts.items()):
        if never.size:
            pre = periods[: g - 1]
            post = periods[g - 1:]
            est = (group_mean(members, post) - group_mean(members, pre)) - (
                group_mean(never, post) - group_mean(never, pre)
            )
            weight = share[g] * (never.size / n) * dbar[g] * (1 - dbar[g])
            raw.append(("treated_vs_never", g, "never", est, weight))
    glist = sorted(cohorts)
    for a_i, gk in enumerate(glist):
        for gl in glist[a_i + 1:]:
            mk, ml = cohorts[gk], cohorts[gl]
            # earlier cohort treated, later cohort still untreated
            pre = periods[: gk - 1]
            mid = periods[gk - 1: gl - 1]
            post = periods[gl - 1:]
            est_k = (group_mean(mk, mid) - group_mean(mk, pre)) - (
                group_mean(ml, mid) - group_mean(ml, pre)
            )
            w_k = share[gk] * share[gl] * (dbar[gk] - dbar[gl]) * (1 - dbar[gk])
            raw.append(("earlier_vs_later", gk, gl, est_k, w_k))
            # later cohort treated, earlier cohort's post window as control
            est_l = (group_mean(ml, post) - group_mean(ml, mid)) - (
                group_mean(mk, post) - group_mean(mk, mid)
            )
            w_l = share[gk] * share[gl] * dbar[gl] * (dbar[gk] - dbar[gl])
            raw.append(("later_vs_earlier", gl, gk, est_l, w_l))

    total = sum(w for *_, w in raw)
    if total <= 0:
        raise EstimatorError("treatment has no usable timing variation")
    components = [
        {
            "kind": kind,
            "treated": treated,
            "comparison": comparison,
            "estimate": est,
            "weight": w / total,
        }
        for kind, treated, comparison, est, w in raw
    ]
    twfe = float(sum(c["estimate"] * c["weight"] for c in components))
    return BaconDecomposition(components=components, twfe_from_components=twfe)
