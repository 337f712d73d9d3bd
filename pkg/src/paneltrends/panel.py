"""Canonical panel data model, event-time algebra, and treatment-pattern tools.

Panels are stored as rectangular unit-by-period grids with NaN marking
missing values. Time periods are mapped to consecutive integer ranks
(1-based) regardless of calendar gaps; all event-time arithmetic operates
on ranks.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError

__all__ = [
    "PanelDataset",
    "EventStructure",
    "SettingClass",
    "build_dataset",
    "compute_event_structure",
    "classify_setting",
    "status_summary",
    "drop_always_treated",
    "recode_carryover",
    "read_long_csv",
    "write_long_csv",
]

NEVER = math.inf


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Immutable unit-by-period panel.

    Attributes
    ----------
    unit_ids : tuple
        Distinct unit labels, in a fixed deterministic order.
    time_ids : tuple
        Distinct period labels, strictly increasing.
    outcome : ndarray, shape (N, T)
        Outcome grid; NaN marks a missing outcome.
    treatment : ndarray, shape (N, T)
        Treatment grid with values in {0.0, 1.0, NaN}.
    covariates : dict of str -> ndarray
        Named covariate grids, each shaped (N, T).
    cluster_of : tuple
        Cluster label per unit; defaults to the unit itself.
    raw_treatment : ndarray or None
        Treatment grid before carryover recoding. Set by
        :func:`recode_carryover`, which always recodes from this grid so
        that repeated recoding is idempotent.
    """

    unit_ids: tuple
    time_ids: tuple
    outcome: np.ndarray
    treatment: np.ndarray
    covariates: dict = field(default_factory=dict)
    cluster_of: tuple = ()
    raw_treatment: np.ndarray | None = None

    def __post_init__(self):
        n, t = len(self.unit_ids), len(self.time_ids)
        if n < 2 or t < 2:
            raise SchemaError(f"panel needs at least 2 units and 2 periods, got {n}x{t}")
        for name, grid in [("outcome", self.outcome), ("treatment", self.treatment)]:
            if grid.shape != (n, t):
                raise SchemaError(f"{name} grid has shape {grid.shape}, expected {(n, t)}")
        obs = ~np.isnan(self.treatment)
        bad = obs & (self.treatment != 0.0) & (self.treatment != 1.0)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise SchemaError(
                f"treatment must be 0 or 1; got {self.treatment[i, j]!r} for "
                f"unit {self.unit_ids[i]!r} at time {self.time_ids[j]!r}"
            )
        for name, grid in self.covariates.items():
            if grid.shape != (n, t):
                raise SchemaError(f"covariate {name!r} has shape {grid.shape}, expected {(n, t)}")
        if not self.cluster_of:
            object.__setattr__(self, "cluster_of", tuple(self.unit_ids))
        elif len(self.cluster_of) != n:
            raise SchemaError("cluster_of must have one label per unit")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_periods(self) -> int:
        return len(self.time_ids)

    def complete_mask(self) -> np.ndarray:
        """Cells with both outcome and treatment observed.

        Cells with observed treatment but missing outcome are "incomplete"
        and excluded from every regression.
        """
        return ~np.isnan(self.outcome) & ~np.isnan(self.treatment)

    def incomplete_cells(self) -> np.ndarray:
        """Boolean grid of cells with observed treatment but missing outcome."""
        return np.isnan(self.outcome) & ~np.isnan(self.treatment)

    def unit_index(self, unit) -> int:
        return self.unit_ids.index(unit)

    def to_long_rows(self) -> list[dict]:
        """Export to long format; missing cells are omitted entirely only
        when neither outcome nor treatment nor any covariate is observed."""
        rows = []
        cov_names = list(self.covariates)
        for i, u in enumerate(self.unit_ids):
            for j, t in enumerate(self.time_ids):
                y = self.outcome[i, j]
                d = self.treatment[i, j]
                covs = {k: self.covariates[k][i, j] for k in cov_names}
                if np.isnan(y) and np.isnan(d) and all(np.isnan(v) for v in covs.values()):
                    continue
                row = {"unit": u, "time": t, "outcome": _none_if_nan(y), "treatment": _none_if_nan(d)}
                row.update({k: _none_if_nan(v) for k, v in covs.items()})
                if self.cluster_of[i] != u:
                    row["cluster"] = self.cluster_of[i]
                rows.append(row)
        return rows


def _none_if_nan(x):
    return None if (isinstance(x, float) and math.isnan(x)) else x


class SettingClass(enum.Enum):
    """Treatment-adoption pattern of a panel."""

    CLASSIC_2X2 = "classic-2x2"
    MULTI_PERIOD_BLOCK = "multi-period-block"
    STAGGERED = "staggered"
    GENERAL = "general"


@dataclass(frozen=True)
class EventStructure:
    """Per-cell event timing derived from the treatment grid.

    ``event_period`` holds, per cell, the 1-based time rank of the relevant
    switch into treatment: the most recent one at or before the cell's
    period if the unit has been treated by then, otherwise the first future
    one; ``inf`` for never-treated units and NaN where the history is
    unobservable. ``relative_period`` is the signed distance to it, with
    value 1 exactly at the switch-in period.
    """

    event_period: np.ndarray
    relative_period: np.ndarray
    cohort_of: np.ndarray  # per unit: 1-based adoption rank, inf for never, nan unknown
    has_reversal: np.ndarray  # bool per unit
    always_treated: tuple  # unit labels treated at every observed cell
    ambiguous_history: np.ndarray  # bool per unit: switch inferred across a missing gap
    excluded_units: tuple  # unit labels with no observed treatment at all

    def cohorts(self) -> dict[int, np.ndarray]:
        """Map adoption rank -> array of unit indices, never-treated excluded."""
        out: dict[int, np.ndarray] = {}
        finite = np.isfinite(self.cohort_of)
        for g in sorted(set(self.cohort_of[finite].astype(int))):
            out[g] = np.flatnonzero(self.cohort_of == g)
        return out

    def never_treated_units(self) -> np.ndarray:
        return np.flatnonzero(np.isposinf(self.cohort_of))


def build_dataset(rows: list[dict]) -> PanelDataset:
    """Assemble a :class:`PanelDataset` from long-format records.

    Each row is a mapping with keys ``unit``, ``time``, ``outcome``,
    ``treatment``, optionally ``cluster``, and any further keys treated as
    covariates. ``None`` (or NaN) values mark missing fields. Duplicate
    (unit, time) pairs are rejected with both offending row indices.
    """
    if not rows:
        raise SchemaError("no rows provided")
    units: list = []
    times: set = set()
    seen: dict[tuple, int] = {}
    reserved = {"unit", "time", "outcome", "treatment", "cluster"}
    cov_names: list[str] = []
    for idx, row in enumerate(rows):
        key = (row["unit"], row["time"])
        if key in seen:
            raise SchemaError(
                f"duplicate cell for unit {key[0]!r} at time {key[1]!r}: rows {seen[key]} and {idx}"
            )
        seen[key] = idx
        d = row.get("treatment")
        if d is not None and not _is_nan(d) and float(d) not in (0.0, 1.0):
            raise SchemaError(f"treatment must be 0 or 1; got {d!r} in row {idx}")
        if row["unit"] not in units:
            units.append(row["unit"])
        times.add(row["time"])
        for k in row:
            if k not in reserved and k not in cov_names:
                cov_names.append(k)

    unit_ids = tuple(sorted(units, key=_sort_key))
    time_ids = tuple(sorted(times, key=_sort_key))
    uix = {u: i for i, u in enumerate(unit_ids)}
    tix = {t: j for j, t in enumerate(time_ids)}
    n, t = len(unit_ids), len(time_ids)

    outcome = np.full((n, t), np.nan)
    treatment = np.full((n, t), np.nan)
    covariates = {k: np.full((n, t), np.nan) for k in cov_names}
    clusters: dict = {}
    for idx, row in enumerate(rows):
        i, j = uix[row["unit"]], tix[row["time"]]
        outcome[i, j] = _as_float(row.get("outcome"))
        treatment[i, j] = _as_float(row.get("treatment"))
        for k in cov_names:
            covariates[k][i, j] = _as_float(row.get(k))
        c = row.get("cluster")
        if c is not None and not _is_nan(c):
            prev = clusters.setdefault(row["unit"], c)
            if prev != c:
                raise SchemaError(
                    f"unit {row['unit']!r} has conflicting cluster labels {prev!r} and {c!r}"
                )
    cluster_of = tuple(clusters.get(u, u) for u in unit_ids)
    return PanelDataset(
        unit_ids=unit_ids,
        time_ids=time_ids,
        outcome=_frozen(outcome),
        treatment=_frozen(treatment),
        covariates={k: _frozen(v) for k, v in covariates.items()},
        cluster_of=cluster_of,
    )


def _sort_key(x):
    try:
        return (0, float(x), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(x))


def _as_float(x):
    if x is None:
        return np.nan
    return float(x)


def _is_nan(x):
    try:
        return math.isnan(float(x))
    except (TypeError, ValueError):
        return False


def compute_event_structure(ds: PanelDataset) -> EventStructure:
    """Derive per-cell event timing from the treatment grid.

    A switch into treatment is a cell with D=1 whose previous observed cell
    has D=0 (or that is the unit's first observed cell). Switches inferred
    across missing cells, and units first observed already in treatment
    mid-panel, are flagged as ambiguous; flagged units keep their event
    structure but are excluded from history-matching estimators.
    """
    n, t = ds.n_units, ds.n_periods
    d = ds.treatment
    event = np.full((n, t), np.nan)
    rel = np.full((n, t), np.nan)
    cohort = np.full(n, np.nan)
    reversal = np.zeros(n, dtype=bool)
    ambiguous = np.zeros(n, dtype=bool)
    always: list = []
    excluded: list = []
    ranks = np.arange(1, t + 1, dtype=float)

    if not np.isnan(d).any():
        # Fully observed treatment: vectorized path.
        prev = np.concatenate([np.zeros((n, 1)), d[:, :-1]], axis=1)
        switch_in = (d == 1) & (prev == 0)
        switch_out = (d == 0) & (prev == 1) & (np.arange(t) > 0)
        reversal = switch_out.any(axis=1)
        treated_up_to = np.maximum.accumulate(d, axis=1) > 0
        last_si = np.maximum.accumulate(np.where(switch_in, ranks, 0.0), axis=1)
        first_si = np.where(switch_in.any(axis=1), ranks[switch_in.argmax(axis=1)], NEVER)
        event = np.where(treated_up_to, last_si, first_si[:, None])
        ever = np.isfinite(event)
        rel = np.where(ever, ranks[None, :] - event + 1, np.nan)
        cohort = first_si
        always = [ds.unit_ids[i] for i in np.flatnonzero(d.all(axis=1))]
        return EventStructure(
            event_period=_frozen(event),
            relative_period=_frozen(rel),
            cohort_of=_frozen(cohort),
            has_reversal=reversal,
            always_treated=tuple(always),
            ambiguous_history=ambiguous,
            excluded_units=(),
        )

    for i in range(n):
        row = d[i]
        obs = np.flatnonzero(~np.isnan(row))
        if obs.size == 0:
            excluded.append(ds.unit_ids[i])
            continue
        switch_ins: list[int] = []
        prev_val = None
        prev_pos = None
        for j in obs:
            v = row[j]
            if v == 1 and (prev_val is None or prev_val == 0):
                switch_ins.append(j + 1)
                if prev_val is None and j > 0:
                    ambiguous[i] = True  # entered panel already treated
                elif prev_val == 0 and prev_pos is not None and j - prev_pos > 1:
                    ambiguous[i] = True  # switch hidden inside a gap
            if v == 0 and prev_val == 1:
                reversal[i] = True
                if prev_pos is not None and j - prev_pos > 1:
                    ambiguous[i] = True
            prev_val = v
            prev_pos = j
        if row[obs].min() == 1:
            always.append(ds.unit_ids[i])
        si = np.asarray(switch_ins, dtype=float)
        cohort[i] = si[0] if si.size else NEVER
        treated_before = False
        for j in obs:
            rank = j + 1
            if row[j] == 1:
                treated_before = True
            if si.size == 0:
                event[i, j] = NEVER
                continue
            if treated_before:
                event[i, j] = si[si <= rank].max()
            else:
                future = si[si > rank]
                event[i, j] = future.min() if future.size else si.min()
            rel[i, j] = rank - event[i, j] + 1
        rel[i, ~np.isfinite(event[i])] = np.nan
    if excluded:
        warnings.warn(
            f"units with no observed treatment excluded from event structure: {excluded}"
        )
    return EventStructure(
        event_period=_frozen(event),
        relative_period=_frozen(rel),
        cohort_of=_frozen(cohort),
        has_reversal=reversal,
        always_treated=tuple(always),
        ambiguous_history=ambiguous,
        excluded_units=tuple(excluded),
    )


def classify_setting(es: EventStructure) -> SettingClass:
    """Deterministic setting class from the event structure.

    Any unit switching out of treatment makes the panel GENERAL. Otherwise
    a single common adoption time yields CLASSIC_2X2 (two periods) or
    MULTI_PERIOD_BLOCK; multiple adoption times yield STAGGERED.
    """
    if es.has_reversal.any():
        return SettingClass.GENERAL
    n_periods = es.event_period.shape[1]
    adoption = es.cohort_of[np.isfinite(es.cohort_of)]
    distinct = set(adoption.astype(int))
    if len(distinct) == 1:
        return SettingClass.CLASSIC_2X2 if n_periods == 2 else SettingClass.MULTI_PERIOD_BLOCK
    return SettingClass.STAGGERED


def status_summary(ds: PanelDataset, es: EventStructure | None = None) -> dict:
    """Per-cell treatment-status codes plus per-period counts.

    Codes are ``"T"`` (treated), ``"C"`` (control), and ``"M"`` (missing
    treatment or outcome). Counts sum to the number of units per period.
    """
    if es is None:
        es = compute_event_structure(ds)
    miss = np.isnan(ds.treatment) | np.isnan(ds.outcome)
    codes = np.where(miss, "M", np.where(ds.treatment == 1, "T", "C"))
    counts = []
    for j, tid in enumerate(ds.time_ids):
        col = codes[:, j]
        counts.append(
            {
                "time": tid,
                "treated": int((col == "T").sum()),
                "control": int((col == "C").sum()),
                "missing": int((col == "M").sum()),
            }
        )
    return {
        "codes": codes,
        "counts": counts,
        "always_treated": list(es.always_treated),
        "ambiguous_history": [ds.unit_ids[i] for i in np.flatnonzero(es.ambiguous_history)],
        "setting": classify_setting(es).value,
    }


def drop_always_treated(ds: PanelDataset) -> tuple[PanelDataset, tuple]:
    """Remove units treated at every observed cell; returns (dataset, removed labels)."""
    obs = ~np.isnan(ds.treatment)
    has_obs = obs.any(axis=1)
    all_one = np.where(obs, ds.treatment == 1, True).all(axis=1) & has_obs
    if not all_one.any():
        return ds, ()
    keep = np.flatnonzero(~all_one)
    removed = tuple(ds.unit_ids[i] for i in np.flatnonzero(all_one))
    return subset_units(ds, keep), removed


def subset_units(ds: PanelDataset, unit_idx: np.ndarray, unit_ids=None, cluster_of=None) -> PanelDataset:
    """Row-gather a dataset; used for unit filtering and bootstrap resampling."""
    unit_idx = np.asarray(unit_idx)
    ids = tuple(unit_ids) if unit_ids is not None else tuple(ds.unit_ids[i] for i in unit_idx)
    clusters = tuple(cluster_of) if cluster_of is not None else tuple(ds.cluster_of[i] for i in unit_idx)
    return PanelDataset(
        unit_ids=ids,
        time_ids=ds.time_ids,
        outcome=_frozen(ds.outcome[unit_idx]),
        treatment=_frozen(ds.treatment[unit_idx]),
        covariates={k: _frozen(v[unit_idx]) for k, v in ds.covariates.items()},
        cluster_of=clusters,
        raw_treatment=None if ds.raw_treatment is None else _frozen(ds.raw_treatment[unit_idx]),
    )


def recode_carryover(ds: PanelDataset, k: int) -> PanelDataset:
    """Recode treatment to persist for ``k`` observed periods after each exit.

    Exits are detected on the original (pre-recode) treatment grid, which
    the result retains, so recoding the output again with the same ``k``
    reproduces it exactly.
    """
    if k < 0:
        raise ValueError("carryover persistence k must be nonnegative")
    if k == 0:
        return ds
    raw = ds.raw_treatment if ds.raw_treatment is not None else ds.treatment
    new = raw.copy()
    for i in range(ds.n_units):
        for j in _carryover_cells(raw[i], k):
            new[i, j] = 1.0
    return replace(ds, treatment=_frozen(new), raw_treatment=_frozen(raw))


def _carryover_cells(row: np.ndarray, k: int) -> list[int]:
    """Column indices covered by a persistence window of length ``k`` after
    each 1->0 switch among observed cells."""
    obs = np.flatnonzero(~np.isnan(row))
    out: list[int] = []
    for a, b in zip(obs[:-1], obs[1:]):
        if row[a] == 1 and row[b] == 0:
            window = obs[obs >= b][:k]
            out.extend(int(j) for j in window)
    return out


# ---------------------------------------------------------------------------
# Long-format CSV interface. Required headers: unit,time,outcome,treatment.
# Extra numeric columns are covariates; an optional `cluster` column labels
# clusters. Empty fields mean missing. See docs/schema.md.
# ---------------------------------------------------------------------------

def read_long_csv(path_or_buffer, columns: dict | None = None) -> PanelDataset:
    """Read a long-format CSV into a :class:`PanelDataset`.

    ``columns`` optionally maps the schema names (``unit``, ``time``,
    ``outcome``, ``treatment``, ``cluster``) to the file's actual headers.
    """
    if hasattr(path_or_buffer, "read"):
        text = path_or_buffer.read()
    else:
        with open(path_or_buffer, newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SchemaError("empty CSV")
    if columns:
        rename = {src: dst for dst, src in columns.items() if src and src != dst}
        clash = [s for s, d in rename.items() if d in reader.fieldnames]
        if clash:
            raise SchemaError(f"column mapping collides with existing columns: {clash}")
        reader.fieldnames = [rename.get(c, c) for c in reader.fieldnames]
    required = ["unit", "time", "outcome", "treatment"]
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise SchemaError(f"CSV is missing required columns: {missing}")
    rows = []
    for rec in reader:
        row: dict = {"unit": rec["unit"]}
        try:
            row["time"] = _parse_time(rec["time"])
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
        for col in reader.fieldnames:
            if col in ("unit", "time"):
                continue
            val = rec.get(col, "")
            if col == "cluster":
                row["cluster"] = val if val not in ("", None) else None
                continue
            if val in ("", None):
                row[col] = None
            else:
                try:
                    row[col] = float(val)
                except ValueError:
                    raise SchemaError(
                        f"non-numeric value {val!r} in column {col!r} (unit {rec['unit']!r}, "
                        f"time {rec['time']!r})"
                    ) from None
        rows.append(row)
    ds = build_dataset(rows)
    times = np.asarray([float(t) for t in ds.time_ids])
    gaps = np.diff(times)
    if gaps.size and not np.allclose(gaps, gaps[0]):
        warnings.warn(
            "time ids are unevenly spaced; calendar gaps are treated as adjacent ranks"
        )
    return ds


def _parse_time(raw: str):
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"time ids must be numeric; got {raw!r}")
    return int(v) if v == int(v) else v


def write_long_csv(ds: PanelDataset, path_or_buffer) -> None:
    """Write the dataset in the long CSV schema (empty field = missing)."""
    cov_names = list(ds.covariates)
    header = ["unit", "time", "outcome", "treatment", *cov_names, "cluster"]
    own = not hasattr(path_or_buffer, "write")
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for i, u in enumerate(ds.unit_ids):
            for j, t in enumerate(ds.time_ids):
                y, d = ds.outcome[i, j], ds.treatment[i, j]
                covs = [ds.covariates[k][i, j] for k in cov_names]
                if np.isnan(y) and np.isnan(d) and all(np.isnan(c) for c in covs):
                    continue
                w.writerow(
                    [u, t, _fmt(y), _fmt_treat(d), *[_fmt(c) for c in covs], ds.cluster_of[i]]
                )
    finally:
        if own:
            fh.close()


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _fmt_treat(x: float) -> str:
    return "" if np.isnan(x) else str(int(x))
