"""Synthetic panel generator with known ground truth.

Covers block adoption, staggered adoption (fixed cohorts or an adoption
hazard), and treatment reversal via a two-state Markov chain. Violations
are injected explicitly: differential pretrends, anticipation, carryover,
and completely-at-random missing outcomes. Both potential-outcome grids
are retained so estimator output can be checked against exact truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .panel import PanelDataset, _carryover_cells, _frozen

__all__ = [
    "DgpSpec",
    "SyntheticPanel",
    "simulate_panel",
    "true_estimands",
    "adversarial_negative_weighting",
]


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of a synthetic panel.

    ``assignment`` is one of ``"block"`` (common adoption at
    ``block_start``), ``"staggered"`` (fixed ``cohort_periods`` cycled over
    treated units, or a per-period ``adoption_hazard`` when none are
    given), or ``"reversal"`` (two-state Markov chain with
    ``switch_in_prob`` / ``switch_out_prob``).

    ``effect`` selects the treated-cell effect as a function of the
    relative period l (l=1 at adoption) and the adoption cohort:
    ``"constant"`` gives ``effect_base``; ``"ramp"`` gives
    ``effect_base + effect_slope * (l - 1)``; ``"cohort"`` adds
    ``effect_cohort_gap`` per adoption-cohort order.

    ``pretrend_slope`` tilts ever-treated units' untreated outcomes by that
    amount per period; if ``pretrend_window`` is set the drift instead
    starts that many periods before adoption. Anticipation adds
    ``anticipation_magnitude`` to untreated outcomes within
    ``anticipation_window`` periods before adoption; carryover adds
    ``carryover_magnitude`` for ``carryover_window`` observed periods after
    each exit. ``missing_rate`` blanks outcomes completely at random.
    """

    n_units: int = 50
    n_periods: int = 10
    assignment: str = "staggered"
    block_start: int = 5
    cohort_periods: tuple = ()
    adoption_hazard: float = 0.15
    switch_in_prob: float = 0.15
    switch_out_prob: float = 0.15
    never_treated_share: float = 0.3
    effect: str = "constant"
    effect_base: float = 1.0
    effect_slope: float = 0.0
    effect_cohort_gap: float = 0.0
    unit_fe_sd: float = 1.0
    time_fe_sd: float = 1.0
    noise_sd: float = 0.0
    pretrend_slope: float = 0.0
    pretrend_window: int | None = None
    anticipation_window: int = 0
    anticipation_magnitude: float = 0.0
    carryover_window: int = 0
    carryover_magnitude: float = 0.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.assignment not in ("block", "staggered", "reversal"):
            raise ValueError(f"unknown assignment {self.assignment!r}")
        if self.effect not in ("constant", "ramp", "cohort"):
            raise ValueError(f"unknown effect form {self.effect!r}")
        for name in ("adoption_hazard", "switch_in_prob", "switch_out_prob",
                     "never_treated_share", "missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("anticipation_window", "carryover_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class SyntheticPanel:
    """A generated panel together with its ground truth."""

    dataset: PanelDataset
    outcome_untreated: np.ndarray  # Y(0) grid, fully observed
    outcome_treated: np.ndarray  # Y(1) grid, fully observed
    effect_grid: np.ndarray  # Y(1) - Y(0) per cell
    relative_period: np.ndarray  # relative period per cell (NaN for never-treated)
    cohort_of: np.ndarray  # adoption rank per unit, inf for never
    spec: DgpSpec

    @property
    def true_att(self) -> float:
        treated = self.dataset.treatment == 1
        return float(self.effect_grid[treated].mean())

    def true_dynamic(self) -> dict[int, float]:
        treated = self.dataset.treatment == 1
        out: dict[int, float] = {}
        rel = self.relative_period
        for l in sorted(set(rel[treated & np.isfinite(rel)].astype(int))):
            sel = treated & (rel == l)
            out[int(l)] = float(self.effect_grid[sel].mean())
        return out

    def true_group_time(self) -> dict[tuple[int, int], float]:
        treated = self.dataset.treatment == 1
        out: dict[tuple[int, int], float] = {}
        rel = self.relative_period
        for i in range(self.dataset.n_units):
            g = self.cohort_of[i]
            if not math.isfinite(g):
                continue
            for j in np.flatnonzero(treated[i]):
                key = (int(g), int(rel[i, j]))
                out.setdefault(key, []).append(self.effect_grid[i, j])
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def simulate_panel(spec: DgpSpec, seed: int | None = None) -> SyntheticPanel:
    """Generate a reproducible panel from ``spec``.

    ``seed`` overrides ``spec.seed`` when given. Raises if the realized
    assignment has no treated or no control cells.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n, t = spec.n_units, spec.n_periods
    d = _assign_treatment(spec, rng)
    if not (d == 1).any() or not (d == 0).any():
        raise SchemaError("degenerate design: treatment has no variation")

    event, rel, cohort = _event_grids(d)
    alpha = rng.normal(0.0, spec.unit_fe_sd, size=n)
    xi = rng.normal(0.0, spec.time_fe_sd, size=t)
    eps = rng.normal(0.0, spec.noise_sd, size=(n, t)) if spec.noise_sd > 0 else np.zeros((n, t))
    y0 = alpha[:, None] + xi[None, :] + eps

    ever = np.isfinite(cohort)
    if spec.pretrend_slope != 0.0:
        if spec.pretrend_window is None:
            y0[ever] += spec.pretrend_slope * np.arange(t, dtype=float)[None, :]
        else:
            ramp = np.maximum(0.0, np.nan_to_num(rel, nan=-np.inf) + spec.pretrend_window)
            y0 += np.where(np.isfinite(rel), spec.pretrend_slope * ramp, 0.0)
    if spec.anticipation_window > 0 and spec.anticipation_magnitude != 0.0:
        window = np.isfinite(rel) & (rel <= 0) & (rel > -spec.anticipation_window)
        y0[window] += spec.anticipation_magnitude
    if spec.carryover_window > 0 and spec.carryover_magnitude != 0.0:
        for i in range(n):
            for j in _carryover_cells(d[i], spec.carryover_window):
                if d[i, j] == 0:
                    y0[i, j] += spec.carryover_magnitude

    tau = _effect_grid(spec, rel, cohort)
    y1 = y0 + tau
    y = np.where(d == 1, y1, y0)

    y_obs = y.copy()
    if spec.missing_rate > 0:
        y_obs[rng.random((n, t)) < spec.missing_rate] = np.nan

    width = len(str(n))
    ds = PanelDataset(
        unit_ids=tuple(f"u{i + 1:0{width}d}" for i in range(n)),
        time_ids=tuple(range(1, t + 1)),
        outcome=_frozen(y_obs),
        treatment=_frozen(d.astype(float)),
    )
    return SyntheticPanel(
        dataset=ds,
        outcome_untreated=_frozen(y0),
        outcome_treated=_frozen(y1),
        effect_grid=_frozen(tau),
        relative_period=_frozen(rel),
        cohort_of=_frozen(cohort),
        spec=spec,
    )


def _assign_treatment(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    n, t = spec.n_units, spec.n_periods
    n_never = int(round(spec.never_treated_share * n))
    eligible = np.zeros(n, dtype=bool)
    eligible[rng.permutation(n)[: n - n_never]] = True
    d = np.zeros((n, t))

    if spec.assignment == "block":
        if not 1 <= spec.block_start <= t:
            raise ValueError("block_start outside the panel")
        d[eligible, spec.block_start - 1:] = 1.0
        return d

    if spec.assignment == "staggered":
        idx = np.flatnonzero(eligible)
        if spec.cohort_periods:
            for pos, i in enumerate(idx):
                g = spec.cohort_periods[pos % len(spec.cohort_periods)]
                d[i, g - 1:] = 1.0
        else:
            for i in idx:
                draws = rng.random(t - 1)
                hit = np.flatnonzero(draws < spec.adoption_hazard)
                if hit.size:  # earliest adoption is period 2
                    d[i, hit[0] + 1:] = 1.0
        return d

    # reversal: two-state chain starting under control
    for i in np.flatnonzero(eligible):
        state = 0.0
        for j in range(t):
            p = spec.switch_in_prob if state == 0 else 1 - spec.switch_out_prob
            state = 1.0 if rng.random() < p else 0.0
            d[i, j] = state
    return d


def _event_grids(d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Event period, relative period, and adoption cohort for a fully
    observed treatment grid (shared convention with the panel module)."""
    n, t = d.shape
    ranks = np.arange(1, t + 1, dtype=float)
    prev = np.concatenate([np.zeros((n, 1)), d[:, :-1]], axis=1)
    switch_in = (d == 1) & (prev == 0)
    treated_up_to = np.maximum.accumulate(d, axis=1) > 0
    last_si = np.maximum.accumulate(np.where(switch_in, ranks, 0.0), axis=1)
    any_si = switch_in.any(axis=1)
    first_si = np.where(any_si, ranks[switch_in.argmax(axis=1)], np.inf)
    event = np.where(treated_up_to, last_si, first_si[:, None])
    rel = np.where(np.isfinite(event), ranks[None, :] - event + 1, np.nan)
    return event, rel, first_si


def _effect_grid(spec: DgpSpec, rel: np.ndarray, cohort: np.ndarray) -> np.ndarray:
    # Effects are defined per cell from the relative period, floored at 1
    # so that Y(1) exists everywhere; only treated cells enter estimands.
    l = np.where(np.isfinite(rel), np.maximum(rel, 1.0), 1.0)
    tau = np.full(rel.shape, spec.effect_base)
    if spec.effect == "ramp":
        tau = spec.effect_base + spec.effect_slope * (l - 1.0)
    elif spec.effect == "cohort":
        finite = np.isfinite(cohort)
        order = {g: k for k, g in enumerate(sorted(set(cohort[finite])))}
        shift = np.array([order.get(g, 0) for g in cohort], dtype=float)
        tau = spec.effect_base + spec.effect_cohort_gap * np.broadcast_to(shift[:, None], rel.shape).copy()
    return tau


def true_estimands(sp: SyntheticPanel) -> dict:
    """Ground-truth ATT, dynamic effects, and cohort-by-period effects."""
    return {
        "att": sp.true_att,
        "dynamic": sp.true_dynamic(),
        "group_time": sp.true_group_time(),
    }


# Frozen adversarial design: two cohorts whose common effect grows steeply
# with time since adoption. Comparisons that use the long-exposed early
# cohort as a control for the late cohort are contaminated by that growth,
# driving the static two-way fixed-effects coefficient negative even though
# every cell-level effect is at least 1.
_ADVERSARIAL = DgpSpec(
    n_units=30,
    n_periods=12,
    assignment="staggered",
    cohort_periods=(2, 11),
    never_treated_share=2 / 30,
    effect="ramp",
    effect_base=1.0,
    effect_slope=3.0,
    unit_fe_sd=1.0,
    time_fe_sd=1.0,
    noise_sd=0.0,
    seed=20240117,
)


def adversarial_negative_weighting() -> SyntheticPanel:
    """The frozen staggered panel on which static TWFE flips sign.

    Every true cell effect is >= 1 while the two-way fixed-effects
    coefficient is negative; both facts are re-verified at construction.
    """
    sp = simulate_panel(_ADVERSARIAL)
    treated = sp.dataset.treatment == 1
    if sp.effect_grid[treated].min() < 1.0:
        raise AssertionError("adversarial fixture lost its minimum-effect guarantee")
    from .fe import twfe_att

    if twfe_att(sp.dataset).estimate >= 0.0:
        raise AssertionError("adversarial fixture no longer flips the TWFE sign")
    return sp
