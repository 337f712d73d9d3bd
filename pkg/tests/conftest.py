import numpy as np
import pytest

from paneltrends.panel import build_dataset


def rows_from_grids(outcome, treatment, units=None, times=None, covariates=None, clusters=None):
    """Long-format rows from dense grids; None cells are omitted entirely."""
    outcome = np.asarray(outcome, dtype=float)
    treatment = np.asarray(treatment, dtype=float)
    n, t = outcome.shape
    units = units or [f"u{i+1:04d}" for i in range(n)]
    times = times or list(range(1, t + 1))
    rows = []
    for i in range(n):
        for j in range(t):
            y, d = outcome[i, j], treatment[i, j]
            if np.isnan(y) and np.isnan(d):
                continue
            row = {
                "unit": units[i],
                "time": times[j],
                "outcome": None if np.isnan(y) else float(y),
                "treatment": None if np.isnan(d) else float(d),
            }
            if covariates:
                for name, grid in covariates.items():
                    v = np.asarray(grid, dtype=float)[i, j]
                    row[name] = None if np.isnan(v) else float(v)
            if clusters:
                row["cluster"] = clusters[i]
            rows.append(row)
    return rows


def panel_from_grids(outcome, treatment, **kw):
    return build_dataset(rows_from_grids(outcome, treatment, **kw))


def additive_panel(rng, n, t, treatment, effect=0.0, noise_sd=0.0):
    """Panel generated exactly from the two-way additive model."""
    treatment = np.asarray(treatment, dtype=float)
    alpha = rng.normal(size=n)
    xi = rng.normal(size=t)
    y0 = alpha[:, None] + xi[None, :]
    if noise_sd:
        y0 = y0 + rng.normal(0, noise_sd, size=(n, t))
    eff = np.broadcast_to(np.asarray(effect, dtype=float), (n, t))
    y = y0 + eff * treatment
    return panel_from_grids(y, treatment), y0


@pytest.fixture
def rng():
    return np.random.default_rng(20240202)
