"""Cluster bootstrap engine: percentile intervals, joint covariance, Wald tests.

Replicates resample whole clusters with replacement; resampled copies get
fresh unit and cluster identities. Each replicate draws from its own
generator seeded by (master seed, replicate index), so the draw matrix is
bit-reproducible for any execution order or worker count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import BootstrapFailureError, EstimatorError
from .panel import PanelDataset, subset_units

__all__ = [
    "BootstrapDraws",
    "cluster_bootstrap",
    "percentile_ci",
    "bootstrap_vcov",
    "wald_joint_test",
]

MAX_FAILURE_SHARE = 0.2
LARGE_CLUSTER_COUNT = 50

def cluster_count_guidance(n_clusters: int) -> str:
    """Advice on the variance estimator given the cluster count."""
    if n_clusters > LARGE_CLUSTER_COUNT:
        return (
            f"{n_clusters} clusters: analytic cluster-robust standard errors are "
            "adequate when the number of clusters is large (e.g., exceeds 50); "
            "bootstrap intervals are reported for comparability"
        )
    return (
        f"{n_clusters} clusters: with few clusters, prefer cluster-bootstrap "
        "intervals over analytic cluster-robust standard errors"
    )


@dataclass
class BootstrapDraws:
    """Replicate-by-statistic draw matrix with failure bookkeeping.

    Failed replicates (the estimator raised) hold all-NaN rows and are
    listed in ``failures``. A successful replicate may still hold NaN for
    individual statistics the resample could not support (for example an
    event-study bin with no cells); those are handled per column.
    """

    matrix: np.ndarray  # (B, S)
    names: tuple[str, ...]
    master_seed: int
    n_replicates: int
    failures: list[tuple[int, str]]  # (replicate index, reason)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def successful(self, columns: np.ndarray | list | None = None) -> np.ndarray:
        """Rows of non-failed replicates, complete on the chosen columns."""
        failed = np.zeros(self.matrix.shape[0], dtype=bool)
        for r, _ in self.failures:
            failed[r] = True
        mat = self.matrix[~failed]
        if columns is not None:
            mat = mat[:, np.asarray(columns)]
        return mat[~np.isnan(mat).any(axis=1)]


def cluster_bootstrap(
    ds: PanelDataset,
    estimator,
    n_replicates: int,
    master_seed: int,
    *,
    names: tuple[str, ...] | None = None,
    workers: int = 1,
) -> BootstrapDraws:
    """Resample clusters with replacement and re-run ``estimator``.

    ``estimator`` maps a dataset to a 1-D statistic vector. Replicates
    where it raises are recorded as failed rather than silently dropped;
    more than 20% failures is a hard error suggesting the design cannot
    support resampling.
    """
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    labels = np.asarray(ds.cluster_of, dtype=object)
    cluster_ids = sorted(set(labels), key=str)
    if len(cluster_ids) < 2:
        raise EstimatorError("cluster bootstrap needs at least 2 clusters")
    members = {c: np.flatnonzero(labels == c) for c in cluster_ids}
    g = len(cluster_ids)

    point = np.asarray(estimator(ds), dtype=float).ravel()
    n_stats = point.size
    if names is None:
        names = tuple(f"stat{i}" for i in range(n_stats))
    if len(names) != n_stats:
        raise ValueError("names length does not match the statistic vector")

    matrix = np.full((n_replicates, n_stats), np.nan)
    failures: list[tuple[int, str]] = []

    def run_one(r: int):
        rng = np.random.default_rng([master_seed, r])
        draw = rng.integers(0, g, size=g)
        rows = []
        new_units = []
        new_clusters = []
        for copy, ci in enumerate(draw):
            cluster = cluster_ids[ci]
            for u in members[cluster]:
                rows.append(u)
                new_units.append(f"{ds.unit_ids[u]}~{copy}")
                new_clusters.append(copy)
        resampled = subset_units(ds, np.asarray(rows), unit_ids=new_units, cluster_of=new_clusters)
        return np.asarray(estimator(resampled), dtype=float).ravel()

    def record(r: int):
        try:
            vec = run_one(r)
            if vec.size != n_stats:
                raise ValueError(f"estimator returned {vec.size} statistics, expected {n_stats}")
            matrix[r] = vec
        except Exception as exc:  # noqa: BLE001 - failures are data, not bugs
            failures.append((r, f"{type(exc).__name__}: {exc}"))

    # the point run above already surfaced any estimator warnings; repeating
    # them for every resample would only drown the log
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(record, range(n_replicates)))
        else:
            for r in range(n_replicates):
                record(r)
    failures.sort(key=lambda f: f[0])

    if len(failures) > MAX_FAILURE_SHARE * n_replicates:
        raise BootstrapFailureError(
            f"{len(failures)} of {n_replicates} bootstrap replicates failed "
            f"(> {MAX_FAILURE_SHARE:.0%}); the design is too fragile for cluster "
            f"resampling - reconsider the sample or the estimator. "
            f"First failure: {failures[0][1]}"
        )
    return BootstrapDraws(
        matrix=matrix,
        names=names,
        master_seed=master_seed,
        n_replicates=n_replicates,
        failures=failures,
    )


def percentile_ci(draws: BootstrapDraws | np.ndarray, level: float = 0.95) -> np.ndarray:
    """Percentile interval per statistic at the given confidence level.

    Quantiles use type-7 linear interpolation (the fixed rule for golden
    tests) over each statistic's finite draws; a statistic with fewer than
    2 finite draws gets NaN bounds. Returns an (S, 2) array of [low, high].
    """
    if isinstance(draws, BootstrapDraws):
        failed = np.zeros(draws.matrix.shape[0], dtype=bool)
        for r, _ in draws.failures:
            failed[r] = True
        mat = draws.matrix[~failed]
    else:
        mat = np.atleast_2d(np.asarray(draws, dtype=float).T).T
    if mat.shape[0] < 2:
        raise EstimatorError("need at least 2 successful replicates for an interval")
    if not 0.0 <= level < 1.0:
        raise ValueError("level must be in [0, 1)")
    lo = (1.0 - level) / 2.0
    hi = 1.0 - lo
    out = np.full((mat.shape[1], 2), np.nan)
    for j in range(mat.shape[1]):
        col = mat[:, j]
        col = col[np.isfinite(col)]
        if col.size >= 2:
            out[j] = np.quantile(col, [lo, hi], method="linear")
    return out


def bootstrap_vcov(draws: BootstrapDraws, columns: np.ndarray | list | None = None) -> np.ndarray:
    """Empirical covariance of the draw matrix across statistics.

    ``columns`` restricts to a statistic subset; replicates with a NaN in
    the subset are excluded from the covariance only.
    """
    mat = draws.successful(columns)
    if mat.shape[0] < 2:
        raise EstimatorError("need at least 2 successful replicates for a covariance")
    centered = mat - mat.mean(axis=0)
    return centered.T @ centered / (mat.shape[0] - 1)


def wald_joint_test(estimates: np.ndarray, vcov: np.ndarray, *, rank_rtol: float = 1e-8) -> dict:
    """Wald test of the joint null that all estimates are zero.

    Uses the pseudo-inverse on the tested subspace when the covariance is
    singular and reports the rank actually used as the degrees of freedom.
    """
    est = np.asarray(estimates, dtype=float).ravel()
    v = np.atleast_2d(np.asarray(vcov, dtype=float))
    if v.shape != (est.size, est.size):
        raise ValueError(f"vcov shape {v.shape} does not match {est.size} estimates")
    sv = np.linalg.svd(v, compute_uv=False)
    rank = int((sv > rank_rtol * sv.max()).sum()) if sv.size and sv.max() > 0 else 0
    if rank == 0:
        raise EstimatorError("covariance matrix has rank zero; no test possible")
    vinv = np.linalg.pinv(v, rcond=rank_rtol)
    statistic = float(est @ vinv @ est)
    p = float(stats.chi2.sf(statistic, df=rank))
    return {"statistic": statistic, "df": rank, "p": p}
