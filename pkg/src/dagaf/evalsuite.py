"""Quality checks for synthetic tables against real data."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .losses import median_bandwidth, mmd_numeric

QUANTILES = (1, 5, 25, 50, 75, 95, 99)


def correlation_matrix(x):
    """Pearson correlation; constant columns get zero off-diagonal entries.

    Returns ``(corr, constant_columns)``.
    """
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    sd = np.sqrt((centred ** 2).sum(axis=0))
    constant = sd == 0
    safe = np.where(constant, 1.0, sd)
    z = centred / safe
    corr = z.T @ z
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0), np.flatnonzero(constant).tolist()


@dataclass
class PcaFit:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows are unit-norm loadings
    explained_variance: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit(real, k=2):
    """Principal axes of ``real``; each axis's largest-magnitude loading is positive."""
    real = np.asarray(real, dtype=np.float64)
    mean = real.mean(axis=0)
    _, s, vt = np.linalg.svd(real - mean, full_matrices=False)
    k = min(k, vt.shape[0])
    comps = vt[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s[:k] ** 2 / max(real.shape[0] - 1, 1)
    return PcaFit(mean, comps, var)


def pca_project(x, components=2):
    """Scores of ``x`` on its own top principal axes, shape (n, components)."""
    return pca_fit(x, components).transform(x)


def _rank_with_ties(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    tie_term = 0.0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    return ranks, tie_term


@dataclass(frozen=True)
class MannWhitney:
    u: float
    z: float
    p: float


def mann_whitney_u(a, b):
    """Two-sided rank-sum test via the normal approximation.

    Uses average ranks for ties, the tie-corrected variance and a 0.5
    continuity correction. ``u`` is the statistic of sample ``a``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks, tie_term = _rank_with_ties(np.concatenate([a, b]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return MannWhitney(float(u), 0.0, 1.0)
    dev = max(abs(u - mu) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    p = min(1.0, 2.0 * float(ndtr(-z)))
    return MannWhitney(float(u), math.copysign(z, u - mu), p)


def quantile_table(real, synth, columns=None):
    """Rows ``(column, q, real_value, synth_value)`` for each quantile in QUANTILES."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    columns = columns or [f"x{i + 1}" for i in range(real.shape[1])]
    rq = np.percentile(real, QUANTILES, axis=0)
    sq = np.percentile(synth, QUANTILES, axis=0) if len(synth) else np.full_like(rq, np.nan)
    rows = []
    for j, name in enumerate(columns):
        for qi, q in enumerate(QUANTILES):
            rows.append((name, q, float(rq[qi, j]), float(sq[qi, j])))
    return rows


def histogram_table(real, synth, columns=None, bins=20):
    """Rows ``(column, bin_left, bin_right, real_count, synth_count)`` on shared bins."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    columns = columns or [f"x{i + 1}" for i in range(real.shape[1])]
    rows = []
    for j, name in enumerate(columns):
        both = np.concatenate([real[:, j], synth[:, j]])
        edges = np.histogram_bin_edges(both, bins=bins)
        rc, _ = np.histogram(real[:, j], edges)
        sc, _ = np.histogram(synth[:, j], edges)
        for k in range(bins):
            rows.append((name, float(edges[k]), float(edges[k + 1]), int(rc[k]), int(sc[k])))
    return rows


@dataclass
class QualityReport:
    columns: list
    corr_real: np.ndarray
    corr_synth: np.ndarray
    corr_frobenius_diff: float
    mmd_stat: float
    mmd_bandwidth: float
    pca_real_2d: np.ndarray
    pca_synth_2d: np.ndarray
    mann_whitney_p: list
    mann_whitney_u: list = field(default_factory=list)
    constant_columns: dict = field(default_factory=dict)

    def as_dict(self):
        """JSON-ready summary; the PCA projections go to CSV instead."""
        return {
            "schema": "dagaf-report/1",
            "kind": "quality",
            "columns": list(self.columns),
            "n_real": int(self.pca_real_2d.shape[0]),
            "n_synth": int(self.pca_synth_2d.shape[0]),
            "corr_real": self.corr_real.tolist(),
            "corr_synth": self.corr_synth.tolist(),
            "corr_frobenius_diff": self.corr_frobenius_diff,
            "mmd_stat": self.mmd_stat,
            "mmd_bandwidth": self.mmd_bandwidth,
            "mann_whitney_p": list(self.mann_whitney_p),
            "mann_whitney_u": list(self.mann_whitney_u),
            "constant_columns": self.constant_columns,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def quality_report(real, synth, columns=None, bandwidth="median", max_mmd_rows=5000):
    """Compare a synthetic table with real data.

    The MMD statistic is the unbiased estimator on the first
    ``min(n_real, n_synth, max_mmd_rows)`` rows of each table, with the
    kernel bandwidth from the median heuristic on the real rows unless a
    number is given.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim != 2 or synth.ndim != 2 or real.shape[1] != synth.shape[1]:
        raise ValueError(f"tables must be 2-D with equal widths, got {real.shape} and {synth.shape}")
    columns = columns or [f"x{i + 1}" for i in range(real.shape[1])]
    cr, const_r = correlation_matrix(real)
    cs, const_s = correlation_matrix(synth)
    m = min(len(real), len(synth), max_mmd_rows)
    bw = median_bandwidth(real[:m]) if bandwidth == "median" else float(bandwidth)
    mmd = mmd_numeric(real[:m], synth[:m], bw, unbiased=True) if m >= 2 else float("nan")
    tests = [mann_whitney_u(real[:, j], synth[:, j]) for j in range(real.shape[1])]
    # shared basis: fitted on the real table only
    fit = pca_fit(real, 2)
    return QualityReport(
        columns=list(columns), corr_real=cr, corr_synth=cs,
        corr_frobenius_diff=float(np.linalg.norm(cr - cs)),
        mmd_stat=float(mmd), mmd_bandwidth=bw,
        pca_real_2d=fit.transform(real), pca_synth_2d=fit.transform(synth),
        mann_whitney_p=[t.p for t in tests], mann_whitney_u=[t.u for t in tests],
        constant_columns={"real": const_r, "synth": const_s},
    )


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
