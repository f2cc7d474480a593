"""Synthetic data from structural equation models on a known DAG.

Every family samples nodes in topological order. With ``A[j, k]`` the
weight of edge k -> j and ``z`` the node's noise column:

=====================  ==================================================
``linear``             x_j = sum_k A[j, k] x_k + z_j
``non-linear-1``       x_j = sum_k A[j, k] cos(x_k + 1) + z_j
``non-linear-2``       u_j = sum_k A[j, k] (x_k + 0.5); x_j = 2 sin(u_j) + u_j + z_j
``post-non-linear-1``  x_j = sinh(sum_k A[j, k] cos(x_k + 1) + z_j)
``post-non-linear-2``  x_j = tanh(2 sin(u_j) + u_j + z_j)
=====================  ==================================================
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigError
from .graph import BinaryDag

MAX_RETRIES = 100


class SemFamily(str, enum.Enum):
    LINEAR = "linear"
    NONLINEAR1 = "non-linear-1"
    NONLINEAR2 = "non-linear-2"
    POSTNONLINEAR1 = "post-non-linear-1"
    POSTNONLINEAR2 = "post-non-linear-2"

    @property
    def is_post_nonlinear(self):
        return self in (SemFamily.POSTNONLINEAR1, SemFamily.POSTNONLINEAR2)


class GenerationError(RuntimeError):
    """Sampling kept producing non-finite values."""


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError(f"noise scale must be positive, got {self.scale}")


def default_noise(assumption):
    """Uniform noise for the non-Gaussian (LiNGAM) setting, Gaussian otherwise."""
    kind = "uniform" if str(assumption).lower() == "lingam" else "gaussian"
    return NoiseSpec(kind, 1.0)


def sample_noise(spec, shape, rng):
    """Zero-mean noise with standard deviation ``spec.scale``."""
    if spec.kind == "gaussian":
        return rng.normal(0.0, spec.scale, size=shape)
    half = spec.scale * np.sqrt(3.0)
    return rng.uniform(-half, half, size=shape)


@dataclass
class Dataset:
    values: np.ndarray
    columns: list

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {values.shape}")
        return cls(values, [f"x{i + 1}" for i in range(values.shape[1])])

    def standardized(self):
        mu = self.values.mean(axis=0)
        sd = self.values.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return Dataset((self.values - mu) / sd, list(self.columns))


def _node_values(family, w_row, parents, x, z):
    if family in (SemFamily.LINEAR,):
        return x[:, parents] @ w_row[parents] + z
    if family in (SemFamily.NONLINEAR1, SemFamily.POSTNONLINEAR1):
        pre = np.cos(x[:, parents] + 1.0) @ w_row[parents] + z
        return np.sinh(pre) if family is SemFamily.POSTNONLINEAR1 else pre
    u = (x[:, parents] + 0.5) @ w_row[parents]
    pre = 2.0 * np.sin(u) + u + z
    return np.tanh(pre) if family is SemFamily.POSTNONLINEAR2 else pre


def _simulate(weights, family, order, z):
    x = np.zeros_like(z)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in order:
            parents = np.flatnonzero(weights[j])
            x[:, j] = _node_values(family, weights[j], parents, x, z[:, j])
    return x


def generate(weights, family, noise, n, rng, standardize=False):
    """Draw ``n`` samples from the SEM with weighted adjacency ``weights``.

    The full (n, d) noise matrix is drawn first, so replaying ``rng`` through
    :func:`sample_noise` reproduces it. Rows that overflow (possible for the
    ``sinh`` family) are redrawn with fresh noise, up to ``MAX_RETRIES``
    times.
    """
    family = SemFamily(family)
    weights = np.asarray(weights, dtype=np.float64)
    d = weights.shape[0]
    if n < 0:
        raise ConfigError(f"n must be non-negative, got {n}")
    order = BinaryDag.from_matrix(weights).topological_order()
    if order is None:
        raise ConfigError("weighted adjacency is not acyclic")
    z = sample_noise(noise, (n, d), rng)
    x = _simulate(weights, family, order, z)
    for _ in range(MAX_RETRIES):
        bad = ~np.isfinite(x).all(axis=1)
        if not bad.any():
            break
        z_new = sample_noise(noise, (int(bad.sum()), d), rng)
        x[bad] = _simulate(weights, family, order, z_new)
    else:
        if not np.isfinite(x).all():
            raise GenerationError(f"non-finite samples after {MAX_RETRIES} retries")
    data = Dataset.from_array(x)
    return data.standardized() if standardize else data


def write_csv(data, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(data.columns)
        for row in data.values:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    """Read a numeric CSV with a header row; errors name the offending cell."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    values = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        parsed = []
        for c, cell in enumerate(row):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric value {cell!r} at row {r}, column {c + 1} ({header[c]})"
                ) from None
        values.append(parsed)
    arr = np.array(values, dtype=np.float64).reshape(len(values), len(header))
    return Dataset(arr, header)
