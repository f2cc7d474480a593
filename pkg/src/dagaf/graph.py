"""Adjacency extraction, the acyclicity function, DAG sampling and SHD.

Convention: in a weighted adjacency ``A``, ``A[j, k]`` is the influence of
variable ``k`` on variable ``j`` (rows are children). A :class:`BinaryDag`
stores directed edges as ``(parent, child)`` pairs.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diffcore
from .diffcore import ConfigError, expm


@dataclass(frozen=True)
class BinaryDag:
    d: int
    edges: frozenset

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset((int(p), int(c)) for p, c in self.edges))
        for p, c in self.edges:
            if not (0 <= p < self.d and 0 <= c < self.d):
                raise ValueError(f"edge ({p}, {c}) out of range for d={self.d}")

    @classmethod
    def from_matrix(cls, m):
        """Build from a 0/1 (or weighted) matrix with ``m[child, parent] != 0``."""
        m = np.asarray(m)
        children, parents = np.nonzero(m)
        return cls(m.shape[0], frozenset(zip(parents.tolist(), children.tolist())))

    def to_matrix(self):
        """0/1 matrix with ``out[child, parent] = 1``."""
        out = np.zeros((self.d, self.d))
        for p, c in self.edges:
            out[c, p] = 1.0
        return out

    def parents(self, j):
        return sorted(p for p, c in self.edges if c == j)

    def topological_order(self):
        """Kahn's algorithm; returns ``None`` if the graph has a cycle."""
        indeg = [0] * self.d
        children = [[] for _ in range(self.d)]
        for p, c in self.edges:
            indeg[c] += 1
            children[p].append(c)
        queue = deque(sorted(i for i in range(self.d) if indeg[i] == 0))
        order = []
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in sorted(children[u]):
                indeg[v] -= 1
                if indeg[v] == 0:
                    queue.append(v)
        return order if len(order) == self.d else None

    def is_acyclic(self):
        return self.topological_order() is not None

    def levels(self):
        """Group nodes by longest-path depth from the roots (``None`` if cyclic)."""
        order = self.topological_order()
        if order is None:
            return None
        depth = [0] * self.d
        for u in order:
            for p in self.parents(u):
                depth[u] = max(depth[u], depth[p] + 1)
        groups = {}
        for node, lvl in enumerate(depth):
            groups.setdefault(lvl, []).append(node)
        return [groups[k] for k in sorted(groups)]

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True)
class StructMetrics:
    shd: int
    tpr: float
    fdr: float
    fpr: float
    n_pred: int
    n_true: int

    def as_dict(self):
        return {
            "shd": self.shd, "tpr": self.tpr, "fdr": self.fdr, "fpr": self.fpr,
            "n_pred": self.n_pred, "n_true": self.n_true,
        }


def acyclicity_h(a):
    """h(A) = tr(exp(A * A)) - d; zero iff the weighted graph is acyclic."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"acyclicity_h needs a square matrix, got shape {a.shape}")
    return float(np.trace(expm(a * a)) - a.shape[0])


def trace_expm_minus_d(s):
    """Tape primitive: tr(exp(S)) - d for a (squared) adjacency var ``S``."""

    def fwd(x):
        return np.trace(expm(x)) - x.shape[0]

    def back(g, out, x):
        return (g * expm(x).T,)

    return s.tape.record("trace_expm", (s,), fwd, back)


def acyclicity_h_var(a):
    """:func:`acyclicity_h` on a tape var; gradient exp(A*A)^T * 2A."""
    return trace_expm_minus_d(diffcore.square(a))


def extract_adjacency(model):
    """A[j, k] = L2 norm of node j's first-layer weights reading input k."""
    w = model.l0_weights()
    a = np.sqrt(np.sum(w * w, axis=1))
    np.fill_diagonal(a, 0.0)
    return a


def threshold(a, tau):
    """Binary graph with edge k -> j wherever |A[j, k]| > tau (diagonal ignored)."""
    if tau < 0:
        raise ConfigError(f"threshold must be non-negative, got {tau}")
    a = np.abs(np.asarray(a, dtype=np.float64)).copy()
    np.fill_diagonal(a, 0.0)
    return BinaryDag.from_matrix(a > tau)


def _pair_state(edges, a, b):
    return ((a, b) in edges, (b, a) in edges)


def shd(pred, truth):
    """Structural Hamming distance plus TPR/FDR/FPR on directed edges.

    Edits are edge insertion, deletion and reversal, each costing 1. Per
    unordered node pair the cost is 0 if the pair states agree, 2 if one
    graph has both directions and the other neither, and 1 otherwise.
    """
    if pred.d != truth.d:
        raise ValueError(f"dimension mismatch: pred d={pred.d}, truth d={truth.d}")
    d = pred.d
    dist = 0
    for a in range(d):
        for b in range(a + 1, d):
            sp = _pair_state(pred.edges, a, b)
            st = _pair_state(truth.edges, a, b)
            if sp == st:
                continue
            if {sum(sp), sum(st)} == {0, 2}:
                dist += 2
            else:
                dist += 1
    tp = len(pred.edges & truth.edges)
    fp = len(pred.edges) - tp
    n_true = len(truth.edges)
    negatives = d * (d - 1) - n_true
    tpr = tp / n_true if n_true else 1.0
    fdr = fp / len(pred.edges) if pred.edges else 0.0
    fpr = fp / negatives if negatives else 0.0
    return StructMetrics(dist, tpr, fdr, fpr, len(pred.edges), n_true)


def sample_er_dag(d, expected_degree, rng, w_range=(0.5, 2.0)):
    """Erdos-Renyi DAG with random topological order and uniform +/- weights.

    Returns ``(dag, weights)`` where ``weights[child, parent]`` is the signed
    edge weight.
    """
    if d < 2:
        raise ConfigError(f"need d >= 2, got {d}")
    if not 0 < expected_degree < d:
        raise ConfigError(f"expected degree must be in (0, d), got {expected_degree}")
    p = min(1.0, expected_degree / (d - 1))
    order = rng.permutation(d)
    upper = np.triu(rng.random((d, d)) < p, k=1)
    lo, hi = w_range
    mag = rng.uniform(lo, hi, size=(d, d))
    sign = np.where(rng.random((d, d)) < 0.5, -1.0, 1.0)
    # upper[r, s] with r < s: node order[r] is a parent of order[s]
    weights = np.zeros((d, d))
    rows, cols = np.nonzero(upper)
    for r, s in zip(rows, cols):
        parent, child = order[r], order[s]
        weights[child, parent] = sign[r, s] * mag[r, s]
    return BinaryDag.from_matrix(weights), weights


# -- CSV interchange -------------------------------------------------------

def write_edge_list(dag, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parent", "child"])
        for p, c in sorted(dag.edges):
            w.writerow([p, c])


def read_edge_list(path, d):
    edges = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [x.strip() for x in rows[0]] != ["parent", "child"]:
        raise ValueError(f"{path}: expected header 'parent,child'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            edges.append((int(row[0]), int(row[1])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: bad edge on line {lineno}: {row!r}") from exc
    return BinaryDag(d, frozenset(edges))


def write_matrix(a, path):
    np.savetxt(path, np.asarray(a), delimiter=",", fmt="%.17g")


def read_matrix(path):
    a = np.loadtxt(path, delimiter=",", ndmin=2)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{path}: matrix is not square ({a.shape})")
    return a
