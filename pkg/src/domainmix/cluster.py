"""DBSCAN and the cluster reliability criteria used to build pseudo-labels."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "DbscanParams",
    "ClusterAssignment",
    "CriteriaFlags",
    "dbscan",
    "independence_keep",
    "compactness_keep",
    "quantity_keep",
    "select_reliable",
    "Selection",
]

NOISE = -1


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.35
    min_samples: int = 2
    eps_loose: float | None = None  # None -> 1.02 * eps
    eps_tight: float | None = None  # None -> 0.98 * eps
    indep_threshold: float = 0.9
    comp_threshold: float = 0.9
    quantity_bound: int = 4

    def __post_init__(self):
        if self.eps_loose is None:
            object.__setattr__(self, "eps_loose", 1.02 * self.eps)
        if self.eps_tight is None:
            object.__setattr__(self, "eps_tight", 0.98 * self.eps)
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.min_samples < 1:
            raise ConfigError("min_samples must be >= 1")
        if not 0 < self.eps_tight < self.eps < self.eps_loose:
            raise ConfigError(
                f"need 0 < eps_tight < eps < eps_loose, got {self.eps_tight}, {self.eps}, {self.eps_loose}"
            )
        for name in ("indep_threshold", "comp_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.quantity_bound < 1:
            raise ConfigError("quantity bound must be >= 1")


@dataclass(frozen=True)
class CriteriaFlags:
    indep: bool = True
    comp: bool = True
    quantity: bool = True


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # -1 marks noise
    n_clusters: int
    sizes: np.ndarray

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        m = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        sizes = np.bincount(labels[labels >= 0], minlength=m).astype(np.int64)
        return cls(labels, m, sizes)

    @property
    def n_noise(self) -> int:
        return int((self.labels == NOISE).sum())

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.labels == i)


def _as_points(features) -> np.ndarray:
    try:
        X = np.asarray(features, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise DimensionError("all feature vectors must have the same dimension") from exc
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError(f"expected a non-empty (n, d) array, got shape {X.shape}")
    return X


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _dbscan_from_d2(d2: np.ndarray, eps: float, min_samples: int) -> ClusterAssignment:
    n = d2.shape[0]
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_samples  # closed neighbourhood: counts itself
    neighbours = [np.flatnonzero(row) for row in adj]
    labels = np.full(n, NOISE, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cid = 0
    for start in range(n):
        if visited[start] or not core[start]:
            continue
        visited[start] = True
        labels[start] = cid
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for q in neighbours[p]:
                if labels[q] == NOISE:
                    labels[q] = cid
                if not visited[q] and core[q]:
                    visited[q] = True
                    queue.append(q)
        cid += 1
    return ClusterAssignment.from_labels(labels)


def dbscan(features, params: DbscanParams, *, eps: float | None = None) -> ClusterAssignment:
    """Euclidean DBSCAN, scanning points in index order.

    A point is core when its closed ``eps`` ball holds at least
    ``min_samples`` points. A border point within reach of several clusters
    joins the one created first.
    """
    X = _as_points(features)
    return _dbscan_from_d2(_sq_distances(X), params.eps if eps is None else eps, params.min_samples)


def _host_label(labels: np.ndarray) -> int:
    clustered = labels[labels >= 0]
    if clustered.size == 0:
        return NOISE
    return int(np.bincount(clustered).argmax())  # ties -> lowest id


def independence_keep(features, assignment: ClusterAssignment, params: DbscanParams) -> set:
    """Clusters that do not absorb many new points when ``eps`` is loosened."""
    loose = dbscan(features, params, eps=params.eps_loose)
    kept = set()
    for i in range(assignment.n_clusters):
        members = assignment.members(i)
        host = _host_label(loose.labels[members])
        denom = loose.sizes[host] if host >= 0 else members.size
        if members.size / denom >= params.indep_threshold:
            kept.add(i)
    return kept


def compactness_keep(features, assignment: ClusterAssignment, params: DbscanParams) -> set:
    """Clusters that stay mostly in one piece when ``eps`` is tightened."""
    tight = dbscan(features, params, eps=params.eps_tight)
    kept = set()
    for i in range(assignment.n_clusters):
        members = assignment.members(i)
        inner = tight.labels[members]
        inner = inner[inner >= 0]
        largest = np.bincount(inner).max() if inner.size else 0
        if largest / members.size >= params.comp_threshold:
            kept.add(i)
    return kept


def quantity_keep(assignment: ClusterAssignment, b: int) -> set:
    return {i for i, s in enumerate(assignment.sizes) if s >= b}


@dataclass
class Selection:
    """Outcome of :func:`select_reliable`.

    ``pseudo_labels`` holds -1 for points that are excluded this epoch.
    """

    pseudo_labels: np.ndarray
    n_kept: int
    assignment: ClusterAssignment
    kept_per_criterion: dict = field(default_factory=dict)

    def debug_record(self, epoch: int) -> dict:
        return {
            "epoch": int(epoch),
            "M": int(self.assignment.n_clusters),
            "M_prime": int(self.n_kept),
            "sizes": [int(s) for s in self.assignment.sizes],
            "kept_ids_per_criterion": {k: sorted(int(i) for i in v) for k, v in self.kept_per_criterion.items()},
        }

    def dump_debug(self, path, epoch: int):
        with open(path, "w") as fh:
            json.dump(self.debug_record(epoch), fh, indent=2)


def select_reliable(features, params: DbscanParams, flags: CriteriaFlags = CriteriaFlags()) -> Selection:
    X = _as_points(features)
    base = dbscan(X, params)
    kept = set(range(base.n_clusters))
    per = {}
    if flags.indep:
        per["independence"] = independence_keep(X, base, params)
    if flags.comp:
        per["compactness"] = compactness_keep(X, base, params)
    if flags.quantity:
        per["quantity"] = quantity_keep(base, params.quantity_bound)
    for s in per.values():
        kept &= s
    remap = {old: new for new, old in enumerate(sorted(kept))}
    pseudo = np.array([remap.get(int(l), NOISE) for l in base.labels], dtype=np.int64)
    return Selection(pseudo, len(remap), base, per)
