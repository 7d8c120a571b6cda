"""Superpoint graph: superpoint shape statistics, superedges and their 13 features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import UNLABELED, majority_labels

FORMAT_VERSION = 1
EDGE_FEATURE_NAMES = (
    "mean_offset_x", "mean_offset_y", "mean_offset_z",
    "offset_std_x", "offset_std_y", "offset_std_z",
    "centroid_offset_x", "centroid_offset_y", "centroid_offset_z",
    "length_ratio", "surface_ratio", "volume_ratio", "point_count_ratio",
)
N_EDGE_FEATURES = len(EDGE_FEATURE_NAMES)
RATIO_FLOOR = 1e-10
STD_FLOOR = 1e-6


@dataclass
class Superpoint:
    members: np.ndarray
    centroid: np.ndarray
    eigenvalues: np.ndarray
    diameter: float
    label: int = UNLABELED

    @property
    def point_count(self) -> int:
        return len(self.members)

    @property
    def length(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def surface(self) -> float:
        return float(self.eigenvalues[0] * self.eigenvalues[1])

    @property
    def volume(self) -> float:
        return float(np.prod(self.eigenvalues))


@dataclass
class Superpoints:
    """Column-wise statistics of all superpoints of one partition."""

    counts: np.ndarray
    centroids: np.ndarray
    eigenvalues: np.ndarray
    diameters: np.ndarray
    labels: np.ndarray
    label_hist: np.ndarray | None = None

    def __len__(self):
        return len(self.counts)

    @property
    def lengths(self):
        return self.eigenvalues[:, 0]

    @property
    def surfaces(self):
        return self.eigenvalues[:, 0] * self.eigenvalues[:, 1]

    @property
    def volumes(self):
        return self.eigenvalues.prod(axis=1)

    def get(self, c: int, component_of: np.ndarray) -> Superpoint:
        return Superpoint(np.flatnonzero(component_of == c), self.centroids[c], self.eigenvalues[c],
                          float(self.diameters[c]), int(self.labels[c]))


def build_superpoints(positions: np.ndarray, component_of: np.ndarray, labels: np.ndarray | None = None,
                      class_count: int = 6) -> Superpoints:
    """Count, centroid, covariance eigenvalues, bounding-box diagonal and majority label per component."""
    comp = np.asarray(component_of, dtype=np.int64)
    n_comp = int(comp.max()) + 1
    counts = np.bincount(comp, minlength=n_comp)
    cnt = counts.astype(np.float64)
    centroids = np.stack([np.bincount(comp, positions[:, d], minlength=n_comp) for d in range(3)], axis=1) / cnt[:, None]
    centered = positions - centroids[comp]
    cov = np.empty((n_comp, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            v = np.bincount(comp, centered[:, a] * centered[:, b], minlength=n_comp) / cnt
            cov[:, a, b] = cov[:, b, a] = v
    eig = np.maximum(np.linalg.eigvalsh(cov)[:, ::-1], 0.0)

    order = np.argsort(comp, kind="stable")
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    sorted_pos = positions[order]
    lo = np.minimum.reduceat(sorted_pos, starts, axis=0)
    hi = np.maximum.reduceat(sorted_pos, starts, axis=0)
    diameters = np.linalg.norm(hi - lo, axis=1)

    if labels is not None:
        sp_labels = majority_labels(comp, labels, n_comp, class_count)
        mask = labels >= 0
        hist = np.bincount(comp[mask] * class_count + labels[mask],
                           minlength=n_comp * class_count).reshape(n_comp, class_count)
    else:
        sp_labels = np.full(n_comp, UNLABELED, dtype=np.int64)
        hist = None
    return Superpoints(counts, centroids, eig, diameters, sp_labels, hist)


@dataclass
class Superedges:
    """Directed superedges with their offset sets stored contiguously (CSR-style)."""

    src: np.ndarray
    dst: np.ndarray
    offset_ptr: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.src)

    def delta(self, e: int) -> np.ndarray:
        return self.offsets[self.offset_ptr[e]: self.offset_ptr[e + 1]]

    def as_dict(self) -> dict:
        return {(int(s), int(t)): self.delta(e) for e, (s, t) in enumerate(zip(self.src, self.dst))}


def build_superedges(component_of: np.ndarray, positions: np.ndarray, voronoi_edges: np.ndarray) -> Superedges:
    """Superedge (S, T) for every Voronoi edge (i, j) with i in S, j in T; offsets p_i - p_j.

    Both orientations are emitted, sorted by (S, T).
    """
    comp = np.asarray(component_of, dtype=np.int64)
    e = np.asarray(voronoi_edges, dtype=np.int64).reshape(-1, 2)
    ci, cj = comp[e[:, 0]], comp[e[:, 1]]
    cross = ci != cj
    i, j = e[cross, 0], e[cross, 1]
    s = np.concatenate([comp[i], comp[j]])
    t = np.concatenate([comp[j], comp[i]])
    off = np.concatenate([positions[i] - positions[j], positions[j] - positions[i]])
    n_comp = int(comp.max()) + 1
    key = s * n_comp + t
    order = np.argsort(key, kind="stable")
    key, off = key[order], off[order]
    uniq, starts = np.unique(key, return_index=True)
    ptr = np.r_[starts, len(key)].astype(np.int64)
    return Superedges(uniq // n_comp, uniq % n_comp, ptr, off)


def _log_ratio(a, b):
    # difference of logs, so swapping the arguments negates the result exactly
    return np.log(np.maximum(a, RATIO_FLOOR)) - np.log(np.maximum(b, RATIO_FLOOR))


def superedge_features(S: Superpoint, T: Superpoint, delta: np.ndarray) -> np.ndarray:
    """The 13 features of a single superedge (S, T) with offset set ``delta``."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1, 3)
    if len(delta) == 0:
        raise ValueError("superedge without offsets")
    return np.concatenate([
        delta.mean(axis=0),
        delta.std(axis=0),
        S.centroid - T.centroid,
        [_log_ratio(S.length, T.length),
         _log_ratio(S.surface, T.surface),
         _log_ratio(S.volume, T.volume),
         _log_ratio(S.point_count, T.point_count)],
    ])


def all_superedge_features(sp: Superpoints, se: Superedges) -> np.ndarray:
    """Vectorized :func:`superedge_features` over every superedge."""
    m = len(se)
    if m == 0:
        return np.zeros((0, N_EDGE_FEATURES))
    sizes = np.diff(se.offset_ptr)
    owner = np.repeat(np.arange(m), sizes)
    mean = np.stack([np.bincount(owner, se.offsets[:, d], minlength=m) for d in range(3)], axis=1) / sizes[:, None]
    resid = se.offsets - mean[owner]
    std = np.sqrt(np.stack([np.bincount(owner, resid[:, d] ** 2, minlength=m) for d in range(3)], axis=1) / sizes[:, None])
    s, t = se.src, se.dst
    F = np.empty((m, N_EDGE_FEATURES))
    F[:, 0:3] = mean
    F[:, 3:6] = std
    F[:, 6:9] = sp.centroids[s] - sp.centroids[t]
    F[:, 9] = _log_ratio(sp.lengths[s], sp.lengths[t])
    F[:, 10] = _log_ratio(sp.surfaces[s], sp.surfaces[t])
    F[:, 11] = _log_ratio(sp.volumes[s], sp.volumes[t])
    F[:, 12] = _log_ratio(sp.counts[s], sp.counts[t])
    return F


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, graphs) -> "FeatureStats":
        feats = [g.edge_features for g in graphs if len(g.edge_features)]
        if not feats:
            raise ValueError("no superedges to compute feature statistics from")
        F = np.concatenate(feats)
        return cls(F.mean(axis=0), np.maximum(F.std(axis=0), STD_FLOOR))

    def apply(self, F: np.ndarray) -> np.ndarray:
        return (F - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class SuperpointGraph:
    superpoints: Superpoints
    edges: np.ndarray  # (m, 2) directed (src, dst)
    edge_features: np.ndarray  # raw (m, 13)
    feature_stats: FeatureStats | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.superpoints)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def normalized_features(self) -> np.ndarray:
        if self.feature_stats is None:
            raise ValueError("superedge features are not normalized: no feature statistics attached")
        return self.feature_stats.apply(self.edge_features)

    def subgraph(self, nodes: np.ndarray) -> "SuperpointGraph":
        """Induced subgraph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        keep = (remap[self.edges[:, 0]] >= 0) & (remap[self.edges[:, 1]] >= 0)
        sp = self.superpoints
        sub_sp = Superpoints(sp.counts[nodes], sp.centroids[nodes], sp.eigenvalues[nodes], sp.diameters[nodes],
                             sp.labels[nodes], None if sp.label_hist is None else sp.label_hist[nodes])
        return SuperpointGraph(sub_sp, remap[self.edges[keep]], self.edge_features[keep], self.feature_stats,
                               dict(self.meta))

    # -- serialization ---------------------------------------------------
    def to_json(self) -> dict:
        sp = self.superpoints
        return {
            "format_version": FORMAT_VERSION,
            "meta": self.meta,
            "superpoints": [
                {"count": int(sp.counts[c]), "centroid": sp.centroids[c].tolist(),
                 "lambdas": sp.eigenvalues[c].tolist(), "diameter": float(sp.diameters[c]),
                 "label": int(sp.labels[c])}
                for c in range(len(sp))
            ],
            "superedges": [
                {"src": int(s), "dst": int(t), "features": f.tolist()}
                for (s, t), f in zip(self.edges, self.edge_features)
            ],
            "feature_stats": None if self.feature_stats is None else self.feature_stats.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SuperpointGraph":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"SPG format version {d.get('format_version')} != {FORMAT_VERSION}")
        sps = d["superpoints"]
        sp = Superpoints(
            np.array([s["count"] for s in sps], dtype=np.int64),
            np.array([s["centroid"] for s in sps], dtype=np.float64).reshape(-1, 3),
            np.array([s["lambdas"] for s in sps], dtype=np.float64).reshape(-1, 3),
            np.array([s["diameter"] for s in sps], dtype=np.float64),
            np.array([s["label"] for s in sps], dtype=np.int64),
        )
        ses = d["superedges"]
        edges = np.array([[e["src"], e["dst"]] for e in ses], dtype=np.int64).reshape(-1, 2)
        feats = np.array([e["features"] for e in ses], dtype=np.float64).reshape(-1, N_EDGE_FEATURES)
        stats = FeatureStats.from_json(d["feature_stats"]) if d.get("feature_stats") else None
        return cls(sp, edges, feats, stats, d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SuperpointGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_spg(positions: np.ndarray, component_of: np.ndarray, voronoi_edges: np.ndarray,
              labels: np.ndarray | None = None, class_count: int = 6) -> tuple[SuperpointGraph, Superedges]:
    sp = build_superpoints(positions, component_of, labels, class_count)
    se = build_superedges(component_of, positions, voronoi_edges)
    F = all_superedge_features(sp, se)
    edges = np.stack([se.src, se.dst], axis=1)
    return SuperpointGraph(sp, edges, F), se
