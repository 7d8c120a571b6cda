"""Point-level adjacency: symmetrized k-NN graph and Delaunay (Voronoi-dual) graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 0.05
WEIGHT_SLOPE = 3.0


@dataclass
class AdjacencyGraph:
    """Undirected simple graph; ``edges`` rows are (i, j) with i < j, sorted."""

    node_count: int
    edges: np.ndarray
    lengths: np.ndarray
    weights: np.ndarray | None = None
    kind: str = "knn"

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def dump(self, path) -> None:
        """Write ``i j length weight`` lines."""
        w = self.weights if self.weights is not None else np.full(self.edge_count, np.nan)
        with open(path, "w") as fh:
            for (i, j), ell, wt in zip(self.edges.tolist(), self.lengths.tolist(), w.tolist()):
                fh.write(f"{i} {j} {ell:.17g} {wt:.17g}\n")


def _canonical_edges(pairs: np.ndarray, n: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keys = np.unique(lo * n + hi)
    return np.stack([keys // n, keys % n], axis=1)


def _make_graph(positions, pairs, kind) -> AdjacencyGraph:
    n = len(positions)
    edges = _canonical_edges(pairs, n)
    lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
    return AdjacencyGraph(n, edges, lengths, None, kind)


def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """The k nearest other points of every point, ordered by (distance, index).

    Candidates come from a k-d tree; distances are recomputed exactly so that
    ties (e.g. duplicated coordinates) resolve to the smaller index.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n <= k:
        raise ValueError(f"k-NN needs more than k={k} points, got {n}")
    tree = cKDTree(positions)
    out = np.empty((n, k), dtype=np.int64)
    todo = np.arange(n)
    m = min(n, k + 5)
    while len(todo):
        _, cand = tree.query(positions[todo], k=m)
        cand = cand.reshape(len(todo), m)
        d2 = ((positions[cand] - positions[todo, None, :]) ** 2).sum(-1)
        d2[cand == todo[:, None]] = np.inf
        rows = np.repeat(np.arange(len(todo)), m)
        order = np.lexsort((cand.ravel(), d2.ravel(), rows)).reshape(len(todo), m)
        cand_sorted = np.take_along_axis(cand, order % m, axis=1)
        d2_sorted = np.take_along_axis(d2, order % m, axis=1)
        # the k-th choice is only safe if a strictly farther candidate was seen
        finite_max = np.where(np.isinf(d2), -np.inf, d2).max(axis=1)
        safe = (d2_sorted[:, k - 1] < finite_max) | (m >= n)
        out[todo[safe]] = cand_sorted[safe, :k]
        todo = todo[~safe]
        m = min(n, 2 * m)
    return out


def knn_graph(positions: np.ndarray, k: int = 10) -> AdjacencyGraph:
    """Symmetrized k-NN graph: (i, j) kept if either is among the other's k nearest."""
    positions = np.asarray(positions, dtype=np.float64)
    return knn_graph_from_indices(positions, knn_indices(positions, k))


def knn_graph_from_indices(positions: np.ndarray, nbrs: np.ndarray) -> AdjacencyGraph:
    """Symmetrized graph from precomputed neighbor lists (n, k)."""
    n, k = nbrs.shape
    pairs = np.stack([np.repeat(np.arange(n), k), nbrs.ravel()], axis=1)
    return _make_graph(positions, pairs, "knn")


def knn_graph_bruteforce(positions: np.ndarray, k: int) -> AdjacencyGraph:
    """Exhaustive-scan reference for :func:`knn_graph` (O(n^2) memory)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    pairs = []
    for i in range(n):
        d2 = ((positions - positions[i]) ** 2).sum(-1)
        d2[i] = np.inf
        order = np.lexsort((np.arange(n), d2))[:k]
        pairs.extend((i, int(j)) for j in order)
    return _make_graph(positions, np.array(pairs), "knn")


def general_position(positions: np.ndarray, scale: float = 1e-7, seed: int = 0) -> np.ndarray:
    """Deterministic sub-micrometre jitter that breaks co-spherical ties before triangulation."""
    extent = float(np.ptp(positions, axis=0).max()) if len(positions) > 1 else 1.0
    rng = np.random.default_rng(seed)
    return positions + rng.uniform(-1.0, 1.0, size=positions.shape) * scale * max(extent, 1e-12)


def _flat_simplices(points: np.ndarray, simplices: np.ndarray, rel_tol: float = 1e-9,
                    chunk: int = 200_000) -> np.ndarray:
    """Simplices whose content is negligible relative to their longest edge."""
    d = simplices.shape[1] - 1
    pairs = [(a, b) for a in range(d + 1) for b in range(a + 1, d + 1)]
    out = np.empty(len(simplices), dtype=bool)
    for lo in range(0, len(simplices), chunk):  # bounded memory on million-point clouds
        corners = points[simplices[lo:lo + chunk]]
        content = np.abs(np.linalg.det(corners[:, 1:] - corners[:, :1]))
        longest = np.max([np.linalg.norm(corners[:, a] - corners[:, b], axis=1) for a, b in pairs], axis=0)
        out[lo:lo + chunk] = content <= rel_tol * longest ** d
    return out


def _peel_hull_slivers(points: np.ndarray, tri: Delaunay) -> np.ndarray:
    """Drop flat simplices that sit on the (shrinking) hull.

    Jitter turns every degenerate hull facet into a sliver whose outer edges are not
    Delaunay edges of the unjittered points; they are removed layer by layer.
    """
    alive = np.ones(len(tri.simplices), bool)
    flat = _flat_simplices(points, tri.simplices)
    if not flat.any():
        return alive
    nbr = tri.neighbors
    while True:
        exposed = ((nbr < 0) | ~alive[np.maximum(nbr, 0)]).any(axis=1)
        drop = alive & flat & exposed
        if not drop.any():
            break
        alive &= ~drop
    # a nearly degenerate cloud may be all slivers; then keep the triangulation as is
    return alive if alive.any() else np.ones_like(alive)


def _delaunay_pairs(points: np.ndarray, original: np.ndarray) -> np.ndarray:
    tri = Delaunay(points)
    simplices = tri.simplices[_peel_hull_slivers(original, tri)]
    d = simplices.shape[1]
    pairs = [simplices[:, [a, b]] for a in range(d) for b in range(a + 1, d)]
    pairs = np.concatenate(pairs)
    if len(tri.coplanar):
        # points Qhull dropped (duplicates or near-coincident) attach to their nearest vertex
        pairs = np.concatenate([pairs, tri.coplanar[:, [0, 2]]])
    return pairs


def voronoi_graph(positions: np.ndarray, max_len: float = np.inf) -> AdjacencyGraph:
    """Edges of the Delaunay tetrahedralization, i.e. pairs of adjacent Voronoi cells.

    Degenerate inputs (all coplanar / collinear) fall back to the Delaunay graph of
    the spanned subspace.  Edges longer than ``max_len`` are dropped.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n == 1:
        return _make_graph(positions, np.empty((0, 2), np.int64), "voronoi")
    centered = positions - positions.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > 1e-9 * max(s[0], 1e-300))) if s[0] > 0 else 0
    if rank == 3 and n >= 4:
        pairs = _delaunay_pairs(general_position(positions), positions)
    elif rank >= 2:
        log.info("voronoi_graph: coplanar input, using 2D Delaunay")
        flat = centered @ vt[:2].T
        if n == 3:
            pairs = np.array([[0, 1], [0, 2], [1, 2]])
        else:
            pairs = _delaunay_pairs(general_position(flat), flat)
    else:
        log.info("voronoi_graph: collinear input, chaining points along the line")
        t = centered @ vt[0] if rank == 1 else np.zeros(n)
        order = np.lexsort((np.arange(n), t))
        pairs = np.stack([order[:-1], order[1:]], axis=1)
    graph = _make_graph(positions, pairs, "voronoi")
    if np.isfinite(max_len):
        keep = graph.lengths <= max_len
        graph = AdjacencyGraph(n, graph.edges[keep], graph.lengths[keep], None, "voronoi")
    return graph


def sym_knn_graph(positions: np.ndarray, k: int = 5) -> AdjacencyGraph:
    """Cheap replacement for the Voronoi graph on very large inputs."""
    g = knn_graph(positions, k)
    return AdjacencyGraph(g.node_count, g.edges, g.lengths, None, "voronoi")


def edge_weights(graph: AdjacencyGraph, floor: float = WEIGHT_FLOOR, slope: float = WEIGHT_SLOPE) -> AdjacencyGraph:
    """w_ij = max(floor, 1 - length_ij / (slope * mean_length))."""
    if graph.edge_count == 0:
        w = np.empty(0)
    else:
        mean = graph.lengths.mean()
        if mean > 0:
            w = np.maximum(floor, 1.0 - graph.lengths / (slope * mean))
        else:
            w = np.ones(graph.edge_count)
    return AdjacencyGraph(graph.node_count, graph.edges, graph.lengths, w, graph.kind)
