"""Piecewise-constant partition of point features by l0 cut pursuit.

The objective, for a graph with edge weights w, point features f and
regularization strength mu, is

    E(g) = sum_i ||g_i - f_i||^2 + mu * sum_{(i,j)} w_ij [g_i != g_j]

and its constant connected components are the superpoints.
"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

EXACT_SEED_LIMIT = 64
RESTART_LIMIT = 256

try:  # Boykov-Kolmogorov max-flow, used for large split problems
    import maxflow as _pymaxflow
except ImportError:  # pragma: no cover
    _pymaxflow = None


@dataclass
class PartitionProblem:
    features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    mu: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.edges):
            raise ValueError("one weight per edge required")
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ValueError("mu must be finite and >= 0")

    @property
    def n(self) -> int:
        return len(self.features)

    @classmethod
    def from_graph(cls, graph, features, mu):
        return cls(features, graph.edges, graph.weights, mu)


@dataclass
class PartitionSolution:
    component_of: np.ndarray
    component_values: np.ndarray
    energy: float
    history: list = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.component_values)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# components {self.n_components} energy {float(self.energy)!r}\n")
            for i, c in enumerate(self.component_of.tolist()):
                fh.write(f"{i} {c}\n")


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber ids 0..C-1 in order of first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inv.ravel()]


def component_means(features: np.ndarray, comp: np.ndarray, n_comp: int) -> np.ndarray:
    counts = np.bincount(comp, minlength=n_comp).astype(np.float64)
    sums = np.stack([np.bincount(comp, features[:, d], minlength=n_comp) for d in range(features.shape[1])], axis=1)
    return sums / np.maximum(counts, 1.0)[:, None]


def _sse_per_component(features, comp, n_comp):
    means = component_means(features, comp, n_comp)
    resid = ((features - means[comp]) ** 2).sum(axis=1)
    return np.bincount(comp, resid, minlength=n_comp), means


def _graph_components(n, edges, keep=None):
    if keep is not None:
        edges = edges[keep]
    mat = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return connected_components(mat, directed=False)[1]


def is_connected_partition(problem: PartitionProblem, component_of) -> bool:
    comp = np.asarray(component_of)
    e = problem.edges
    same = comp[e[:, 0]] == comp[e[:, 1]]
    pieces = _graph_components(problem.n, e, same)
    # every component must be exactly one connected piece
    pairs = np.unique(np.stack([comp, pieces], axis=1), axis=0)
    return len(pairs) == len(np.unique(comp))


def energy(problem: PartitionProblem, component_of, check_connected: bool = True) -> float:
    """Objective value with each component's value set to its feature mean."""
    comp = _relabel(np.asarray(component_of))
    if check_connected and not is_connected_partition(problem, comp):
        raise ValueError("partition has a disconnected component")
    n_comp = int(comp.max()) + 1
    sse, _ = _sse_per_component(problem.features, comp, n_comp)
    e = problem.edges
    cut = comp[e[:, 0]] != comp[e[:, 1]]
    return float(sse.sum() + problem.mu * problem.weights[cut].sum())


def _solution(problem, comp, history=None) -> PartitionSolution:
    comp = _relabel(comp)
    n_comp = int(comp.max()) + 1
    values = component_means(problem.features, comp, n_comp)
    return PartitionSolution(comp, values, energy(problem, comp, check_connected=False), history or [])


# ---------------------------------------------------------------------------
# max-flow / min-cut
# ---------------------------------------------------------------------------

@dataclass
class MinCut:
    flow_value: float
    cut_value: float
    sink_side: np.ndarray  # True for nodes separated from the source


def max_flow_min_cut(n_nodes: int, edges, capacities, source_caps, sink_caps) -> MinCut:
    """Edmonds-Karp max-flow with terminals.

    ``edges`` are directed (u, v) pairs with ``capacities``; ``source_caps[i]`` is
    the capacity of s -> i and ``sink_caps[i]`` that of i -> t.  The returned cut
    is the one with the smallest source side (nodes reachable from s in the
    residual graph).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    capacities = np.asarray(capacities, dtype=np.float64)
    source_caps = np.asarray(source_caps, dtype=np.float64)
    sink_caps = np.asarray(sink_caps, dtype=np.float64)
    for arr in (capacities, source_caps, sink_caps):
        if np.any(~np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("capacities must be finite and >= 0")
    s, t = n_nodes, n_nodes + 1
    # residual arcs: to, cap, index of reverse arc
    head = [[] for _ in range(n_nodes + 2)]
    to: list[int] = []
    cap: list[float] = []

    def add(u, v, c, rc=0.0):
        head[u].append(len(to))
        to.append(v)
        cap.append(c)
        head[v].append(len(to))
        to.append(u)
        cap.append(rc)

    for (u, v), c in zip(edges.tolist(), capacities.tolist()):
        if u != v and c > 0:
            add(u, v, c)
    for i in range(n_nodes):
        if source_caps[i] > 0:
            add(s, i, float(source_caps[i]))
        if sink_caps[i] > 0:
            add(i, t, float(sink_caps[i]))

    flow = 0.0
    eps = 1e-15
    while True:
        parent_arc = [-1] * (n_nodes + 2)
        parent_arc[s] = -2
        queue = deque([s])
        while queue and parent_arc[t] == -1:
            u = queue.popleft()
            for a in head[u]:
                v = to[a]
                if parent_arc[v] == -1 and cap[a] > eps:
                    parent_arc[v] = a
                    queue.append(v)
        if parent_arc[t] == -1:
            break
        bottleneck = np.inf
        v = t
        while v != s:
            a = parent_arc[v]
            bottleneck = min(bottleneck, cap[a])
            v = to[a ^ 1]
        v = t
        while v != s:
            a = parent_arc[v]
            cap[a] -= bottleneck
            cap[a ^ 1] += bottleneck
            v = to[a ^ 1]
        flow += bottleneck

    reach = np.zeros(n_nodes + 2, dtype=bool)
    reach[s] = True
    queue = deque([s])
    while queue:
        u = queue.popleft()
        for a in head[u]:
            v = to[a]
            if not reach[v] and cap[a] > eps:
                reach[v] = True
                queue.append(v)
    sink_side = ~reach[:n_nodes]
    return MinCut(flow, cut_value(edges, capacities, source_caps, sink_caps, sink_side), sink_side)


def cut_value(edges, capacities, source_caps, sink_caps, sink_side) -> float:
    """Capacity of the s/t cut given by ``sink_side``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    sink_side = np.asarray(sink_side, dtype=bool)
    crossing = ~sink_side[edges[:, 0]] & sink_side[edges[:, 1]]
    return float(np.asarray(capacities)[crossing].sum()
                 + np.asarray(source_caps)[sink_side].sum()
                 + np.asarray(sink_caps)[~sink_side].sum())


def _binary_labeling(n, edges, pair_w, cost_a, cost_b, backend):
    """Minimize sum_i cost(x_i) + sum_e pair_w [x_u != x_v]; returns True where label B wins."""
    base = np.minimum(cost_a, cost_b)
    src = cost_a - base  # paid by nodes ending on the sink side (label A)
    snk = cost_b - base  # paid by nodes on the source side (label B)
    if backend == "bk":
        g = _pymaxflow.Graph[float](n, len(edges))
        nodes = g.add_nodes(n)
        if len(edges):
            g.add_edges(nodes[edges[:, 0]], nodes[edges[:, 1]], pair_w, pair_w)
        g.add_grid_tedges(nodes, src, snk)
        g.maxflow()
        return ~g.get_grid_segments(nodes)
    both = np.concatenate([edges, edges[:, ::-1]])
    res = max_flow_min_cut(n, both, np.concatenate([pair_w, pair_w]), src, snk)
    return ~res.sink_side


def _resolve_backend(backend, size):
    if backend == "auto":
        return "bk" if _pymaxflow is not None and size > 200 else "internal"
    if backend == "bk" and _pymaxflow is None:
        raise RuntimeError("PyMaxflow is not installed")
    return backend


# ---------------------------------------------------------------------------
# cut pursuit
# ---------------------------------------------------------------------------

def _first_argmax_per_group(values, groups, n_groups):
    """Index of the largest value in each group; lowest index on ties."""
    order = np.lexsort((np.arange(len(values)), -values, groups))
    g_sorted = groups[order]
    starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
    out = np.full(n_groups, -1, dtype=np.int64)
    out[g_sorted[starts]] = order[starts]
    return out


def _seed_pairs(f, groups, n_groups, restarts, exact_limit=EXACT_SEED_LIMIT):
    """Candidate centroid pairs for the binary split of every group.

    The first pair is the two members farthest apart in feature space (exact
    for groups up to ``exact_limit`` members, a double sweep otherwise).  Groups
    of at most ``RESTART_LIMIT`` members also get the double-sweep pair, the
    pair (farthest from the mean, mean) and ``restarts`` seeded random pairs
    drawn with distance-weighted probabilities.  Each entry is (c_a, c_b, mask
    of groups it applies to).
    """
    sizes = np.bincount(groups, minlength=n_groups)
    means = component_means(f, groups, n_groups)
    a = _first_argmax_per_group(((f - means[groups]) ** 2).sum(1), groups, n_groups)
    b = _first_argmax_per_group(((f - f[a][groups]) ** 2).sum(1), groups, n_groups)
    fa, fb = a.copy(), b.copy()
    order = np.argsort(groups, kind="stable")
    starts = np.r_[0, np.cumsum(sizes)]
    for g in np.flatnonzero((sizes > 2) & (sizes <= exact_limit)).tolist():
        idx = order[starts[g]:starts[g + 1]]
        sub = f[idx]
        d2 = ((sub[:, None, :] - sub[None, :, :]) ** 2).sum(-1)
        i, j = divmod(int(np.argmax(d2)), len(idx))
        fa[g], fb[g] = idx[min(i, j)], idx[max(i, j)]
    everyone = np.ones(n_groups, dtype=bool)
    pairs = [(f[fa], f[fb], everyone)]
    small = sizes <= RESTART_LIMIT
    if small.any() and restarts >= 0:
        pairs.append((f[a], f[b], small))
        pairs.append((f[a], means, small))
        rng = np.random.default_rng(0)
        for _ in range(restarts):
            r1 = order[starts[:-1] + (rng.random(n_groups) * sizes).astype(np.int64)]
            d = ((f - f[r1][groups]) ** 2).sum(1) * rng.random(len(f))
            r2 = _first_argmax_per_group(d, groups, n_groups)
            pairs.append((f[r1], f[r2], small))
    return pairs


def _refine_split(f, sub_comp, k, se, sw, ca, cb, split_iters, backend):
    """Alternate graph-cut assignment and re-centering; returns pieces and the energy change per group."""
    ca, cb = ca.copy(), cb.copy()
    degenerate = np.all(ca == cb, axis=1)
    label_b = np.zeros(len(f), dtype=bool)
    for _ in range(split_iters):
        cost_a = ((f - ca[sub_comp]) ** 2).sum(1)
        cost_b = ((f - cb[sub_comp]) ** 2).sum(1)
        label_b = _binary_labeling(len(f), se, sw, cost_a, cost_b, backend)
        label_b &= ~degenerate[sub_comp]
        grp = sub_comp * 2 + label_b
        cnt = np.bincount(grp, minlength=2 * k)
        sums = np.stack([np.bincount(grp, f[:, d], minlength=2 * k) for d in range(f.shape[1])], axis=1)
        new = sums / np.maximum(cnt, 1)[:, None]
        has_a, has_b = cnt[0::2] > 0, cnt[1::2] > 0
        ca[has_a] = new[0::2][has_a]
        cb[has_b] = new[1::2][has_b]

    same = label_b[se[:, 0]] == label_b[se[:, 1]]
    pieces = _relabel(_graph_components(len(f), se, same))
    n_pieces = int(pieces.max()) + 1
    sse_new, _ = _sse_per_component(f, pieces, n_pieces)
    piece_comp = np.zeros(n_pieces, dtype=np.int64)
    piece_comp[pieces] = sub_comp
    sse_old, _ = _sse_per_component(f, sub_comp, k)
    cut_cost = np.bincount(sub_comp[se[~same, 0]], sw[~same], minlength=k)
    delta = np.bincount(piece_comp, sse_new, minlength=k) - sse_old + cut_cost
    delta[np.bincount(piece_comp, minlength=k) < 2] = np.inf
    return pieces, delta


def _split_step(problem, comp, n_comp, active, split_iters, restarts, tol, backend):
    """Try one binary split in every active component.

    Each seed pair is refined independently; per component the best candidate
    is kept if it lowers the energy by more than ``tol``.
    Returns (new component labels, accepted mask, rejected mask) over old components.
    """
    F = problem.features
    e = problem.edges
    nodes = np.flatnonzero(active[comp])
    comp_ids, sub_comp = np.unique(comp[nodes], return_inverse=True)
    sub_comp = sub_comp.ravel()
    k = len(comp_ids)
    f = F[nodes]
    local = np.full(problem.n, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    intra = (comp[e[:, 0]] == comp[e[:, 1]]) & active[comp[e[:, 0]]]
    se = local[e[intra]]
    sw = problem.mu * problem.weights[intra]

    best_delta = np.full(k, np.inf)
    best_pieces = np.zeros(len(nodes), dtype=np.int64)
    offset = 0
    for ca, cb, use in _seed_pairs(f, sub_comp, k, restarts):
        if use.all():
            sel, sub, sub_se, sub_sw, ids = slice(None), sub_comp, se, sw, np.arange(k)
        else:
            node_mask = use[sub_comp]
            sel = np.flatnonzero(node_mask)
            ids = np.flatnonzero(use)
            remap = np.full(k, -1, dtype=np.int64)
            remap[ids] = np.arange(len(ids))
            sub = remap[sub_comp[sel]]
            pos = np.full(len(nodes), -1, dtype=np.int64)
            pos[sel] = np.arange(len(sel))
            keep_e = node_mask[se[:, 0]]
            sub_se, sub_sw = pos[se[keep_e]], sw[keep_e]
            ca, cb = ca[ids], cb[ids]
        pieces, delta = _refine_split(f[sel], sub, len(ids), sub_se, sub_sw, ca, cb, split_iters,
                                      _resolve_backend(backend, len(sub)))
        better = delta < best_delta[ids] - 1e-12
        if better.any():
            best_delta[ids[better]] = delta[better]
            take = better[sub]
            target = np.arange(len(nodes))[sel][take]
            best_pieces[target] = pieces[take] + offset
        offset += len(nodes)
    accept_local = best_delta < -tol

    new_comp = comp.copy()
    take = accept_local[sub_comp]
    # fresh ids for pieces of accepted components, offset past existing ids
    new_comp[nodes[take]] = n_comp + best_pieces[take]
    accepted = np.zeros(n_comp, dtype=bool)
    accepted[comp_ids[accept_local]] = True
    rejected = np.zeros(n_comp, dtype=bool)
    rejected[comp_ids[~accept_local]] = True
    return new_comp, accepted, rejected


def _merge_step(problem, comp, n_comp, tol):
    """Greedily merge adjacent components while the energy drops by more than ``tol``.

    Merging u and v changes the energy by n_u n_v / (n_u + n_v) ||g_u - g_v||^2
    minus mu times the weight of the edges between them.
    """
    F = problem.features
    e = problem.edges
    cu, cv = comp[e[:, 0]], comp[e[:, 1]]
    inter = cu != cv
    if not inter.any():
        return comp, np.zeros(n_comp, dtype=bool)
    lo = np.minimum(cu[inter], cv[inter])
    hi = np.maximum(cu[inter], cv[inter])
    keys, inv = np.unique(lo * n_comp + hi, return_inverse=True)
    wsum = np.bincount(inv.ravel(), problem.mu * problem.weights[inter])
    count = np.bincount(comp, minlength=n_comp).astype(np.float64)
    total = np.stack([np.bincount(comp, F[:, d], minlength=n_comp) for d in range(F.shape[1])], axis=1)

    adj: list[dict] = [dict() for _ in range(n_comp)]
    for key, w in zip(keys.tolist(), wsum.tolist()):
        u, v = divmod(key, n_comp)
        adj[u][v] = w
        adj[v][u] = w

    def gain(u, v, w):
        du = total[u] / count[u] - total[v] / count[v]
        return w - count[u] * count[v] / (count[u] + count[v]) * float(du @ du)

    version = [0] * n_comp
    heap = []
    for key, w in zip(keys.tolist(), wsum.tolist()):
        u, v = divmod(key, n_comp)
        g = gain(u, v, w)
        if g > tol:
            heap.append((-g, u, v, 0, 0))
    heapq.heapify(heap)
    parent = list(range(n_comp))
    alive = [True] * n_comp
    merged = np.zeros(n_comp, dtype=bool)
    while heap:
        neg, u, v, vu, vv = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or version[u] != vu or version[v] != vv:
            continue
        # fold v into u
        alive[v] = False
        parent[v] = u
        count[u] += count[v]
        total[u] += total[v]
        version[u] += 1
        merged[u] = True
        del adj[u][v]
        del adj[v][u]
        for x, w in adj[v].items():
            del adj[x][v]
            adj[u][x] = adj[u].get(x, 0.0) + w
            adj[x][u] = adj[u][x]
        adj[v] = {}
        for x, w in adj[u].items():
            g = gain(u, x, w)
            if g > tol:
                a, b = (u, x) if u < x else (x, u)
                heapq.heappush(heap, (-g, a, b, version[a], version[b]))

    root = np.arange(n_comp)
    for c in range(n_comp):
        r = c
        while parent[r] != r:
            r = parent[r]
        root[c] = r
    return root[comp], merged


def cut_pursuit(problem: PartitionProblem, max_outer: int = 10, split_iters: int = 5,
                merge: bool = True, tol: float = 1e-6, restarts: int = 4,
                backend: str = "auto") -> PartitionSolution:
    """Approximate minimizer of the l0 partition energy by alternating splits and merges.

    Every component first gets a binary split attempt: centroid pairs (the
    farthest feature pair, plus ``restarts`` extra seeds for small components)
    are refined by ``split_iters`` rounds of graph-cut assignment and
    re-centering, and the best split is kept if it lowers the energy by more
    than ``tol``.  Then adjacent components are merged greedily while that
    lowers the energy.  Components whose split failed are not retried until
    they take part in a merge.
    """
    n = problem.n
    comp = _relabel(_graph_components(n, problem.edges))
    n_comp = int(comp.max()) + 1
    saturated = np.zeros(n_comp, dtype=bool)
    current = energy(problem, comp, check_connected=False)
    history = [current]
    for outer in range(max_outer):
        changed = False
        sizes = np.bincount(comp, minlength=n_comp)
        active = (~saturated) & (sizes > 1)
        if active.any():
            new_comp, accepted, rejected = _split_step(problem, comp, n_comp, active, split_iters, restarts, tol, backend)
            if accepted.any():
                keep_sat = saturated | rejected
                sat_nodes = keep_sat[comp]
                comp = _relabel(new_comp)
                n_comp = int(comp.max()) + 1
                saturated = np.zeros(n_comp, dtype=bool)
                saturated[comp[sat_nodes]] = True
                changed = True
                new_energy = energy(problem, comp, check_connected=False)
                if new_energy > current + 1e-9 * max(1.0, abs(current)):
                    raise AssertionError("split increased the energy")
                current = new_energy
                history.append(current)
            else:
                saturated |= rejected
        if merge:
            merged_comp, merged = _merge_step(problem, comp, n_comp, tol)
            if merged.any():
                sat_nodes = saturated[comp] & ~merged[merged_comp]
                comp = _relabel(merged_comp)
                n_comp = int(comp.max()) + 1
                saturated = np.zeros(n_comp, dtype=bool)
                saturated[comp[sat_nodes]] = True
                changed = True
                new_energy = energy(problem, comp, check_connected=False)
                if new_energy > current + 1e-9 * max(1.0, abs(current)):
                    raise AssertionError("merge increased the energy")
                current = new_energy
                history.append(current)
        log.debug("cut pursuit iter %d: %d components, energy %.6g", outer, n_comp, current)
        if not changed:
            break
    return _solution(problem, comp, history)


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------

def brute_force_partition(problem: PartitionProblem) -> PartitionSolution:
    """Global optimum over all partitions into connected components (n <= 12).

    The energy splits into per-block costs SSE(B) - mu * w(inside B) plus the
    constant mu * w(all edges), so a subset dynamic program over bitmasks finds
    the optimum exactly.
    """
    n = problem.n
    if n > 12:
        raise ValueError("brute force refused for more than 12 nodes")
    F = problem.features
    nbr = [0] * n
    for (u, v) in problem.edges.tolist():
        nbr[u] |= 1 << v
        nbr[v] |= 1 << u
    full = (1 << n) - 1

    def connected(mask):
        start = mask & -mask
        seen = start
        frontier = start
        while frontier:
            bit = frontier & -frontier
            frontier ^= bit
            i = bit.bit_length() - 1
            new = nbr[i] & mask & ~seen
            seen |= new
            frontier |= new
        return seen == mask

    members = [[i for i in range(n) if m >> i & 1] for m in range(1 << n)]
    w_inside = np.zeros(1 << n)
    e, w = problem.edges, problem.weights
    for m in range(1, 1 << n):
        inside = ((m >> e[:, 0]) & 1).astype(bool) & ((m >> e[:, 1]) & 1).astype(bool)
        w_inside[m] = w[inside].sum()

    block_cost = {}
    for m in range(1, 1 << n):
        if connected(m):
            idx = members[m]
            sub = F[idx]
            block_cost[m] = float(((sub - sub.mean(axis=0)) ** 2).sum()) - problem.mu * w_inside[m]

    best = {0: (0.0, None)}
    for mask in range(1, 1 << n):
        low = mask & -mask
        rest = mask ^ low
        best_val, best_block = np.inf, None
        sub = rest
        while True:
            block = sub | low
            if block in block_cost:
                val = block_cost[block] + best[mask ^ block][0]
                if val < best_val - 1e-15:
                    best_val, best_block = val, block
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best[mask] = (best_val, best_block)

    comp = np.empty(n, dtype=np.int64)
    mask, c = full, 0
    while mask:
        block = best[mask][1]
        comp[members[block]] = c
        c += 1
        mask ^= block
    return _solution(problem, comp)
