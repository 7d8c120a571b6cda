"""Supervised training of embedder + context net, subgraph sampling, augmentation and prediction."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .models import ModelConfig, SegmentationModel, SuperpointBatch, sample_superpoint
from .pipeline import Scene
from .spg import SuperpointGraph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch: int = 2
    epochs: int = 60
    decay_epochs: tuple = (35, 50)
    decay: float = 0.7
    clip: float = 1.0
    max_superpoints: int = 512
    order: int = 3
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0 or self.clip <= 0 or self.max_superpoints < 1:
            raise ValueError("training hyperparameters must be positive")


class TrainingDiverged(FloatingPointError):
    pass


# -- subgraph sampling -----------------------------------------------------
def _neighbor_lists(n, edges):
    nbrs = [[] for _ in range(n)]
    for s, t in np.asarray(edges).tolist():
        nbrs[s].append(t)
        nbrs[t].append(s)
    return nbrs


def _hops(nbrs, seed, order):
    seen = {seed: 0}
    frontier = deque([seed])
    out = [seed]
    while frontier:
        u = frontier.popleft()
        if seen[u] == order:
            continue
        for v in nbrs[u]:
            if v not in seen:
                seen[v] = seen[u] + 1
                out.append(v)
                frontier.append(v)
    return out


def sample_subgraph(graph: SuperpointGraph, rng, order=3, cap=512, n_minp=40) -> np.ndarray:
    """Union of random order-``order`` neighborhoods around qualifying seeds (|S| > n_minp).

    Stops before the count of qualifying superpoints would exceed ``cap``.
    Returns sorted node ids of the induced subgraph.
    """
    n = graph.n_nodes
    if n == 0:
        raise ValueError("empty superpoint graph")
    qualifies = graph.superpoints.counts > n_minp
    if not qualifies.any():
        log.warning("no superpoint with more than %d points; using the whole graph", n_minp)
        return np.arange(n)
    nbrs = _neighbor_lists(n, graph.edges)
    chosen = np.zeros(n, bool)
    seeds = rng.permutation(np.flatnonzero(qualifies))
    for s in seeds:
        if chosen[s]:
            continue
        hood = np.asarray(_hops(nbrs, int(s), order))
        new = hood[~chosen[hood]]
        total = int((chosen & qualifies).sum() + qualifies[new].sum())
        if total > cap:
            if not chosen.any():
                # a single neighborhood already too large: keep its nearest qualifying part
                q = np.cumsum(qualifies[new])
                chosen[new[q <= cap]] = True
            break
        chosen[new] = True
    return np.flatnonzero(chosen)


# -- augmentation ----------------------------------------------------------
def truncated_normal(rng, sigma, bound, size):
    """N(0, sigma^2) restricted to [-bound, bound] by resampling."""
    out = rng.normal(0.0, sigma, size) if sigma > 0 else np.zeros(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def augment(points, rng, sigma=0.01, bound=0.05, angle=None):
    """Rotate normalized XY by one random angle and jitter every feature."""
    pts = np.array(points, dtype=np.float64)
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    if sigma > 0:
        pts += truncated_normal(rng, sigma, bound, pts.shape)
    return pts


# -- batches ---------------------------------------------------------------
def make_batch(parts, rng, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None, train=False) -> SuperpointBatch:
    """Block-diagonal union of ``(scene, node_ids)`` pairs."""
    pts, diams, emb, edges, feats, labels, counts = [], [], [], [], [], [], []
    offset = 0
    for scene, nodes in parts:
        g = scene.graph if nodes is None else scene.graph.subgraph(nodes)
        ids = np.arange(scene.graph.n_nodes) if nodes is None else np.asarray(nodes)
        sp = g.superpoints
        F = g.normalized_features()
        for local, c in enumerate(ids):
            if sp.counts[local] < model_cfg.n_minp:
                continue
            x = sample_superpoint(rng, scene.positions, scene.colors, scene.geof, scene.members(c),
                                  sp.centroids[local], model_cfg.n_p)
            if train and train_cfg is not None and train_cfg.augment:
                x = augment(x, rng, train_cfg.jitter_sigma, train_cfg.jitter_clip)
            pts.append(x)
            diams.append(sp.diameters[local])
            emb.append(offset + local)
        edges.append(g.edges + offset)
        feats.append(F)
        labels.append(sp.labels)
        counts.append(sp.counts)
        offset += g.n_nodes
    B = len(pts)
    return SuperpointBatch(
        n_nodes=offset,
        points=np.stack(pts) if B else np.zeros((0, model_cfg.n_p, 11)),
        diameters=np.asarray(diams, dtype=np.float64),
        embedded=np.asarray(emb, dtype=np.int64),
        edges=np.concatenate(edges).astype(np.int64),
        edge_features=np.concatenate(feats),
        labels=np.concatenate(labels),
        counts=np.concatenate(counts),
    )


def loss_mask(batch: SuperpointBatch, n_minp=40) -> np.ndarray:
    return (batch.counts > n_minp) & (batch.labels >= 0)


# -- training --------------------------------------------------------------
def lr_at(epoch, cfg: TrainConfig) -> float:
    """Learning rate during ``epoch`` (0-based): decayed once per passed decay epoch."""
    return cfg.lr * cfg.decay ** sum(1 for e in cfg.decay_epochs if epoch >= e)


def train_loop(scenes, model_cfg: ModelConfig, cfg: TrainConfig, curve_path=None, model=None,
               progress=None):
    """Returns (model, rows) where rows are (epoch, mean loss, lr)."""
    if not scenes:
        raise ValueError("no training scenes")
    rng = np.random.default_rng(cfg.seed)
    model = model or SegmentationModel(model_cfg, seed=cfg.seed)
    params = model.params()
    opt = nn.Adam(params, lr=cfg.lr)
    rows = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        order = rng.permutation(len(scenes))
        losses = []
        for b in range(0, len(order), cfg.batch):
            parts = []
            for i in order[b:b + cfg.batch]:
                nodes = sample_subgraph(scenes[i].graph, rng, cfg.order, cfg.max_superpoints, model_cfg.n_minp)
                parts.append((scenes[i], nodes))
            batch = make_batch(parts, rng, model_cfg, cfg, train=True)
            mask = loss_mask(batch, model_cfg.n_minp)
            if not mask.any():
                continue
            model.zero_grad()
            tape = nn.Tape()
            logits = model.forward(tape, batch, train=True)
            loss = tape.cross_entropy(logits, np.maximum(batch.labels, 0), mask)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b // cfg.batch}: "
                                       f"max |logit| {np.abs(logits.value).max():.3g}")
            tape.backward(loss)
            nn.clip_gradients(params, cfg.clip)
            assert all(np.abs(p.grad).max(initial=0.0) <= cfg.clip for p in params)
            opt.step()
            losses.append(float(loss.value))
        rows.append((epoch, float(np.mean(losses)) if losses else float("nan"), opt.lr))
        if progress:
            progress(rows[-1])
    if curve_path is not None:
        write_curve(curve_path, rows)
    return model, rows


def write_curve(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=" ")
        w.writerow(["epoch", "loss", "lr"])
        for e, l, lr in rows:
            w.writerow([e, f"{l:.10g}", f"{lr:.10g}"])


# -- inference -------------------------------------------------------------
def superpoint_logits(model: SegmentationModel, scene: Scene, runs=10, seed=0, chunk=512) -> np.ndarray:
    """Logits per superpoint, averaged over ``runs`` differently seeded point samples."""
    if scene.graph.feature_stats is None:
        raise ValueError("scene has no superedge feature statistics; attach the training statistics")
    total = None
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        batch = make_batch([(scene, None)], rng, model.cfg)
        out = _chunked_forward(model, batch, chunk)
        total = out if total is None else total + out
    return total / runs


def _chunked_forward(model, batch: SuperpointBatch, chunk):
    # eval-mode batch norm makes embeddings independent across superpoints, so chunking is exact
    tape = nn.Tape(record=False)
    zs = []
    for lo in range(0, len(batch.embedded), chunk):
        hi = lo + chunk
        zs.append(model.embedder(tape, batch.points[lo:hi], batch.diameters[lo:hi], False).value)
    z = np.zeros((batch.n_nodes, model.cfg.embed_dim))
    if zs:
        z[batch.embedded] = np.concatenate(zs)
    if model.context is None:
        return z
    return model.context(tape, nn.Var(z, False), batch.edges, batch.edge_features, False).value


def predict(scene: Scene, model: SegmentationModel, runs=10, seed=0, postprocess=None):
    """Per-point labels on the original cloud, plus the superpoint labels and logits."""
    logits = superpoint_logits(model, scene, runs, seed)
    sp_labels = np.argmax(logits, axis=1) if postprocess is None else postprocess(logits, scene)
    return scene.point_labels(sp_labels), sp_labels, logits


# -- checkpoints -----------------------------------------------------------
def save_model(path, model: SegmentationModel, meta: dict | None = None):
    m = dict(meta or {})
    m["model_config"] = model.cfg.to_dict()
    nn.save_checkpoint(path, model.state(), m)


def load_model(path):
    arrays, meta = nn.load_checkpoint(path)
    model = SegmentationModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state(arrays)
    return model, meta
