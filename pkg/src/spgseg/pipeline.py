"""Geometric stages glued together: voxelize -> features -> partition -> superpoint graph."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data, geomfeat, graphs, partition, spg
from .config import PipelineConfig


@dataclass
class Scene:
    """Everything the learning stage needs about one cloud, at voxel resolution."""

    vmap: data.VoxelMap
    geof: np.ndarray
    component_of: np.ndarray
    graph: spg.SuperpointGraph
    member_order: np.ndarray = field(init=False)
    member_ptr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.member_order = np.argsort(self.component_of, kind="stable")
        counts = np.bincount(self.component_of, minlength=self.graph.n_nodes)
        self.member_ptr = np.r_[0, np.cumsum(counts)]

    @property
    def cloud(self) -> data.PointCloud:
        return self.vmap.voxel_cloud

    @property
    def positions(self):
        return self.cloud.positions

    @property
    def colors(self):
        return self.cloud.colors_or_zeros()

    def members(self, c: int) -> np.ndarray:
        return self.member_order[self.member_ptr[c]:self.member_ptr[c + 1]]

    def point_labels(self, superpoint_labels) -> np.ndarray:
        """Broadcast superpoint labels to voxels and then to the original points."""
        voxel_labels = np.asarray(superpoint_labels)[self.component_of]
        return data.unvoxelize_labels(self.vmap, voxel_labels)


def adjacency(positions, cfg: PipelineConfig) -> graphs.AdjacencyGraph:
    if cfg.adjacency == "sym-knn":
        g = graphs.sym_knn_graph(positions, min(5, len(positions) - 1))
        if np.isfinite(cfg.max_superedge_len):
            keep = g.lengths <= cfg.max_superedge_len
            g = graphs.AdjacencyGraph(g.node_count, g.edges[keep], g.lengths[keep], None, g.kind)
        return g
    return graphs.voronoi_graph(positions, cfg.max_superedge_len)


def partition_features(cloud: data.PointCloud, geof: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Per-point vector f fed to the partition: any of linearity/planarity/scattering/verticality, elevation, color."""
    groups = cfg.partition_features.split(",")
    parts = []
    if "geometric" in groups:
        parts.append(geof[:, :4])
    if "elevation" in groups:
        parts.append(geof[:, 4:5])
    if "color" in groups:
        parts.append(cloud.colors_or_zeros())
    return np.concatenate(parts, axis=1)


def compute_geometry(cloud: data.PointCloud, cfg: PipelineConfig, timings: dict | None = None):
    """Run the geometric stages; returns (vmap, geof, solution, graph) and fills ``timings``."""
    t = {} if timings is None else timings
    t0 = time.perf_counter()
    vmap = data.voxelize(cloud, cfg.voxel_size)
    v = vmap.voxel_cloud
    t["voxelization"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    k = min(cfg.knn, v.n - 1)
    nbrs = graphs.knn_indices(v.positions, k)
    geof = geomfeat.compute_features(v.positions, k, neighbors=nbrs)
    knn = graphs.edge_weights(graphs.knn_graph_from_indices(v.positions, nbrs))
    t["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    problem = partition.PartitionProblem.from_graph(knn, partition_features(v, geof, cfg), cfg.mu)
    sol = partition.cut_pursuit(problem)
    t["partition"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    adj = adjacency(v.positions, cfg)
    graph, _ = spg.build_spg(v.positions, sol.component_of, adj.edges, v.labels, v.class_count)
    t["spg"] = time.perf_counter() - t0
    return vmap, geof, sol, graph


def build_scene(cloud: data.PointCloud, cfg: PipelineConfig, timings: dict | None = None) -> Scene:
    vmap, geof, sol, graph = compute_geometry(cloud, cfg, timings)
    return Scene(vmap, geof, sol.component_of, graph)


def attach_stats(scenes, stats: spg.FeatureStats):
    for s in scenes:
        s.graph.feature_stats = stats
    return scenes
