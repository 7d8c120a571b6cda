"""Local shape descriptors: dimensionality (linearity, planarity, scattering), verticality, elevation."""

from __future__ import annotations

import numpy as np

from .graphs import knn_indices

FEATURE_NAMES = ("linearity", "planarity", "scattering", "verticality", "elevation")


class DegenerateNeighborhood(ValueError):
    pass


def covariance_eigs(cov: np.ndarray):
    """Eigen-decomposition of a stack of symmetric 3x3 matrices.

    Returns eigenvalues sorted descending and clamped at 0, with eigenvectors as
    the matching columns.
    """
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals[..., ::-1], 0.0)
    vecs = vecs[..., ::-1]
    return vals, vecs


def local_covariance_eigs(positions: np.ndarray, neighbors: np.ndarray):
    """Per-point covariance eigen-decomposition over ``neighbors`` (an (n, m) index array, m >= 3)."""
    neighbors = np.asarray(neighbors)
    if neighbors.ndim != 2 or neighbors.shape[1] < 3:
        raise DegenerateNeighborhood("neighborhoods need at least 3 points")
    pts = positions[neighbors]
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    return covariance_eigs(cov)


def dimensionality_features(eigenvalues: np.ndarray):
    """Linearity, planarity, scattering from sorted eigenvalues (n, 3).

    Uses the principal standard deviations s_k = sqrt(lambda_k), so the three
    values sum to 1.  A zero neighborhood (lambda_1 = 0) maps to (0, 0, 1) and is
    reported in the returned ``degenerate`` mask.
    """
    ev = np.atleast_2d(np.asarray(eigenvalues, dtype=np.float64))
    s = np.sqrt(np.maximum(ev, 0.0))
    degenerate = s[:, 0] <= 0
    s1 = np.where(degenerate, 1.0, s[:, 0])
    out = np.stack([(s[:, 0] - s[:, 1]) / s1, (s[:, 1] - s[:, 2]) / s1, s[:, 2] / s1], axis=1)
    out[degenerate] = (0.0, 0.0, 1.0)
    return out, degenerate


def verticality(eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    """Vertical component of the normalized sum of |e_k| weighted by sqrt(lambda_k)."""
    ev = np.atleast_2d(eigenvalues)
    vecs = eigenvectors.reshape(-1, 3, 3)
    v = np.einsum("nk,nik->ni", np.sqrt(np.maximum(ev, 0.0)), np.abs(vecs))
    norm = np.linalg.norm(v, axis=1)
    out = np.zeros(len(v))
    ok = norm > 0
    out[ok] = v[ok, 2] / norm[ok]
    return out


def elevation(positions: np.ndarray) -> np.ndarray:
    z = positions[:, 2]
    lo, hi = z.min(), z.max()
    if hi == lo:
        return np.zeros(len(z))
    return (z - lo) / (hi - lo)


def compute_features(positions: np.ndarray, k: int = 10, neighbors: np.ndarray | None = None) -> np.ndarray:
    """(n, 5) features: linearity, planarity, scattering, verticality, elevation.

    The neighborhood of a point is itself plus its k nearest neighbors.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if neighbors is None:
        neighbors = knn_indices(positions, k)
    hood = np.concatenate([np.arange(len(positions))[:, None], neighbors], axis=1)
    vals, vecs = local_covariance_eigs(positions, hood)
    dims, _ = dimensionality_features(vals)
    feats = np.empty((len(positions), 5))
    feats[:, :3] = np.clip(dims, 0.0, 1.0)
    feats[:, 3] = np.clip(verticality(vals, vecs), 0.0, 1.0)
    feats[:, 4] = elevation(positions)
    return feats


def dump_features(features: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("idx lin plan scat vert elev\n")
        for i, row in enumerate(features.tolist()):
            fh.write(f"{i} " + " ".join(f"{v:.10g}" for v in row) + "\n")
