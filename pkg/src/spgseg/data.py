"""Point clouds: file I/O, voxel subsampling and synthetic indoor scenes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = -1

CLASS_NAMES = ("floor", "wall", "table-top", "table-leg", "chair-seat", "chair-back")
FLOOR, WALL, TABLE_TOP, TABLE_LEG, CHAIR_SEAT, CHAIR_BACK = range(6)


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed or fails validation."""


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    class_count: int = len(CLASS_NAMES)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise CloudFormatError("positions must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(self.positions)):
            raise CloudFormatError("non-finite coordinate in cloud")
        n = len(self.positions)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise CloudFormatError("colors must have shape (n, 3)")
            if not np.all(np.isfinite(self.colors)) or self.colors.min() < 0 or self.colors.max() > 1:
                raise CloudFormatError("colors must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise CloudFormatError("labels must have shape (n,)")
            if self.labels.min() < UNLABELED or self.labels.max() >= self.class_count:
                raise CloudFormatError("label outside {-1, 0..K-1}")

    def __len__(self):
        return len(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    def colors_or_zeros(self) -> np.ndarray:
        if self.colors is None:
            return np.zeros_like(self.positions)
        return self.colors


@dataclass
class VoxelMap:
    """Maps every original point to the voxel that absorbed it."""

    voxel_size: float | None
    voxel_of: np.ndarray
    voxel_cloud: PointCloud

    @property
    def n_voxels(self) -> int:
        return self.voxel_cloud.n


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _parse_float(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise CloudFormatError(f"line {lineno}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        raise CloudFormatError(f"line {lineno}: non-finite value {token!r}")
    return value


def _split_row(line: str) -> list[str]:
    return [t for t in line.replace(",", " ").split() if t]


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_csv(path, class_count: int = len(CLASS_NAMES)) -> PointCloud:
    """Read ``x y z [r g b] [label]`` rows, comma or whitespace separated.

    Colors in a CSV are taken as already normalized to [0, 1].
    """
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = _split_row(line)
            if not tokens or tokens[0].startswith("#"):
                continue
            if not rows and not _is_number(tokens[0]):
                continue  # header
            if width is None:
                width = len(tokens)
                if width not in (3, 4, 6, 7):
                    raise CloudFormatError(f"line {lineno}: expected 3, 4, 6 or 7 columns, got {width}")
            elif len(tokens) != width:
                raise CloudFormatError(f"line {lineno}: expected {width} columns, got {len(tokens)}")
            rows.append([_parse_float(t, lineno) for t in tokens])
    if not rows:
        raise CloudFormatError(f"{path}: no records")
    data = np.asarray(rows, dtype=np.float64)
    colors = data[:, 3:6] if width in (6, 7) else None
    labels = data[:, -1].astype(np.int64) if width in (4, 7) else None
    return PointCloud(data[:, :3], colors, labels, class_count)


def read_ply(path, class_count: int = len(CLASS_NAMES)) -> PointCloud:
    """Read an ASCII PLY 1.0 file with a vertex element (x, y, z, optional uchar rgb, optional label)."""
    with open(path) as fh:
        return parse_ply_text(fh.read(), path, class_count)


def parse_ply_text(text: str, path="<stream>", class_count: int = len(CLASS_NAMES)) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}: missing 'ply' magic")
    props: list[str] = []
    n_vertex = None
    in_vertex = False
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise CloudFormatError(f"line {lineno}: only ascii PLY is supported")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                n_vertex = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            header_end = lineno
            break
    if header_end is None or n_vertex is None:
        raise CloudFormatError(f"{path}: incomplete PLY header")
    for required in ("x", "y", "z"):
        if required not in props:
            raise CloudFormatError(f"{path}: vertex property {required!r} missing")
    body = lines[header_end: header_end + n_vertex]
    if len(body) < n_vertex:
        raise CloudFormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    data = np.empty((n_vertex, len(props)))
    for k, line in enumerate(body):
        lineno = header_end + k + 1
        tokens = line.split()
        if len(tokens) < len(props):
            raise CloudFormatError(f"line {lineno}: expected {len(props)} values")
        data[k] = [_parse_float(t, lineno) for t in tokens[: len(props)]]
    col = {name: i for i, name in enumerate(props)}
    positions = data[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    labels = data[:, col["label"]].astype(np.int64) if "label" in col else None
    return PointCloud(positions, colors, labels, class_count)


def load_cloud(path, fmt: str | None = None, class_count: int = len(CLASS_NAMES)) -> PointCloud:
    path = Path(path)
    fmt = fmt or ("ply-ascii" if path.suffix.lower() == ".ply" else "csv")
    if fmt in ("ply", "ply-ascii"):
        return read_ply(path, class_count)
    if fmt == "csv":
        return read_csv(path, class_count)
    raise CloudFormatError(f"unknown cloud format {fmt!r}")


def save_cloud(cloud: PointCloud, path, labels: np.ndarray | None = None, fmt: str | None = None) -> None:
    """Write a cloud; ``labels`` (if given) replaces the cloud's own label column."""
    path = Path(path)
    fmt = fmt or ("ply-ascii" if path.suffix.lower() == ".ply" else "csv")
    path.write_text(format_cloud(cloud, fmt, labels))


def format_cloud(cloud: PointCloud, fmt: str = "ply", labels: np.ndarray | None = None) -> str:
    labels = cloud.labels if labels is None else np.asarray(labels, dtype=np.int64)
    buf = io.StringIO()
    if fmt in ("ply", "ply-ascii"):
        buf.write("ply\nformat ascii 1.0\n")
        buf.write(f"element vertex {cloud.n}\n")
        buf.write("property double x\nproperty double y\nproperty double z\n")
        if cloud.colors is not None:
            buf.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        if labels is not None:
            buf.write("property int label\n")
        buf.write("end_header\n")
        cols = [cloud.positions]
        fmts = ["%.17g"] * 3
        if cloud.colors is not None:
            cols.append(np.rint(cloud.colors * 255))
            fmts += ["%d"] * 3
    else:
        writer = csv.writer(buf, delimiter=" ", lineterminator="\n")
        header = ["x", "y", "z"] + (["r", "g", "b"] if cloud.colors is not None else [])
        writer.writerow(header + (["label"] if labels is not None else []))
        cols = [cloud.positions]
        fmts = ["%.17g"] * 3
        if cloud.colors is not None:
            cols.append(cloud.colors)
            fmts += ["%.17g"] * 3
    if labels is not None:
        cols.append(labels[:, None])
        fmts.append("%d")
    np.savetxt(buf, np.hstack(cols), fmt=fmts, delimiter=" ")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------

def majority_labels(group_of: np.ndarray, labels: np.ndarray, n_groups: int, class_count: int) -> np.ndarray:
    """Per-group majority over labeled members; ties go to the smallest class, empty groups get -1."""
    mask = labels >= 0
    counts = np.bincount(group_of[mask] * class_count + labels[mask],
                         minlength=n_groups * class_count).reshape(n_groups, class_count)
    out = counts.argmax(axis=1)
    out[counts.sum(axis=1) == 0] = UNLABELED
    return out


def label_histograms(group_of, labels, n_groups, class_count) -> np.ndarray:
    mask = labels >= 0
    return np.bincount(group_of[mask] * class_count + labels[mask],
                       minlength=n_groups * class_count).reshape(n_groups, class_count)


def voxelize(cloud: PointCloud, voxel_size: float | None) -> VoxelMap:
    """Bin points on the grid ``floor(p / voxel_size)`` and average each bin.

    ``voxel_size=None`` (or 0) keeps the full cloud: every point is its own voxel.
    Voxels are ordered lexicographically by grid cell.
    """
    if not voxel_size:
        return VoxelMap(None, np.arange(cloud.n), cloud)
    if voxel_size < 0:
        raise ValueError("voxel_size must be positive")
    cells = np.floor(cloud.positions / voxel_size).astype(np.int64)
    cells -= cells.min(axis=0)
    extent = cells.max(axis=0) + 1
    if np.prod(extent.astype(float)) < 2 ** 62:
        keys = (cells[:, 0] * extent[1] + cells[:, 1]) * extent[2] + cells[:, 2]
        _, voxel_of = np.unique(keys, return_inverse=True)
    else:
        _, voxel_of = np.unique(cells, axis=0, return_inverse=True)
    voxel_of = voxel_of.ravel()
    nv = int(voxel_of.max()) + 1
    counts = np.bincount(voxel_of, minlength=nv).astype(np.float64)

    def mean(values):
        return np.stack([np.bincount(voxel_of, values[:, d], minlength=nv) for d in range(3)], axis=1) / counts[:, None]

    positions = mean(cloud.positions)
    colors = None if cloud.colors is None else np.clip(mean(cloud.colors), 0.0, 1.0)
    labels = None
    if cloud.labels is not None:
        labels = majority_labels(voxel_of, cloud.labels, nv, cloud.class_count)
    return VoxelMap(float(voxel_size), voxel_of, PointCloud(positions, colors, labels, cloud.class_count))


def unvoxelize_labels(vmap: VoxelMap, voxel_labels) -> np.ndarray:
    voxel_labels = np.asarray(voxel_labels)
    if voxel_labels.shape != (vmap.n_voxels,):
        raise ValueError(f"expected {vmap.n_voxels} voxel labels, got shape {voxel_labels.shape}")
    return voxel_labels[vmap.voxel_of]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Knobs of the synthetic room generator.

    Heights and sizes of tables and chair seats overlap on purpose so that
    telling them apart needs their surroundings (legs below vs. a back above).
    """

    n_points: int = 10_000
    noise: float = 0.004
    room_size: tuple[float, float] = (3.0, 3.5)
    wall_height: tuple[float, float] = (2.0, 2.4)
    n_walls: int = 2
    n_tables: tuple[int, int] = (1, 2)
    n_chairs: tuple[int, int] = (2, 3)
    furniture_density: float = 4.0
    floor_only: bool = False
    colors: bool = True


@dataclass
class _Surface:
    kind: str
    label: int
    params: dict = field(default_factory=dict)
    area: float = 0.0
    density: float = 1.0


def _rect(origin, u, v, label, density=1.0):
    origin, u, v = (np.asarray(a, dtype=float) for a in (origin, u, v))
    return _Surface("rect", label, {"origin": origin, "u": u, "v": v},
                    float(np.linalg.norm(np.cross(u, v))), density)


def _cylinder(base, radius, height, label, density=1.0):
    return _Surface("cyl", label, {"base": np.asarray(base, float), "r": radius, "h": height},
                    2 * math.pi * radius * height, density)


def _sample(surface: _Surface, n: int, rng: np.random.Generator) -> np.ndarray:
    p = surface.params
    if surface.kind == "rect":
        a, b = rng.random(n), rng.random(n)
        return p["origin"] + a[:, None] * p["u"] + b[:, None] * p["v"]
    theta = rng.random(n) * 2 * math.pi
    z = rng.random(n) * p["h"]
    return p["base"] + np.stack([p["r"] * np.cos(theta), p["r"] * np.sin(theta), z], axis=1)


def _place(rng, room, size, placed, margin=0.15, tries=200):
    """Axis-aligned footprint placement avoiding overlap with ``placed`` boxes."""
    w, d = size
    for _ in range(tries):
        x = rng.uniform(0.25, room[0] - w - 0.1)
        y = rng.uniform(0.25, room[1] - d - 0.1)
        box = (x - margin, y - margin, x + w + margin, y + d + margin)
        if all(box[2] < q[0] or box[0] > q[2] or box[3] < q[1] or box[1] > q[3] for q in placed):
            placed.append(box)
            return x, y
    return None


def _scene_surfaces(spec: SceneSpec, rng: np.random.Generator) -> list[_Surface]:
    room = (rng.uniform(*spec.room_size), rng.uniform(*spec.room_size))
    surfaces = [_rect((0, 0, 0), (room[0], 0, 0), (0, room[1], 0), FLOOR)]
    if spec.floor_only:
        return surfaces
    height = rng.uniform(*spec.wall_height)
    walls = [((0, 0, 0), (room[0], 0, 0)), ((0, 0, 0), (0, room[1], 0)),
             ((room[0], 0, 0), (0, room[1], 0)), ((0, room[1], 0), (room[0], 0, 0))]
    for origin, u in walls[: spec.n_walls]:
        surfaces.append(_rect(origin, u, (0, 0, height), WALL))

    fd = spec.furniture_density
    placed: list[tuple] = []
    leg_r = 0.025
    for _ in range(rng.integers(spec.n_tables[0], spec.n_tables[1] + 1)):
        size = (rng.uniform(0.55, 1.1), rng.uniform(0.5, 0.8))
        h = rng.uniform(0.5, 0.8)
        spot = _place(rng, room, size, placed)
        if spot is None:
            continue
        x, y = spot
        surfaces.append(_rect((x, y, h), (size[0], 0, 0), (0, size[1], 0), TABLE_TOP, fd))
        inset = 0.06
        for cx in (x + inset, x + size[0] - inset):
            for cy in (y + inset, y + size[1] - inset):
                surfaces.append(_cylinder((cx, cy, 0.0), leg_r, h - 0.01, TABLE_LEG, fd))
    for _ in range(rng.integers(spec.n_chairs[0], spec.n_chairs[1] + 1)):
        s = rng.uniform(0.42, 0.6)
        h = rng.uniform(0.42, 0.65)
        back_h = rng.uniform(0.35, 0.55)
        spot = _place(rng, room, (s, s), placed)
        if spot is None:
            continue
        x, y = spot
        surfaces.append(_rect((x, y, h), (s, 0, 0), (0, s, 0), CHAIR_SEAT, fd))
        side = rng.integers(4)
        edges = [((x, y, h + 0.01), (s, 0, 0)), ((x, y, h + 0.01), (0, s, 0)),
                 ((x + s, y, h + 0.01), (0, s, 0)), ((x, y + s, h + 0.01), (s, 0, 0))]
        origin, u = edges[side]
        surfaces.append(_rect(origin, u, (0, 0, back_h), CHAIR_BACK, fd))
    return surfaces


def synth_scene(seed: int, spec: SceneSpec | None = None) -> PointCloud:
    """Labeled synthetic room: floor, walls, tables (top + 4 legs) and chairs (seat + back).

    Deterministic in ``seed``; the point budget is split across surfaces in
    proportion to area times density, furniture being sampled more densely.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    surfaces = _scene_surfaces(spec, rng)
    mass = np.array([s.area * s.density for s in surfaces])
    share = mass / mass.sum() * spec.n_points
    counts = np.floor(share).astype(int)
    remainder = spec.n_points - counts.sum()
    counts[np.argsort(-(share - counts), kind="stable")[:remainder]] += 1

    positions, labels, colors = [], [], []
    for surface, count in zip(surfaces, counts):
        if count == 0:
            continue
        positions.append(_sample(surface, count, rng))
        labels.append(np.full(count, surface.label))
        base = rng.uniform(0.2, 0.8, size=3)
        colors.append(np.clip(base + rng.normal(0, 0.03, size=(count, 3)), 0, 1))
    positions = np.concatenate(positions)
    if spec.noise > 0:
        positions = positions + rng.normal(0.0, spec.noise, size=positions.shape)
    return PointCloud(positions, np.concatenate(colors) if spec.colors else None,
                      np.concatenate(labels), len(CLASS_NAMES))
