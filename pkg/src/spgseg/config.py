"""Pipeline configuration: flat ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

FORMAT_VERSION = 1
PARTITION_FEATURE_GROUPS = ("geometric", "elevation", "color")


@dataclass
class PipelineConfig:
    # geometry
    voxel_size: float = 0.0  # 0 keeps full resolution
    knn: int = 10
    mu: float = 0.03
    adjacency: str = "delaunay"  # delaunay | sym-knn
    max_superedge_len: float = math.inf
    partition_features: str = "geometric,elevation"  # any of geometric, elevation, color
    # model
    n_p: int = 128
    n_minp: int = 40
    d_z: int = 32
    T: int = 10
    ecc: str = "vv"
    ablation: str = "Best"
    # training
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
    runs: int = 10
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.adjacency not in ("delaunay", "sym-knn"):
            raise ValueError(f"adjacency must be delaunay or sym-knn, got {self.adjacency!r}")
        if self.ecc not in ("vv", "mv"):
            raise ValueError(f"ecc must be vv or mv, got {self.ecc!r}")
        if self.voxel_size < 0 or self.mu < 0 or self.knn < 1:
            raise ValueError("voxel_size and mu must be >= 0, knn >= 1")
        groups = [g.strip() for g in self.partition_features.split(",") if g.strip()]
        if not groups or set(groups) - set(PARTITION_FEATURE_GROUPS):
            raise ValueError(f"partition_features must list {'/'.join(PARTITION_FEATURE_GROUPS)}, "
                             f"got {self.partition_features!r}")
        self.partition_features = ",".join(g for g in PARTITION_FEATURE_GROUPS if g in groups)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    def hash(self) -> str:
        """Digest of the settings that influence artifacts (execution knobs excluded)."""
        d = self.to_dict()
        for k in ("threads", "deterministic", "extra"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def updated(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(kind, raw: str):
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def _field_types():
    return {f.name: f.type for f in fields(PipelineConfig)}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types or key == "extra":
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(types[key], val)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return PipelineConfig(**values)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if k == "extra":
            continue
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
