"""Command-line interface: ``spgseg <command> ...``.

Each stage reads and writes files so runs can be audited or resumed.  Artifacts
carry a format version and the hash of the configuration that produced them.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import logging
import os
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import data, geomfeat, graphs, nncore, partition, pipeline, spg
from . import evaluation as ev
from . import train as tr
from .config import FORMAT_VERSION, PipelineConfig, dump_config, load_config
from .models import ModelConfig, SegmentationModel, icrf

log = logging.getLogger("spgseg")


class StageError(RuntimeError):
    pass


# -- artifact files --------------------------------------------------------
def save_npz(path, cfg: PipelineConfig, stage: str, **arrays):
    """npz with a fixed zip timestamp so identical content gives identical bytes."""
    meta = {"format_version": FORMAT_VERSION, "config_hash": cfg.hash(), "stage": stage,
            "config": cfg.to_dict()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True, default=str).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_npz(path, stage: str | None = None):
    path = Path(path)
    if not path.exists():
        raise StageError(f"input file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    if "__meta__" not in arrays:
        raise StageError(f"{path}: not a pipeline artifact")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise StageError(f"{path}: artifact format version {meta.get('format_version')} "
                         f"does not match {FORMAT_VERSION}; rerun the producing stage")
    if stage is not None and meta.get("stage") != stage:
        raise StageError(f"{path}: expected a '{stage}' artifact, got '{meta.get('stage')}'")
    return arrays, meta


def _cloud_arrays(cloud: data.PointCloud) -> dict:
    out = {"positions": cloud.positions}
    if cloud.colors is not None:
        out["colors"] = cloud.colors
    if cloud.labels is not None:
        out["labels"] = cloud.labels
    return out


def _cloud_from(arrays, prefix="") -> data.PointCloud:
    return data.PointCloud(arrays[prefix + "positions"], arrays.get(prefix + "colors"),
                           arrays.get(prefix + "labels"))


def _check_hash(meta, cfg: PipelineConfig, path):
    if meta.get("config_hash") != cfg.hash():
        log.warning("%s was produced with config %s, current config is %s", path, meta.get("config_hash"), cfg.hash())


def scene_from_files(spg_path) -> pipeline.Scene:
    """Rebuild a :class:`pipeline.Scene` from an SPG file and the partition artifact it names."""
    spg_path = Path(spg_path)
    if not spg_path.exists():
        raise StageError(f"input file not found: {spg_path}")
    try:
        graph = spg.SuperpointGraph.load(spg_path)
    except ValueError as exc:
        raise StageError(f"{spg_path}: {exc}") from None
    part_path = Path(graph.meta.get("partition_file", ""))
    if not part_path.is_absolute():
        part_path = spg_path.parent / part_path
    arrays, _ = load_npz(part_path, "partition")
    vcloud = _cloud_from(arrays)
    vmap = data.VoxelMap(None, arrays["voxel_of"], vcloud)
    return pipeline.Scene(vmap, arrays["geof"], arrays["component_of"], graph)


# -- commands --------------------------------------------------------------
def cmd_synth(args, cfg):
    spec = data.SceneSpec(n_points=args.points)
    cloud = data.synth_scene(cfg.seed, spec)
    if args.output in (None, "-"):
        sys.stdout.write(data.format_cloud(cloud, "ply"))
    else:
        data.save_cloud(cloud, args.output)
        print(f"wrote {cloud.n} points to {args.output}")


def _read_input_cloud(path) -> data.PointCloud:
    if path == "-":
        return data.parse_ply_text(sys.stdin.read())
    if not Path(path).exists():
        raise StageError(f"input file not found: {path}")
    return data.load_cloud(path)


def cmd_voxelize(args, cfg):
    cloud = _read_input_cloud(args.input)
    vmap = data.voxelize(cloud, cfg.voxel_size)
    arrays = _cloud_arrays(vmap.voxel_cloud)
    arrays["voxel_of"] = vmap.voxel_of
    for k, v in _cloud_arrays(cloud).items():
        arrays["orig_" + k] = v
    save_npz(args.output, cfg, "voxelize", **arrays)
    print(f"{cloud.n} points -> {vmap.n_voxels} voxels")


def cmd_features(args, cfg):
    arrays, meta = load_npz(args.input, "voxelize")
    _check_hash(meta, cfg, args.input)
    pos = arrays["positions"]
    k = min(cfg.knn, len(pos) - 1)
    nbrs = graphs.knn_indices(pos, k)
    arrays["geof"] = geomfeat.compute_features(pos, k, neighbors=nbrs)
    g = graphs.edge_weights(graphs.knn_graph_from_indices(pos, nbrs))
    arrays["knn_edges"] = g.edges
    arrays["knn_weights"] = g.weights
    save_npz(args.output, cfg, "features", **arrays)
    print(f"features for {len(pos)} points, {g.edge_count} k-NN edges")


def cmd_partition(args, cfg):
    arrays, meta = load_npz(args.input, "features")
    _check_hash(meta, cfg, args.input)
    cloud = _cloud_from(arrays)
    feats = pipeline.partition_features(cloud, arrays["geof"], cfg)
    problem = partition.PartitionProblem(feats, arrays["knn_edges"], arrays["knn_weights"], cfg.mu)
    sol = partition.cut_pursuit(problem)
    arrays["component_of"] = sol.component_of
    arrays["energy"] = np.array(sol.energy)
    save_npz(args.output, cfg, "partition", **arrays)
    print(f"{sol.n_components} components, energy {sol.energy:.6g}")


def cmd_spg(args, cfg):
    arrays, meta = load_npz(args.input, "partition")
    _check_hash(meta, cfg, args.input)
    pos = arrays["positions"]
    adj = pipeline.adjacency(pos, cfg)
    graph, _ = spg.build_spg(pos, arrays["component_of"], adj.edges, arrays.get("labels"))
    out = Path(args.output)
    graph.meta = {"config_hash": cfg.hash(),
                  "partition_file": os.path.relpath(Path(args.input).resolve(), out.resolve().parent)}
    graph.save(out)
    print(f"{graph.n_nodes} superpoints, {graph.n_edges} superedges")


def _model_config(cfg: PipelineConfig) -> ModelConfig:
    base = ModelConfig(d_z=cfg.d_z, T=cfg.T, ecc=cfg.ecc, n_p=cfg.n_p, n_minp=cfg.n_minp)
    return ev.variant_config(cfg.ablation, base)


def _train_config(cfg: PipelineConfig) -> tr.TrainConfig:
    return tr.TrainConfig(lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs, decay_epochs=cfg.decay_epochs,
                          decay=cfg.decay, clip=cfg.clip, max_superpoints=cfg.max_superpoints, order=cfg.order,
                          jitter_sigma=cfg.jitter_sigma, jitter_clip=cfg.jitter_clip, seed=cfg.seed)


def cmd_train(args, cfg):
    scenes = [scene_from_files(p) for p in args.inputs]
    stats = spg.FeatureStats.fit([s.graph for s in scenes])
    pipeline.attach_stats(scenes, stats)
    mcfg = _model_config(cfg)

    def progress(row):
        log.info("epoch %d loss %.4f lr %.4g", *row)
    model, rows = tr.train_loop(scenes, mcfg, _train_config(cfg), args.curve, progress=progress)
    meta = {"format_version": FORMAT_VERSION, "config_hash": cfg.hash(), "ablation": cfg.ablation,
            "feature_stats": stats.to_json()}
    if cfg.ablation == "iCRF":
        meta["icrf_sigma"] = ev.fit_icrf_sigma(model, scenes, seed=cfg.seed)
    tr.save_model(args.output, model, meta)
    print(f"trained {cfg.ablation} for {len(rows)} epochs, final loss {rows[-1][1]:.4f}" if rows else
          "no epochs run")


def _load_model(path):
    if not Path(path).exists():
        raise StageError(f"model file not found: {path}")
    model, meta = tr.load_model(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise StageError(f"{path}: model format version {meta.get('format_version')} does not match")
    return model, meta


def _postprocess(meta):
    if meta.get("ablation") == "iCRF":
        sigma = float(meta["icrf_sigma"])
        return lambda U, s: icrf(U, s.graph.edges, sigma)
    return None


def cmd_infer(args, cfg):
    model, meta = _load_model(args.model)
    scene = scene_from_files(args.input)
    scene.graph.feature_stats = spg.FeatureStats.from_json(meta["feature_stats"])
    labels, _, _ = tr.predict(scene, model, cfg.runs, cfg.seed, _postprocess(meta))
    np.savetxt(args.output, labels, fmt="%d")
    print(f"wrote {len(labels)} labels to {args.output}")


def cmd_eval(args, cfg):
    if not Path(args.pred).exists():
        raise StageError(f"input file not found: {args.pred}")
    pred = np.loadtxt(args.pred, dtype=np.int64, ndmin=1)
    gt_cloud = _read_input_cloud(args.gt)
    if gt_cloud.labels is None:
        raise StageError(f"{args.gt} has no labels")
    K = gt_cloud.class_count
    rows = {"prediction": ev.metrics(pred, gt_cloud.labels, K)}
    if args.partition:
        arrays, _ = load_npz(args.partition, "partition")
        rows["Perfect"] = ev.perfect_bound(arrays["component_of"][arrays["voxel_of"]], gt_cloud.labels, K)
    print(ev.metrics_table(rows))
    if args.csv:
        Path(args.csv).write_text(ev.metrics_csv(rows))


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_all
    worst_ops, worst_model, lines = run_all(seed=cfg.seed)
    for line in lines:
        print(line)
    ok = worst_ops < 1e-6 and worst_model < 1e-4
    print(f"ops max rel. error {worst_ops:.3e} (< 1e-6), model max rel. error {worst_model:.3e} (< 1e-4): "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def bench_once(cloud, cfg: PipelineConfig, model=None, runs=1) -> dict:
    """Wall time of each stage on ``cloud`` (inference with an untrained model if none given)."""
    t = {}
    scene = pipeline.build_scene(cloud, cfg, t)
    if model is None:
        model = SegmentationModel(_model_config(cfg), seed=cfg.seed)
    t0 = time.perf_counter()
    if scene.graph.n_edges:
        stats = spg.FeatureStats.fit([scene.graph])
    else:
        stats = spg.FeatureStats(np.zeros(spg.N_EDGE_FEATURES), np.ones(spg.N_EDGE_FEATURES))
    scene.graph.feature_stats = stats
    tr.predict(scene, model, runs, cfg.seed)
    t["inference"] = time.perf_counter() - t0
    t["total"] = sum(t[k] for k in ("voxelization", "features", "partition", "spg", "inference"))
    return t


def cmd_bench(args, cfg):
    cloud = data.synth_scene(cfg.seed, data.SceneSpec(n_points=args.points)) if args.input is None \
        else _read_input_cloud(args.input)
    model = _load_model(args.model)[0] if args.model else None
    sizes = args.sizes if args.sizes else [cfg.voxel_size]
    print(f"{'voxel':>8} {'voxelization':>13} {'features':>9} {'partition':>10} {'spg':>7} {'inference':>10} {'total':>8}")
    for vs in sizes:
        t = bench_once(cloud, cfg.updated(voxel_size=vs), model, cfg.runs if args.runs_all else 1)
        name = "full" if not vs else f"{100 * vs:g}cm"
        print(f"{name:>8} {t['voxelization']:13.2f} {t['features']:9.2f} {t['partition']:10.2f} "
              f"{t['spg']:7.2f} {t['inference']:10.2f} {t['total']:8.2f}")


# -- parser ----------------------------------------------------------------
def _common(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--voxel-size", "--size", dest="voxel_size", type=float)
    p.add_argument("--knn", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--adjacency", choices=("delaunay", "sym-knn"))
    p.add_argument("--max-superedge-len", type=float)
    p.add_argument("--partition-features", metavar="GROUPS",
                   help="comma list of geometric, elevation, color (default geometric,elevation)")
    p.add_argument("--ecc", choices=("vv", "mv"))
    p.add_argument("--ablation", choices=ev.VARIANTS)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single BLAS thread and fixed reduction order")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spgseg", description="Superpoint-graph semantic segmentation of point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic room")
    p.add_argument("-o", "--output", help="output .ply/.csv (PLY on stdout if omitted)")
    p.add_argument("--points", type=int, default=10_000)
    _common(p)

    for name, help_, out in (("voxelize", "voxel-grid downsampling", "voxels.npz"),
                             ("features", "k-NN graph and geometric features", "features.npz"),
                             ("partition", "cut-pursuit geometric partition", "partition.npz"),
                             ("spg", "superpoint graph", "scene.spg.json")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("input", help="input file ('-' reads PLY from stdin)" if name == "voxelize" else "input artifact")
        p.add_argument("-o", "--output", default=out)
        _common(p)

    p = sub.add_parser("train", help="train a model on superpoint graphs")
    p.add_argument("inputs", nargs="+", help="SPG files of training scenes")
    p.add_argument("-o", "--output", default="model.ckpt")
    p.add_argument("--curve", help="loss curve CSV (epoch loss lr)")
    _common(p)

    p = sub.add_parser("infer", help="label the original points of a scene")
    p.add_argument("input", help="SPG file")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output", default="labels.txt")
    _common(p)

    p = sub.add_parser("eval", help="OA / mAcc / IoU of predicted labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="labeled cloud (.ply/.csv)")
    p.add_argument("--partition", help="partition artifact, adds the Perfect bound")
    p.add_argument("--csv")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of all layers and the full model")
    _common(p)

    p = sub.add_parser("bench", help="per-stage wall time")
    p.add_argument("--input", help="cloud file (default: synthetic scene)")
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--sizes", type=lambda s: [0.0 if v in ("full", "0") else float(v) for v in s.split(",")],
                   help="comma-separated voxel sizes, e.g. full,0.02,0.03")
    p.add_argument("--model")
    p.add_argument("--runs-all", action="store_true", help="average --runs inference passes instead of one")
    _common(p)
    return parser


COMMANDS = {"synth": cmd_synth, "voxelize": cmd_voxelize, "features": cmd_features, "partition": cmd_partition,
            "spg": cmd_spg, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench}

_OVERRIDES = ("voxel_size", "knn", "mu", "adjacency", "max_superedge_len", "partition_features", "ecc", "ablation",
              "runs", "epochs", "seed", "threads", "deterministic")


def _thread_limit(cfg):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    n = 1 if cfg.deterministic else cfg.threads
    return threadpool_limits(limits=n) if n else contextlib.nullcontext()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k, None) for k in _OVERRIDES})
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    try:
        with _thread_limit(cfg):
            rc = COMMANDS[args.command](args, cfg)
    except (StageError, data.CloudFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


def print_config(cfg: PipelineConfig):  # pragma: no cover - convenience
    sys.stdout.write(dump_config(cfg))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
