"""Acceptance criteria, one test each.  Every test prints an ``ACCEPTANCE n PASS|FAIL`` line."""

import time

import numpy as np
import pytest

import oracles
from spgseg import cli, data, evaluation as ev, geomfeat, gradcheck, graphs, partition, pipeline, spg, train
from spgseg import nncore as nn
from spgseg.config import PipelineConfig
from spgseg.models import ModelConfig, SegmentationModel, SuperpointBatch

RESULTS = []


def report(n, ok, title, detail):
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 --------------------------------------------------------------------------
def test_partition_oracle_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, sep_ok, mono_ok, n_sep = 0.0, True, True, 0
    for i in range(100):
        p, clusters = oracles.random_problem(rng, separable=bool(i % 2))
        got = partition.cut_pursuit(p)
        best = partition.brute_force_partition(p)
        worst = max(worst, got.energy / best.energy if best.energy > 0 else float(got.energy > 1e-12) + 1)
        if clusters is not None:
            n_sep += 1
            sep_ok &= abs(got.energy - best.energy) <= 1e-9
        mono_ok &= bool(np.all(np.diff(got.history) < 0))
    secs = time.perf_counter() - t0
    report(1, worst <= 1.2 and sep_ok and mono_ok and secs < 30, "partition oracle",
           f"worst ratio {worst:.4f} (<= 1.2), {n_sep} separable exact: {sep_ok}, monotone: {mono_ok}, "
           f"{secs:.1f} s (< 30)")


# 2 --------------------------------------------------------------------------
def test_step_chain():
    edges = np.c_[np.arange(5), np.arange(1, 6)]
    p = partition.PartitionProblem(np.array([0, 0, 0, 1, 1, 1.0]), edges, np.ones(5), 0.3)
    sol = partition.cut_pursuit(p)
    report(2, sol.n_components == 2 and sol.energy == pytest.approx(0.3, abs=1e-15), "6-chain step",
           f"{sol.n_components} components, energy {sol.energy!r}")


# 3 --------------------------------------------------------------------------
def test_max_flow_duality():
    rng = np.random.default_rng(33)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(500):
        n = int(rng.integers(1, 13))
        pairs = [(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < 0.3]
        edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        caps = rng.integers(0, 5, len(pairs)).astype(float)
        src = (rng.integers(0, 5, n) * (rng.random(n) < 0.6)).astype(float)
        snk = (rng.integers(0, 5, n) * (rng.random(n) < 0.6)).astype(float)
        res = partition.max_flow_min_cut(n, edges, caps, src, snk)
        value, sides = oracles.cut_enumeration(n, edges, caps, src, snk)
        ok = abs(res.flow_value - value) < 1e-9 and abs(res.cut_value - value) < 1e-9
        ok &= any(np.array_equal(res.sink_side, s) for s in sides)
        bad += not ok
    secs = time.perf_counter() - t0
    report(3, bad == 0 and secs < 60, "max-flow duality",
           f"{500 - bad}/500 graphs match enumeration, {secs:.1f} s (< 60)")


# 4 --------------------------------------------------------------------------
def test_gradient_checks():
    worst_ops, worst_model, _ = gradcheck.run_all(seed=0)
    report(4, worst_ops < 1e-6 and worst_model < 1e-4, "gradient checks",
           f"ops {worst_ops:.2e} (< 1e-6), full model on 3-node SPG {worst_model:.2e} (< 1e-4)")


# 5 --------------------------------------------------------------------------
E2E_MU = 0.06
E2E_EPOCHS = 30
E2E_SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_end_to_end_learning():
    t0 = time.perf_counter()
    cfg = PipelineConfig(mu=E2E_MU)
    clouds = [data.synth_scene(1000 + s, data.SceneSpec()) for s in range(20)]
    scenes = [pipeline.build_scene(c, cfg) for c in clouds]
    train_scenes, test_scenes = scenes[:14], scenes[14:]
    gt = [c.labels for c in clouds[14:]]
    tc = train.TrainConfig(epochs=E2E_EPOCHS, decay_epochs=(18, 25))
    runs = {}
    for variant in ("Best", "Unary", "NoEdgeFeat"):
        runs[variant] = [ev.ablation_run(variant, train_scenes, test_scenes, gt, ModelConfig(), tc, runs=10, seed=s)[0]
                         for s in E2E_SEEDS]
    perfect = ev.metrics_from_confusion(sum(ev.scene_perfect(s, g, 6).confusion for s, g in zip(test_scenes, gt)))
    mean = {v: (np.mean([m.oa for m in ms]), np.mean([m.miou for m in ms])) for v, ms in runs.items()}
    secs = time.perf_counter() - t0
    best_oa, best_miou = mean["Best"]
    ok = best_oa >= 0.90 and best_miou >= 0.75
    ok &= perfect.miou >= best_miou >= mean["Unary"][1]
    ok &= mean["NoEdgeFeat"][1] <= best_miou - 0.03
    ok &= secs < 30 * 60
    per_seed = ", ".join(f"{m.oa:.3f}/{m.miou:.3f}" for m in runs["Best"])
    report(5, ok, "end-to-end learning",
           f"Best OA {best_oa:.3f} mIoU {best_miou:.3f} (seeds {per_seed}); Perfect {perfect.miou:.3f}, "
           f"Unary {mean['Unary'][1]:.3f}, NoEdgeFeat {mean['NoEdgeFeat'][1]:.3f}; {secs / 60:.1f} min (< 30)")


# 6 --------------------------------------------------------------------------
def test_crf_ecc():
    rng = np.random.default_rng(6)
    rows, conv, iters = 0.0, True, 0
    for trial in range(20):
        model = SegmentationModel(ModelConfig(kind="crf-ecc", crf_iters=50, n_p=16), seed=trial)
        # moderate noise: compatibilities reach about 2.5; undamped parallel updates can 2-cycle near 6
        for p in model.context.params():
            p.value = p.value + rng.normal(scale=0.05 * (trial % 2), size=p.shape)
        n = int(rng.integers(3, 8))
        edges = np.array([(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < 0.4]).reshape(-1, 2)
        taps = {}
        model.context(nn.Tape(record=False), nn.Var(rng.normal(size=(n, 6))), edges,
                      rng.normal(size=(len(edges), spg.N_EDGE_FEATURES)), False, taps)
        Q = taps["Q"]
        rows = max(rows, max(np.abs(q.sum(1) - 1).max() for q in Q))
        iters = max(iters, len(Q) - 1)
        conv &= len(Q) < 2 or np.abs(Q[-1] - Q[-2]).max() < 1e-6
    model = SegmentationModel(ModelConfig(kind="crf-ecc", n_p=16))
    model.context.theta.layers[-1].W.value[:] = 0
    U = rng.normal(size=(4, 6))
    taps = {}
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1], [3, 0]])
    model.context(nn.Tape(record=False), nn.Var(U), edges, rng.normal(size=(5, spg.N_EDGE_FEATURES)), False, taps)
    fixed = taps["Q"][-1].tobytes() == nn.softmax(U).tobytes()
    report(6, rows <= 1e-12 and conv and iters <= 50 and fixed, "CRF-ECC",
           f"max row error {rows:.1e} (<= 1e-12), converged in <= {iters} iterations (<= 50), "
           f"zero compatibility gives softmax(U) exactly: {fixed}")


# 7 --------------------------------------------------------------------------
def test_mv_diagonal_equals_vv():
    rng = np.random.default_rng(7)
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1], [3, 1], [4, 3], [3, 4], [0, 4]])
    batch = SuperpointBatch(5, rng.normal(size=(5, 16, 11)), rng.uniform(0.5, 2, 5), np.arange(5), edges,
                            rng.normal(size=(len(edges), spg.N_EDGE_FEATURES)))
    msgs = []
    for cfg in (ModelConfig(n_p=16), ModelConfig(n_p=16, ecc="mv", mv_diagonal=True)):
        taps = {}
        SegmentationModel(cfg, seed=11).forward(nn.Tape(record=False), batch, train=False, taps=taps)
        msgs.append(taps["messages"])
    same = all(a.tobytes() == b.tobytes() for a, b in zip(*msgs)) and len(msgs[0]) == 10
    report(7, same, "ECC-MV diagonal vs ECC-VV", f"{len(msgs[0])} message rounds bitwise equal: {same}")


# 8 --------------------------------------------------------------------------
def test_metrics_oracle():
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(1000):
        K = int(rng.integers(1, 9))
        n = int(rng.integers(1, 200))
        gt = rng.integers(-1, K, n)
        gt[0] = rng.integers(0, K)
        pred = rng.integers(0, K, n)
        bad += not np.array_equal(ev.metrics(pred, gt, K).confusion, oracles.confusion_loops(pred, gt, K))
    report(8, bad == 0, "metrics oracle", f"{1000 - bad}/1000 confusion matrices identical")


# 9 --------------------------------------------------------------------------
@pytest.mark.slow
def test_voxelization_timing_trend():
    cloud = data.synth_scene(9, data.SceneSpec(n_points=1_000_000))
    cfg = PipelineConfig(mu=E2E_MU)
    model = SegmentationModel(ModelConfig(), seed=0)
    totals = []
    for size in (0.0, 0.02, 0.03, 0.04):
        totals.append(cli.bench_once(cloud, cfg.updated(voxel_size=size), model)["total"])
    ok = all(a > b for a, b in zip(totals, totals[1:]))
    report(9, ok, "voxelization trend (1M points)",
           "total s for full/2cm/3cm/4cm = " + " > ".join(f"{t:.1f}" for t in totals))


# 10 -------------------------------------------------------------------------
def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_invariances(tmp_path):
    rng = np.random.default_rng(10)
    checks = {}
    # PointNet: permuting the sampled points of each superpoint
    model = SegmentationModel(ModelConfig(kind="unary", n_p=32), seed=1)
    for p in model.params():
        p.value = p.value + rng.normal(scale=0.1, size=p.shape)
    batch = SuperpointBatch(3, rng.normal(size=(3, 32, 11)), np.ones(3), np.arange(3), np.zeros((0, 2), np.int64),
                            np.zeros((0, spg.N_EDGE_FEATURES)))
    ref = model.logits(batch)
    batch.points = batch.points[:, rng.permutation(32)]
    checks["pointnet permutation"] = np.abs(model.logits(batch) - ref).max() < 1e-12
    # geometric features: translation and quarter turns about z
    pos = rng.uniform(size=(400, 3)) * [2, 2, 1]
    f = geomfeat.compute_features(pos, 10)
    moved = geomfeat.compute_features(pos @ _rot_z(np.pi / 2).T + [5, -3, 0], 10)
    checks["geomfeat rotation/translation"] = np.abs(moved[:, :4] - f[:, :4]).max() < 1e-9
    # superedge antisymmetry
    comp = np.argmin(((pos[:, None] - pos[rng.choice(400, 8, replace=False)][None]) ** 2).sum(-1), axis=1)
    _, comp = np.unique(comp, return_inverse=True)
    g, _ = spg.build_spg(pos, comp, graphs.voronoi_graph(pos).edges)
    index = {(s, t): e for e, (s, t) in enumerate(g.edges.tolist())}
    anti = True
    for e, (s, t) in enumerate(g.edges.tolist()):
        a, b = g.edge_features[e], g.edge_features[index[(t, s)]]
        anti &= np.array_equal(b[6:], -a[6:]) and np.allclose(b[:3], -a[:3], atol=1e-12) \
            and np.allclose(b[3:6], a[3:6], atol=1e-12)
    checks["superedge antisymmetry"] = anti
    # deterministic reruns through the command line
    outputs = []
    for rerun in ("a", "b"):
        d = tmp_path / rerun
        d.mkdir()
        args = ("--voxel-size", "0.03", "--deterministic", "--epochs", "2", "--runs", "2")
        steps = [("synth", "--seed", "3", "--points", "2500", "-o", d / "c.ply"),
                 ("voxelize", d / "c.ply", "-o", d / "v.npz", *args),
                 ("features", d / "v.npz", "-o", d / "f.npz", *args),
                 ("partition", d / "f.npz", "-o", d / "p.npz", *args),
                 ("spg", d / "p.npz", "-o", d / "s.spg.json", *args),
                 ("train", d / "s.spg.json", "-o", d / "m.ckpt", *args),
                 ("infer", d / "s.spg.json", "--model", d / "m.ckpt", "-o", d / "l.txt", *args)]
        for step in steps:
            assert cli.main([str(a) for a in step]) == 0
        outputs.append([(d / n).read_bytes() for n in ("c.ply", "v.npz", "f.npz", "p.npz", "s.spg.json", "m.ckpt",
                                                        "l.txt")])
    checks["byte-identical reruns"] = all(a == b for a, b in zip(*outputs))
    report(10, all(checks.values()), "invariances", ", ".join(f"{k}: {v}" for k, v in checks.items()))
