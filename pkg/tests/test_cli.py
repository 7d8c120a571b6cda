import io
import json
import sys

import numpy as np
import pytest

from spgseg import cli, data


def run(*argv):
    return cli.main([str(a) for a in argv])


def chain(tmp, extra=(), points=3000):
    """synth -> voxelize -> features -> partition -> spg; returns the artifact paths."""
    f = {k: tmp / k for k in ("cloud.ply", "vox.npz", "feat.npz", "part.npz", "scene.spg.json")}
    assert run("synth", "--seed", 1, "--points", points, "-o", f["cloud.ply"]) == 0
    assert run("voxelize", f["cloud.ply"], "--size", 0.03, "-o", f["vox.npz"], *extra) == 0
    assert run("features", f["vox.npz"], "--voxel-size", 0.03, "-o", f["feat.npz"], *extra) == 0
    assert run("partition", f["feat.npz"], "--voxel-size", 0.03, "-o", f["part.npz"], *extra) == 0
    assert run("spg", f["part.npz"], "--voxel-size", 0.03, "-o", f["scene.spg.json"], *extra) == 0
    return f


FAST = ("--epochs", 2, "--runs", 2)


def test_full_chain(tmp_path, capsys):
    f = chain(tmp_path)
    ckpt, labels = tmp_path / "m.ckpt", tmp_path / "labels.txt"
    assert run("train", f["scene.spg.json"], "-o", ckpt, "--curve", tmp_path / "curve.csv", "--voxel-size", 0.03,
               *FAST) == 0
    assert run("infer", f["scene.spg.json"], "--model", ckpt, "-o", labels, "--voxel-size", 0.03, *FAST) == 0
    pred = np.loadtxt(labels, dtype=int)
    assert len(pred) == data.load_cloud(f["cloud.ply"]).n
    assert run("eval", "--pred", labels, "--gt", f["cloud.ply"], "--partition", f["part.npz"],
               "--csv", tmp_path / "m.csv") == 0
    out = capsys.readouterr().out
    assert "prediction" in out and "Perfect" in out
    assert (tmp_path / "m.csv").read_text().startswith("method,OA,mAcc,mIoU")
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "epoch loss lr"


def test_synth_to_stdout_and_voxelize_from_stdin(tmp_path, monkeypatch, capsys):
    assert run("synth", "--seed", 2, "--points", 500) == 0
    ply = capsys.readouterr().out
    assert ply.startswith("ply")
    monkeypatch.setattr(sys, "stdin", io.StringIO(ply))
    assert run("voxelize", "-", "-o", tmp_path / "v.npz") == 0
    arrays, meta = cli.load_npz(tmp_path / "v.npz", "voxelize")
    assert len(arrays["positions"]) == 500 and meta["format_version"] == 1


def test_partition_mu_zero_gives_singletons(tmp_path):
    cloud = data.PointCloud(np.random.default_rng(0).uniform(size=(200, 3)))
    data.save_cloud(cloud, tmp_path / "c.ply")
    assert run("voxelize", tmp_path / "c.ply", "-o", tmp_path / "v.npz") == 0
    assert run("features", tmp_path / "v.npz", "-o", tmp_path / "f.npz") == 0
    assert run("partition", tmp_path / "f.npz", "--mu", 0, "-o", tmp_path / "p.npz") == 0
    arrays, _ = cli.load_npz(tmp_path / "p.npz")
    assert len(np.unique(arrays["component_of"])) == 200


def test_bench_reports_five_stages(capsys):
    assert run("bench", "--points", 3000, "--sizes", "full,0.05") == 0
    lines = capsys.readouterr().out.splitlines()
    head = lines[0].split()
    assert head == ["voxel", "voxelization", "features", "partition", "spg", "inference", "total"]
    for line in lines[1:]:
        vals = [float(v) for v in line.split()[1:]]
        assert sum(vals[:5]) == pytest.approx(vals[5], abs=0.03)
    assert [line.split()[0] for line in lines[1:]] == ["full", "5cm"]


def test_missing_input_and_wrong_stage(tmp_path, capsys):
    assert run("voxelize", tmp_path / "nope.ply", "-o", tmp_path / "v.npz") == 1
    assert "not found" in capsys.readouterr().err
    cloud = data.PointCloud(np.random.default_rng(0).uniform(size=(50, 3)))
    data.save_cloud(cloud, tmp_path / "c.ply")
    run("voxelize", tmp_path / "c.ply", "-o", tmp_path / "v.npz")
    assert run("partition", tmp_path / "v.npz", "-o", tmp_path / "p.npz") == 1
    assert "expected a 'features' artifact" in capsys.readouterr().err


def test_version_mismatch_is_refused(tmp_path, capsys):
    cloud = data.PointCloud(np.random.default_rng(0).uniform(size=(50, 3)))
    data.save_cloud(cloud, tmp_path / "c.ply")
    run("voxelize", tmp_path / "c.ply", "-o", tmp_path / "v.npz")
    arrays, meta = cli.load_npz(tmp_path / "v.npz")
    with np.load(tmp_path / "v.npz") as z:
        raw = dict(z)
    meta["format_version"] = 0
    raw["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "old.npz", **raw)
    assert run("features", tmp_path / "old.npz", "-o", tmp_path / "f.npz") == 1
    assert "version" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("mu = 0.1\nbogus = 1\n")
    assert run("bench", "--config", tmp_path / "c.cfg") == 2
    assert "line 2" in capsys.readouterr().err
    assert run("bench", "--partition-features", "shape") == 2


def test_partition_feature_flag(tmp_path):
    f = chain(tmp_path, ("--partition-features", "geometric,color"), points=1500)
    _, meta = cli.load_npz(f["part.npz"])
    assert meta["config"]["partition_features"] == "geometric,color"


def test_deterministic_reruns_are_byte_identical(tmp_path):
    outs = []
    for rerun in ("a", "b"):
        d = tmp_path / rerun
        d.mkdir()
        f = chain(d, ("--deterministic",), points=2000)
        ckpt, labels = d / "m.ckpt", d / "labels.txt"
        run("train", f["scene.spg.json"], "-o", ckpt, "--voxel-size", 0.03, "--deterministic", *FAST)
        run("infer", f["scene.spg.json"], "--model", ckpt, "-o", labels, "--voxel-size", 0.03, "--deterministic",
            *FAST)
        outs.append([p.read_bytes() for p in (*f.values(), ckpt, labels)])
    for a, b in zip(*outs):
        assert a == b
