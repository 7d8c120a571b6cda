import math

import pytest

from spgseg.config import PipelineConfig, dump_config, load_config, parse_config_text


def test_parse_and_defaults():
    vals = parse_config_text("mu = 0.1  # coarser\n\nknn=5\ndecay-epochs = 3 7\ndeterministic = yes\n")
    assert vals == {"mu": 0.1, "knn": 5, "decay_epochs": (3, 7), "deterministic": True}
    cfg = PipelineConfig(**vals)
    assert cfg.n_p == 128 and cfg.max_superedge_len == math.inf


def test_unknown_key_reports_line():
    with pytest.raises(ValueError, match="line 2: unknown key 'mew'"):
        parse_config_text("mu = 1\nmew = 2\n")
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("knn = many")


def test_roundtrip_and_overrides(tmp_path):
    cfg = PipelineConfig(mu=0.2, decay_epochs=(4, 9), adjacency="sym-knn")
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg
    assert load_config(tmp_path / "c.cfg", {"mu": 0.5, "knn": None}).mu == 0.5


def test_hash_ignores_execution_knobs():
    base = PipelineConfig()
    assert base.hash() == PipelineConfig(threads=4, deterministic=True).hash()
    assert base.hash() != PipelineConfig(mu=0.031).hash()


def test_validation():
    for bad in ({"adjacency": "grid"}, {"ecc": "xx"}, {"mu": -1}, {"knn": 0}, {"partition_features": "shape"},
                {"partition_features": ""}):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_partition_features_are_canonical():
    assert PipelineConfig(partition_features=" color , geometric").partition_features == "geometric,color"
    assert PipelineConfig(partition_features="color,geometric").hash() == \
        PipelineConfig(partition_features="geometric,color").hash()
