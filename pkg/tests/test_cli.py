import configparser
import filecmp
import json

import pytest

from mgreid.cli import main
from mgreid.config import ConfigError, RunConfig, load_config, parse_granularities

TINY = """
[data]
num_ids = 4
samples_per_id = 6
image_height = 16
image_width = 8
patch_size = 4

[model]
embed_dim = 16
depth = 2
num_heads = 2
out_dim = 8
prompt_len = 2
prompt_dim = 16
text_layers = 1
text_heads = 2

[train]
s1_epochs = 2
s2_epochs = 2
ids_per_batch = 2
samples_per_id = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def run(*args):
    return main([str(a) for a in args])


def snapshot(out, command):
    parser = configparser.ConfigParser()
    parser.read(out / f"config.{command}.ini")
    return parser


def test_gen_data_defaults(tmp_path):
    assert run("gen-data", "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert len(meta["samples"]) == 200
    assert len(list((tmp_path / "data" / "images").glob("*.png"))) == 200
    assert (tmp_path / "config.gen-data.ini").is_file()


def test_gen_data_invalid_dims_leaves_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nimage_height = 60\n")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "run") != 0
    assert "divisible" in capsys.readouterr().err
    assert not (tmp_path / "run" / "data").exists()


def test_gen_data_is_reproducible(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert run("gen-data", "--config", tiny_config, "--seed", 7, "--out", tmp_path / name) == 0
    cmp = filecmp.dircmp(tmp_path / "a" / "data", tmp_path / "b" / "data")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmp(tmp_path / "a/data/manifest.json", tmp_path / "b/data/manifest.json", shallow=False)
    images = sorted(p.name for p in (tmp_path / "a/data/images").iterdir())
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a/data/images", tmp_path / "b/data/images", images, shallow=False)
    assert not mismatch and not errors


def test_annotate_rows_and_determinism(tmp_path):
    assert run("gen-data", "--out", tmp_path) == 0
    assert run("annotate", "--out", tmp_path) == 0
    first = (tmp_path / "labels.jsonl").read_bytes()
    assert len(first.splitlines()) == 600
    assert run("annotate", "--out", tmp_path) == 0
    assert (tmp_path / "labels.jsonl").read_bytes() == first


def test_annotate_without_corruption_keeps_oracle_boxes(tmp_path, tiny_config):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path) == 0
    assert run("annotate", "--config", tiny_config, "--no-corruption", "--out", tmp_path) == 0
    rows = [json.loads(line) for line in (tmp_path / "labels.jsonl").read_text().splitlines()]
    assert rows and all(r["raw_box"] == r["calibrated_box"] for r in rows)


def test_annotate_needs_a_dataset(tmp_path, capsys):
    assert run("annotate", "--out", tmp_path) != 0
    assert "gen-data" in capsys.readouterr().err


def test_stage2_without_stage1_names_stage1(tmp_path, tiny_config, capsys):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path) == 0
    assert run("annotate", "--config", tiny_config, "--out", tmp_path) == 0
    assert run("train", "--stage", 2, "--config", tiny_config, "--out", tmp_path) != 0
    assert "stage 1" in capsys.readouterr().err
    assert run("eval", "--config", tiny_config, "--out", tmp_path) != 0
    assert "stage 2" in capsys.readouterr().err


def test_full_pipeline(tmp_path, tiny_config, capsys):
    common = ["--config", tiny_config, "--out", tmp_path]
    for args in (["gen-data"], ["annotate"], ["train", "--stage", 1], ["train", "--stage", 2], ["eval"]):
        assert run(*args, *common) == 0, args
    for name in ("stage1/checkpoint.pt", "stage1/prompts.pt", "stage1/losses.csv",
                 "stage2/checkpoint.pt", "stage2/losses.csv", "metrics.json"):
        assert (tmp_path / name).is_file(), name
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert {"mAP", "rank1", "num_queries", "excluded_queries", "per_part_iou"} <= set(metrics)
    assert set(metrics["per_part_iou"]) == {"head", "upper", "legs"}
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(printed) == {"mAP", "rank1", "per_part_iou"}
    assert run("render-masks", *common, "--limit", 2) == 0
    assert len(list((tmp_path / "heatmaps").glob("*.png"))) == 6


def test_config_precedence(tmp_path, tiny_config):
    assert run("gen-data", "--config", tiny_config, "--seed", 5, "--out", tmp_path) == 0
    snap = snapshot(tmp_path, "gen-data")
    assert json.loads(snap["data"]["seed"]) == 5  # flag beats file and default
    assert json.loads(snap["data"]["num_ids"]) == 4  # file beats default
    assert json.loads(snap["data"]["num_cameras"]) == 2  # default survives
    assert json.loads(snap["run"]["out"]) == str(tmp_path)


def test_flags_set_mask_source_and_granularities(tmp_path, tiny_config):
    args = ["--config", tiny_config, "--out", tmp_path, "--mask-source", "stripe", "--granularities", "G,U"]
    assert run("gen-data", *args) == 0
    snap = snapshot(tmp_path, "gen-data")
    assert json.loads(snap["model"]["mask_source"]) == "stripe"
    assert json.loads(snap["model"]["granularities"]) == "G,U"
    assert run("gen-data", "--out", tmp_path, "--granularities", "HU") != 0


def test_snapshot_round_trips_through_the_loader(tmp_path):
    cfg = RunConfig()
    cfg.train.s1_epochs = 3
    cfg.calib.max_area = 0.8
    cfg.write(tmp_path / "c.ini")
    loaded = load_config(tmp_path / "c.ini")
    assert loaded.to_dict() == cfg.to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    (tmp_path / "bad.ini").write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")
    (tmp_path / "bad2.ini").write_text("[train]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad2.ini")


def test_parse_granularities():
    assert parse_granularities("GHUL") == ("global", "head", "upper", "legs")
    assert parse_granularities("L,G") == ("global", "legs")
    for bad in ("", "HU", "GX"):
        with pytest.raises(ConfigError):
            parse_granularities(bad)


def test_full_scale_schedule_preset():
    from mgreid.config import TrainConfig

    tc = TrainConfig.full_scale(seed=3)
    assert (tc.s1_epochs, tc.s2_epochs, tc.ids_per_batch, tc.samples_per_id, tc.seed) == (120, 60, 16, 4, 3)
    tc.validate()
