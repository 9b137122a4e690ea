import json

import numpy as np
import pytest
from PIL import Image

from conftest import SMALL_PIPELINE
from mbdetr.cli import main
from mbdetr.config import ConfigError, config_from_dict, load_config
from mbdetr.dataset import SplitManifest, import_coco
from mbdetr.io import read_raw
from mbdetr.simulator import Frame, read_ground_truth, write_sequence

# -- configuration ---------------------------------------------------------


def test_defaults_are_valid():
    cfg = load_config()
    assert cfg.split.threshold == 0.18 and cfg.infer.threshold == 0.5
    assert cfg.render.factor == 8 and cfg.evaluate.distance_tolerance == 1.0


def test_json_round_trip():
    cfg = config_from_dict(SMALL_PIPELINE)
    assert config_from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("data, fragment", [
    ({"bogus": 1}, "unknown key"),
    ({"train": {"lr": 1e-3, "momentum": 0.9}}, "train"),
    ({"simulate": {"scene": {"psf": {"sigmaa": 1}}}}, "psf"),
])
def test_unknown_keys_are_rejected(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"train": {"epochs": "ten"}},
    {"train": {"augment": 1}},
    {"seed": 1.5},
    {"detector": {"input_size": [64]}},
])
def test_wrong_types_are_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"split": {"threshold": 0.0}},
    {"infer": {"threshold": 1.0}},
    {"train": {"lr": -1.0}},
    {"render": {"sigma": 0.0}},
    {"render": {"colormap": "no-such-map"}},
    {"detector": {"input_size": [32, 32]}},
    {"detector": {"queries": 5}},
    {"threads": 0},
])
def test_out_of_range_values_are_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_overrides_and_environment(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 1e-3}}))
    monkeypatch.setenv("MBDETR_CONFIG", str(path))
    cfg = load_config(overrides={"train.epochs": 3, "render.gamma": 1})
    assert cfg.train.lr == 1e-3 and cfg.train.epochs == 3 and cfg.render.gamma == 1.0
    assert load_config(overrides={"train.lr": 2e-3}).train.lr == 2e-3


def test_unreadable_config_is_a_config_error(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# -- command line ----------------------------------------------------------


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_PIPELINE))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_file):
    """Run every command once on the small configuration."""
    root = tmp_path_factory.mktemp("pipe")
    d = {k: root / k for k in ("data", "split", "train", "infer", "eval", "render")}
    c = ["--config", config_file]
    codes = [
        main(["simulate", *c, "--out", str(d["data"])]),
        main(["split", *c, "--data", str(d["data"]), "--out", str(d["split"])]),
        main(["train", *c, "--data", str(d["data"]), "--manifest", str(d["split"] / "split.json"),
              "--epochs", "1", "--out", str(d["train"])]),
        main(["infer", *c, "--checkpoint", str(d["train"] / "model.ckpt"), "--data", str(d["data"]),
              "--manifest", str(d["split"] / "split.json"), "--out", str(d["infer"])]),
        main(["evaluate", *c, "--detections", str(d["infer"] / "detections.jsonl"), "--data", str(d["data"]),
              "--manifest", str(d["split"] / "split.json"), "--out", str(d["eval"])]),
        main(["render", *c, "--data", str(d["data"]), "--detections", str(d["infer"] / "detections.jsonl"),
              "--out", str(d["render"])]),
    ]
    return codes, d


def test_pipeline_exits_cleanly_and_writes_outputs(pipeline):
    codes, d = pipeline
    assert codes == [0] * 6
    expected = {
        "data": ["coco.json", "frame_00000.raw", "frame_00000.json", "config.json", "events.jsonl"],
        "split": ["split.json"],
        "train": ["model.ckpt", "metrics.jsonl", "training.png"],
        "infer": ["detections.jsonl"],
        "eval": ["metrics.json", "metrics.txt", "pr_curves.png"],
        "render": ["sr_ground_truth.png", "sr_ground_truth.raw", "sr_detections.png", "sr_comparison.png"],
    }
    for key, names in expected.items():
        for name in names:
            assert (d[key] / name).exists(), f"{key}/{name}"


def test_simulated_coco_validates(pipeline):
    _, d = pipeline
    coco = import_coco(d["data"] / "coco.json")
    coco.validate()
    assert len(coco.images) == SMALL_PIPELINE["simulate"]["n_frames"]


def test_effective_config_is_echoed(pipeline, config_file):
    _, d = pipeline
    echoed = config_from_dict(json.loads((d["train"] / "config.json").read_text()))
    assert echoed == load_config(config_file, {"train.epochs": 1})


def test_metrics_log_has_one_line_per_epoch(pipeline):
    _, d = pipeline
    lines = (d["train"] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and {"epoch", "loss", "val_mAP"} <= json.loads(lines[0]).keys()


def test_detection_count_is_bounded_by_queries(pipeline):
    _, d = pipeline
    per_frame = {}
    for line in (d["infer"] / "detections.jsonl").read_text().splitlines():
        r = json.loads(line)
        per_frame[r["frame"]] = per_frame.get(r["frame"], 0) + 1
    assert all(n <= 4 * SMALL_PIPELINE["detector"]["queries"] for n in per_frame.values())


def test_rendered_ground_truth_mass_counts_annotations(pipeline):
    _, d = pipeline
    gt = read_ground_truth(d["data"])
    sr = read_raw(d["render"] / "sr_ground_truth.raw")
    n = sum(len(v) for v in gt.values())
    # edge splats lose a little mass; interior splats keep all of it
    assert 0.9 * n <= float(sr.astype(np.float64).sum()) <= n + 1e-3


def test_simulate_is_bit_identical(tmp_path, config_file):
    for name in ("a", "b"):
        assert main(["simulate", "--config", config_file, "--n-frames", "3", "--out", str(tmp_path / name)]) == 0
    for f in ("frame_00002.raw", "ground_truth.json", "coco.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_evaluate_prints_tab_delimited_metrics(pipeline, config_file, tmp_path, capsys):
    _, d = pipeline
    code = main(["evaluate", "--config", config_file, "--detections", str(d["infer"] / "detections.jsonl"),
                 "--data", str(d["data"]), "--out", str(tmp_path)])
    out = capsys.readouterr()
    assert code == 0
    rows = [line.split("\t") for line in out.out.splitlines()]
    assert rows[0] == ["metric", "value"] and rows[1][0] == "mAP"
    assert "extension" in out.err


def test_render_empty_detections_is_black(pipeline, config_file, tmp_path):
    _, d = pipeline
    (tmp_path / "empty.jsonl").write_text("")
    code = main(["render", "--config", config_file, "--data", str(d["data"]), "--detections",
                 str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "r")])
    assert code == 0
    assert not np.asarray(Image.open(tmp_path / "r" / "sr_detections.png")).any()


def test_render_is_bit_identical(pipeline, config_file, tmp_path):
    _, d = pipeline
    assert main(["render", "--config", config_file, "--data", str(d["data"]), "--detections",
                 str(d["infer"] / "detections.jsonl"), "--out", str(tmp_path)]) == 0
    for name in ("sr_ground_truth.png", "sr_detections.png", "sr_comparison.png"):
        assert (tmp_path / name).read_bytes() == (d["render"] / name).read_bytes()


def test_split_threshold_one_is_always_feasible(pipeline, config_file, tmp_path):
    _, d = pipeline
    code = main(["split", "--config", config_file, "--data", str(d["data"]), "--threshold", "1.0",
                 "--test-size", "10", "--out", str(tmp_path)])
    m = SplitManifest.load(tmp_path / "split.json")
    assert code == 0 and len(m.test_ids) == 10 and m.shortfall == 0


def test_split_of_identical_frames_reports_shortfall(config_file, tmp_path, capsys):
    img = np.random.default_rng(0).random((64, 64))
    write_sequence([Frame(img.copy(), [], i) for i in range(8)], tmp_path / "same")
    code = main(["split", "--config", config_file, "--data", str(tmp_path / "same"), "--test-size", "3",
                 "--out", str(tmp_path / "s")])
    assert code == 0 and "warning" in capsys.readouterr().err
    assert SplitManifest.load(tmp_path / "s" / "split.json").shortfall == 3


@pytest.mark.parametrize("argv", [
    ["simulate", "--n-frames", "0", "--out", "{tmp}"],
    ["simulate", "--set", "train.bogus=1", "--out", "{tmp}"],
    ["simulate", "--set", "novalue", "--out", "{tmp}"],
    ["explode", "--out", "{tmp}"],
    ["simulate"],
    [],
])
def test_usage_errors_exit_one(argv, tmp_path):
    assert main([a.format(tmp=tmp_path) for a in argv]) == 1


def test_runtime_errors_exit_two(tmp_path, config_file):
    assert main(["split", "--config", config_file, "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["infer", "--config", config_file, "--checkpoint", str(tmp_path / "junk.ckpt"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_flags_override_config_file(tmp_path, config_file):
    assert main(["simulate", "--config", config_file, "--n-frames", "2", "--seed", "9",
                 "--set", "simulate.scene.noise_sigma=0.0", "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["simulate"]["n_frames"] == 2 and cfg["seed"] == 9
    assert cfg["simulate"]["scene"]["noise_sigma"] == 0.0
