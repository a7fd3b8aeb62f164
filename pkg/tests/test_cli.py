import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from sarsfp.cli import main, parse_named, parse_range, resolve, sub_seed
from sarsfp.imaging import read_image
from sarsfp.targets import manifest_scenes

DATA_ARGS = ["--azimuth-sweep", "0:360:30", "--image-size", "32"]


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root, skip=("run_config.json",)):
    root = Path(root)
    return {str(p.relative_to(root)): sha(p) for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end run: targets, dataset, model, attack snapshot."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-targets", "--out", root / "targets", "--workers", 1) == 0
    assert run("gen-dataset", *DATA_ARGS, "--out", root / "ds", "--workers", 1) == 0
    assert run("train", "--dataset", root / "ds", "--arch", "linear", "--epochs", 5, "--out", root / "m1",
               "--workers", 1) == 0
    assert run("attack", "--dataset", root / "ds", "--target", "boxtank", "--model", root / "m1" / "model.sfpm",
               "--epochs", 2, "--views", "0:360:90", "--batch-denominator", 4, "--out", root / "atk",
               "--workers", 1) == 0
    return root


def test_parse_helpers():
    assert parse_range("0:360:10") == [float(a) for a in range(0, 360, 10)]
    assert parse_range("5, 10,15") == [5.0, 10.0, 15.0]
    assert parse_named("a=x.json,b=y.json") == {"a": "x.json", "b": "y.json"}
    assert sub_seed(0, "blend") != sub_seed(0, "split")
    assert sub_seed(3, "blend") == sub_seed(3, "blend")


def test_pipeline_outputs(pipeline):
    assert (pipeline / "targets" / "boxtank.scene.json").exists()
    man = json.loads((pipeline / "ds" / "manifest.json").read_text())
    assert len(man["images"]) == 36
    rep = json.loads((pipeline / "m1" / "train_report.json").read_text())
    assert rep["architecture"] == "linear"
    snap = json.loads((pipeline / "atk" / "snapshot.json").read_text())
    assert snap["epochs_completed"] == 2
    rows = (pipeline / "atk" / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,avg_loss,lr" and len(rows) == 3


def test_simulate_single_and_sweep(pipeline, tmp_path):
    scene = pipeline / "targets" / "dome.scene.json"
    assert run("simulate", "--scene", scene, "--azimuth", 45, "--elevation", 15, "--image-size", 32,
               "--out", tmp_path / "img.pgm", "--workers", 1) == 0
    assert read_image(tmp_path / "img.pgm").pixels.shape == (32, 32)
    assert run("simulate", "--scene", scene, "--azimuth-sweep", "0:360:10", "--image-size", 16,
               "--dataset", pipeline / "ds", "--out", tmp_path / "sweep", "--workers", 1) == 0
    assert len(list((tmp_path / "sweep").glob("*.pgm"))) == 36


def test_simulate_echo_csv(pipeline, tmp_path):
    scene = pipeline / "targets" / "dome.scene.json"
    assert run("simulate", "--scene", scene, "--image-size", 16, "--echoes-csv", "--blend", "scene",
               "--out", tmp_path / "one.pgm", "--workers", 1) == 0
    assert (tmp_path / "one.csv").read_text().startswith("a,r,intensity,bounces")


def test_missing_scene_exit_3(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("simulate", "--scene", missing, "--out", tmp_path / "x.pgm") == 3
    assert str(missing) in capsys.readouterr().err


def test_unknown_architecture_exit_2(pipeline, tmp_path, capsys):
    assert run("train", "--dataset", pipeline / "ds", "--arch", "vgg", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "cnn-small" in err and "linear" in err


def test_unknown_protocol_exit_2(pipeline, tmp_path):
    assert run("eval", "roc", "--dataset", pipeline / "ds", "--target", "dome", "--out", tmp_path) == 2


def test_bad_flag_exit_2(tmp_path):
    assert run("train", "--bogus", "--out", tmp_path) == 2
    assert run() == 2


def test_corrupt_snapshot_exit_4(pipeline, tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text("{")
    assert run("eval", "success", "--dataset", pipeline / "ds", "--target", "boxtank", "--model",
               pipeline / "m1" / "model.sfpm", "--snapshot", bad, "--out", tmp_path / "e") == 4


def test_attack_epochs_zero_and_restriction(pipeline, tmp_path):
    base = ["--dataset", pipeline / "ds", "--target", "boxtank", "--model", pipeline / "m1" / "model.sfpm",
            "--views", "0:360:120", "--batch-denominator", 3, "--workers", 1]
    assert run("attack", *base, "--epochs", 0, "--out", tmp_path / "z") == 0
    z = json.loads((tmp_path / "z" / "snapshot.json").read_text())
    assert z["loss_history"] == []
    assert run("attack", *base, "--epochs", 1, "--components", "turret", "--out", tmp_path / "t") == 0
    t = json.loads((tmp_path / "t" / "snapshot.json").read_text())
    sc = manifest_scenes(json.loads((pipeline / "ds" / "manifest.json").read_text()))["boxtank"]
    start = np.array([[b["alpha"], b["beta"]] for b in z["blend"]])
    end = np.array([[b["alpha"], b["beta"]] for b in t["blend"]])
    other = np.array([m.component_name != "turret" for m in sc.meshes])
    assert np.array_equal(start[other], end[other])
    assert not np.array_equal(start[~other], end[~other])
    assert np.array_equal(start, sc.blend)


def test_eval_success_and_cross_view(pipeline, tmp_path):
    base = ["--dataset", pipeline / "ds", "--target", "boxtank", "--model", pipeline / "m1" / "model.sfpm",
            "--snapshot", pipeline / "atk" / "snapshot.json", "--workers", 1]
    assert run("eval", "success", *base, "--views", "0:360:90", "--out", tmp_path / "s") == 0
    doc = json.loads((tmp_path / "s" / "report.json").read_text())
    assert doc["protocol"] == "success" and len(doc["records"]) == 4
    assert run("eval", "cross-view", *base, "--step", 10, "--group", 60, "--out", tmp_path / "cv") == 0
    rows = (tmp_path / "cv" / "fig8.csv").read_text().splitlines()
    assert len(rows) == 7


def test_eval_zero_snapshot_rate_is_clean(pipeline, tmp_path):
    base = ["--dataset", pipeline / "ds", "--target", "dome", "--model", pipeline / "m1" / "model.sfpm",
            "--workers", 1]
    assert run("attack", *base, "--epochs", 0, "--views", "0:360:60", "--out", tmp_path / "a") == 0
    snap = json.loads((tmp_path / "a" / "snapshot.json").read_text())
    for b in snap["blend"]:
        b["alpha"] = b["beta"] = 0.0
    (tmp_path / "zero.json").write_text(json.dumps(snap))
    assert run("eval", "success", *base, "--snapshot", tmp_path / "zero.json", "--count-all",
               "--views", "0:360:60", "--out", tmp_path / "e") == 0
    agg = json.loads((tmp_path / "e" / "report.json").read_text())["aggregates"]
    assert agg["success_rate_percent"] == pytest.approx(100 * (1 - agg["clean_accuracy"]))


def test_workers_bit_identical(pipeline, tmp_path):
    # same paths for both runs: the option paths are part of the hashed config
    digests = []
    d = tmp_path / "run"
    for w in (1, 3):
        shutil.rmtree(d, ignore_errors=True)
        assert run("gen-dataset", *DATA_ARGS, "--out", d / "ds", "--workers", w) == 0
        assert run("train", "--dataset", d / "ds", "--arch", "mlp", "--epochs", 2, "--out", d / "m",
                   "--workers", w) == 0
        assert run("attack", "--dataset", d / "ds", "--target", "gantry", "--model", d / "m" / "model.sfpm",
                   "--epochs", 1, "--views", "0:360:90", "--batch-denominator", 3, "--out", d / "a",
                   "--workers", w) == 0
        assert run("eval", "cross-view", "--dataset", d / "ds", "--target", "gantry", "--model",
                   d / "m" / "model.sfpm", "--snapshot", d / "a" / "snapshot.json", "--step", 30,
                   "--group", 120, "--out", d / "e", "--workers", w) == 0
        digests.append(tree_digest(d))
    assert digests[0] == digests[1]
    assert tree_digest(pipeline / "ds") == {k[3:]: v for k, v in digests[0].items() if k.startswith("ds/")}


def test_replay_from_run_config(pipeline, tmp_path):
    for step in ("ds", "m1", "atk"):
        cfg = tmp_path / f"{step}.json"
        shutil.copy(pipeline / step / "run_config.json", cfg)
        cmd = json.loads(cfg.read_text())["command"]
        assert run(cmd, "--config", cfg, "--out", tmp_path / step) == 0
        assert tree_digest(tmp_path / step) == tree_digest(pipeline / step)


def test_config_precedence(tmp_path):
    from sarsfp.cli import build_parser
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 9\nout = "x"\n[train]\nepochs = 7\nlr = 0.2\n')
    args = build_parser().parse_args(["train", "--config", str(cfg), "--lr", "0.3"])
    rc = resolve("train", args, args._explicit)
    assert rc.seed == 9 and rc.options["epochs"] == 7 and rc.options["lr"] == 0.3 and rc.out == "x"
