import json
import math

import numpy as np
import pytest

from sarsfp.attack import AttackConfig, ParameterSnapshot, random_baseline
from sarsfp.classifier import build_model
from sarsfp.errors import ConfigError, ValidationError
from sarsfp.evaluation import (EvalReport, ViewRecord, ablation_eval, ablation_start, aggregate,
                               attack_success_rate, cross_model_eval, cross_view_eval, evaluate_snapshot,
                               group_views, iteration_sweep, matrix_table, predictions, report_table,
                               success_rate_from_counts, verify_report, write_figure_csv, write_report_json)
from sarsfp.render import RenderOptions


def records(n_attacked, n_fooled, n_skipped=0):
    out = [ViewRecord(float(i), 0, 1 if i < n_fooled else 0, 0) for i in range(n_attacked)]
    out += [ViewRecord(100.0 + i, 2, 2, 0) for i in range(n_skipped)]
    return out


@pytest.mark.parametrize("fooled,expected", [(35, 97.22), (18, 50.0), (0, 0.0)])
def test_success_rate_cases(fooled, expected):
    assert round(attack_success_rate(records(36, fooled)), 2) == expected
    assert success_rate_from_counts(fooled, 36) == pytest.approx(100.0 * fooled / 36)


def test_only_clean_correct_views_count():
    recs = records(10, 5, n_skipped=10)
    assert attack_success_rate(recs) == 50.0
    assert attack_success_rate(recs, count_all=True) == 75.0


def test_undefined_rate():
    assert attack_success_rate(records(0, 0, n_skipped=3)) is None
    assert success_rate_from_counts(0, 0) is None
    with pytest.raises(ValidationError):
        attack_success_rate([])
    with pytest.raises(ValidationError):
        success_rate_from_counts(5, 3)


def test_aggregate_fields():
    a = aggregate(records(4, 1, n_skipped=1))
    assert a == {"n_views": 5, "n_attacked": 4, "n_fooled": 1, "success_rate_percent": 25.0,
                 "clean_accuracy": 0.8, "adversarial_accuracy": 0.6}


def test_report_round_trip_and_verify():
    rep = EvalReport("success", "all", records(6, 2, 1))
    d = json.loads(json.dumps(rep.to_dict()))
    assert verify_report(d)
    d["aggregates"]["n_fooled"] = 5
    assert not verify_report(d)


def test_grouping():
    groups = group_views([float(a) for a in range(360)], 60.0)
    assert [g for g, _ in groups] == ["0-60", "60-120", "120-180", "180-240", "240-300", "300-360"]
    assert all(len(v) == 60 for _, v in groups)
    single = group_views([float(a) for a in range(0, 360, 10)], 360.0)
    assert len(single) == 1 and len(single[0][1]) == 36


# rendered protocols on a tiny scene

OPTS = RenderOptions(image_size=16, scale_cap=0.3, run_seed=1)


@pytest.fixture
def setup(small_box_scene):
    clf = build_model("linear", 3, (16, 16), seed=4, pool=1)
    return small_box_scene, clf


def zero_snapshot(scene, azimuths=(0.0, 90.0, 180.0, 270.0)):
    cfg = AttackConfig(epochs=0, view_azimuths_deg=azimuths)
    return ParameterSnapshot(np.zeros((scene.n_meshes, 2)), cfg, [], scene.fingerprint())


def test_zero_blend_has_clean_misclassification_rate(setup):
    scene, clf = setup
    rep = evaluate_snapshot(scene, zero_snapshot(scene), clf, OPTS, 1, count_all=True)
    a = rep.aggregates
    assert rep.success_rate == pytest.approx(100.0 * (1.0 - a["clean_accuracy"]))
    assert evaluate_snapshot(scene, zero_snapshot(scene), clf, OPTS, 1).success_rate in (0.0, None)


def test_cross_view_groups(setup):
    scene, clf = setup
    reps = cross_view_eval(scene, zero_snapshot(scene), clf, OPTS, 0, azimuth_step_deg=10.0,
                           group_size_deg=60.0, count_all=True)
    assert len(reps) == 6 and all(len(r.records) == 6 for r in reps)
    clean = predictions(scene, [np.zeros((scene.n_meshes, 2))], clf, range(0, 360, 10), OPTS)[0]
    wrong = 100.0 * np.mean(clean[:6] != 0)
    assert reps[0].success_rate == pytest.approx(wrong)
    single = cross_view_eval(scene, zero_snapshot(scene), clf, OPTS, 0, 10.0, 360.0)
    assert len(single) == 1 and len(single[0].records) == 36
    with pytest.raises(ConfigError):
        cross_view_eval(scene, zero_snapshot(scene), clf, OPTS, 0, 7.0, 60.0)


def test_predictions_chunking_invariant(setup):
    scene, clf = setup
    blend = scene.blend
    azs = [float(a) for a in range(0, 360, 30)]
    a = predictions(scene, [blend], clf, azs, OPTS, chunk=5)[0]
    b = predictions(scene, [blend], clf, azs, OPTS, chunk=36)[0]
    assert np.array_equal(a, b)


def test_cross_model_single_matches_standard_eval(setup):
    scene, clf = setup
    snap = random_baseline(scene, AttackConfig(view_azimuths_deg=(0.0, 45.0, 90.0)), 3)
    res = cross_model_eval(scene, {"a": snap}, {"a": clf}, snap.config.view_azimuths_deg, OPTS, 2, count_all=True)
    std = evaluate_snapshot(scene, snap, clf, OPTS, 2, count_all=True)
    assert res.matrix().shape == (1, 1)
    assert res.matrix()[0, 0] == pytest.approx(std.success_rate)
    assert "source" in matrix_table(res)


def test_cross_model_zero_blend_columns(setup):
    scene, clf = setup
    other = build_model("mlp", 3, (16, 16), seed=9, pool=1)
    snaps = {"a": zero_snapshot(scene), "b": zero_snapshot(scene)}
    views = [0.0, 60.0, 120.0, 180.0]
    res = cross_model_eval(scene, snaps, {"a": clf, "b": other}, views, OPTS, 1, count_all=True)
    m = res.matrix()
    for j, model in enumerate([clf, other]):
        clean = predictions(scene, [np.zeros((scene.n_meshes, 2))], model, views, OPTS)[0]
        assert np.all(m[:, j] == pytest.approx(100.0 * np.mean(clean != 1)))


def test_ablation_start(small_box_scene):
    idx_turret = [i for i, m in enumerate(small_box_scene.meshes) if m.component_name == "turret"]
    start = ablation_start(small_box_scene, ["turret"])
    assert np.array_equal(start[idx_turret], small_box_scene.blend[idx_turret])
    others = np.setdiff1d(np.arange(small_box_scene.n_meshes), idx_turret)
    assert not start[others].any()
    assert np.array_equal(ablation_start(small_box_scene, ["hull", "turret"]), small_box_scene.blend)


def test_ablation_reports(setup):
    scene, clf = setup
    cfg = AttackConfig(epochs=1, batch_denominator=3, view_azimuths_deg=(0.0, 120.0, 240.0))
    reps = ablation_eval(scene, clf, cfg, ["hull", "turret"], OPTS)
    assert [r.group for r in reps] == ["hull", "turret"]
    assert sum(r.meta["area_share"] for r in reps) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        ablation_eval(scene, clf, cfg, ["barrel"], OPTS)


def test_sweep_zero_epochs_on_clean_scene(setup):
    scene, clf = setup
    clean_scene = scene.with_blend(np.zeros((scene.n_meshes, 2)))
    cfg = AttackConfig(batch_denominator=3, view_azimuths_deg=(0.0, 90.0, 180.0, 270.0))
    reps = iteration_sweep(clean_scene, clf, cfg, [0], OPTS, count_all=True)
    assert len(reps) == 1
    assert reps[0].success_rate == pytest.approx(100.0 * (1.0 - reps[0].aggregates["clean_accuracy"]))


def test_sweep_deterministic(setup, tmp_path):
    scene, clf = setup
    cfg = AttackConfig(batch_denominator=3, view_azimuths_deg=(0.0, 180.0), lr=0.05)
    a = iteration_sweep(scene, clf, cfg, [0, 1, 2], OPTS)
    b = iteration_sweep(scene, clf, cfg, [0, 1, 2], OPTS)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [r.group for r in a] == ["0", "1", "2"]
    write_report_json(tmp_path / "r.json", "sweep", a, cfg.to_dict())
    doc = json.loads((tmp_path / "r.json").read_text())
    assert all(verify_report(g) for g in doc["groups"])
    write_figure_csv(tmp_path / "t.csv", "sweep", a)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epochs,success_rate,clean_accuracy,adversarial_accuracy"
    assert "success%" in report_table(a, "epochs")


def test_snapshot_scene_mismatch(setup, small_box_scene):
    scene, clf = setup
    snap = zero_snapshot(scene)
    snap.scene_hash = "0" * 64
    with pytest.raises(ValidationError):
        evaluate_snapshot(scene, snap, clf, OPTS, 0)


def test_nan_for_undefined_matrix_cells():
    from sarsfp.evaluation import CrossModelResult
    res = CrossModelResult(["a"], ["a"], {("a", "a"): EvalReport("cross-model", "a->a", records(0, 0, 2))})
    assert math.isnan(res.matrix()[0, 0])
    assert "undefined" in matrix_table(res)
