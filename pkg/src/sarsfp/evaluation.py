"""Success rates and the transfer / ablation / sweep protocols.

Every report stores its raw per-view records next to the aggregates, so
any number in a table can be recomputed from the records alone.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import (AttackConfig, AttackObjective, ParameterSnapshot, blend_table, run_attack,
                     run_attack_captures)
from .classifier import ClassifierModel, predict_batch
from .errors import ConfigError, ValidationError
from .render import RenderOptions, ViewSet
from .scene import Scene, component_mask

log = logging.getLogger(__name__)

VIEW_CHUNK = 36


@dataclass(frozen=True)
class ViewRecord:
    azimuth_deg: float
    clean_prediction: int
    adversarial_prediction: int
    true_class: int

    @property
    def attacked(self) -> bool:
        return self.clean_prediction == self.true_class

    @property
    def fooled(self) -> bool:
        return self.adversarial_prediction != self.true_class


def attack_success_rate(records, count_all: bool = False) -> float | None:
    """``100 * fooled / attacked``. Only views the clean model got right count
    as attacked unless ``count_all``; ``None`` when nothing was attacked."""
    records = list(records)
    if not records:
        raise ValidationError("success rate needs at least one record")
    pool = records if count_all else [r for r in records if r.attacked]
    if not pool:
        return None
    return 100.0 * sum(r.fooled for r in pool) / len(pool)


def success_rate_from_counts(n_fooled: int, n_attacked: int) -> float | None:
    if n_attacked < 0 or not 0 <= n_fooled <= n_attacked:
        raise ValidationError(f"invalid counts fooled={n_fooled} attacked={n_attacked}")
    return None if n_attacked == 0 else 100.0 * n_fooled / n_attacked


def aggregate(records, count_all: bool = False) -> dict:
    records = list(records)
    n = len(records)
    pool = records if count_all else [r for r in records if r.attacked]
    return {
        "n_views": n,
        "n_attacked": len(pool),
        "n_fooled": sum(r.fooled for r in pool),
        "success_rate_percent": attack_success_rate(records, count_all) if n else None,
        "clean_accuracy": sum(r.clean_prediction == r.true_class for r in records) / n if n else None,
        "adversarial_accuracy": sum(r.adversarial_prediction == r.true_class for r in records) / n if n else None,
    }


@dataclass
class EvalReport:
    protocol: str
    group: str
    records: list[ViewRecord]
    count_all: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.records, self.count_all)

    @property
    def success_rate(self) -> float | None:
        return self.aggregates["success_rate_percent"]

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "group": self.group, "count_all": self.count_all,
                "records": [{"azimuth_deg": r.azimuth_deg, "clean_prediction": r.clean_prediction,
                             "adversarial_prediction": r.adversarial_prediction, "true_class": r.true_class}
                            for r in self.records],
                "aggregates": self.aggregates, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        recs = [ViewRecord(float(r["azimuth_deg"]), int(r["clean_prediction"]), int(r["adversarial_prediction"]),
                           int(r["true_class"])) for r in d["records"]]
        return cls(d["protocol"], d["group"], recs, bool(d.get("count_all", False)), dict(d.get("meta", {})))


def verify_report(d: dict) -> bool:
    """True when the stored aggregates match a recomputation from records."""
    return EvalReport.from_dict(d).aggregates == d["aggregates"]


def merge_reports(reports, protocol: str | None = None, group: str = "all") -> EvalReport:
    reports = list(reports)
    records = [r for rep in reports for r in rep.records]
    return EvalReport(protocol or reports[0].protocol, group, records, reports[0].count_all)


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


# --------------------------------------------------------------------------
# per-view evaluation

def predictions(scene: Scene, blends, classifier: ClassifierModel, azimuths, options: RenderOptions,
                workers: int = 1, chunk: int = VIEW_CHUNK) -> list[np.ndarray]:
    """Predicted class per view for each blend. Views are traced in chunks so
    long sweeps never hold every trace in memory."""
    azimuths = [float(a) for a in azimuths]
    tables = [blend_table(scene, b) for b in blends]
    out = [[] for _ in tables]
    for s in range(0, len(azimuths), chunk):
        views = ViewSet(scene, azimuths[s:s + chunk], options, workers)
        for k, table in enumerate(tables):
            out[k].append(predict_batch(classifier, views.images(table)))
    return [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in out]


def evaluate_views(scene: Scene, blend: np.ndarray, classifier: ClassifierModel, azimuths,
                   options: RenderOptions, true_class: int, workers: int = 1) -> list[ViewRecord]:
    """Clean (zero blend) vs adversarial predictions at each azimuth."""
    clean, adv = predictions(scene, [np.zeros_like(blend), blend], classifier, azimuths, options, workers)
    return [ViewRecord(float(a), int(c), int(p), int(true_class)) for a, c, p in zip(azimuths, clean, adv)]


def evaluate_snapshot(scene: Scene, snapshot: ParameterSnapshot, classifier: ClassifierModel,
                      options: RenderOptions, true_class: int, azimuths=None, workers: int = 1,
                      count_all: bool = False, protocol: str = "success", group: str = "all") -> EvalReport:
    if snapshot.scene_hash != scene.fingerprint():
        raise ValidationError("snapshot was produced for a different scene")
    azimuths = snapshot.config.view_azimuths_deg if azimuths is None else azimuths
    recs = evaluate_views(scene, snapshot.blend, classifier, azimuths, options, true_class, workers)
    return EvalReport(protocol, group, recs, count_all, {"kind": snapshot.kind})


# --------------------------------------------------------------------------
# protocols

def group_views(azimuths, group_size_deg: float) -> list[tuple[str, list[float]]]:
    groups: dict[int, list[float]] = {}
    for a in azimuths:
        groups.setdefault(int((a % 360.0) // group_size_deg), []).append(a)
    return [(f"{k * group_size_deg:g}-{(k + 1) * group_size_deg:g}", groups[k]) for k in sorted(groups)]


def _check_divides(step: float, what: str) -> None:
    if not step > 0 or abs(360.0 / step - round(360.0 / step)) > 1e-9:
        raise ConfigError(f"{what} {step} must divide 360")


def cross_view_eval(scene: Scene, snapshot: ParameterSnapshot, classifier: ClassifierModel,
                    options: RenderOptions, true_class: int, azimuth_step_deg: float = 1.0,
                    group_size_deg: float = 60.0, workers: int = 1, count_all: bool = False) -> list[EvalReport]:
    """Evaluate on a dense azimuth sweep and report per azimuth group."""
    _check_divides(azimuth_step_deg, "azimuth step")
    _check_divides(group_size_deg, "group size")
    n = int(round(360.0 / azimuth_step_deg))
    azimuths = [i * azimuth_step_deg for i in range(n)]
    recs = evaluate_snapshot(scene, snapshot, classifier, options, true_class, azimuths, workers,
                             count_all).records
    by_az = {r.azimuth_deg: r for r in recs}
    return [EvalReport("cross-view", name, [by_az[a] for a in views], count_all)
            for name, views in group_views(azimuths, group_size_deg)]


@dataclass
class CrossModelResult:
    sources: list[str]
    targets: list[str]
    reports: dict[tuple[str, str], EvalReport]

    def matrix(self) -> np.ndarray:
        """Success rates, rows = source model, columns = evaluated model
        (NaN where nothing was attacked)."""
        m = np.full((len(self.sources), len(self.targets)), np.nan)
        for i, s in enumerate(self.sources):
            for j, t in enumerate(self.targets):
                rate = self.reports[(s, t)].success_rate
                m[i, j] = np.nan if rate is None else rate
        return m


def cross_model_eval(scene: Scene, snapshots: dict[str, ParameterSnapshot], classifiers: dict[str, ClassifierModel],
                     views, options: RenderOptions, true_class: int, workers: int = 1,
                     count_all: bool = False) -> CrossModelResult:
    """Entry (i, j): snapshot optimized against model i, evaluated on model j."""
    if not snapshots or not classifiers:
        raise ConfigError("cross-model evaluation needs at least one snapshot and one classifier")
    views = [float(v) for v in views]
    sources, targets = list(snapshots), list(classifiers)
    for name, snap in snapshots.items():
        if snap.scene_hash != scene.fingerprint():
            raise ValidationError(f"snapshot {name!r} was produced for a different scene")
    blends = [np.zeros((scene.n_meshes, 2))] + [snapshots[s].blend for s in sources]
    reports = {}
    viewset = ViewSet(scene, views, options, workers)
    images = [viewset.images(blend_table(scene, b)) for b in blends]
    for t in targets:
        preds = [predict_batch(classifiers[t], im) for im in images]
        clean = preds[0]
        for i, s in enumerate(sources):
            recs = [ViewRecord(a, int(c), int(p), int(true_class)) for a, c, p in zip(views, clean, preds[i + 1])]
            reports[(s, t)] = EvalReport("cross-model", f"{s}->{t}", recs, count_all)
    return CrossModelResult(sources, targets, reports)


def ablation_start(scene: Scene, components) -> np.ndarray:
    """Initial blend for a restricted run: the scene's coefficients on the
    selected meshes, zero (object material) everywhere else."""
    idx = component_mask(scene, components)
    if idx.size == scene.n_meshes:
        return scene.blend.copy()
    start = np.zeros_like(scene.blend)
    start[idx] = scene.blend[idx]
    return start


def ablation_eval(scene: Scene, classifier: ClassifierModel, config: AttackConfig, components,
                  options: RenderOptions, workers: int = 1, count_all: bool = False,
                  objective: AttackObjective | None = None) -> list[EvalReport]:
    """One restricted attack per component; untouched parts keep the object
    material so each rate reflects that component alone."""
    components = list(components)
    if not components:
        raise ConfigError("ablation needs at least one component")
    objective = objective or AttackObjective(scene, classifier, config.view_azimuths_deg, options,
                                             config.target_class, workers)
    area = scene.areas
    reports = []
    for comp in components:
        labels = (comp,) if isinstance(comp, str) else tuple(comp)
        idx = component_mask(scene, labels)
        if idx.size == 0:
            raise ConfigError(f"component {'+'.join(labels)!r} has no meshes")
        cfg = replace(config, component_restriction=labels)
        snap = run_attack(scene, classifier, cfg, initial_blend=ablation_start(scene, labels), objective=objective)
        rep = evaluate_snapshot(scene, snap, classifier, options, config.target_class, workers=workers,
                                count_all=count_all, protocol="ablation", group="+".join(labels))
        rep.meta.update(mesh_share=idx.size / scene.n_meshes, area_share=float(area[idx].sum() / area.sum()),
                        n_meshes=int(idx.size), final_loss=(snap.loss_history[-1]["avg_loss"]
                                                            if snap.loss_history else None))
        reports.append(rep)
        log.info("ablation %s: success %s", rep.group, rep.success_rate)
    return reports


def iteration_sweep(scene: Scene, classifier: ClassifierModel, config: AttackConfig, epoch_list,
                    options: RenderOptions, workers: int = 1, count_all: bool = False,
                    objective: AttackObjective | None = None) -> list[EvalReport]:
    """Snapshots taken from one run of ``max(epoch_list)`` epochs, each
    evaluated on the attack views."""
    epoch_list = [int(e) for e in epoch_list]
    objective = objective or AttackObjective(scene, classifier, config.view_azimuths_deg, options,
                                             config.target_class, workers)
    start = ablation_start(scene, config.component_restriction) if config.component_restriction else None
    snaps = run_attack_captures(scene, objective, config, epoch_list, start)
    reports = []
    for e in epoch_list:
        rep = evaluate_snapshot(scene, snaps[e], classifier, options, config.target_class, workers=workers,
                                count_all=count_all, protocol="sweep", group=str(e))
        rep.meta["epochs"] = e
        reports.append(rep)
    return reports


# --------------------------------------------------------------------------
# output

def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_table(reports, key: str = "group") -> str:
    rows = []
    for rep in reports:
        a = rep.aggregates
        rows.append([rep.group, a["n_views"], a["n_attacked"], a["n_fooled"],
                     None if a["clean_accuracy"] is None else 100.0 * a["clean_accuracy"],
                     None if a["adversarial_accuracy"] is None else 100.0 * a["adversarial_accuracy"],
                     a["success_rate_percent"]])
    return format_table([key, "views", "attacked", "fooled", "clean_acc%", "adv_acc%", "success%"], rows)


def matrix_table(result: CrossModelResult) -> str:
    m = result.matrix()
    rows = [[s] + [None if np.isnan(v) else float(v) for v in m[i]] for i, s in enumerate(result.sources)]
    return format_table(["source \\ eval"] + result.targets, rows)


def write_report_json(path, protocol: str, reports, config: dict, extra: dict | None = None) -> None:
    doc = {"protocol": protocol, "config_hash": config_hash(config),
           "records": [rec for rep in reports for rec in rep.to_dict()["records"]],
           "aggregates": merge_reports(reports, protocol).aggregates if reports else {},
           "groups": [rep.to_dict() for rep in reports]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def write_csv(path, headers, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        w.writerows([["" if v is None else v for v in row] for row in rows])


def write_figure_csv(path, protocol: str, reports=None, result: CrossModelResult | None = None) -> None:
    """fig7 (ablation), fig8 (cross-view), fig9 (cross-model), table2 (sweep)."""
    if protocol == "ablation":
        write_csv(path, ["component", "mesh_share", "area_share", "success_rate"],
                  [[r.group, r.meta.get("mesh_share"), r.meta.get("area_share"), r.success_rate] for r in reports])
    elif protocol == "cross-view":
        write_csv(path, ["group", "n_views", "success_rate"],
                  [[r.group, len(r.records), r.success_rate] for r in reports])
    elif protocol == "cross-model":
        m = result.matrix()
        write_csv(path, ["source", "target", "success_rate"],
                  [[s, t, None if np.isnan(m[i, j]) else m[i, j]]
                   for i, s in enumerate(result.sources) for j, t in enumerate(result.targets)])
    elif protocol == "sweep":
        write_csv(path, ["epochs", "success_rate", "clean_accuracy", "adversarial_accuracy"],
                  [[r.group, r.success_rate, r.aggregates["clean_accuracy"], r.aggregates["adversarial_accuracy"]]
                   for r in reports])
    else:
        raise ConfigError(f"no figure table for protocol {protocol!r}")
