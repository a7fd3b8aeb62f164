"""Command-line entry point.

Every command resolves its options as defaults <- config file <- flags,
writes the resolved configuration to ``<out>/run_config.json`` before doing
any work, and can be replayed with ``sarsfp --config run_config.json <cmd>``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, ParameterSnapshot, blend_table, random_baseline, run_attack
from .classifier import ARCHITECTURES, load_model, save_model, train
from .errors import ConfigError, FormatError, SarSfpError, TrainingDivergedError, ValidationError
from .evaluation import (ablation_eval, cross_model_eval, cross_view_eval, evaluate_snapshot, iteration_sweep,
                         matrix_table, merge_reports, report_table, write_figure_csv, write_report_json)
from .imaging import normalize, write_image
from .raytracer import param_table, trace_view
from .render import RenderOptions, render_view
from .scene import load_scene, save_scene
from .targets import (azimuth_sweep, azimuth_tag, build_scene, default_specs, generate_dataset, load_dataset,
                      load_target_specs, manifest_options, manifest_scenes, read_manifest, save_target_specs,
                      DEFAULT_LEVELS)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("sarsfp")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4
PROTOCOLS = ("success", "cross-view", "cross-model", "ablation", "sweep")

COMMAND_DEFAULTS = {
    "gen-targets": {"targets": None, "level": None},
    "gen-dataset": {"targets": None, "azimuth_sweep": "0:360:1", "elevation": 15.0, "image_size": 128,
                    "no_speckle": False},
    "simulate": {"scene": None, "dataset": None, "azimuth": 0.0, "azimuth_sweep": None, "elevation": 15.0,
                 "image_size": 128, "scale_cap": None, "blend": "none", "snapshot": None, "no_speckle": False,
                 "echoes_csv": False},
    "train": {"dataset": None, "arch": "cnn-small", "epochs": 20, "lr": 0.05, "batch_size": 16},
    "attack": {"dataset": None, "scene": None, "target": None, "model": None, "epochs": 25,
               "batch_denominator": 20, "fd_step": 0.001, "lr": 0.001, "clip": 1.0,
               "lr_thresholds": "2.0,4.0", "views": "0:360:10", "components": None, "per_parameter": False,
               "random": False},
    "eval": {"protocol": None, "dataset": None, "scene": None, "target": None, "model": None, "snapshot": None,
             "models": None, "snapshots": None, "views": None, "step": 1.0, "group": 60.0, "components": None,
             "epoch_list": "12,16,25,50", "count_all": False, "epochs": 25, "batch_denominator": 20,
             "fd_step": 0.001, "lr": 0.001, "clip": 1.0, "lr_thresholds": "2.0,4.0"},
}
GLOBAL_DEFAULTS = {"seed": 0, "out": None, "workers": None}


@dataclass
class RunConfig:
    command: str
    options: dict
    seed: int
    out: str
    workers: int
    sub_seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "version": __version__, "seed": self.seed, "out": self.out,
                "workers": self.workers, "sub_seeds": self.sub_seeds, **{self.command: self.options}}

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "run_config.json").write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def sub_seed(seed: int, name: str) -> int:
    """Named child seed so streams for different purposes never overlap."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


SEED_NAMES = ("blend", "speckle", "split", "init", "batches", "random")


# --------------------------------------------------------------------------
# option parsing

def _norm(d: dict) -> dict:
    return {str(k).replace("-", "_"): v for k, v in d.items()}


def read_config_file(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None


def resolve(command: str, args: argparse.Namespace, explicit: set[str]) -> RunConfig:
    """defaults <- config file (top level, then the command's section) <- flags."""
    opts = dict(COMMAND_DEFAULTS[command])
    glob = dict(GLOBAL_DEFAULTS)
    if args.config:
        doc = _norm(read_config_file(args.config))
        section = _norm(doc.get(command, doc.get(command.replace("-", "_"), {})) or {})
        for source in (doc, section):
            for k, v in source.items():
                if k in opts:
                    opts[k] = v
                elif k in glob:
                    glob[k] = v
    for k in explicit:
        if k in opts:
            opts[k] = getattr(args, k)
        elif k in glob:
            glob[k] = getattr(args, k)
    if glob["out"] is None:
        raise ConfigError("--out is required")
    workers = glob["workers"] if glob["workers"] is not None else (os.cpu_count() or 1)
    if int(workers) < 1:
        raise ConfigError("--workers must be >= 1")
    seed = int(glob["seed"])
    if seed < 0 or seed >= 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return RunConfig(command, opts, seed, str(glob["out"]), int(workers),
                     {n: sub_seed(seed, n) for n in SEED_NAMES})


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` (stop exclusive) or a comma list."""
    try:
        if ":" in str(text):
            start, stop, step = (float(x) for x in str(text).split(":"))
            return azimuth_sweep(start, stop, step)
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse azimuth list {text!r}") from None


def parse_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def parse_named(value) -> dict[str, str]:
    """``name=path`` pairs (comma list or sequence)."""
    out = {}
    if isinstance(value, dict):
        return {str(k): str(v) for k, v in value.items()}
    for item in parse_list(value):
        if "=" not in item:
            raise ConfigError(f"expected name=path, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _mark(namespace, dest):
    if not hasattr(namespace, "_explicit"):
        namespace._explicit = set()
    namespace._explicit.add(dest)


class _TrackingAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        if values is not None:
            _mark(namespace, self.dest)


class _TrackingTrue(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, True)
        _mark(namespace, self.dest)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sarsfp", description="Ray-traced SAR simulation and scattering-parameter attacks.")
    p.add_argument("--version", action="version", version=__version__)

    def common(sp):
        sp.add_argument("--config", default=None, help="TOML or JSON file mirroring flag names")
        sp.add_argument("--seed", type=int, action=_TrackingAction, default=None)
        sp.add_argument("--out", action=_TrackingAction, default=None)
        sp.add_argument("--workers", type=int, action=_TrackingAction, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    def opt(sp, name, **kw):
        if kw.pop("flag", False):
            sp.add_argument(name, action=_TrackingTrue, default=None, **kw)
        else:
            sp.add_argument(name, action=_TrackingAction, default=None, **kw)

    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    g = sub.add_parser("gen-targets", help="write default target specs and scene files")
    common(g)
    opt(g, "--targets", help="target spec JSON (default: built-in classes)")
    opt(g, "--level", type=int, help="tessellation level for every class")

    g = sub.add_parser("gen-dataset", help="render a labeled dataset")
    common(g)
    opt(g, "--targets")
    opt(g, "--azimuth-sweep")
    opt(g, "--elevation", type=float)
    opt(g, "--image-size", type=int)
    opt(g, "--no-speckle", flag=True)

    g = sub.add_parser("simulate", help="render images of one scene")
    common(g)
    opt(g, "--scene")
    opt(g, "--dataset", help="dataset directory supplying the normalization cap")
    opt(g, "--azimuth", type=float)
    opt(g, "--azimuth-sweep")
    opt(g, "--elevation", type=float)
    opt(g, "--image-size", type=int)
    opt(g, "--scale-cap", type=float)
    opt(g, "--blend", choices=["none", "scene", "snapshot"])
    opt(g, "--snapshot")
    opt(g, "--no-speckle", flag=True)
    opt(g, "--echoes-csv", flag=True)

    g = sub.add_parser("train", help="train a classifier on a dataset")
    common(g)
    opt(g, "--dataset")
    opt(g, "--arch")
    opt(g, "--epochs", type=int)
    opt(g, "--lr", type=float)
    opt(g, "--batch-size", type=int)

    def attack_opts(g):
        opt(g, "--dataset")
        opt(g, "--scene", help="scene file (default: the dataset's scene for --target)")
        opt(g, "--target", help="true class name or index")
        opt(g, "--model")
        opt(g, "--epochs", type=int)
        opt(g, "--batch-denominator", type=int)
        opt(g, "--fd-step", type=float)
        opt(g, "--lr", type=float)
        opt(g, "--clip", type=float)
        opt(g, "--lr-thresholds")
        opt(g, "--views")
        opt(g, "--components")

    g = sub.add_parser("attack", help="optimize blend coefficients against a model")
    common(g)
    attack_opts(g)
    opt(g, "--per-parameter", flag=True)
    opt(g, "--random", flag=True, help="write the random baseline instead of attacking")

    g = sub.add_parser("eval", help="run an evaluation protocol")
    g.add_argument("protocol", nargs="?", action=_TrackingAction, default=None, help="|".join(PROTOCOLS))
    common(g)
    attack_opts(g)
    opt(g, "--snapshot")
    opt(g, "--models", help="name=path,... (cross-model)")
    opt(g, "--snapshots", help="name=path,... (cross-model)")
    opt(g, "--step", type=float)
    opt(g, "--group", type=float)
    opt(g, "--epoch-list")
    opt(g, "--count-all", flag=True)
    return p


# --------------------------------------------------------------------------
# shared loaders

def _class_index(manifest: dict, target) -> int:
    names = manifest["class_names"]
    if target is None:
        raise ConfigError("--target is required")
    if str(target) in names:
        return names.index(str(target))
    try:
        idx = int(target)
    except ValueError:
        raise ConfigError(f"unknown class {target!r}; valid: {', '.join(names)}") from None
    if not 0 <= idx < len(names):
        raise ConfigError(f"class index {idx} out of range")
    return idx


def _need(opts: dict, key: str) -> str:
    if not opts.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return opts[key]


def load_context(opts: dict):
    """(manifest, render options, scene, true class index)."""
    manifest = read_manifest(_need(opts, "dataset"))
    options = manifest_options(manifest)
    cls = _class_index(manifest, opts.get("target"))
    if opts.get("scene"):
        scene = load_scene(opts["scene"])
    else:
        scene = manifest_scenes(manifest)[manifest["class_names"][cls]]
    return manifest, options, scene, cls


def attack_config(opts: dict, rc: RunConfig, cls: int) -> AttackConfig:
    comps = parse_list(opts.get("components")) or None
    return AttackConfig(fd_step=float(opts["fd_step"]), lr=float(opts["lr"]), epochs=int(opts["epochs"]),
                        batch_denominator=int(opts["batch_denominator"]), clip_bound=float(opts["clip"]),
                        lr_drop_thresholds=tuple(float(x) for x in parse_list(opts["lr_thresholds"])),
                        view_azimuths_deg=tuple(parse_range(opts.get("views") or "0:360:10")),
                        target_class=cls, seed=rc.sub_seeds["batches"], component_restriction=comps,
                        per_parameter=bool(opts.get("per_parameter", False)))


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands

def cmd_gen_targets(rc: RunConfig) -> None:
    out = Path(rc.out)
    specs = load_target_specs(rc.options["targets"]) if rc.options["targets"] else default_specs()
    save_target_specs(specs, out / "targets.json")
    for spec in specs:
        level = rc.options["level"]
        level = DEFAULT_LEVELS.get(spec.class_id, 1) if level is None else int(level)
        scene = build_scene(spec, level, blend_seed=rc.sub_seeds["blend"])
        save_scene(scene, out / f"{spec.class_id}.scene.json")
        print(f"{spec.class_id}: {scene.n_meshes} meshes, components {', '.join(scene.components)}")


def cmd_gen_dataset(rc: RunConfig) -> None:
    o = rc.options
    specs = load_target_specs(o["targets"]) if o["targets"] else default_specs()
    options = RenderOptions(elevation_deg=float(o["elevation"]), image_size=int(o["image_size"]),
                            run_seed=rc.sub_seeds["speckle"], speckle=not o["no_speckle"])
    gen = generate_dataset(specs, parse_range(o["azimuth_sweep"]), options, seed=rc.sub_seeds["split"],
                           out_dir=rc.out, workers=rc.workers, blend_seed=rc.sub_seeds["blend"])
    d = gen.dataset
    print(f"{len(d.labels)} images ({int(d.is_train.sum())} train / {int((~d.is_train).sum())} test), "
          f"scale cap {gen.options.scale_cap:.6g}")


def cmd_simulate(rc: RunConfig) -> None:
    o = rc.options
    scene = load_scene(_need(o, "scene"), seed=rc.sub_seeds["blend"])
    azimuths = parse_range(o["azimuth_sweep"]) if o["azimuth_sweep"] else [float(o["azimuth"])]
    if o["dataset"]:
        base = manifest_options(read_manifest(o["dataset"]))
        options = RenderOptions(**{**base.to_dict(), "speckle": not o["no_speckle"]})
    else:
        options = RenderOptions(elevation_deg=float(o["elevation"]), image_size=int(o["image_size"]),
                                run_seed=rc.sub_seeds["speckle"], speckle=not o["no_speckle"],
                                scale_cap=o["scale_cap"])
    if o["scale_cap"] is not None:
        options = options.with_cap(float(o["scale_cap"]))
    params = None
    if o["blend"] == "scene":
        params = blend_table(scene, scene.blend)[:-2]
    elif o["blend"] == "snapshot":
        snap = ParameterSnapshot.load(_need(o, "snapshot"))
        params = blend_table(snap.apply(scene), snap.blend)[:-2]
    out = Path(rc.out)
    single = len(azimuths) == 1 and out.suffix == ".pgm"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    raws = [render_view(scene, az, options, params, rc.workers, normalized=False) for az in azimuths]
    if options.scale_cap is None:
        # no experiment cap given: fix one for this batch of renders
        cap = float(np.percentile(np.stack([r.pixels for r in raws]), 99.5)) or 1.0
        options = options.with_cap(cap)
        log.info("scale cap %.6g from the 99.5th percentile of these renders", cap)
    for az, raw in zip(azimuths, raws):
        img = normalize(raw, options.scale_cap)
        path = out if single else out / f"{azimuth_tag(az)}.pgm"
        write_image(img, path)
        print(f"{path}: azimuth {az:g} dropped {raw.dropped_count} echoes "
              f"(intensity {raw.dropped_intensity:.6g})", file=sys.stderr)
        if o["echoes_csv"]:
            tr = trace_view(scene, options.sensor(scene, az), options.max_bounces, rc.workers)
            tr.echoes(param_table(scene, params), options.intensity_floor).write_csv(path.with_suffix(".csv"))


def cmd_train(rc: RunConfig) -> None:
    o = rc.options
    if o["arch"] not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {o['arch']!r}; valid ids: {', '.join(ARCHITECTURES)}")
    dataset, _ = load_dataset(_need(o, "dataset"))
    model, report = train(dataset, o["arch"], seed=rc.sub_seeds["init"], epochs=int(o["epochs"]),
                          lr=float(o["lr"]), batch_size=int(o["batch_size"]))
    out = Path(rc.out)
    save_model(model, out / "model.sfpm")
    (out / "train_report.json").write_text(json.dumps(
        {"architecture": o["arch"], "train_accuracy": report.train_accuracy,
         "test_accuracy": report.test_accuracy, "loss_history": report.loss_history}, indent=1), encoding="utf-8")
    print(f"train accuracy {100 * report.train_accuracy:.2f}%  test accuracy {100 * report.test_accuracy:.2f}%")


def cmd_attack(rc: RunConfig) -> None:
    o = rc.options
    _, options, scene, cls = load_context(o)
    config = attack_config(o, rc, cls)
    out = Path(rc.out)
    if o["random"]:
        snap = random_baseline(scene, config, rc.sub_seeds["random"])
    else:
        model = load_model(_need(o, "model"))
        print("epoch,avg_loss,lr")
        snap = run_attack(scene, model, config, options, rc.workers,
                          progress=lambda h: print(f"{h['epoch']},{h['avg_loss']!r},{h['lr']!r}", flush=True))
    snap.save(out / "snapshot.json")
    snap.write_loss_csv(out / "loss.csv")
    print(f"snapshot {out / 'snapshot.json'} sha256 {_digest(out / 'snapshot.json')}", file=sys.stderr)


def cmd_eval(rc: RunConfig) -> None:
    o = rc.options
    protocol = o["protocol"]
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; valid: {', '.join(PROTOCOLS)}")
    _, options, scene, cls = load_context(o)
    config = attack_config(o, rc, cls)
    out = Path(rc.out)
    count_all = bool(o["count_all"])
    views = parse_range(o["views"]) if o["views"] else list(config.view_azimuths_deg)
    result = None
    if protocol == "success":
        snap = ParameterSnapshot.load(_need(o, "snapshot"))
        reports = [evaluate_snapshot(scene, snap, load_model(_need(o, "model")), options, cls, views,
                                     rc.workers, count_all)]
        table = report_table(reports)
    elif protocol == "cross-view":
        snap = ParameterSnapshot.load(_need(o, "snapshot"))
        reports = cross_view_eval(scene, snap, load_model(_need(o, "model")), options, cls,
                                  float(o["step"]), float(o["group"]), rc.workers, count_all)
        table = report_table(reports) + "\n" + report_table([merge_reports(reports)])
    elif protocol == "cross-model":
        snaps = {k: ParameterSnapshot.load(v) for k, v in parse_named(_need(o, "snapshots")).items()}
        models = {k: load_model(v) for k, v in parse_named(_need(o, "models")).items()}
        result = cross_model_eval(scene, snaps, models, views, options, cls, rc.workers, count_all)
        reports = list(result.reports.values())
        table = matrix_table(result)
    elif protocol == "ablation":
        comps = parse_list(o["components"]) or list(scene.components)
        reports = ablation_eval(scene, load_model(_need(o, "model")), replace(config, component_restriction=None),
                                comps, options, rc.workers, count_all)
        table = report_table(reports, "component")
    else:
        epochs = [int(e) for e in parse_list(o["epoch_list"])]
        reports = iteration_sweep(scene, load_model(_need(o, "model")), config, epochs, options, rc.workers,
                                  count_all)
        table = report_table(reports, "epochs")
    # worker count and output path do not affect results, so they stay out of the hash
    hashed = {k: v for k, v in rc.to_dict().items() if k not in ("out", "workers")}
    write_report_json(out / "report.json", protocol, reports, hashed)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    fig = {"cross-view": "fig8.csv", "ablation": "fig7.csv", "cross-model": "fig9.csv", "sweep": "table2.csv"}
    if protocol in fig:
        write_figure_csv(out / fig[protocol], protocol, reports, result)
    print(table)


COMMANDS = {"gen-targets": cmd_gen_targets, "gen-dataset": cmd_gen_dataset, "simulate": cmd_simulate,
            "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval}


def run_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    return out.parent if out.suffix == ".pgm" else out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = resolve(args.command, args, getattr(args, "_explicit", set()))
        rc.write(run_dir(rc))
        COMMANDS[args.command](rc)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, FormatError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SarSfpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
