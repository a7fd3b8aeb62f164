"""Procedural vehicle-like targets and labeled dataset rendering.

Targets are composites of boxes, wedges, cylinders and domes. Every
primitive carries a component label so the attack can be restricted to one
part (turret, barrel, ...). Tessellation level ``k`` splits each facet into
``4**k`` coplanar triangles, so the geometry is unchanged by refinement.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .classifier import LabeledDataset
from .imaging import PGM_MAXVAL, ImageGrid, SarImage, normalize_pixels, read_image, speckle_seed, write_image
from .render import RenderOptions, ViewRenderer
from .raytracer import param_table
from .scene import Scene, ScatteringParams, make_mesh, random_blend

log = logging.getLogger(__name__)

MIN_MESHES = 500
MAX_MESHES = 20000

DEFAULT_BACKGROUND = ScatteringParams(f_s=0.2, f_d=0.25, f_r=1.0, f_b=1.0)
DEFAULT_GROUND_EXTENT = 8.0


@dataclass(frozen=True)
class Primitive:
    kind: str                      # box | wedge | cylinder | dome
    component: str
    center: tuple[float, float, float]
    size: tuple[float, ...]        # box/wedge: (lx, ly, lz); cylinder: (radius, length); dome: (radius,)
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    axis: str = "z"                # cylinder axis before rotation: "x" or "z"
    segments: int = 12

    def to_dict(self) -> dict:
        return {"kind": self.kind, "component": self.component, "center": list(self.center),
                "size": list(self.size), "yaw_deg": self.yaw_deg, "pitch_deg": self.pitch_deg,
                "axis": self.axis, "segments": self.segments}


@dataclass
class TargetSpec:
    class_id: str
    primitives: list[Primitive]
    component_params: dict[str, ScatteringParams] = field(default_factory=dict)

    @property
    def components(self) -> list[str]:
        seen = []
        for p in self.primitives:
            if p.component not in seen:
                seen.append(p.component)
        return seen

    def to_dict(self) -> dict:
        return {"class_id": self.class_id,
                "primitives": [p.to_dict() for p in self.primitives],
                "component_params": {k: v.to_dict() for k, v in self.component_params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSpec":
        try:
            prims = [Primitive(p["kind"], p["component"], tuple(p["center"]), tuple(p["size"]),
                               float(p.get("yaw_deg", 0.0)), float(p.get("pitch_deg", 0.0)),
                               p.get("axis", "z"), int(p.get("segments", 12)))
                     for p in d["primitives"]]
            params = {k: ScatteringParams(*(float(v[n]) for n in ("f_s", "f_d", "f_r", "f_b")))
                      for k, v in d.get("component_params", {}).items()}
            return cls(str(d["class_id"]), prims, params)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"target spec: {exc}") from None


def load_target_specs(path) -> list[TargetSpec]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    items = doc["targets"] if isinstance(doc, dict) and "targets" in doc else doc
    if isinstance(items, dict):
        items = [items]
    return [TargetSpec.from_dict(d) for d in items]


def save_target_specs(specs: list[TargetSpec], path) -> None:
    Path(path).write_text(json.dumps({"targets": [s.to_dict() for s in specs]}, indent=1), encoding="utf-8")


# --------------------------------------------------------------------------
# tessellation

def _box_faces(lx, ly, lz):
    x, y, z = lx / 2, ly / 2, lz / 2
    c = np.array([[-x, -y, -z], [x, -y, -z], [x, y, -z], [-x, y, -z],
                  [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]
    tris = []
    for a, b, cc, d in quads:
        tris.append((c[a], c[b], c[cc]))
        tris.append((c[a], c[cc], c[d]))
    return tris


def _wedge_faces(lx, ly, lz):
    # right-triangle section in x-z (vertical back face at -x, slope rising toward -x)
    x, y, z = lx / 2, ly / 2, lz / 2
    p = np.array([[-x, -y, -z], [x, -y, -z], [-x, -y, z], [-x, y, -z], [x, y, -z], [-x, y, z]])
    tris = [(p[0], p[2], p[1]), (p[3], p[4], p[5])]
    for a, b, c, d in [(0, 1, 4, 3), (0, 3, 5, 2), (1, 2, 5, 4)]:
        tris.append((p[a], p[b], p[c]))
        tris.append((p[a], p[c], p[d]))
    return tris


def _cylinder_faces(radius, length, segments):
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = length / 2
    bot = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    cb, ct = np.array([0, 0, -h]), np.array([0, 0, h])
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(bot[i], bot[j], top[j]), (bot[i], top[j], top[i]),
                 (cb, bot[j], bot[i]), (ct, top[i], top[j])]
    return tris


def _dome_faces(radius, segments):
    rings = max(2, segments // 4)
    lat = np.linspace(0, np.pi / 2, rings + 1)[:-1]  # from equator up to below the pole
    ang = 2 * np.pi * np.arange(segments) / segments
    pts = [np.column_stack([radius * np.cos(l) * np.cos(ang), radius * np.cos(l) * np.sin(ang),
                            np.full(segments, radius * np.sin(l))]) for l in lat]
    pole = np.array([0, 0, radius])
    tris = []
    for r in range(rings - 1):
        lo, hi = pts[r], pts[r + 1]
        for i in range(segments):
            j = (i + 1) % segments
            tris += [(lo[i], lo[j], hi[j]), (lo[i], hi[j], hi[i])]
    top = pts[-1]
    for i in range(segments):
        tris.append((top[i], top[(i + 1) % segments], pole))
    return tris


def _rotation(yaw_deg, pitch_deg):
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    yaw = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    pitch = np.array([[cp, 0, -sp], [0, 1, 0], [sp, 0, cp]])  # positive pitch lifts +x
    return yaw @ pitch


def primitive_triangles(prim: Primitive) -> np.ndarray:
    """Level-0 triangles of one primitive in world coordinates, wound so the
    normal points away from the primitive's centre."""
    dims = [float(s) for s in prim.size]
    if not dims or any(not s > 0 for s in dims):
        raise ValidationError(f"primitive {prim.kind!r} ({prim.component}): dimensions must be > 0")
    if prim.kind == "box":
        tris = _box_faces(*dims[:3])
    elif prim.kind == "wedge":
        tris = _wedge_faces(*dims[:3])
    elif prim.kind == "cylinder":
        if prim.segments < 3:
            raise ValidationError("cylinder needs >= 3 segments")
        tris = _cylinder_faces(dims[0], dims[1], prim.segments)
    elif prim.kind == "dome":
        if prim.segments < 4:
            raise ValidationError("dome needs >= 4 segments")
        tris = _dome_faces(dims[0], prim.segments)
    else:
        raise ValidationError(f"unknown primitive kind {prim.kind!r}")
    tris = np.array(tris, dtype=np.float64)
    inner = np.zeros(3) if prim.kind != "dome" else np.array([0, 0, 0.3 * dims[0]])
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    flip = np.einsum("ij,ij->i", n, tris.mean(axis=1) - inner) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    if prim.kind == "cylinder" and prim.axis == "x":
        tris = tris @ np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]]).T  # local z -> world x
    rot = _rotation(prim.yaw_deg, prim.pitch_deg)
    return tris @ rot.T + np.asarray(prim.center, dtype=np.float64)


def subdivide(tris: np.ndarray, level: int) -> np.ndarray:
    """Midpoint subdivision: each level multiplies the count by exactly 4."""
    for _ in range(level):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.stack([np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1),
                         np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1)], axis=1).reshape(-1, 3, 3)
    return tris


@dataclass
class TargetFragment:
    vertices: np.ndarray       # (n, 3, 3)
    components: list[str]      # per mesh
    params: list[ScatteringParams]
    component_list: list[str]


def generate_target(spec: TargetSpec, tessellation_level: int = 0) -> TargetFragment:
    if tessellation_level < 0:
        raise ValidationError("tessellation level must be >= 0")
    verts, comps, params = [], [], []
    default = ScatteringParams(0.7, 0.6, 0.3, 1.0)
    for prim in spec.primitives:
        tris = subdivide(primitive_triangles(prim), tessellation_level)
        verts.append(tris)
        comps += [prim.component] * len(tris)
        params += [spec.component_params.get(prim.component, default)] * len(tris)
    if not verts:
        raise ValidationError(f"target {spec.class_id!r} has no primitives")
    return TargetFragment(np.concatenate(verts), comps, params, spec.components)


def build_scene(spec: TargetSpec, tessellation_level: int = 1,
                background: ScatteringParams = DEFAULT_BACKGROUND,
                ground_extent: float = DEFAULT_GROUND_EXTENT, blend_seed: int = 0,
                check_count: bool = True) -> Scene:
    frag = generate_target(spec, tessellation_level)
    n = len(frag.vertices)
    if check_count and not MIN_MESHES <= n <= MAX_MESHES:
        raise ValidationError(f"target {spec.class_id!r}: {n} meshes outside [{MIN_MESHES}, {MAX_MESHES}]"
                              f" at tessellation level {tessellation_level}")
    meshes = [make_mesh(i, frag.vertices[i], frag.components[i]) for i in range(n)]
    return Scene(meshes, frag.params, background, random_blend(n, blend_seed), ground_extent,
                 frag.component_list)


# --------------------------------------------------------------------------
# default target classes

def _p(f_s, f_d, f_r=0.3, f_b=1.0):
    return ScatteringParams(f_s, f_d, f_r, f_b)


def default_specs() -> list[TargetSpec]:
    """Three classes with distinct silhouettes: a tracked vehicle with six
    named parts, a domed shelter (the shape outlier) and an open gantry."""
    steel = _p(0.7, 0.6)
    boxtank = TargetSpec("boxtank", [
        Primitive("box", "track", (0.0, 1.45, 0.45), (6.4, 0.6, 0.9)),
        Primitive("box", "track", (0.0, -1.45, 0.45), (6.4, 0.6, 0.9)),
        Primitive("box", "body", (-0.4, 0.0, 1.0), (4.8, 2.3, 1.0)),
        Primitive("wedge", "head_armor", (2.6, 0.0, 1.0), (1.6, 2.3, 1.0), yaw_deg=180.0),
        Primitive("box", "side_skirts", (0.0, 1.8, 1.15), (5.6, 0.1, 0.5)),
        Primitive("box", "side_skirts", (0.0, -1.8, 1.15), (5.6, 0.1, 0.5)),
        Primitive("cylinder", "turret", (-0.6, 0.0, 1.85), (1.2, 0.7), segments=16),
        Primitive("cylinder", "barrel", (2.35, 0.0, 1.9), (0.1, 3.5), axis="x", segments=8),
    ], {c: steel for c in ("track", "body", "head_armor", "side_skirts", "turret", "barrel")})
    dome = TargetSpec("dome", [
        Primitive("box", "base", (0.0, 0.0, 0.4), (4.0, 3.2, 0.8)),
        Primitive("dome", "dome", (0.3, 0.0, 0.8), (1.5,), segments=16),
        Primitive("cylinder", "mast", (-1.5, 1.0, 1.6), (0.08, 1.6), segments=8),
    ], {"base": steel, "dome": steel, "mast": steel})
    gantry = TargetSpec("gantry", [
        *[Primitive("box", "legs", (x, y, 1.4), (0.3, 0.3, 2.8)) for x in (-2.5, 2.5) for y in (-1.5, 1.5)],
        Primitive("box", "beams", (0.0, 1.5, 2.95), (5.6, 0.3, 0.3)),
        Primitive("box", "beams", (0.0, -1.5, 2.95), (5.6, 0.3, 0.3)),
        Primitive("box", "beams", (-2.5, 0.0, 2.95), (0.3, 2.7, 0.3)),
        Primitive("box", "beams", (2.5, 0.0, 2.95), (0.3, 2.7, 0.3)),
        Primitive("box", "cab", (-1.2, 0.0, 0.8), (1.8, 2.4, 1.6)),
    ], {"legs": steel, "beams": steel, "cab": steel})
    return [boxtank, dome, gantry]


DEFAULT_LEVELS = {"boxtank": 2, "dome": 2, "gantry": 2}


def default_scenes(blend_seed: int = 0, background: ScatteringParams = DEFAULT_BACKGROUND,
                   ground_extent: float = DEFAULT_GROUND_EXTENT) -> dict[str, Scene]:
    return {s.class_id: build_scene(s, DEFAULT_LEVELS.get(s.class_id, 1), background, ground_extent,
                                    blend_seed)
            for s in default_specs()}


# --------------------------------------------------------------------------
# labeled datasets

MANIFEST_VERSION = 1
SCALE_CAP_PERCENTILE = 99.5
TRAIN_FRACTION = 0.7


def azimuth_sweep(start: float = 0.0, stop: float = 360.0, step: float = 1.0) -> list[float]:
    if not step > 0:
        raise ConfigError("azimuth step must be > 0")
    n = int(math.floor((stop - start) / step + 1e-9))
    return [float(start + i * step) for i in range(max(n, 0))]


def azimuth_tag(azimuth_deg: float) -> str:
    return f"{azimuth_deg:07.3f}".replace(".", "p")


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round-trip through the 16-bit file representation."""
    return np.rint(np.clip(pixels, 0.0, 1.0) * PGM_MAXVAL) / PGM_MAXVAL


def stratified_split(labels: np.ndarray, seed: int, train_fraction: float = TRAIN_FRACTION) -> np.ndarray:
    """Seeded per-class shuffle; the first ``round(f * n_c)`` of each class train."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    is_train = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        chosen = rng.permutation(idx)[:int(round(train_fraction * len(idx)))]
        is_train[chosen] = True
    return is_train


@dataclass
class GeneratedDataset:
    dataset: LabeledDataset
    manifest: dict
    scenes: dict[str, Scene]
    options: RenderOptions


def _class_scenes(specs, levels, blend_seed, background, ground_extent):
    scenes = {}
    for spec in specs:
        level = (levels or {}).get(spec.class_id, DEFAULT_LEVELS.get(spec.class_id, 1))
        scenes[spec.class_id] = build_scene(spec, level, background, ground_extent, blend_seed)
    return scenes


def render_clean(scene: Scene, azimuth_deg: float, options: RenderOptions, workers: int = 1) -> np.ndarray:
    """Speckled, unnormalized clean image (object coefficients, no blend)."""
    return ViewRenderer(scene, azimuth_deg, options, workers).speckled(param_table(scene))


def generate_dataset(specs: list[TargetSpec], azimuths_deg, options: RenderOptions | None = None,
                     seed: int = 0, out_dir=None, workers: int = 1, levels: dict | None = None,
                     blend_seed: int = 0, background: ScatteringParams = DEFAULT_BACKGROUND,
                     ground_extent: float = DEFAULT_GROUND_EXTENT) -> GeneratedDataset:
    """Render every class at every azimuth, split 7:3 per class and fix the
    normalization cap from the clean training pixels."""
    if len(specs) < 2:
        raise ConfigError("a dataset needs at least 2 classes")
    names = [s.class_id for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate class ids in {names}")
    azimuths = [float(a) for a in azimuths_deg]
    if not azimuths:
        raise ConfigError("empty azimuth sweep")
    options = replace(options or RenderOptions(), speckle=True, scale_cap=None)
    scenes = _class_scenes(specs, levels, blend_seed, background, ground_extent)
    jobs = [(ci, az) for ci in range(len(specs)) for az in azimuths]

    def work(job):
        ci, az = job
        return render_clean(scenes[names[ci]], az, options)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(work, jobs))
    else:
        raw = [work(j) for j in jobs]
    raw = np.stack(raw)
    labels = np.array([ci for ci, _ in jobs], dtype=np.int64)
    is_train = stratified_split(labels, seed)
    cap = float(np.percentile(raw[is_train], SCALE_CAP_PERCENTILE))
    if not cap > 0:
        raise ValidationError("clean training images are all dark; cannot fix a normalization cap")
    options = options.with_cap(cap)
    images = quantize(normalize_pixels(raw, cap))

    entries = {}
    meta = []
    for k, (ci, az) in enumerate(jobs):
        rel = f"{names[ci]}/{azimuth_tag(az)}.pgm"
        entry = {"class_label": names[ci], "class_index": ci, "azimuth_deg": az,
                 "elevation_deg": options.elevation_deg, "seed": speckle_seed(options.run_seed, az),
                 "split": "train" if is_train[k] else "test"}
        entries[rel] = entry
        meta.append({"path": rel, **entry})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "class_names": names,
        "render_options": options.to_dict(),
        "split_seed": int(seed),
        "blend_seed": int(blend_seed),
        "levels": {n: (levels or {}).get(n, DEFAULT_LEVELS.get(n, 1)) for n in names},
        "background": background.to_dict(),
        "ground_extent": float(ground_extent),
        "targets": [s.to_dict() for s in specs],
        "images": entries,
    }
    dataset = LabeledDataset(images, labels, is_train, names, meta)
    if out_dir is not None:
        write_dataset(dataset, manifest, out_dir)
    return GeneratedDataset(dataset, manifest, scenes, options)


def write_dataset(dataset, manifest: dict, out_dir) -> None:
    root = Path(out_dir)
    grid = None
    for name in manifest["class_names"]:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img, m in zip(dataset.images, dataset.meta):
        if grid is None:
            n = img.shape[0]
            grid = ImageGrid.for_scene(manifest["ground_extent"],
                                       manifest["render_options"]["sensor_distance"], n)
        write_image(SarImage(grid, img, normalized=True), root / m["path"])
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    for key in ("class_names", "render_options", "images", "targets"):
        if key not in doc:
            raise FormatError(f"{path}: manifest is missing {key!r}")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    return doc


def load_dataset(root):
    """Read a dataset directory written by :func:`generate_dataset`."""
    root = Path(root)
    manifest = read_manifest(root)
    names = manifest["class_names"]
    images, labels, is_train, meta = [], [], [], []
    for rel, entry in manifest["images"].items():
        images.append(read_image(root / rel).pixels)
        labels.append(names.index(entry["class_label"]))
        is_train.append(entry["split"] == "train")
        meta.append({"path": rel, **entry})
    return LabeledDataset(np.stack(images), labels, is_train, names, meta), manifest


def manifest_options(manifest: dict) -> RenderOptions:
    return RenderOptions.from_dict(manifest["render_options"])


def manifest_scenes(manifest: dict) -> dict[str, Scene]:
    specs = [TargetSpec.from_dict(d) for d in manifest["targets"]]
    bg = ScatteringParams(**manifest["background"])
    return _class_scenes(specs, manifest["levels"], manifest["blend_seed"], bg, manifest["ground_extent"])


def rerender_entry(manifest: dict, rel_path: str, scenes: dict[str, Scene] | None = None) -> np.ndarray:
    """Reproduce one dataset image (normalized, quantized) from the manifest."""
    entry = manifest["images"][rel_path]
    scenes = scenes or manifest_scenes(manifest)
    options = manifest_options(manifest)
    raw = render_clean(scenes[entry["class_label"]], entry["azimuth_deg"], options)
    return quantize(normalize_pixels(raw, options.scale_cap))
