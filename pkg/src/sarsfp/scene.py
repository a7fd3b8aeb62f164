"""Scene representation: triangle meshes, scattering parameters, blend
coefficients, and the mini-batch partition used by the attack.

A scene is immutable once loaded. Per-mesh data is kept both as small
dataclasses (for inspection and serialization) and as cached numpy arrays
(for the tracer and the attack inner loop).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

NORMAL_TOLERANCE = 1e-9
MIN_TRIANGLE_AREA = 1e-15


@dataclass(frozen=True)
class ScatteringParams:
    """Material coefficients of one facet (or of the ground plane)."""

    f_s: float
    f_d: float
    f_r: float
    f_b: float

    def validate(self) -> None:
        if not 0.0 <= self.f_s <= 1.0:
            raise ValidationError(f"f_s out of range [0, 1]: {self.f_s!r}")
        if not 0.0 <= self.f_d <= 1.0:
            raise ValidationError(f"f_d out of range [0, 1]: {self.f_d!r}")
        if not self.f_r > 0.0 or not math.isfinite(self.f_r):
            raise ValidationError(f"f_r out of range (0, inf): {self.f_r!r}")
        if not self.f_b >= 0.0 or not math.isfinite(self.f_b):
            raise ValidationError(f"f_b out of range [0, inf): {self.f_b!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.f_s, self.f_d, self.f_r, self.f_b], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"f_s": self.f_s, "f_d": self.f_d, "f_r": self.f_r, "f_b": self.f_b}

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "ScatteringParams":
        return cls(float(row[0]), float(row[1]), float(row[2]), float(row[3]))


@dataclass(frozen=True)
class BlendCoefficients:
    """Per-mesh weights pulling the specular (alpha) and diffuse (beta)
    coefficients toward the background. Always clamped to [0, 1]."""

    alpha: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", min(max(float(self.alpha), 0.0), 1.0))
        object.__setattr__(self, "beta", min(max(float(self.beta), 0.0), 1.0))


@dataclass(frozen=True)
class Mesh:
    id: int
    vertices: tuple[tuple[float, float, float], ...]
    normal: tuple[float, float, float]
    component_name: str


def triangle_normal(vertices) -> tuple[np.ndarray, float]:
    """Unit normal from the winding order, and the triangle area."""
    v = np.asarray(vertices, dtype=np.float64)
    c = np.cross(v[1] - v[0], v[2] - v[0])
    norm = float(np.linalg.norm(c))
    if norm == 0.0:
        return np.zeros(3), 0.0
    return c / norm, 0.5 * norm


def make_mesh(mesh_id: int, vertices, component: str, normal=None) -> Mesh:
    verts = tuple(tuple(float(x) for x in p) for p in vertices)
    if len(verts) != 3 or any(len(p) != 3 for p in verts):
        raise ValidationError(f"mesh {mesh_id}: expected 3 vertices of 3 coordinates")
    n, area = triangle_normal(verts)
    if not area > MIN_TRIANGLE_AREA:
        raise ValidationError(f"mesh {mesh_id}: degenerate triangle (area {area:g})")
    if normal is None:
        normal = n
    normal = tuple(float(x) for x in normal)
    if abs(math.sqrt(sum(x * x for x in normal)) - 1.0) > NORMAL_TOLERANCE:
        raise ValidationError(f"mesh {mesh_id}: normal is not unit length")
    return Mesh(mesh_id, verts, normal, component)


@dataclass
class Scene:
    meshes: list[Mesh]
    object_params: list[ScatteringParams]
    background_params: ScatteringParams
    blend: np.ndarray  # (n, 2) columns alpha, beta
    ground_extent: float
    components: list[str]
    gamma: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.blend = np.clip(np.asarray(self.blend, dtype=np.float64).reshape(-1, 2), 0.0, 1.0)
        self.validate()

    def validate(self) -> None:
        n = len(self.meshes)
        if len(self.object_params) != n:
            raise ValidationError(f"object_params has {len(self.object_params)} entries for {n} meshes")
        if self.blend.shape[0] != n:
            raise ValidationError(f"blend has {self.blend.shape[0]} entries for {n} meshes")
        if self.gamma is not None and len(self.gamma) != n:
            raise ValidationError(f"gamma has {len(self.gamma)} entries for {n} meshes")
        if not (self.ground_extent >= 0.0 and math.isfinite(self.ground_extent)):
            raise ValidationError(f"ground_extent must be >= 0, got {self.ground_extent!r}")
        if len(set(self.components)) != len(self.components):
            raise ValidationError("duplicate component labels")
        declared = set(self.components)
        for mesh in self.meshes:
            if mesh.component_name not in declared:
                raise ValidationError(
                    f"mesh {mesh.id}: component {mesh.component_name!r} not in declared components")
        for i, p in enumerate(self.object_params):
            try:
                p.validate()
            except ValidationError as exc:
                raise ValidationError(f"object_params[{i}]: {exc}") from None
        try:
            self.background_params.validate()
        except ValidationError as exc:
            raise ValidationError(f"background_params: {exc}") from None

    def __len__(self) -> int:
        return len(self.meshes)

    @property
    def n_meshes(self) -> int:
        return len(self.meshes)

    @cached_property
    def vertices(self) -> np.ndarray:
        if not self.meshes:
            return np.zeros((0, 3, 3))
        return np.array([m.vertices for m in self.meshes], dtype=np.float64)

    @cached_property
    def normals(self) -> np.ndarray:
        if not self.meshes:
            return np.zeros((0, 3))
        return np.array([m.normal for m in self.meshes], dtype=np.float64)

    @cached_property
    def param_array(self) -> np.ndarray:
        """(n, 4) array of f_s, f_d, f_r, f_b."""
        if not self.meshes:
            return np.zeros((0, 4))
        return np.array([p.as_array() for p in self.object_params])

    @cached_property
    def component_index(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.components)}
        return np.array([lookup[m.component_name] for m in self.meshes], dtype=np.int64)

    @cached_property
    def areas(self) -> np.ndarray:
        v = self.vertices
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def blend_coefficients(self) -> list[BlendCoefficients]:
        return [BlendCoefficients(a, b) for a, b in self.blend]

    def with_blend(self, blend: np.ndarray) -> "Scene":
        out = Scene(list(self.meshes), list(self.object_params), self.background_params,
                    np.array(blend, dtype=np.float64), self.ground_extent,
                    list(self.components), self.gamma)
        # geometry is shared, so cached arrays and the hierarchy carry over
        for key in ("vertices", "normals", "param_array", "component_index", "areas", "_bvh"):
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    def fingerprint(self) -> str:
        """SHA-256 over everything except the blend coefficients."""
        doc = scene_to_dict(self)
        doc.pop("blend")
        doc.pop("gamma", None)
        payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(payload).hexdigest()


# --------------------------------------------------------------------------
# blend initialisation and batching

def random_blend(n_meshes: int, seed: int) -> np.ndarray:
    """Uniform [0, 1] alpha/beta per mesh."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n_meshes, 2))


@dataclass(frozen=True)
class BatchSchedule:
    batches: tuple[np.ndarray, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def partition_batches(n_meshes: int, batch_fraction_denominator: int, seed: int) -> BatchSchedule:
    """Seeded permutation of ``range(n_meshes)`` cut into ``m`` nearly equal
    batches. Remainder indices go one per batch to the earliest batches."""
    m = int(batch_fraction_denominator)
    if n_meshes < 1:
        raise ConfigError("partition_batches needs at least one mesh")
    if m < 1:
        raise ConfigError("batch denominator must be >= 1")
    if m > n_meshes:
        raise ConfigError(f"cannot form {m} non-empty batches from {n_meshes} meshes")
    perm = np.random.default_rng(seed).permutation(n_meshes)
    base, rem = divmod(n_meshes, m)
    sizes = [base + 1 if i < rem else base for i in range(m)]
    bounds = np.cumsum([0] + sizes)
    batches = tuple(perm[bounds[i]:bounds[i + 1]] for i in range(m))
    return BatchSchedule(batches, int(seed))


def component_mask(scene: Scene, components: Iterable[str]) -> np.ndarray:
    """Sorted indices of the meshes whose component is in ``components``."""
    wanted = set(components)
    unknown = wanted - set(scene.components)
    if unknown:
        raise ConfigError(f"unknown component(s) {sorted(unknown)}; valid labels: {scene.components}")
    if not wanted:
        return np.zeros(0, dtype=np.int64)
    codes = [scene.components.index(c) for c in wanted]
    idx = np.flatnonzero(np.isin(scene.component_index, codes))
    empty = [c for c in wanted if not np.any(scene.component_index == scene.components.index(c))]
    if empty:
        raise ConfigError(f"component(s) {sorted(empty)} contain no meshes")
    return idx.astype(np.int64)


# --------------------------------------------------------------------------
# serialization

def scene_to_dict(scene: Scene) -> dict:
    doc = {
        "meshes": [
            {"id": m.id, "vertices": [list(p) for p in m.vertices],
             "normal": list(m.normal), "component": m.component_name}
            for m in scene.meshes
        ],
        "object_params": [p.to_dict() for p in scene.object_params],
        "background_params": scene.background_params.to_dict(),
        "blend": [{"alpha": float(a), "beta": float(b)} for a, b in scene.blend],
        "ground_extent": float(scene.ground_extent),
        "components": list(scene.components),
    }
    if scene.gamma is not None:
        doc["gamma"] = [float(g) for g in scene.gamma]
    return doc


def dump_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dump_scene(scene), encoding="utf-8")


def _params(record, where: str) -> ScatteringParams:
    if not isinstance(record, dict):
        raise FormatError(f"{where}: expected an object with f_s, f_d, f_r, f_b")
    try:
        return ScatteringParams(*(float(record[k]) for k in ("f_s", "f_d", "f_r", "f_b")))
    except KeyError as exc:
        raise FormatError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise FormatError(f"{where}: scattering parameters must be numbers") from None


def parse_scene(doc: dict, seed: int = 0) -> Scene:
    if not isinstance(doc, dict):
        raise FormatError("scene file: top level must be a JSON object")
    for key in ("meshes", "object_params", "background_params", "ground_extent", "components"):
        if key not in doc:
            raise FormatError(f"scene file: missing top-level key {key!r}")
    meshes = []
    for i, rec in enumerate(doc["meshes"]):
        where = f"meshes[{i}]"
        if not isinstance(rec, dict) or "vertices" not in rec or "component" not in rec:
            raise FormatError(f"{where}: expected object with 'vertices' and 'component'")
        try:
            verts = [[float(x) for x in p] for p in rec["vertices"]]
        except (TypeError, ValueError):
            raise FormatError(f"{where}: vertices must be 3 lists of 3 numbers") from None
        try:
            meshes.append(make_mesh(int(rec.get("id", i)), verts, str(rec["component"]), rec.get("normal")))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    n = len(meshes)
    params = [_params(r, f"object_params[{i}]") for i, r in enumerate(doc["object_params"])]
    background = _params(doc["background_params"], "background_params")
    if doc.get("blend") is not None:
        try:
            blend = np.array([[float(r["alpha"]), float(r["beta"])] for r in doc["blend"]],
                             dtype=np.float64).reshape(-1, 2)
        except (KeyError, TypeError, ValueError):
            raise FormatError("blend: expected a list of {alpha, beta} objects") from None
    else:
        blend = random_blend(n, seed)
    gamma = None
    if doc.get("gamma") is not None:
        gamma = np.asarray(doc["gamma"], dtype=np.float64)
    try:
        extent = float(doc["ground_extent"])
    except (TypeError, ValueError):
        raise FormatError("ground_extent must be a number") from None
    return Scene(meshes, params, background, blend, extent, [str(c) for c in doc["components"]], gamma)


def loads_scene(text: str, seed: int = 0) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene file: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_scene(doc, seed)


def load_scene(path, seed: int = 0) -> Scene:
    """Read and validate a scene file. ``seed`` drives blend initialisation
    when the file carries no ``blend`` array."""
    text = Path(path).read_text(encoding="utf-8")
    return loads_scene(text, seed)
