"""Multi-bounce tracing and echo generation.

Tracing is split in two stages because the attack re-renders the same
geometry thousands of times with different scattering parameters:

* :func:`trace_view` walks every ray of a sensor grid once and stores the
  parameter-free path geometry (hit meshes, cosines, visibility, echo
  positions) in a :class:`ViewTrace`;
* :meth:`ViewTrace.echoes` shades that geometry for one parameter table.

:func:`trace_ray` is the sequential single-ray version of the same rules and
serves as the reference the vectorized shading is tested against.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..scene import ScatteringParams, Scene
from .bvh import BVH, build_bvh, trace_paths
from .geometry import SensorGeometry
from .shading import diffuse_lobe, echo_position, specular_lobe

DEFAULT_MAX_BOUNCES = 3
INTENSITY_FLOOR = 1e-6
SPECULAR_TOLERANCE_DEG = 0.5
RAYS_PER_CHUNK = 2048


@dataclass
class RayState:
    origin: np.ndarray
    direction: np.ndarray
    i_sig: float = 1.0
    bounce_index: int = 1
    path_length_so_far: float = 0.0


@dataclass(frozen=True)
class EchoSample:
    a: float
    r: float
    intensity: float
    bounce_count: int


@dataclass
class Echoes:
    """Struct-of-arrays echo list, ordered by (ray index, bounce)."""

    a: np.ndarray
    r: np.ndarray
    intensity: np.ndarray
    bounce_count: np.ndarray
    ray_index: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def __iter__(self):
        for a, r, i, b in zip(self.a, self.r, self.intensity, self.bounce_count):
            yield EchoSample(float(a), float(r), float(i), int(b))

    @classmethod
    def from_samples(cls, samples, ray_index=None) -> "Echoes":
        samples = list(samples)
        n = len(samples)
        return cls(np.array([s.a for s in samples], dtype=np.float64).reshape(n),
                   np.array([s.r for s in samples], dtype=np.float64).reshape(n),
                   np.array([s.intensity for s in samples], dtype=np.float64).reshape(n),
                   np.array([s.bounce_count for s in samples], dtype=np.int64).reshape(n),
                   np.zeros(n, np.int64) if ray_index is None else np.asarray(ray_index, np.int64))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "r", "intensity", "bounces"])
            for a, r, i, b in zip(self.a, self.r, self.intensity, self.bounce_count):
                w.writerow([repr(float(a)), repr(float(r)), repr(float(i)), int(b)])


def scene_bvh(scene: Scene) -> BVH:
    """BVH cached on the scene instance (geometry never changes after load)."""
    bvh = scene.__dict__.get("_bvh")
    if bvh is None:
        bvh = build_bvh(scene.vertices)
        scene.__dict__["_bvh"] = bvh
    return bvh


def param_table(scene: Scene, object_params=None, background: ScatteringParams | None = None) -> np.ndarray:
    """(n + 2, 4) table: meshes, then the ground, then a unit-specular pad row
    used when multiplying attenuation factors along short paths."""
    obj = scene.param_array if object_params is None else np.asarray(object_params, dtype=np.float64)
    bg = scene.background_params if background is None else background
    pad = np.array([[1.0, 0.0, 1.0, 0.0]])
    return np.vstack([obj.reshape(-1, 4), bg.as_array()[None, :], pad])


def _run_kernel(bvh: BVH, normals, ground_extent, origins, direction, to_sensor, max_bounces, cos_tol, out):
    trace_paths(origins, direction, to_sensor, max_bounces, cos_tol,
                bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start,
                bvh.node_count, bvh.tri_vertices, bvh.tri_ids, normals, float(ground_extent),
                bvh.n_meshes, *out)


def _allocate(n_rays: int, max_bounces: int):
    return (np.full((n_rays, max_bounces), -1, dtype=np.int64),
            np.zeros((n_rays, max_bounces, 3)),
            np.zeros((n_rays, max_bounces)),
            np.zeros((n_rays, max_bounces)),
            np.zeros((n_rays, max_bounces)),
            np.zeros((n_rays, max_bounces), dtype=np.bool_),
            np.zeros((n_rays, max_bounces), dtype=np.bool_))


@dataclass
class ViewTrace:
    """Parameter-free echo candidates of one view, one row per sensor-visible
    hit, ordered by (ray index, bounce)."""

    sensor: SensorGeometry
    max_bounces: int
    n_meshes: int
    ray_index: np.ndarray
    bounce: np.ndarray       # 1-based
    a: np.ndarray
    r: np.ndarray
    mesh: np.ndarray         # mesh id of the emitting hit (n_meshes = ground)
    chain: np.ndarray        # (N, max_bounces - 1) earlier hits, padded with n_meshes + 1
    n_dot_l: np.ndarray
    n_dot_h: np.ndarray
    aligned: np.ndarray      # mirror direction within tolerance of the sensor
    n_hits: int              # all hits, visible or not

    def __len__(self) -> int:
        return len(self.a)

    def attenuation(self, fs_table: np.ndarray) -> np.ndarray:
        """Incident intensity at each emitting hit: product of the specular
        factors of the earlier bounces (the continuation half-vector along a
        mirror path is the normal itself, so each factor is just F_s)."""
        out = np.ones(len(self.a))
        for j in range(self.chain.shape[1]):
            out = out * fs_table[self.chain[:, j]]
        return out

    def shade(self, table: np.ndarray, intensity_floor: float = INTENSITY_FLOOR):
        """Intensities and the emitted mask for a ``param_table``."""
        p = table[self.mesh]
        i_sig = self.attenuation(table[:, 0])
        diffuse = diffuse_lobe(p[:, 1], p[:, 3], i_sig, self.n_dot_l)
        spec = np.where(self.aligned, i_sig * specular_lobe(p[:, 0], p[:, 2], self.n_dot_h), 0.0)
        return diffuse + spec, i_sig >= intensity_floor

    def echoes(self, table: np.ndarray, intensity_floor: float = INTENSITY_FLOOR) -> Echoes:
        intensity, emitted = self.shade(table, intensity_floor)
        return Echoes(self.a[emitted], self.r[emitted], intensity[emitted],
                      self.bounce[emitted], self.ray_index[emitted])


def trace_view(scene: Scene, sensor: SensorGeometry, max_bounces: int = DEFAULT_MAX_BOUNCES,
               workers: int = 1, specular_tolerance_deg: float = SPECULAR_TOLERANCE_DEG) -> ViewTrace:
    if not 1 <= max_bounces <= 5:
        raise ValueError("max_bounces must be in 1..5")
    bvh = scene_bvh(scene)
    origins = sensor.ray_origins()
    n_rays = len(origins)
    out = _allocate(n_rays, max_bounces)
    to_sensor = sensor.to_sensor
    direction = -to_sensor
    cos_tol = math.cos(math.radians(specular_tolerance_deg))
    normals = np.ascontiguousarray(scene.normals) if scene.n_meshes else np.zeros((1, 3))
    bounds = list(range(0, n_rays, RAYS_PER_CHUNK)) + [n_rays]
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def work(chunk):
        s, e = chunk
        _run_kernel(bvh, normals, scene.ground_extent, origins[s:e], direction, to_sensor,
                    max_bounces, cos_tol, tuple(o[s:e] for o in out))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, chunks))
    else:
        for c in chunks:
            work(c)
    return _assemble(scene, sensor, max_bounces, out)


def _assemble(scene: Scene, sensor: SensorGeometry, max_bounces: int, out) -> ViewTrace:
    mesh, point, seg, ndl, ndh, vis, aligned = out
    n = scene.n_meshes
    hit = mesh >= 0
    u_axis, s_axis, dist = sensor.azimuth_axis, sensor.to_sensor, sensor.sensor_distance
    x_proj = point @ u_axis
    exit_len = dist - point @ s_axis
    cum = np.cumsum(np.where(hit, seg, 0.0), axis=1)
    rng_all = 0.5 * (cum + exit_len)
    az_all = 0.5 * (x_proj[:, :1] + x_proj)
    padded = np.where(hit, mesh, n + 1)
    chains = np.full((mesh.shape[0], max_bounces, max(max_bounces - 1, 1)), n + 1, dtype=np.int64)
    for k in range(1, max_bounces):
        chains[:, k, :k] = padded[:, :k]
    sel = hit & vis
    rays, ks = np.nonzero(sel)  # row-major: ray index then bounce
    return ViewTrace(sensor, max_bounces, n, rays.astype(np.int64), (ks + 1).astype(np.int64),
                     az_all[rays, ks], rng_all[rays, ks], mesh[rays, ks],
                     chains[rays, ks][:, :max(max_bounces - 1, 1)],
                     ndl[rays, ks], ndh[rays, ks], aligned[rays, ks], int(hit.sum()))


def render_echoes(scene: Scene, sensor: SensorGeometry, effective_params=None,
                  max_bounces: int = DEFAULT_MAX_BOUNCES, workers: int = 1,
                  background: ScatteringParams | None = None,
                  intensity_floor: float = INTENSITY_FLOOR) -> Echoes:
    """All echoes of a sensor grid for one parameter set (default: the
    scene's clean parameters)."""
    trace = trace_view(scene, sensor, max_bounces, workers)
    return trace.echoes(param_table(scene, effective_params, background), intensity_floor)


def trace_ray(scene: Scene, ray: RayState, max_bounces: int, effective_params=None,
              sensor: SensorGeometry | None = None, background: ScatteringParams | None = None,
              intensity_floor: float = INTENSITY_FLOOR,
              specular_tolerance_deg: float = SPECULAR_TOLERANCE_DEG) -> list[EchoSample]:
    """Follow one ray bounce by bounce and return its echoes.

    ``sensor`` supplies the receiver direction, azimuth axis and sensor
    plane; it defaults to a look straight along the ray.
    """
    table = param_table(scene, effective_params, background)
    if sensor is None:
        d = np.asarray(ray.direction, dtype=np.float64)
        el = math.degrees(math.asin(-d[2]))
        az = math.degrees(math.atan2(-d[1], -d[0]))
        sensor = SensorGeometry(el, az, 1, 1, 1.0, 1.0)
    bvh = scene_bvh(scene)
    out = _allocate(1, max_bounces)
    to_sensor = sensor.to_sensor
    normals = np.ascontiguousarray(scene.normals) if scene.n_meshes else np.zeros((1, 3))
    cos_tol = math.cos(math.radians(specular_tolerance_deg))
    _run_kernel(bvh, normals, scene.ground_extent,
                np.asarray(ray.origin, dtype=np.float64).reshape(1, 3),
                np.asarray(ray.direction, dtype=np.float64), to_sensor, max_bounces, cos_tol, out)
    mesh, point, seg, ndl, ndh, vis, aligned = (o[0] for o in out)
    u_axis, dist = sensor.azimuth_axis, sensor.sensor_distance
    i_sig = float(ray.i_sig)
    segments = [ray.path_length_so_far] if ray.path_length_so_far else []
    samples = []
    x_first = None
    for k in range(max_bounces):
        if mesh[k] < 0:
            break
        row = table[mesh[k]]
        params = ScatteringParams.from_array(row)
        segments.append(float(seg[k]))
        x_here = float(point[k] @ u_axis)
        if x_first is None:
            x_first = x_here
        if vis[k]:
            intensity = diffuse_lobe(params.f_d, params.f_b, i_sig, ndl[k])
            if aligned[k]:
                intensity += i_sig * specular_lobe(params.f_s, params.f_r, ndh[k])
            exit_len = dist - float(point[k] @ to_sensor)
            a, r = echo_position(x_first, x_here, segments + [exit_len])
            samples.append(EchoSample(a, r, float(intensity), ray.bounce_index + k))
        i_sig *= specular_lobe(params.f_s, params.f_r, 1.0)
        if i_sig < intensity_floor:
            break
    return samples
