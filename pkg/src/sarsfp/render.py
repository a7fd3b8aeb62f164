"""Scene -> normalized SAR image, with per-view caching for repeated renders.

:class:`ViewRenderer` traces a view once and then produces images for any
specular/diffuse coefficient table in a few vectorized numpy calls. This is
what makes thousands of finite-difference loss evaluations affordable: the
geometry of an attack never changes, only the material coefficients do.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .imaging import (ImageGrid, SarImage, add_speckle, deposit, focus, normalize, normalize_pixels, speckle_field,
                      speckle_seed)
from .raytracer import SensorGeometry, param_table, trace_view
from .raytracer.geometry import DEFAULT_SENSOR_DISTANCE
from .raytracer.tracer import DEFAULT_MAX_BOUNCES, INTENSITY_FLOOR, SPECULAR_TOLERANCE_DEG
from .scene import Scene


@dataclass(frozen=True)
class RenderOptions:
    elevation_deg: float = 15.0
    image_size: int = 128
    max_bounces: int = DEFAULT_MAX_BOUNCES
    speckle: bool = True
    run_seed: int = 0
    scale_cap: float | None = None
    sensor_distance: float = DEFAULT_SENSOR_DISTANCE
    rays_per_pixel: float = 1.0
    intensity_floor: float = INTENSITY_FLOOR
    specular_tolerance_deg: float = SPECULAR_TOLERANCE_DEG

    def grid(self, scene: Scene) -> ImageGrid:
        return ImageGrid.for_scene(scene.ground_extent, self.sensor_distance, self.image_size)

    def sensor(self, scene: Scene, azimuth_deg: float) -> SensorGeometry:
        grid = self.grid(scene)
        pixel = (grid.azimuth_extent[1] - grid.azimuth_extent[0]) / grid.n_azimuth
        return SensorGeometry.for_scene(scene, self.elevation_deg, azimuth_deg,
                                        pixel / self.rays_per_pixel, self.sensor_distance)

    def with_cap(self, scale_cap: float) -> "RenderOptions":
        return replace(self, scale_cap=float(scale_cap))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderOptions":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class ViewRenderer:
    """One traced view of a scene; renders images for coefficient tables."""

    def __init__(self, scene: Scene, azimuth_deg: float, options: RenderOptions, workers: int = 1):
        self.scene = scene
        self.azimuth_deg = float(azimuth_deg)
        self.options = options
        self.grid = options.grid(scene)
        self.sensor = options.sensor(scene, azimuth_deg)
        trace = trace_view(scene, self.sensor, options.max_bounces, workers,
                           options.specular_tolerance_deg)
        self.trace = trace
        flat = self.grid.bin_index(trace.a, trace.r)
        keep = flat >= 0
        self._flat = flat[keep]
        self._mesh = trace.mesh[keep]
        self._chain = trace.chain[keep]
        self._ndl = trace.n_dot_l[keep]
        self._ndh = trace.n_dot_h[keep]
        self._aligned = trace.aligned[keep]
        self._shape_key = None
        self._speckle = None
        if options.speckle:
            self._speckle = speckle_field(self.grid.shape, speckle_seed(options.run_seed, azimuth_deg))

    def _geometry_factors(self, table: np.ndarray):
        key = table[:, 2:].tobytes()
        if key != self._shape_key:
            fr = table[self._mesh, 2]
            fb = table[self._mesh, 3]
            self._gd = np.where(self._ndl > 0.0, np.power(self._ndl, fb), 0.0)
            self._gs = np.where(self._aligned, np.power(self._ndh, 1.0 / fr), 0.0)
            self._shape_key = key
        return self._gd, self._gs

    def raw(self, table: np.ndarray) -> np.ndarray:
        """Focused intensities (before speckle) for a ``param_table``."""
        gd, gs = self._geometry_factors(table)
        fs = table[:, 0]
        i_sig = np.ones(len(self._mesh))
        for j in range(self._chain.shape[1]):
            i_sig = i_sig * fs[self._chain[:, j]]
        inten = i_sig * (table[self._mesh, 1] * gd + fs[self._mesh] * gs)
        inten = np.where(i_sig >= self.options.intensity_floor, inten, 0.0)
        return deposit(self.grid, self._flat, inten)

    def speckled(self, table: np.ndarray) -> np.ndarray:
        pixels = self.raw(table)
        if self._speckle is not None:
            pixels = pixels * self._speckle
        return pixels

    def image(self, table: np.ndarray) -> np.ndarray:
        """Normalized [0, 1] pixels."""
        cap = self.options.scale_cap
        if cap is None:
            raise ValueError("RenderOptions.scale_cap must be set before normalizing")
        return normalize_pixels(self.speckled(table), cap)


def render_view(scene: Scene, azimuth_deg: float, options: RenderOptions, object_params=None,
                workers: int = 1, normalized: bool = True) -> SarImage:
    """Full reference pipeline: trace, shade, focus (with drop statistics),
    speckle, normalize."""
    sensor = options.sensor(scene, azimuth_deg)
    grid = options.grid(scene)
    trace = trace_view(scene, sensor, options.max_bounces, workers, options.specular_tolerance_deg)
    echoes = trace.echoes(param_table(scene, object_params), options.intensity_floor)
    img = focus(echoes, grid)
    img = add_speckle(img, speckle_seed(options.run_seed, azimuth_deg), options.speckle)
    img.meta.update(azimuth_deg=float(azimuth_deg) % 360.0, elevation_deg=options.elevation_deg,
                    n_echoes=len(echoes))
    if normalized:
        if options.scale_cap is None:
            raise ValueError("RenderOptions.scale_cap must be set before normalizing")
        img = normalize(img, options.scale_cap)
    return img


class ViewSet:
    """Traced renderers for a list of azimuths (duplicates traced once)."""

    def __init__(self, scene: Scene, azimuths_deg, options: RenderOptions, workers: int = 1):
        self.scene = scene
        self.azimuths = [float(a) for a in azimuths_deg]
        self.options = options
        self.workers = max(1, int(workers))
        unique = list(dict.fromkeys(self.azimuths))
        self._renderers = {az: ViewRenderer(scene, az, options, workers=self.workers) for az in unique}

    def __len__(self) -> int:
        return len(self.azimuths)

    def renderer(self, azimuth_deg: float) -> ViewRenderer:
        return self._renderers[float(azimuth_deg)]

    def images(self, table: np.ndarray) -> np.ndarray:
        """(n_views, H, W) normalized images, in view order."""
        renderers = [self._renderers[az] for az in self.azimuths]
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return np.stack(list(pool.map(lambda r: r.image(table), renderers)))
        return np.stack([r.image(table) for r in renderers])
