"""Sensor geometry and the orthographic ray grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

DEFAULT_SENSOR_DISTANCE = 100.0


@dataclass(frozen=True)
class SensorGeometry:
    """Parallel-ray sensor looking at the scene origin.

    The sensor plane is perpendicular to the look direction at
    ``sensor_distance`` from the origin; rays start on a regular
    ``n_u x n_v`` grid of cell centres inside a ``width_u x width_v`` window
    (optionally offset by ``center_u``/``center_v``).
    """

    elevation_deg: float
    azimuth_deg: float
    n_u: int
    n_v: int
    width_u: float
    width_v: float
    sensor_distance: float = DEFAULT_SENSOR_DISTANCE
    center_u: float = 0.0
    center_v: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.elevation_deg < 90.0:
            raise ValidationError(f"elevation must be in (0, 90) degrees, got {self.elevation_deg}")
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if self.n_u < 1 or self.n_v < 1:
            raise ValidationError("ray grid must have at least one ray per axis")
        if not (self.width_u > 0 and self.width_v > 0):
            raise ValidationError("ray window widths must be positive")
        if not self.sensor_distance > 0:
            raise ValidationError("sensor_distance must be positive")

    @property
    def to_sensor(self) -> np.ndarray:
        """Unit vector from the scene toward the sensor."""
        el, az = math.radians(self.elevation_deg), math.radians(self.azimuth_deg)
        return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])

    @property
    def look(self) -> np.ndarray:
        """Ray direction (sensor toward scene)."""
        return -self.to_sensor

    @property
    def azimuth_axis(self) -> np.ndarray:
        az = math.radians(self.azimuth_deg)
        return np.array([-math.sin(az), math.cos(az), 0.0])

    @property
    def up_axis(self) -> np.ndarray:
        return np.cross(self.to_sensor, self.azimuth_axis)

    @property
    def n_rays(self) -> int:
        return self.n_u * self.n_v

    def ray_origins(self) -> np.ndarray:
        """(n_u * n_v, 3) ray start points, u-major ordering."""
        fu = self.center_u + ((np.arange(self.n_u) + 0.5) / self.n_u - 0.5) * self.width_u
        fv = self.center_v + ((np.arange(self.n_v) + 0.5) / self.n_v - 0.5) * self.width_v
        uu, vv = np.meshgrid(fu, fv, indexing="ij")
        base = self.sensor_distance * self.to_sensor
        pts = base + uu.reshape(-1, 1) * self.azimuth_axis + vv.reshape(-1, 1) * self.up_axis
        return np.ascontiguousarray(pts)

    @classmethod
    def for_scene(cls, scene, elevation_deg: float, azimuth_deg: float, pixel_size: float,
                  sensor_distance: float = DEFAULT_SENSOR_DISTANCE, margin: float = 0.0) -> "SensorGeometry":
        """Window covering the ground square (azimuth: +-ground_extent) and
        every scene vertex, with about one ray per slant-range pixel on flat
        ground."""
        probe = cls(elevation_deg, azimuth_deg, 1, 1, 1.0, 1.0, sensor_distance)
        g = scene.ground_extent
        pts = [scene.vertices.reshape(-1, 3)]
        if g > 0:
            pts.append(np.array([[g, g, 0.0], [g, -g, 0.0], [-g, g, 0.0], [-g, -g, 0.0]]))
        pts = np.concatenate(pts)
        if len(pts) == 0:
            pts = np.zeros((1, 3))
        pu = pts @ probe.azimuth_axis
        pv = pts @ probe.up_axis
        half_u = g if g > 0 else float(np.max(np.abs(pu)))
        half_u = max(half_u, pixel_size) + margin
        lo_v, hi_v = float(pv.min()) - margin, float(pv.max()) + margin
        if hi_v - lo_v < pixel_size:
            lo_v, hi_v = lo_v - pixel_size, hi_v + pixel_size
        step_v = pixel_size * math.tan(math.radians(elevation_deg))
        n_u = int(math.ceil(2.0 * half_u / pixel_size - 1e-9))
        n_v = int(math.ceil((hi_v - lo_v) / step_v - 1e-9))
        width_v = n_v * step_v
        return cls(elevation_deg, azimuth_deg, n_u, n_v, n_u * pixel_size, width_v,
                   sensor_distance, 0.0, 0.5 * (lo_v + hi_v))
