"""Orthographic multi-bounce ray tracer producing SAR echo samples."""
from .geometry import SensorGeometry
from .shading import diffuse_intensity, echo_position, specular_intensity
from .tracer import (DEFAULT_MAX_BOUNCES, INTENSITY_FLOOR, EchoSample, Echoes, RayState,
                     ViewTrace, param_table, render_echoes, scene_bvh, trace_ray, trace_view)

__all__ = [
    "SensorGeometry", "diffuse_intensity", "echo_position", "specular_intensity",
    "DEFAULT_MAX_BOUNCES", "INTENSITY_FLOOR", "EchoSample", "Echoes", "RayState", "ViewTrace",
    "param_table", "render_echoes", "scene_bvh", "trace_ray", "trace_view",
]
