"""Reflection models and echo positioning.

``specular_intensity``/``diffuse_intensity`` take a ScatteringParams; the
``*_lobe`` variants take raw coefficient arrays and are what the tracer
uses when shading a whole echo buffer at once.
"""
from __future__ import annotations

import numpy as np


def specular_lobe(f_s, f_r, n_dot_h):
    nh = np.clip(n_dot_h, 0.0, 1.0)
    out = f_s * np.power(nh, 1.0 / f_r)
    return out if np.ndim(out) else float(out)


def diffuse_lobe(f_d, f_b, i_sig, n_dot_l):
    # N.L == 0 gives 0 even for F_b == 0 (no 0**0 == 1 leak at grazing angles)
    nl = np.clip(n_dot_l, 0.0, 1.0)
    out = np.where(nl > 0.0, f_d * i_sig * np.power(nl, f_b), 0.0)
    return out if np.ndim(out) else float(out)


def specular_intensity(params, n_dot_h):
    """``F_s * (N.H) ** (1 / F_r)`` with ``N.H`` clamped to [0, 1]."""
    return specular_lobe(params.f_s, params.f_r, n_dot_h)


def diffuse_intensity(params, i_sig, n_dot_l):
    """``F_d * I_sig * (N.L) ** F_b`` with ``N.L`` clamped to [0, 1]."""
    return diffuse_lobe(params.f_d, params.f_b, i_sig, n_dot_l)


def echo_position(x_first: float, x_last: float, path_segments) -> tuple[float, float]:
    """Azimuth and slant range of a k-bounce echo.

    The azimuth is the midpoint of the entry and exit projections on the
    azimuth axis; the range is half the total sensor-to-sensor path.
    """
    return 0.5 * (x_first + x_last), 0.5 * float(np.sum(path_segments))
