"""Focusing echoes into azimuth x slant-range images, speckle, grayscale
normalization and 16-bit PGM I/O."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

PGM_MAXVAL = 65535


@dataclass(frozen=True)
class ImageGrid:
    n_azimuth: int
    n_range: int
    azimuth_extent: tuple[float, float]
    range_extent: tuple[float, float]

    def __post_init__(self):
        if self.n_azimuth < 8 or self.n_range < 8:
            raise ValidationError("image grid needs at least 8 pixels per axis")
        a0, a1 = self.azimuth_extent
        r0, r1 = self.range_extent
        if not (a0 < a1 and r0 < r1):
            raise ValidationError("image extents must be strictly ordered (min < max)")
        object.__setattr__(self, "azimuth_extent", (float(a0), float(a1)))
        object.__setattr__(self, "range_extent", (float(r0), float(r1)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_azimuth, self.n_range

    @property
    def n_pixels(self) -> int:
        return self.n_azimuth * self.n_range

    def bin_index(self, a, r) -> np.ndarray:
        """Flat pixel index of each (a, r), or -1 outside the extents."""
        a = np.asarray(a, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        a0, a1 = self.azimuth_extent
        r0, r1 = self.range_extent
        ia = np.floor((a - a0) / (a1 - a0) * self.n_azimuth)
        ir = np.floor((r - r0) / (r1 - r0) * self.n_range)
        ok = (ia >= 0) & (ia < self.n_azimuth) & (ir >= 0) & (ir < self.n_range)
        flat = np.where(ok, ia * self.n_range + ir, -1)
        return flat.astype(np.int64)

    def bin_center(self, ia: int, ir: int) -> tuple[float, float]:
        a0, a1 = self.azimuth_extent
        r0, r1 = self.range_extent
        return (a0 + (ia + 0.5) * (a1 - a0) / self.n_azimuth,
                r0 + (ir + 0.5) * (r1 - r0) / self.n_range)

    @classmethod
    def for_scene(cls, ground_extent: float, sensor_distance: float, n: int = 128) -> "ImageGrid":
        """Square grid over +-ground_extent in azimuth and the same window in
        slant range around the scene centre."""
        g = float(ground_extent)
        return cls(n, n, (-g, g), (sensor_distance - g, sensor_distance + g))

    def to_dict(self) -> dict:
        return {"n_azimuth": self.n_azimuth, "n_range": self.n_range,
                "azimuth_extent": list(self.azimuth_extent), "range_extent": list(self.range_extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGrid":
        return cls(int(d["n_azimuth"]), int(d["n_range"]), tuple(d["azimuth_extent"]), tuple(d["range_extent"]))


@dataclass
class SarImage:
    grid: ImageGrid
    pixels: np.ndarray  # (n_azimuth, n_range)
    normalized: bool = False
    dropped_count: int = 0
    dropped_intensity: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.shape != self.grid.shape:
            raise ValidationError(f"pixel array {self.pixels.shape} does not match grid {self.grid.shape}")


def deposit(grid: ImageGrid, flat_index: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """Nearest-bin accumulation of pre-binned echoes (index -1 = dropped)."""
    keep = flat_index >= 0
    acc = np.bincount(flat_index[keep], weights=intensity[keep], minlength=grid.n_pixels)
    return acc.reshape(grid.shape)


def focus(echoes, grid: ImageGrid) -> SarImage:
    """Accumulate echo intensities into their (azimuth, range) bins.

    Echoes are summed in a canonical order (bin, then intensity) so the
    result does not depend on the order of the input list.
    """
    a = np.asarray(echoes.a, dtype=np.float64)
    r = np.asarray(echoes.r, dtype=np.float64)
    w = np.asarray(echoes.intensity, dtype=np.float64)
    flat = grid.bin_index(a, r)
    order = np.lexsort((w, flat))
    flat, w = flat[order], w[order]
    dropped = flat < 0
    n_drop = int(dropped.sum())
    drop_i = float(np.sum(w[dropped]))
    if n_drop:
        log.debug("focus: dropped %d echoes (intensity %.6g) outside the image", n_drop, drop_i)
    return SarImage(grid, deposit(grid, flat, w), False, n_drop, drop_i)


def speckle_field(shape, seed: int) -> np.ndarray:
    """Unit-mean exponential multipliers."""
    return np.random.default_rng(seed).standard_exponential(shape)


def add_speckle(image: SarImage, seed: int, enabled: bool = True) -> SarImage:
    if not enabled:
        return image
    if image.normalized:
        raise ValidationError("speckle must be applied before normalization")
    return replace(image, pixels=image.pixels * speckle_field(image.pixels.shape, seed))


def speckle_seed(run_seed: int, azimuth_deg: float) -> int:
    """Stable per-view seed derived from the run seed and the azimuth."""
    millideg = int(round(float(azimuth_deg) * 1000.0)) % (360 * 1000)
    return int(np.random.SeedSequence([int(run_seed), millideg]).generate_state(1, np.uint64)[0])


def normalize_pixels(pixels: np.ndarray, scale_cap: float) -> np.ndarray:
    return np.minimum(pixels, scale_cap) / scale_cap


def normalize(image: SarImage, scale_cap: float) -> SarImage:
    """Map to [0, 1] with a run-level cap: ``min(p, cap) / cap``."""
    if not scale_cap > 0:
        raise ValidationError(f"scale_cap must be > 0, got {scale_cap!r}")
    if image.normalized:
        raise ValidationError("image is already normalized")
    return replace(image, pixels=normalize_pixels(image.pixels, scale_cap), normalized=True)


# --------------------------------------------------------------------------
# 16-bit binary PGM

def write_image(image: SarImage, path) -> None:
    """Binary PGM (P5, maxval 65535, big-endian samples); one row per
    azimuth bin."""
    if not image.normalized:
        raise ValidationError("only normalized images can be written")
    q = np.rint(np.clip(image.pixels, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    header = f"P5 {image.grid.n_range} {image.grid.n_azimuth} {PGM_MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def _header_tokens(data: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_image(path, grid: ImageGrid | None = None) -> SarImage:
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != PGM_MAXVAL:
        raise FormatError(f"{path}: expected maxval {PGM_MAXVAL}, got {maxval}")
    raster = data[offset:]
    if len(raster) != 2 * width * height:
        raise FormatError(f"{path}: expected {2 * width * height} raster bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=">u2").reshape(height, width).astype(np.float64) / PGM_MAXVAL
    if grid is None:
        grid = ImageGrid(height, width, (0.0, float(height)), (0.0, float(width)))
    return SarImage(grid, pixels, True)
