"""Point spread functions: spot-diagram rasterization and the thin-lens
Gaussian circle-of-confusion baseline.

A PSF kernel is a k x k (k odd) nonnegative array over sensor pixels, stored
image-like (column index grows with sensor +x, row index with sensor -y). The
central entry corresponds to the pixel under the chief ray, and normalized
kernels sum to 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _trace_core
from .lens import FOCUS_RANGE_M, LensPrescription, paraxial_analyze
from .parallel import SERIAL, ParallelMap
from .raytrace import SpotDiagram, chief_centers, trace_batch

__all__ = [
    "PsfGrid",
    "ObjectQuery",
    "Frustum",
    "EmptyPsfError",
    "splat_weight",
    "rasterize",
    "coc_diameter_mm",
    "gaussian_coc_psf",
    "normalize_query",
    "raytraced_psfs",
    "write_psf_dataset",
    "read_psf_dataset",
    "DEFAULT_KERNEL_SIZE",
]

DEFAULT_KERNEL_SIZE = 11

PROVENANCES = ("raytraced", "gaussian", "surrogate_mlp", "surrogate_grid")


class EmptyPsfError(RuntimeError):
    """No splat weight was deposited for a query (fully vignetted or off-grid)."""


@dataclass
class PsfGrid:
    kernel: np.ndarray  # (k, k) nonnegative
    pixel_pitch_mm: float
    provenance: str = "raytraced"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        k = self.kernel.shape[0]
        if self.kernel.ndim != 2 or self.kernel.shape[1] != k or k % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {self.kernel.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def k(self) -> int:
        return self.kernel.shape[0]

    def normalized(self) -> "PsfGrid":
        total = float(self.kernel.sum())
        if total <= 0:
            raise EmptyPsfError("cannot normalize a zero kernel")
        return PsfGrid(self.kernel / total, self.pixel_pitch_mm, self.provenance)

    def second_moment_mm(self) -> float:
        """RMS radius of the kernel mass about the grid center, in mm."""
        k = self.k
        half = k // 2
        idx = np.arange(k) - half
        xx, yy = np.meshgrid(idx, idx)
        w = self.kernel / self.kernel.sum()
        return float(np.sqrt(np.sum(w * (xx**2 + yy**2))) * self.pixel_pitch_mm)


def splat_weight(t: float) -> float:
    """Tent weight of a ray on a pixel at normalized distance t >= 0."""
    if t < 0:
        raise ValueError("splat distance must be >= 0")
    return 1.0 - t if t <= 1.0 else 0.0


def rasterize(spot: SpotDiagram, pixel_pitch_mm: float, k: int = DEFAULT_KERNEL_SIZE,
              center_pixel=(0.0, 0.0)) -> PsfGrid:
    """Rasterize a spot diagram into a normalized k x k PSF kernel.

    Every hit deposits weight sigma(|dx|/L) * sigma(|dy|/L) onto the pixels
    within one pitch of it; the four per-hit weights sum to 1, so interior
    hits conserve their unit energy. ``center_pixel`` is the sensor-mm
    position of the central pixel's center (the chief-ray pixel). Hits
    landing outside the window are dropped.
    """
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    hits = np.ascontiguousarray(spot.hits, dtype=float)
    out = np.zeros((1, k, k))
    offsets = np.array([0, len(hits)], dtype=np.int64)
    alive = np.ones(len(hits), np.uint8)
    cx = np.array([float(center_pixel[0])])
    cy = np.array([float(center_pixel[1])])
    _trace_core.splat_kernels(hits[:, 0].copy(), hits[:, 1].copy(), alive, offsets,
                              cx, cy, pixel_pitch_mm, k, out)
    total = float(out.sum())
    if total <= 0.0:
        raise EmptyPsfError(
            f"empty PSF: no splat weight for source {spot.source_point} "
            f"({len(hits)}/{spot.emitted_count} rays alive)"
        )
    return PsfGrid(out[0] / total, pixel_pitch_mm, "raytraced")


def coc_diameter_mm(f_mm: float, f_number: float, z_m: float, focus_m: float) -> float:
    """Thin-lens circle-of-confusion diameter
    ``D = (f/N) * |z - f_d|/z * f/(f_d - f)`` (everything in mm)."""
    z_mm = z_m * 1000.0
    fd_mm = focus_m * 1000.0
    if fd_mm <= f_mm:
        raise ValueError(f"focus distance {focus_m} m must exceed the focal length")
    if z_mm <= 0:
        raise ValueError("object distance must be > 0")
    return (f_mm / f_number) * (abs(z_mm - fd_mm) / z_mm) * (f_mm / (fd_mm - f_mm))


def gaussian_coc_psf(f_mm: float, f_number: float, z_m: float, focus_m: float,
                     pixel_pitch_mm: float, k: int = DEFAULT_KERNEL_SIZE) -> PsfGrid:
    """Thin-lens defocus kernel: a truncated Gaussian over the CoC disk.

    The circle-of-confusion diameter is
    ``D = (f/N) * |z - f_d| / z * f / (f_d - f)`` with everything in mm.
    The kernel is an isotropic Gaussian with sigma = D/4 truncated at radius
    D/2, sampled at pixel centers and normalized; when D is below one pixel
    pitch the kernel degenerates to a single-pixel delta.
    """
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    diameter = coc_diameter_mm(f_mm, f_number, z_m, focus_m)

    kernel = np.zeros((k, k))
    half = k // 2
    if diameter < pixel_pitch_mm:
        kernel[half, half] = 1.0
        return PsfGrid(kernel, pixel_pitch_mm, "gaussian")
    idx = (np.arange(k) - half) * pixel_pitch_mm
    xx, yy = np.meshgrid(idx, idx)
    r2 = xx**2 + yy**2
    sigma = diameter / 4.0
    kernel = np.exp(-r2 / (2.0 * sigma * sigma))
    kernel[r2 > (diameter / 2.0) ** 2] = 0.0
    total = kernel.sum()
    if total <= 0:
        kernel = np.zeros((k, k))
        kernel[half, half] = 1.0
        return PsfGrid(kernel, pixel_pitch_mm, "gaussian")
    return PsfGrid(kernel / total, pixel_pitch_mm, "gaussian")


# ----------------------------------------------------------------------------
# Object-space normalization (the imaging frustum)
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Frustum:
    """Valid imaging region: a rectangular-cross-section pyramid with its apex
    at the first lens vertex, half-angle tangents set by sensor size over EFL,
    and depth clipped to the focusable range."""

    tan_x: float
    tan_y: float
    z_min_m: float = FOCUS_RANGE_M[0]
    z_max_m: float = FOCUS_RANGE_M[1]
    depth_norm: str = "linear"  # or "inverse" (disparity-linear)

    @classmethod
    def from_lens(cls, lens: LensPrescription, depth_norm: str = "linear") -> "Frustum":
        efl = paraxial_analyze(lens).effective_focal_length_mm
        return cls(
            tan_x=(lens.sensor_width_mm / 2.0) / efl,
            tan_y=(lens.sensor_height_mm / 2.0) / efl,
            depth_norm=depth_norm,
        )

    def normalize_depth(self, z_m):
        if self.depth_norm == "linear":
            return (np.asarray(z_m) - self.z_min_m) / (self.z_max_m - self.z_min_m)
        inv_span = 1.0 / self.z_min_m - 1.0 / self.z_max_m
        return (1.0 / self.z_min_m - 1.0 / np.asarray(z_m)) / inv_span

    def denormalize_depth(self, z_norm):
        if self.depth_norm == "linear":
            return self.z_min_m + np.asarray(z_norm) * (self.z_max_m - self.z_min_m)
        inv_span = 1.0 / self.z_min_m - 1.0 / self.z_max_m
        return 1.0 / (1.0 / self.z_min_m - np.asarray(z_norm) * inv_span)

    def point_from_normalized(self, x_norm, y_norm, z_m):
        """Metric object point (meters) for normalized lateral coordinates."""
        x = np.asarray(x_norm) * np.asarray(z_m) * self.tan_x
        y = np.asarray(y_norm) * np.asarray(z_m) * self.tan_y
        return np.stack(np.broadcast_arrays(x, y, z_m), axis=-1)


@dataclass(frozen=True)
class ObjectQuery:
    """One PSF lookup: normalized coordinates plus their metric originals."""

    x_norm: float
    y_norm: float
    z_norm: float
    f_d_norm: float
    x_m: float
    y_m: float
    z_m: float
    f_d_m: float

    def as_input(self) -> np.ndarray:
        return np.array([self.x_norm, self.y_norm, self.z_norm, self.f_d_norm])


def normalize_query(x_m: float, y_m: float, z_m: float, f_d_m: float,
                    frustum: Frustum) -> ObjectQuery:
    """Map a metric object point and focus distance into the normalized
    frustum coordinates: (x, y) to [-1, 1] across the field of view at that
    depth, z and f_d to [0, 1] over the focusable depth range."""
    lo, hi = frustum.z_min_m, frustum.z_max_m
    if not (lo <= z_m <= hi):
        raise ValueError(f"depth {z_m} m outside [{lo}, {hi}] m")
    if not (lo <= f_d_m <= hi):
        raise ValueError(f"focus distance {f_d_m} m outside [{lo}, {hi}] m")
    x_norm = x_m / (z_m * frustum.tan_x)
    y_norm = y_m / (z_m * frustum.tan_y)
    if abs(x_norm) > 1.0 + 1e-9 or abs(y_norm) > 1.0 + 1e-9:
        raise ValueError(
            f"point ({x_m}, {y_m}, {z_m}) m lies outside the imaging frustum "
            f"(x_norm={x_norm:.3f}, y_norm={y_norm:.3f})"
        )
    return ObjectQuery(
        x_norm=float(x_norm),
        y_norm=float(y_norm),
        z_norm=float(frustum.normalize_depth(z_m)),
        f_d_norm=float(frustum.normalize_depth(f_d_m)),
        x_m=x_m, y_m=y_m, z_m=z_m, f_d_m=f_d_m,
    )


# ----------------------------------------------------------------------------
# Batched ray-traced PSF generation
# ----------------------------------------------------------------------------


def raytraced_psfs(
    lens: LensPrescription,
    sources_m: np.ndarray,
    spp: int,
    seed: int,
    pixel_pitch_mm: float,
    k: int = DEFAULT_KERNEL_SIZE,
    pmap: ParallelMap = SERIAL,
    chunk: int = 2048,
    index_offset: int = 0,
    on_empty: str = "error",
) -> np.ndarray:
    """Ground-truth kernels for a batch of object points (lens already
    focused). Kernels are centered on each point's chief ray and normalized
    to sum 1. Returns (n, k, k).

    Under extreme defocus the blur disk dwarfs the k x k window and a finite
    ray budget can leave it empty. ``on_empty="error"`` raises EmptyPsfError;
    ``on_empty="uniform"`` substitutes the infinite-defocus limit kernel
    (uniform 1/k^2), which keeps long sampling-driven runs alive.
    """
    if on_empty not in ("error", "uniform"):
        raise ValueError(f"on_empty must be 'error' or 'uniform', got {on_empty!r}")
    sources_m = np.atleast_2d(np.asarray(sources_m, dtype=float))
    n = len(sources_m)
    centers = chief_centers(lens, sources_m)
    if np.isnan(centers).any():
        bad = int(np.where(np.isnan(centers).any(axis=1))[0][0])
        raise EmptyPsfError(f"empty PSF: chief bundle fully vignetted for source {sources_m[bad]}")
    out = np.empty((n, k, k))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        hits, alive = trace_batch(
            lens, sources_m[lo:hi], spp, seed,
            index_offset=index_offset + lo, pmap=pmap,
        )
        kernels = np.zeros((hi - lo, k, k))
        offsets = np.arange(hi - lo + 1, dtype=np.int64) * spp
        _trace_core.splat_kernels(
            np.ascontiguousarray(hits[:, 0]), np.ascontiguousarray(hits[:, 1]),
            alive, offsets,
            np.ascontiguousarray(centers[lo:hi, 0]), np.ascontiguousarray(centers[lo:hi, 1]),
            pixel_pitch_mm, k, kernels,
        )
        sums = kernels.sum(axis=(1, 2))
        empty = sums <= 0
        if empty.any():
            if on_empty == "error":
                bad = int(np.where(empty)[0][0])
                raise EmptyPsfError(f"empty PSF for source {sources_m[lo + bad]}")
            kernels[empty] = 1.0 / (k * k)
            sums[empty] = 1.0
        out[lo:hi] = kernels / sums[:, None, None]
    return out


# ----------------------------------------------------------------------------
# PSF dataset file format
# ----------------------------------------------------------------------------

_PSFG_MAGIC = b"PSFG"


def write_psf_dataset(path, kernels: np.ndarray, queries_norm: np.ndarray) -> None:
    """Write kernels + normalized query coordinates to the PSFG binary format.

    Layout: magic "PSFG"; little-endian u32 k and count; count * k * k
    float32 kernels row-major; count records of (x_norm, y_norm, z_norm,
    f_d_norm) float32.
    """
    kernels = np.asarray(kernels, dtype=np.float32)
    queries_norm = np.asarray(queries_norm, dtype=np.float32)
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ValueError("kernels must have shape (count, k, k)")
    if queries_norm.shape != (kernels.shape[0], 4):
        raise ValueError("queries must have shape (count, 4)")
    with open(path, "wb") as fh:
        fh.write(_PSFG_MAGIC)
        fh.write(struct.pack("<II", kernels.shape[1], kernels.shape[0]))
        fh.write(kernels.astype("<f4").tobytes(order="C"))
        fh.write(queries_norm.astype("<f4").tobytes(order="C"))


def read_psf_dataset(path):
    """Read a PSFG file; returns (kernels (count, k, k), queries (count, 4))."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PSFG_MAGIC:
            raise ValueError(f"not a PSFG file: bad magic {magic!r}")
        k, count = struct.unpack("<II", fh.read(8))
        kernels = np.frombuffer(fh.read(count * k * k * 4), dtype="<f4")
        kernels = kernels.reshape(count, k, k).astype(np.float64)
        queries = np.frombuffer(fh.read(count * 4 * 4), dtype="<f4")
        queries = queries.reshape(count, 4).astype(np.float64)
    return kernels, queries
