"""Ray bundles from object-space point sources to the sensor plane.

Point sources are given in meters in object space (+z toward the sensor, so a
source 1.5 m in front of the lens has z = 1.5). Sensor-plane hits are in mm.
Pupil sampling, tracing, and recording are deterministic functions of
(lens, source, spp, seed).

Rotational symmetry is exact by construction: each source is rotated into the
meridional (y = 0) half-plane, traced there, and its hits are rotated back, so
rotating a source about the optical axis rotates its spot diagram and nothing
else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _trace_core
from .lens import FOCUS_RANGE_M, LensPrescription, Surface, pack_surfaces, paraxial_analyze
from .parallel import SERIAL, ParallelMap
from .streams import stream

__all__ = [
    "Ray",
    "SpotDiagram",
    "refract",
    "intersect_surface",
    "trace_point",
    "trace_batch",
    "chief_centers",
    "rms_radius",
]

CHIEF_BUNDLE_SIZE = 16
CHIEF_PUPIL_FRACTION = 0.02
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class Ray:
    """Single ray in the lens frame (mm). ``energy`` is the splat weight u_k."""

    origin: np.ndarray
    direction: np.ndarray
    wavelength_nm: float = 589.0
    alive: bool = True
    energy: float = 1.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit length (|d| = {norm})")


@dataclass
class SpotDiagram:
    """Sensor-plane intersections of the surviving rays of one point source."""

    hits: np.ndarray  # (n, 2) mm
    emitted_count: int
    source_point: np.ndarray  # (3,) meters, object space
    focus_distance_m: float | None = None
    in_sensor: np.ndarray = field(default=None)  # bool per hit

    @property
    def killed_count(self) -> int:
        return self.emitted_count - len(self.hits)


def refract(direction, normal, n_in, n_out):
    """Vector Snell refraction of a unit direction at a unit normal.

    Returns the refracted unit direction, or None on total internal
    reflection (the caller kills the ray).
    """
    d = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    cosi = -float(np.dot(n, d))
    if cosi < 0:
        n, cosi = -n, -cosi
    eta = n_in / n_out
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    if k < 0:
        return None
    return eta * d + (eta * cosi - math.sqrt(k)) * n


def _surface_sag(s: Surface, r2):
    c, kappa = s.curvature, s.conic
    q = 1.0 - (1.0 + kappa) * c * c * r2
    z = c * r2 / (1.0 + np.sqrt(np.maximum(q, 1e-14)))
    for order, a in s.aspheric_coeffs:
        z = z + a * r2 ** (order // 2)
    return z


def _surface_slope_over_r(s: Surface, r2):
    c, kappa = s.curvature, s.conic
    q = 1.0 - (1.0 + kappa) * c * c * r2
    m = c / np.sqrt(np.maximum(q, 1e-14))
    for order, a in s.aspheric_coeffs:
        m = m + order * a * r2 ** (order // 2 - 1)
    return m


def intersect_surface(ray: Ray, surface: Surface, vertex_z_mm: float):
    """Intersect one ray with one surface.

    Returns (point, unit normal) or None on a miss (beyond the clear
    aperture, no real intersection, or unconverged Newton iteration). The
    returned point satisfies z - sag(r) to better than 1e-9 mm.
    """
    if not ray.alive:
        raise ValueError("dead rays are never used downstream")
    o = ray.origin - np.array([0.0, 0.0, vertex_z_mm])
    d = ray.direction
    c = surface.curvature

    if surface.kind == "asphere":
        # Newton on f(t) = z(t) - sag(r(t)), seeded at the tangent plane.
        if abs(d[2]) < 1e-12:
            return None
        t = -o[2] / d[2]
        converged = False
        for _ in range(32):
            p = o + t * d
            r2 = p[0] * p[0] + p[1] * p[1]
            f = p[2] - float(_surface_sag(surface, r2))
            if abs(f) < 1e-12:
                converged = True
                break
            m = float(_surface_slope_over_r(surface, r2))
            fp = d[2] - m * (p[0] * d[0] + p[1] * d[1])
            if abs(fp) < 1e-14:
                break
            t = t - f / fp
        if not converged:
            t = _bisect_asphere(surface, o, d)
            if t is None:
                return None
    elif c == 0.0:
        if abs(d[2]) < 1e-12:
            return None
        t = -o[2] / d[2]
    else:
        kp1 = 1.0 + surface.conic
        A = c * (d[0] ** 2 + d[1] ** 2 + kp1 * d[2] ** 2)
        B = c * (o[0] * d[0] + o[1] * d[1] + kp1 * o[2] * d[2]) - d[2]
        C = c * (o[0] ** 2 + o[1] ** 2 + kp1 * o[2] ** 2) - 2.0 * o[2]
        disc = B * B - A * C
        if disc < 0:
            return None
        den = -B + math.sqrt(disc)
        if abs(den) < 1e-14:
            return None
        t = C / den

    if t < -1e-9:
        return None
    p = o + t * d
    r2 = p[0] * p[0] + p[1] * p[1]
    if r2 > surface.semi_diameter**2:
        return None
    m = float(_surface_slope_over_r(surface, r2))
    normal = np.array([-m * p[0], -m * p[1], 1.0])
    normal /= np.linalg.norm(normal)
    if float(np.dot(normal, d)) > 0:
        normal = -normal  # orient against the incident ray
    return p + np.array([0.0, 0.0, vertex_z_mm]), normal


def _bisect_asphere(surface, o, d):
    """Fallback bracket between the vertex plane and the max-sag plane."""
    if abs(d[2]) < 1e-12:
        return None
    sag_edge = float(_surface_sag(surface, surface.semi_diameter**2))
    z_lo, z_hi = min(0.0, sag_edge) - 1e-6, max(0.0, sag_edge) + 1e-6
    t_lo, t_hi = (z_lo - o[2]) / d[2], (z_hi - o[2]) / d[2]
    if t_lo > t_hi:
        t_lo, t_hi = t_hi, t_lo

    def f(t):
        p = o + t * d
        return p[2] - float(_surface_sag(surface, p[0] ** 2 + p[1] ** 2))

    f_lo, f_hi = f(t_lo), f(t_hi)
    if f_lo * f_hi > 0:
        return None
    for _ in range(80):
        t_mid = 0.5 * (t_lo + t_hi)
        f_mid = f(t_mid)
        if f_lo * f_mid <= 0:
            t_hi, f_hi = t_mid, f_mid
        else:
            t_lo, f_lo = t_mid, f_mid
    return 0.5 * (t_lo + t_hi)


# ----------------------------------------------------------------------------
# Batched tracing
# ----------------------------------------------------------------------------


def _concentric_disk(u: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Shirley-Chiu concentric map: uniform unit square -> uniform disk."""
    out = np.empty_like(u)
    _trace_core.concentric_disk(np.ascontiguousarray(u), scale, out)
    return out


def _chief_offsets():
    i = np.arange(CHIEF_BUNDLE_SIZE)
    r = CHIEF_PUPIL_FRACTION * np.sqrt((i + 0.5) / CHIEF_BUNDLE_SIZE)
    th = i * _GOLDEN_ANGLE
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _trace_canonical_batch(pack, sources_m, pupil_xy, z_ep, z_sensor, pmap):
    """Trace per-source pupil bundles with each source rotated into the
    meridional plane, then rotate the sensor hits back.

    pupil_xy: (n, m, 2) canonical pupil samples per source. Returns
    (hits (n*m, 2), alive (n*m,)).
    """
    n, m = pupil_xy.shape[:2]
    r_mm = np.hypot(sources_m[:, 0], sources_m[:, 1]) * 1000.0
    phi = np.arctan2(sources_m[:, 1], sources_m[:, 0])
    z_mm = sources_m[:, 2] * 1000.0

    ox = np.repeat(r_mm, m)
    oy = np.zeros(n * m)
    oz = np.repeat(-z_mm, m)
    flat = pupil_xy.reshape(n * m, 2)
    dx = flat[:, 0] - ox
    dy = flat[:, 1].copy()
    dz = np.repeat(z_ep + z_mm, m)
    inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
    dx *= inv
    dy *= inv
    dz *= inv
    alive = np.ones(n * m, np.uint8)
    hx = np.empty(n * m)
    hy = np.empty(n * m)

    def run(lo, hi):
        a, b = lo * m, hi * m
        _trace_core.trace_to_exit(pack, ox[a:b], oy[a:b], oz[a:b],
                                  dx[a:b], dy[a:b], dz[a:b], alive[a:b])
        _trace_core.intersect_plane(ox[a:b], oy[a:b], oz[a:b],
                                    dx[a:b], dy[a:b], dz[a:b], alive[a:b],
                                    z_sensor, hx[a:b], hy[a:b])

    pmap.run(run, n, min_chunk=1)

    cphi = np.repeat(np.cos(phi), m)
    sphi = np.repeat(np.sin(phi), m)
    hits = np.empty((n * m, 2))
    hits[:, 0] = cphi * hx - sphi * hy
    hits[:, 1] = sphi * hx + cphi * hy
    return hits, alive


def trace_batch(
    lens: LensPrescription,
    sources_m: np.ndarray,
    spp: int,
    seed: int,
    wavelength_nm: float | None = None,
    index_offset: int = 0,
    pmap: ParallelMap = SERIAL,
):
    """Trace spp entrance-pupil rays from every source point.

    sources_m: (n, 3) object-space points in meters, z > 0 in front of the
    lens. Pupil samples come from per-source streams keyed by
    (seed, index_offset + i), so results do not depend on batching or thread
    count. Returns (hits (n*spp, 2) mm, alive (n*spp,) uint8).
    """
    sources_m = np.atleast_2d(np.asarray(sources_m, dtype=float))
    n = len(sources_m)
    pack = pack_surfaces(lens, wavelength_nm)
    summary = paraxial_analyze(lens, wavelength_nm)
    z_ep = summary.entrance_pupil_distance_mm
    h_ep = summary.entrance_pupil_diameter_mm / 2.0

    u = np.empty((n, spp, 2))
    for i in range(n):
        u[i] = stream(seed, "pupil", index_offset + i).random((spp, 2))
    disk = _concentric_disk(u.reshape(-1, 2), h_ep).reshape(n, spp, 2)
    return _trace_canonical_batch(pack, sources_m, disk, z_ep,
                                  lens.sensor_z_mm, pmap)


def chief_centers(
    lens: LensPrescription,
    sources_m: np.ndarray,
    wavelength_nm: float | None = None,
    pmap: ParallelMap = SERIAL,
) -> np.ndarray:
    """Reference kernel centers: centroid of a 16-ray paraxial pupil bundle.

    The narrow bundle pivots about the entrance pupil center, so the centroid
    tracks the chief ray and stays stable under asymmetric aberrations.
    Returns (n, 2) sensor mm; NaN where no bundle ray survives.
    """
    sources_m = np.atleast_2d(np.asarray(sources_m, dtype=float))
    n = len(sources_m)
    pack = pack_surfaces(lens, wavelength_nm)
    summary = paraxial_analyze(lens, wavelength_nm)
    z_ep = summary.entrance_pupil_distance_mm
    h_ep = summary.entrance_pupil_diameter_mm / 2.0
    disk = np.broadcast_to(_chief_offsets() * h_ep,
                           (n, CHIEF_BUNDLE_SIZE, 2)).copy()
    hits, alive = _trace_canonical_batch(pack, sources_m, disk, z_ep,
                                         lens.sensor_z_mm, pmap)
    a = (alive != 0).reshape(n, CHIEF_BUNDLE_SIZE)
    counts = a.sum(axis=1)
    hx = hits[:, 0].reshape(n, CHIEF_BUNDLE_SIZE)
    hy = hits[:, 1].reshape(n, CHIEF_BUNDLE_SIZE)
    with np.errstate(invalid="ignore"):
        out = np.stack([
            np.where(counts > 0, (hx * a).sum(axis=1) / np.maximum(counts, 1), np.nan),
            np.where(counts > 0, (hy * a).sum(axis=1) / np.maximum(counts, 1), np.nan),
        ], axis=1)
    return out


def trace_point(
    lens: LensPrescription,
    source_m,
    spp: int,
    sampler_seed: int = 0,
    wavelength_nm: float | None = None,
) -> SpotDiagram:
    """Spot diagram of one object-space point source.

    Emits spp rays uniformly over the entrance pupil disk; rays that miss a
    surface, exceed a clear aperture (including the stop), or suffer total
    internal reflection are killed. Survivors are intersected with the sensor
    plane. hits.len + killed rays = spp exactly.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    source_m = np.asarray(source_m, dtype=float)
    if not (FOCUS_RANGE_M[0] <= source_m[2] <= FOCUS_RANGE_M[1]):
        raise ValueError(
            f"source z {source_m[2]} m outside the imaging range {FOCUS_RANGE_M} m"
        )
    hits, alive = trace_batch(lens, source_m[None, :], spp, sampler_seed, wavelength_nm)
    good = hits[alive != 0]
    half_w, half_h = lens.sensor_width_mm / 2.0, lens.sensor_height_mm / 2.0
    in_sensor = (np.abs(good[:, 0]) <= half_w) & (np.abs(good[:, 1]) <= half_h)
    return SpotDiagram(
        hits=good,
        emitted_count=spp,
        source_point=source_m,
        in_sensor=in_sensor,
    )


def rms_radius(spot: SpotDiagram) -> float:
    """RMS hit radius about the centroid, in mm."""
    if len(spot.hits) == 0:
        return math.nan
    d = spot.hits - spot.hits.mean(axis=0)
    return math.sqrt(float(np.mean(np.sum(d * d, axis=1))))
