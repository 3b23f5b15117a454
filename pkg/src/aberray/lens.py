"""Sequential lens prescriptions and first-order (paraxial) analysis.

A prescription is an ordered list of surfaces, object side first, in a frame
whose origin is the first surface vertex with +z toward the sensor. All
lengths are millimeters. Prescriptions are immutable; operations that change
the lens (e.g. focusing) return new values.

Lens file format (UTF-8 text, ``#`` comments allowed)::

    name=<text>
    sensor_width_mm=<mm>      sensor_height_mm=<mm>
    sensor_distance_mm=<mm>   design_wavelength_nm=<nm>
    surf <i> kind=<sphere|asphere|aper> radius=<mm|inf> thickness=<mm>
         semi_diameter=<mm> [n=<float> V=<float>]
         [conic=<float> a4=<> a6=<> a8=<> a10=<> a12=<>]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import _trace_core

__all__ = [
    "Material",
    "Surface",
    "LensPrescription",
    "ParaxialSummary",
    "LensFileError",
    "InvalidLensError",
    "FocusBracketError",
    "parse_prescription",
    "format_prescription",
    "load_lens",
    "builtin_lens_path",
    "BUILTIN_LENSES",
    "paraxial_analyze",
    "paraxial_image_distance",
    "focus_to",
    "pack_surfaces",
    "focus_bundle_rays",
]

ASPHERIC_ORDERS = (4, 6, 8, 10, 12)
FOCUS_RANGE_M = (0.2, 20.0)

# Fraunhofer d/F/C lines [nm], used by the optional dispersion model.
_D_LINE = 587.5618
_F_LINE = 486.1327
_C_LINE = 656.2725


class LensFileError(ValueError):
    """Malformed lens file; message names the offending line and field."""


class InvalidLensError(ValueError):
    """Prescription violates a structural invariant."""


class FocusBracketError(RuntimeError):
    """Focus minimization failed to bracket; carries the paraxial seed."""

    def __init__(self, message, paraxial_seed_mm):
        super().__init__(f"{message} (paraxial seed {paraxial_seed_mm:.6f} mm)")
        self.paraxial_seed_mm = paraxial_seed_mm


@dataclass(frozen=True)
class Material:
    """Optical glass: index at the d-line plus Abbe number. Air is ``None``."""

    refractive_index_d: float
    abbe_number: float
    name: str | None = None

    def __post_init__(self):
        if self.refractive_index_d < 1.0:
            raise InvalidLensError(f"refractive_index_d {self.refractive_index_d} < 1")
        if self.abbe_number <= 0:
            raise InvalidLensError(f"abbe_number {self.abbe_number} must be > 0")

    def index_at(self, wavelength_nm: float, dispersion: bool = False) -> float:
        """Refractive index at a wavelength.

        By default the d-line index is returned unchanged (single-wavelength
        operation near 589 nm). With ``dispersion=True`` a linear Abbe model
        spreads the index between the F and C lines.
        """
        if not dispersion:
            return self.refractive_index_d
        nd, v = self.refractive_index_d, self.abbe_number
        lam = wavelength_nm * 1e-3  # um
        span = 1.0 / (_F_LINE * 1e-3) ** 2 - 1.0 / (_C_LINE * 1e-3) ** 2
        frac = (1.0 / lam**2 - 1.0 / (_D_LINE * 1e-3) ** 2) / span
        return nd + (nd - 1.0) / v * frac


@dataclass(frozen=True)
class Surface:
    """One refracting / limiting surface of a sequential system."""

    kind: str  # "sphere" | "asphere" | "aperture_stop"
    radius: float  # signed mm; inf (or 0) means planar
    thickness: float  # axial gap to the next surface, mm
    semi_diameter: float
    conic: float = 0.0
    aspheric_coeffs: tuple[tuple[int, float], ...] = ()
    material_after: Material | None = None

    def __post_init__(self):
        if self.kind not in ("sphere", "asphere", "aperture_stop"):
            raise InvalidLensError(f"unknown surface kind {self.kind!r}")
        if self.semi_diameter <= 0:
            raise InvalidLensError("semi_diameter must be > 0")
        if self.thickness < 0:
            raise InvalidLensError("thickness must be >= 0")
        if self.radius == 0:
            object.__setattr__(self, "radius", math.inf)
        if self.kind == "aperture_stop":
            if self.material_after is not None:
                raise InvalidLensError("aperture stop carries no material")
            if math.isfinite(self.radius):
                raise InvalidLensError("aperture stop carries no curvature")
        if self.kind != "asphere" and self.aspheric_coeffs:
            raise InvalidLensError("aspheric_coeffs only valid on asphere surfaces")
        for order, _ in self.aspheric_coeffs:
            if order not in ASPHERIC_ORDERS:
                raise InvalidLensError(f"unsupported aspheric order {order}")

    @property
    def curvature(self) -> float:
        return 0.0 if not math.isfinite(self.radius) else 1.0 / self.radius

    def aspheric_by_order(self) -> dict[int, float]:
        return dict(self.aspheric_coeffs)


@dataclass(frozen=True)
class LensPrescription:
    surfaces: tuple[Surface, ...]
    sensor_width_mm: float
    sensor_height_mm: float
    sensor_distance_mm: float  # last surface vertex to sensor plane
    name: str = ""
    design_wavelength_nm: float = 589.0

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if len(self.surfaces) < 2:
            raise InvalidLensError("prescription needs at least 2 surfaces")
        stops = [s for s in self.surfaces if s.kind == "aperture_stop"]
        if len(stops) > 1:
            raise InvalidLensError(f"expected at most one aperture stop, got {len(stops)}")
        if self.sensor_distance_mm <= 0:
            raise InvalidLensError("sensor_distance_mm must be > 0")
        if self.sensor_width_mm <= 0 or self.sensor_height_mm <= 0:
            raise InvalidLensError("sensor dimensions must be > 0")

    @property
    def stop_index(self) -> int:
        """Index of the aperture stop; a stop-less lens is limited by its
        first surface."""
        for i, s in enumerate(self.surfaces):
            if s.kind == "aperture_stop":
                return i
        return 0

    def vertex_positions(self) -> np.ndarray:
        """z of each surface vertex; surface 0 at z = 0."""
        t = np.array([s.thickness for s in self.surfaces])
        return np.concatenate([[0.0], np.cumsum(t)[:-1]])

    @property
    def sensor_z_mm(self) -> float:
        return float(self.vertex_positions()[-1] + self.sensor_distance_mm)

    def index_before(self, i: int, wavelength_nm=None, dispersion=False) -> float:
        if i == 0:
            return 1.0
        mat = self.surfaces[i - 1].material_after
        if mat is None:
            return 1.0
        return mat.index_at(wavelength_nm or self.design_wavelength_nm, dispersion)

    def index_after(self, i: int, wavelength_nm=None, dispersion=False) -> float:
        mat = self.surfaces[i].material_after
        if mat is None:
            return 1.0
        return mat.index_at(wavelength_nm or self.design_wavelength_nm, dispersion)


@dataclass(frozen=True)
class ParaxialSummary:
    effective_focal_length_mm: float
    back_focal_distance_mm: float
    working_f_number: float
    entrance_pupil_diameter_mm: float
    entrance_pupil_distance_mm: float  # from the first vertex, +z toward sensor


# ----------------------------------------------------------------------------
# Lens file parsing
# ----------------------------------------------------------------------------

_HEADER_KEYS = {
    "name": str,
    "sensor_width_mm": float,
    "sensor_height_mm": float,
    "sensor_distance_mm": float,
    "design_wavelength_nm": float,
}

_KIND_NAMES = {"sphere": "sphere", "asphere": "asphere", "aper": "aperture_stop"}
_KIND_TAGS = {v: k for k, v in _KIND_NAMES.items()}


def _parse_float(token, lineno, fieldname):
    if token.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return float(token)
    except ValueError:
        raise LensFileError(f"line {lineno}: field {fieldname!r}: not a number: {token!r}") from None


def parse_prescription(text: str) -> LensPrescription:
    """Parse the lens file format into a validated prescription."""
    header: dict = {}
    surfaces: list[Surface] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("surf "):
            tokens = line.split()
            if len(tokens) < 2:
                raise LensFileError(f"line {lineno}: malformed surface line")
            fields = {}
            for tok in tokens[2:]:
                if "=" not in tok:
                    raise LensFileError(f"line {lineno}: expected key=value, got {tok!r}")
                key, val = tok.split("=", 1)
                fields[key] = (val, lineno)
            surfaces.append(_build_surface(fields, lineno))
        elif "=" in line:
            key, val = line.split("=", 1)
            key = key.strip()
            if key not in _HEADER_KEYS:
                raise LensFileError(f"line {lineno}: unknown header field {key!r}")
            conv = _HEADER_KEYS[key]
            header[key] = val.strip() if conv is str else _parse_float(val.strip(), lineno, key)
        else:
            raise LensFileError(f"line {lineno}: unrecognized line {line!r}")

    missing = [k for k in _HEADER_KEYS if k != "name" and k not in header]
    if missing:
        raise LensFileError(f"missing header fields: {', '.join(missing)}")
    try:
        return LensPrescription(
            surfaces=tuple(surfaces),
            sensor_width_mm=header["sensor_width_mm"],
            sensor_height_mm=header["sensor_height_mm"],
            sensor_distance_mm=header["sensor_distance_mm"],
            name=header.get("name", ""),
            design_wavelength_nm=header["design_wavelength_nm"],
        )
    except InvalidLensError:
        raise


def _build_surface(fields, lineno) -> Surface:
    def take(name, required=False, default=None):
        if name in fields:
            val, ln = fields.pop(name)
            return _parse_float(val, ln, name)
        if required:
            raise LensFileError(f"line {lineno}: surface missing field {name!r}")
        return default

    if "kind" not in fields:
        raise LensFileError(f"line {lineno}: surface missing field 'kind'")
    kind_tag = fields.pop("kind")[0]
    if kind_tag not in _KIND_NAMES:
        raise LensFileError(f"line {lineno}: field 'kind': unknown kind {kind_tag!r}")
    kind = _KIND_NAMES[kind_tag]

    radius = take("radius", default=math.inf)
    thickness = take("thickness", required=True)
    semi = take("semi_diameter", required=True)
    n = take("n")
    v = take("V")
    conic = take("conic", default=0.0)
    coeffs = []
    for order in ASPHERIC_ORDERS:
        a = take(f"a{order}")
        if a is not None:
            coeffs.append((order, a))
    if fields:
        raise LensFileError(f"line {lineno}: unknown surface fields: {', '.join(fields)}")

    if (n is None) != (v is None):
        raise LensFileError(f"line {lineno}: material needs both n and V")
    material = Material(n, v) if n is not None else None
    try:
        return Surface(
            kind=kind,
            radius=radius,
            thickness=thickness,
            semi_diameter=semi,
            conic=conic,
            aspheric_coeffs=tuple(coeffs),
            material_after=material,
        )
    except InvalidLensError as exc:
        raise LensFileError(f"line {lineno}: {exc}") from exc


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.12g}"


def format_prescription(lens: LensPrescription) -> str:
    """Serialize back to the lens file format (parse/format round-trips)."""
    lines = [
        f"name={lens.name}",
        f"sensor_width_mm={_fmt(lens.sensor_width_mm)}",
        f"sensor_height_mm={_fmt(lens.sensor_height_mm)}",
        f"sensor_distance_mm={_fmt(lens.sensor_distance_mm)}",
        f"design_wavelength_nm={_fmt(lens.design_wavelength_nm)}",
    ]
    for i, s in enumerate(lens.surfaces, start=1):
        parts = [
            f"surf {i}",
            f"kind={_KIND_TAGS[s.kind]}",
            f"radius={_fmt(s.radius)}",
            f"thickness={_fmt(s.thickness)}",
            f"semi_diameter={_fmt(s.semi_diameter)}",
        ]
        if s.material_after is not None:
            parts.append(f"n={_fmt(s.material_after.refractive_index_d)}")
            parts.append(f"V={_fmt(s.material_after.abbe_number)}")
        if s.kind == "asphere":
            parts.append(f"conic={_fmt(s.conic)}")
            by_order = s.aspheric_by_order()
            for order in ASPHERIC_ORDERS:
                if order in by_order:
                    parts.append(f"a{order}={_fmt(by_order[order])}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


BUILTIN_LENSES = {
    "fifty_f2.8": "fifty_f2.8.lens",
    "canon_rf50_f1.8": "canon_rf50_f1.8.lens",
}


def builtin_lens_path(name: str):
    if name not in BUILTIN_LENSES:
        raise KeyError(f"unknown builtin lens {name!r}; have {sorted(BUILTIN_LENSES)}")
    return resources.files("aberray.data") / BUILTIN_LENSES[name]


def load_lens(source) -> LensPrescription:
    """Load a prescription from a path or a builtin lens name."""
    if isinstance(source, str) and source in BUILTIN_LENSES:
        text = builtin_lens_path(source).read_text(encoding="utf-8")
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    return parse_prescription(text)


# ----------------------------------------------------------------------------
# Paraxial analysis
# ----------------------------------------------------------------------------


def _refract_yu(y, u, n1, n2, c):
    return (n1 * u - y * c * (n2 - n1)) / n2


def paraxial_image_distance(lens, object_distance_mm, wavelength_nm=None, dispersion=False):
    """Image distance (from the last vertex) of an axial object point.

    ``object_distance_mm`` is measured from the first vertex; ``inf`` gives
    the back focal distance.
    """
    u0 = 1e-4
    if math.isinf(object_distance_mm):
        y, u = 1.0, 0.0
    else:
        y, u = u0 * object_distance_mm, u0
    n1 = 1.0
    for i, s in enumerate(lens.surfaces):
        n2 = lens.index_after(i, wavelength_nm, dispersion)
        u = _refract_yu(y, u, n1, n2, s.curvature)
        y += s.thickness * u
        n1 = n2
    y -= lens.surfaces[-1].thickness * u  # back to the last vertex
    if abs(u) < 1e-15:
        raise ValueError("afocal system: paraxial ray exits parallel to the axis")
    return -y / u


def _entrance_pupil(lens, wavelength_nm=None, dispersion=False):
    """Paraxial image of the stop through the preceding surfaces.

    Returns (z position from the first vertex, semi-diameter).
    """
    k = lens.stop_index
    zs = lens.vertex_positions()
    z_stop = zs[k]
    h_stop = lens.surfaces[k].semi_diameter
    if k == 0:
        return z_stop, h_stop

    # Flip the front group and trace two paraxial rays from the stop toward
    # the object side: ray A (axial) locates the pupil, ray B (edge) sizes it.
    def flip_trace(y, u):
        n1 = lens.index_after(k - 1, wavelength_nm, dispersion)  # medium at the stop
        zeta_prev = 0.0
        for i in range(k - 1, -1, -1):
            zeta = z_stop - zs[i]
            y += (zeta - zeta_prev) * u
            c = -lens.surfaces[i].curvature
            n2 = lens.index_before(i, wavelength_nm, dispersion)
            u = _refract_yu(y, u, n1, n2, c)
            n1 = n2
            zeta_prev = zeta
        return y, u, zeta_prev

    ya, ua, zl = flip_trace(0.0, 0.1)
    yb, ub, _ = flip_trace(h_stop, 0.0)
    if abs(ua) < 1e-15:
        raise ValueError("afocal front group: cannot locate the entrance pupil")
    zeta_ep = zl - ya / ua
    h_ep = yb + ub * (zeta_ep - zl)
    return z_stop - zeta_ep, abs(h_ep)


def paraxial_analyze(lens, wavelength_nm=None, dispersion=False) -> ParaxialSummary:
    """First-order y-u ray trace: focal length, pupils, working f-number.

    Raises ValueError for afocal (zero-power) systems.
    """
    y, u, n1 = 1.0, 0.0, 1.0
    for i, s in enumerate(lens.surfaces):
        n2 = lens.index_after(i, wavelength_nm, dispersion)
        u = _refract_yu(y, u, n1, n2, s.curvature)
        y += s.thickness * u
        n1 = n2
    y -= lens.surfaces[-1].thickness * u
    if abs(u) < 1e-12:
        raise ValueError("afocal system: zero optical power")
    efl = -1.0 / u
    bfd = -y / u
    z_ep, h_ep = _entrance_pupil(lens, wavelength_nm, dispersion)
    return ParaxialSummary(
        effective_focal_length_mm=efl,
        back_focal_distance_mm=bfd,
        working_f_number=efl / (2.0 * h_ep),
        entrance_pupil_diameter_mm=2.0 * h_ep,
        entrance_pupil_distance_mm=z_ep,
    )


# ----------------------------------------------------------------------------
# Packing and focusing
# ----------------------------------------------------------------------------


def pack_surfaces(lens, wavelength_nm=None, dispersion=False) -> np.ndarray:
    """Flatten a prescription into the array form the tracing kernels use."""
    zs = lens.vertex_positions()
    pack = np.zeros((len(lens.surfaces), _trace_core.PACK_COLS))
    for i, s in enumerate(lens.surfaces):
        coeffs = s.aspheric_by_order()
        pack[i, 0] = s.curvature
        pack[i, 1] = s.conic
        for j, order in enumerate(ASPHERIC_ORDERS):
            pack[i, 2 + j] = coeffs.get(order, 0.0)
        pack[i, 7] = s.semi_diameter
        pack[i, 8] = zs[i]
        pack[i, 9] = lens.index_before(i, wavelength_nm, dispersion)
        pack[i, 10] = lens.index_after(i, wavelength_nm, dispersion)
        pack[i, 11] = 1.0 if s.kind == "asphere" else 0.0
    return pack


_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
FOCUS_BUNDLE_SIZE = 64
_FOCUS_BRACKET_MM = 1.5
_FOCUS_TOL_MM = 1e-4  # 0.1 um on the sensor position


def focus_bundle_rays(lens, distance_m, count=FOCUS_BUNDLE_SIZE):
    """Deterministic on-axis ray fan filling the entrance pupil (Vogel spiral)."""
    z_ep, h_ep = _entrance_pupil(lens)
    i = np.arange(count)
    r = h_ep * np.sqrt((i + 0.5) / count)
    th = i * _GOLDEN_ANGLE
    px, py = r * np.cos(th), r * np.sin(th)
    s_mm = distance_m * 1000.0
    o = np.zeros((count, 3))
    o[:, 2] = -s_mm
    d = np.stack([px, py, np.full(count, z_ep) + s_mm], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return o, d


def _rms_radius_at(ox, oy, oz, dx, dy, dz, alive, z):
    hx = np.empty_like(ox)
    hy = np.empty_like(oy)
    a = alive.copy()
    _trace_core.intersect_plane(ox, oy, oz, dx, dy, dz, a, z, hx, hy)
    m = a != 0
    x, y = hx[m], hy[m]
    x = x - x.mean()
    y = y - y.mean()
    return math.sqrt(float(np.mean(x * x + y * y)))


def _golden_minimize(f, lo, hi, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def focus_to(lens, focus_distance_m, wavelength_nm=None) -> LensPrescription:
    """Refocus by moving the sensor: paraxial solve, then golden-section
    minimization of the on-axis RMS spot radius (0.1 um position tolerance).

    The result depends only on (lens geometry, distance), so refocusing an
    already-focused lens to the same distance is a fixed point.
    """
    lo_m, hi_m = FOCUS_RANGE_M
    if not (lo_m <= focus_distance_m <= hi_m):
        raise ValueError(
            f"focus distance {focus_distance_m} m outside the valid range "
            f"[{lo_m}, {hi_m}] m"
        )
    s_mm = focus_distance_m * 1000.0
    seed = paraxial_image_distance(lens, s_mm, wavelength_nm)
    z_last = float(lens.vertex_positions()[-1])

    pack = pack_surfaces(lens, wavelength_nm)
    o, d = focus_bundle_rays(lens, focus_distance_m)
    ox, oy, oz = o[:, 0].copy(), o[:, 1].copy(), o[:, 2].copy()
    dx, dy, dz = d[:, 0].copy(), d[:, 1].copy(), d[:, 2].copy()
    alive = np.ones(len(o), np.uint8)
    _trace_core.trace_to_exit(pack, ox, oy, oz, dx, dy, dz, alive)
    if not alive.any():
        raise FocusBracketError("no focusing rays survived the trace", seed)

    exit_state = (ox, oy, oz, dx, dy, dz, alive)
    z_seed = z_last + seed
    lo, hi = z_seed - _FOCUS_BRACKET_MM, z_seed + _FOCUS_BRACKET_MM
    rms = lambda z: _rms_radius_at(*exit_state, z)
    z_best = _golden_minimize(rms, lo, hi, _FOCUS_TOL_MM)
    if z_best - lo < 2 * _FOCUS_TOL_MM or hi - z_best < 2 * _FOCUS_TOL_MM:
        raise FocusBracketError("focus minimum landed on the bracket boundary", seed)
    return replace(lens, sensor_distance_mm=z_best - z_last)
