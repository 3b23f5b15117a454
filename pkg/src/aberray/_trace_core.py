"""Compiled kernels for sequential surface tracing and PSF splatting.

Everything here operates on plain float64 arrays so the hot loops stay free of
Python objects. Surfaces are packed one row per surface:

    col 0   curvature 1/R (0 for planar / aperture)
    col 1   conic constant
    col 2-6 even-asphere coefficients a4, a6, a8, a10, a12
    col 7   semi-diameter [mm]
    col 8   vertex z [mm]
    col 9   refractive index before the surface
    col 10  refractive index after the surface
    col 11  1.0 if the surface uses the aspheric Newton path, else 0.0

Ray state is structure-of-arrays (ox, oy, oz, dx, dy, dz, alive) updated in
place; dead lanes may hold garbage but are kept finite so the vectorized loops
never branch on ray state.
"""

import numpy as np
from numba import njit

NEWTON_ITERS = 12
NEWTON_TOL = 1e-9  # [mm] residual on z - sag(r)
T_EPS = -1e-9      # allow zero-thickness gaps

PACK_COLS = 12


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _sag(c, kappa, a4, a6, a8, a10, a12, r2):
    q = 1.0 - (1.0 + kappa) * c * c * r2
    q = q if q > 1e-14 else 1e-14
    z = c * r2 / (1.0 + np.sqrt(q))
    return z + r2 * r2 * (a4 + r2 * (a6 + r2 * (a8 + r2 * (a10 + r2 * a12))))


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _dsag_over_r(c, kappa, a4, a6, a8, a10, a12, r2):
    """d(sag)/dr divided by r; finite at r = 0."""
    q = 1.0 - (1.0 + kappa) * c * c * r2
    q = q if q > 1e-14 else 1e-14
    base = c / np.sqrt(q)
    poly = r2 * (4.0 * a4 + r2 * (6.0 * a6 + r2 * (8.0 * a8 + r2 * (10.0 * a10 + r2 * 12.0 * a12))))
    return base + poly


@njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def trace_to_exit(pack, ox, oy, oz, dx, dy, dz, alive):
    """Propagate rays through all packed surfaces, leaving exit state in place.

    Kill conditions: missed surface, hit radius beyond the semi-diameter,
    total internal reflection, backward travel, unconverged asphere Newton.
    """
    nsurf = pack.shape[0]
    n = ox.shape[0]
    for s in range(nsurf):
        c = pack[s, 0]
        kappa = pack[s, 1]
        a4 = pack[s, 2]
        a6 = pack[s, 3]
        a8 = pack[s, 4]
        a10 = pack[s, 5]
        a12 = pack[s, 6]
        sd2 = pack[s, 7] * pack[s, 7]
        zv = pack[s, 8]
        n1 = pack[s, 9]
        n2 = pack[s, 10]
        is_asph = pack[s, 11] != 0.0
        is_plane = (c == 0.0) and not is_asph

        if is_plane:
            for i in range(n):
                dzi = dz[i]
                dzs = dzi if dzi > 1e-12 else 1.0
                t = (zv - oz[i]) / dzs
                ok = (dzi > 1e-12) and (t > T_EPS)
                t = t if t > 0.0 else 0.0
                ox[i] += t * dx[i]
                oy[i] += t * dy[i]
                oz[i] += t * dz[i]
                r2 = ox[i] * ox[i] + oy[i] * oy[i]
                if (not ok) or (r2 > sd2):
                    alive[i] = 0
        else:
            for i in range(n):
                pzi = oz[i] - zv
                kp1 = 1.0 + kappa
                A = c * (dx[i] * dx[i] + dy[i] * dy[i] + kp1 * dz[i] * dz[i])
                B = c * (ox[i] * dx[i] + oy[i] * dy[i] + kp1 * pzi * dz[i]) - dz[i]
                C = c * (ox[i] * ox[i] + oy[i] * oy[i] + kp1 * pzi * pzi) - 2.0 * pzi
                disc = B * B - A * C
                ok = disc >= 0.0
                disc = disc if disc > 0.0 else 0.0
                den = -B + np.sqrt(disc)
                dens = den if np.abs(den) > 1e-14 else 1.0
                t = C / dens
                ok = ok and (np.abs(den) > 1e-14) and (t > T_EPS)

                if is_asph:
                    # Newton on f(t) = z(t) - sag(r(t)), seeded at the plane z = zv.
                    dzs = dz[i] if np.abs(dz[i]) > 1e-12 else 1.0
                    t = (zv - oz[i]) / dzs
                    for _ in range(NEWTON_ITERS):
                        px = ox[i] + t * dx[i]
                        py = oy[i] + t * dy[i]
                        pz = oz[i] + t * dz[i] - zv
                        r2 = px * px + py * py
                        if r2 > 4.0 * sd2:
                            r2 = 4.0 * sd2
                        f = pz - _sag(c, kappa, a4, a6, a8, a10, a12, r2)
                        m = _dsag_over_r(c, kappa, a4, a6, a8, a10, a12, r2)
                        fp = dz[i] - m * (px * dx[i] + py * dy[i])
                        fps = fp if np.abs(fp) > 1e-14 else 1.0
                        t = t - f / fps
                    px = ox[i] + t * dx[i]
                    py = oy[i] + t * dy[i]
                    pz = oz[i] + t * dz[i] - zv
                    r2 = px * px + py * py
                    resid = pz - _sag(c, kappa, a4, a6, a8, a10, a12, r2)
                    ok = (np.abs(resid) < NEWTON_TOL) and (t > T_EPS)

                t = t if t > 0.0 else 0.0
                ox[i] += t * dx[i]
                oy[i] += t * dy[i]
                oz[i] += t * dz[i]
                r2 = ox[i] * ox[i] + oy[i] * oy[i]
                if (not ok) or (r2 > sd2):
                    alive[i] = 0

        if n1 != n2:
            eta = n1 / n2
            for i in range(n):
                r2 = ox[i] * ox[i] + oy[i] * oy[i]
                if r2 > 4.0 * sd2:
                    r2 = 4.0 * sd2
                m = _dsag_over_r(c, kappa, a4, a6, a8, a10, a12, r2)
                # unnormalized surface normal (-m*x, -m*y, 1), oriented against the ray
                nx = -m * ox[i]
                ny = -m * oy[i]
                nz = 1.0
                inv = 1.0 / np.sqrt(nx * nx + ny * ny + 1.0)
                nx *= inv
                ny *= inv
                nz *= inv
                cosi = -(nx * dx[i] + ny * dy[i] + nz * dz[i])
                sgn = 1.0 if cosi >= 0.0 else -1.0
                nx *= sgn
                ny *= sgn
                nz *= sgn
                cosi *= sgn
                k = 1.0 - eta * eta * (1.0 - cosi * cosi)
                ok = k >= 0.0
                k = k if k > 0.0 else 0.0
                coef = eta * cosi - np.sqrt(k)
                dx[i] = eta * dx[i] + coef * nx
                dy[i] = eta * dy[i] + coef * ny
                dz[i] = eta * dz[i] + coef * nz
                if (not ok) or (dz[i] <= 0.0):
                    alive[i] = 0


@njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def intersect_plane(ox, oy, oz, dx, dy, dz, alive, z, hx, hy):
    for i in range(ox.shape[0]):
        dzs = dz[i] if np.abs(dz[i]) > 1e-12 else 1.0
        t = (z - oz[i]) / dzs
        hx[i] = ox[i] + t * dx[i]
        hy[i] = oy[i] + t * dy[i]
        if np.abs(dz[i]) <= 1e-12:
            alive[i] = 0


@njit(cache=True, error_model="numpy", nogil=True)
def splat_kernels(hx, hy, alive, offsets, cx, cy, pitch, k, out):
    """Bilinear splat of ray hits into one k x k kernel per query.

    Hit coordinates are in sensor mm; cx, cy give the mm position of each
    query's central kernel pixel. Kernels are stored image-like: column index
    grows with sensor +x, row index grows with sensor -y. ``offsets[q]:
    offsets[q+1]`` selects query q's rays. Output kernels are raw deposited
    weight (not normalized). Deterministic: queries and rays are accumulated
    in order.
    """
    nq = offsets.shape[0] - 1
    half = k // 2
    for q in range(nq):
        for i in range(offsets[q], offsets[q + 1]):
            if alive[i] == 0:
                continue
            fx = (hx[i] - cx[q]) / pitch + half
            fy = (cy[q] - hy[i]) / pitch + half
            ix = int(np.floor(fx))
            iy = int(np.floor(fy))
            wx1 = fx - ix
            wy1 = fy - iy
            wx0 = 1.0 - wx1
            wy0 = 1.0 - wy1
            if 0 <= iy < k:
                if 0 <= ix < k:
                    out[q, iy, ix] += wy0 * wx0
                if 0 <= ix + 1 < k:
                    out[q, iy, ix + 1] += wy0 * wx1
            if 0 <= iy + 1 < k:
                if 0 <= ix < k:
                    out[q, iy + 1, ix] += wy1 * wx0
                if 0 <= ix + 1 < k:
                    out[q, iy + 1, ix + 1] += wy1 * wx1


@njit(cache=True, fastmath=True, error_model="numpy", nogil=True)
def concentric_disk(u, scale, out):
    """Shirley-Chiu concentric square-to-disk map (signed-radius form),
    scaled to a disk of the given radius."""
    quarter_pi = np.pi / 4.0
    for i in range(u.shape[0]):
        a = 2.0 * u[i, 0] - 1.0
        b = 2.0 * u[i, 1] - 1.0
        if a == 0.0 and b == 0.0:
            out[i, 0] = 0.0
            out[i, 1] = 0.0
            continue
        if a * a > b * b:
            r = a
            phi = quarter_pi * (b / a)
        else:
            r = b
            phi = 0.5 * np.pi - quarter_pi * (a / b)
        out[i, 0] = scale * r * np.cos(phi)
        out[i, 1] = scale * r * np.sin(phi)
