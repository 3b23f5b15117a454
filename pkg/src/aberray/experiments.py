"""Canned desk-scale experiments: PSF montages across field and depth, and
the depth-from-focus domain-gap measurement.

The domain-gap pipeline renders the same synthetic RGBD scenes through two
PSF sources (the ray tracer with real off-axis aberrations, and the
shift-invariant thin-lens Gaussian), runs the classical sharpest-frame depth
estimator on both, and compares where the depth errors land radially. Field
curvature drags the best-focused frame away from the true one at large field
angles, so aberrated stacks concentrate errors toward the image corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dff import estimate_depth, radial_error_map, radial_ratio, sharpness_volume
from .lens import LensPrescription, focus_to, paraxial_analyze
from .parallel import SERIAL, ParallelMap
from .psf import Frustum, gaussian_coc_psf, raytraced_psfs
from .raytrace import rms_radius, trace_point
from .render import FocalStack, RgbdImage, local_convolve, pixel_psf_field, simulate_stack
from .streams import stream
from .surrogate import GridModel, MlpModel

__all__ = [
    "psf_montage",
    "make_scene",
    "domain_gap_experiment",
    "DomainGapResult",
    "field_spot_rms",
    "plane_argmax_flip",
]


def field_spot_rms(lens_focused, x_norm, y_norm, depth_m, spp=2048, seed=9):
    """RMS spot radius (mm) at a normalized field position and depth."""
    frustum = Frustum.from_lens(lens_focused)
    src = frustum.point_from_normalized(x_norm, y_norm, depth_m)
    return rms_radius(trace_point(lens_focused, src, spp=spp, sampler_seed=seed))


def psf_montage(
    lens: LensPrescription,
    focus_m: float = 1.5,
    depths_m=(1.2, 1.5, 2.0),
    field_fracs=(0.0, 0.7, 1.0),
    mlp: MlpModel | None = None,
    grid: GridModel | None = None,
    spp: int = 2048,
    seed: int = 9,
    k: int = 11,
    pixel_pitch_mm: float = 0.05,
):
    """PSF kernels for depths x field angles x methods.

    Field positions march along the sensor diagonal (frac 1 = corner).
    Returns {method: (n_depth, n_field, k, k)} with methods "raytraced",
    "gaussian", and optionally "mlp" / "grid".
    """
    focused = focus_to(lens, focus_m)
    frustum = Frustum.from_lens(lens)
    summary = paraxial_analyze(lens)
    out = {}

    dd, ff = np.meshgrid(depths_m, field_fracs, indexing="ij")
    pts = frustum.point_from_normalized(ff.ravel(), ff.ravel(), dd.ravel())
    shape = (len(depths_m), len(field_fracs), k, k)

    out["raytraced"] = raytraced_psfs(
        focused, pts, spp, seed, pixel_pitch_mm, k=k, on_empty="uniform"
    ).reshape(shape)
    out["gaussian"] = np.stack([
        gaussian_coc_psf(summary.effective_focal_length_mm,
                         summary.working_f_number, float(z), focus_m,
                         pixel_pitch_mm, k).kernel
        for z in dd.ravel()
    ]).reshape(shape)
    if mlp is not None:
        from .surrogate import mlp_forward_batch

        inputs = np.stack([
            ff.ravel(), ff.ravel(), frustum.normalize_depth(dd.ravel()),
            np.full(dd.size, frustum.normalize_depth(focus_m)),
        ], axis=1)
        out["mlp"] = mlp_forward_batch(mlp, inputs).astype(np.float64).reshape(shape)
    if grid is not None:
        from .render import _grid_batch

        out["grid"] = _grid_batch(grid, ff.ravel(), ff.ravel(), dd.ravel(),
                                  focus_m).reshape(shape)
    return out


# ----------------------------------------------------------------------------
# Synthetic RGBD scenes
# ----------------------------------------------------------------------------


def _texture(h, w, rng):
    """Dense random texture with structure at several scales."""
    base = rng.random((h, w))
    for scale in (2, 4, 8):
        small = rng.random((math.ceil(h / scale), math.ceil(w / scale)))
        base += np.kron(small, np.ones((scale, scale)))[:h, :w]
    base /= base.max()
    rgb = np.stack([base, np.roll(base, 1, axis=0), np.roll(base, 1, axis=1)], axis=2)
    return 0.1 + 0.8 * rgb


def make_scene(lens, kind: str, h=96, w=128, z_near=0.4, z_far=1.1, seed=0) -> RgbdImage:
    """Textured synthetic RGBD scene with a named depth layout."""
    rng = stream(seed, f"scene.{kind}")
    rgb = _texture(h, w, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    u = xx / (w - 1)
    v = yy / (h - 1)
    span = z_far - z_near
    if kind == "slant_x":
        depth = z_near + span * u
    elif kind == "slant_y":
        depth = z_near + span * v
    elif kind == "steps":
        depth = z_near + span * (np.floor(u * 4) / 3.0)
    elif kind == "bump":
        r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
        depth = z_far - span * np.exp(-r2 / 0.08)
    elif kind == "two_plane":
        depth = np.where(u < 0.5, z_near, z_far)
    elif kind == "smooth":
        g = rng.random((5, 7))
        depth = z_near + span * np.kron(g, np.ones((h // 5 + 1, w // 7 + 1)))[:h, :w] / g.max()
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return RgbdImage(rgb, depth, lens, name=kind)


DEFAULT_SCENES = ("slant_x", "slant_y", "steps", "bump", "two_plane")


@dataclass
class DomainGapResult:
    mean_error_maps: dict  # provider -> (H, W) mean |depth error| in meters
    ratios: dict           # provider -> outer-annulus / center-disk ratio
    per_scene: dict        # provider -> list of per-scene DepthMetrics-like maes


def domain_gap_experiment(
    lens: LensPrescription,
    scene_kinds=DEFAULT_SCENES,
    h: int = 96,
    w: int = 128,
    z_near: float = 0.4,
    z_far: float = 1.1,
    stack_size: int = 10,
    spp: int = 512,
    seed: int = 0,
    providers=("raytraced", "gaussian"),
    margin: int | None = None,
    pmap: ParallelMap = SERIAL,
):
    """Render each scene through each PSF provider, estimate depth with the
    classical sharpest-frame estimator, and accumulate |error| maps.

    Pixels whose sharpness window hangs off the image border carry estimator
    artifacts unrelated to optics, so a margin of one window (default) is
    cropped before the radial analysis.
    """
    from .dff import DEFAULT_WINDOW

    if margin is None:
        margin = DEFAULT_WINDOW
    maps = {p: [] for p in providers}
    maes = {p: [] for p in providers}
    for si, kind in enumerate(scene_kinds):
        image = make_scene(lens, kind, h=h, w=w, z_near=z_near, z_far=z_far, seed=seed)
        for provider in providers:
            stack = simulate_stack(image, size=stack_size, perturb_frac=0.25,
                                   seed=seed + si, provider=provider, spp=spp,
                                   pmap=pmap)
            depth, _ = estimate_depth(stack)
            err = (depth - image.depth_m)[margin:-margin, margin:-margin]
            maps[provider].append(err)
            maes[provider].append(float(np.mean(np.abs(err))))
    mean_maps = {p: radial_error_map(maps[p]) for p in providers}
    ratios = {p: radial_ratio(mean_maps[p]) for p in providers}
    return DomainGapResult(mean_maps, ratios, maes)


def plane_argmax_flip(
    lens: LensPrescription,
    plane_m: float = 1.5,
    h: int = 480,
    w: int = 640,
    stack_size: int = 10,
    span_frac: float = 0.35,
    spp: int = 512,
    seed: int = 3,
    provider: str = "raytraced",
    pmap: ParallelMap = SERIAL,
):
    """Sharpest-frame indices at the image center vs the field edge for a
    fronto-parallel textured plane.

    The stack spans plane_m * (1 +- span_frac) so the plane sits mid-stack.
    Returns (center_frame, edge_frame, corner_frame).
    """
    rng = stream(seed, "plane")
    rgb = _texture(h, w, rng)
    image = RgbdImage(rgb, np.full((h, w), plane_m), lens, name="plane")
    distances = np.linspace(plane_m * (1 - span_frac), plane_m * (1 + span_frac),
                            stack_size)
    frames = np.empty((stack_size, h, w, 3))
    for i, f_d in enumerate(distances):
        field = pixel_psf_field(image, float(f_d), provider, spp=spp, seed=seed,
                                pmap=pmap)
        frames[i] = local_convolve(image.rgb, field)
    stack = FocalStack(frames, distances, lens.name, provider, source=image)
    sharp = sharpness_volume(stack)

    def block_argmax(i0, i1, j0, j1):
        votes = np.argmax(sharp[:, i0:i1, j0:j1], axis=0)
        return int(np.bincount(votes.ravel(), minlength=stack_size).argmax())

    b = max(h // 8, 4)
    center = block_argmax(h // 2 - b // 2, h // 2 + b // 2,
                          w // 2 - b // 2, w // 2 + b // 2)
    edge = block_argmax(h // 2 - b // 2, h // 2 + b // 2, 0, b)  # x-edge
    corner = block_argmax(0, b, 0, b)
    return center, edge, corner
