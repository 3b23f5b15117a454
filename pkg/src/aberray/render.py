"""Aberrated focused images and focal stacks from RGBD input.

Each output pixel is blurred with its own PSF kernel, looked up from a
provider (ray tracer, fitted surrogate, kernel grid, or the thin-lens
Gaussian) at that pixel's object-space position, depth, and the frame's
focus distance. The convolution is a gather: every output pixel sums its
replicate-padded k x k input neighborhood against its own kernel.

Pixel (i, j) of an H x W image maps to normalized sensor coordinates
u = (j + 0.5 - W/2) / (W/2), v = (H/2 - i - 0.5) / (H/2); the object point
seen there sits at normalized (-u, -v) (the lens inverts the image and the
stored image is the flipped readout).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lens import FOCUS_RANGE_M, LensPrescription, focus_to, paraxial_analyze
from .parallel import SERIAL, ParallelMap
from .psf import Frustum, gaussian_coc_psf, raytraced_psfs
from .streams import stream
from .surrogate import GridModel, MlpModel, mlp_forward_batch
from . import images as imageio

log = logging.getLogger("aberray.render")

__all__ = [
    "RgbdImage",
    "FocalStack",
    "PsfField",
    "pixel_psf_field",
    "local_convolve",
    "local_convolve_patched",
    "simulate_stack",
    "save_stack",
    "load_stack_manifest",
    "DEFAULT_PATCH",
]

DEFAULT_PATCH = (320, 480)
RENDER_SPP = 2048


@dataclass
class RgbdImage:
    """All-in-focus RGB plus per-pixel depth, tied to a lens.

    Depth values are clamped into the focusable range on construction; the
    number of clamped entries is kept (and logged) rather than silently
    discarded.
    """

    rgb: np.ndarray  # (H, W, 3) linear light in [0, 1]
    depth_m: np.ndarray  # (H, W) meters
    lens: LensPrescription
    name: str = ""
    clamped_count: int = 0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth_m, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if depth.shape != self.rgb.shape[:2]:
            raise ValueError("depth and rgb dimensions disagree")
        if not np.isfinite(self.rgb).all():
            raise ValueError("rgb contains non-finite values")
        lo, hi = FOCUS_RANGE_M
        clamped = np.clip(depth, lo, hi)
        self.clamped_count = int(np.count_nonzero(clamped != depth))
        if self.clamped_count:
            log.info("clamped %d depth values into [%g, %g] m in %r",
                     self.clamped_count, lo, hi, self.name)
        self.depth_m = clamped

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def pixel_pitch_mm(self) -> float:
        return self.lens.sensor_height_mm / self.height

    def pixel_object_coords(self):
        """Normalized object-space (x, y) for every pixel (image inversion
        folded in)."""
        h, w = self.height, self.width
        u = (np.arange(w) + 0.5 - w / 2) / (w / 2)
        v = (h / 2 - np.arange(h) - 0.5) / (h / 2)
        uu, vv = np.meshgrid(u, v)
        return -uu, -vv


@dataclass
class FocalStack:
    frames: np.ndarray  # (S, H, W, 3)
    focus_distances_m: np.ndarray  # (S,) strictly ascending
    lens_name: str
    psf_source: str  # provenance of the kernels used
    source: RgbdImage | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.focus_distances_m = np.asarray(self.focus_distances_m, dtype=np.float64)
        if len(self.frames) != len(self.focus_distances_m) or len(self.frames) < 1:
            raise ValueError("need one focus distance per frame, at least one frame")
        if len(self.focus_distances_m) > 1 and not np.all(np.diff(self.focus_distances_m) > 0):
            raise ValueError("focus distances must be strictly ascending")

    @property
    def size(self) -> int:
        return len(self.frames)


@dataclass
class PsfField:
    kernels: np.ndarray  # (H, W, k, k)
    pixel_pitch_mm: float
    provenance: str

    @property
    def k(self) -> int:
        return self.kernels.shape[-1]


def _provider_name(provider) -> str:
    if isinstance(provider, MlpModel):
        return "surrogate_mlp"
    if isinstance(provider, GridModel):
        return "surrogate_grid"
    if provider in ("gaussian", "raytraced"):
        return provider
    raise ValueError(f"unknown PSF provider {provider!r}")


def pixel_psf_field(
    image: RgbdImage,
    f_d_m: float,
    provider,
    k: int = 11,
    spp: int = RENDER_SPP,
    seed: int = 0,
    pmap: ParallelMap = SERIAL,
) -> PsfField:
    """One PSF kernel per pixel for a frame focused at f_d_m.

    ``provider`` is "raytraced", "gaussian", an MlpModel, or a GridModel.
    Deterministic for fixed arguments.
    """
    name = _provider_name(provider)
    h, w = image.height, image.width
    pitch = image.pixel_pitch_mm
    xs, ys = image.pixel_object_coords()
    zs = image.depth_m
    kernels = np.empty((h, w, k, k), dtype=np.float32)

    if name == "gaussian":
        # Eq-style CoC depends only on depth: same-depth pixels share a kernel
        summary = paraxial_analyze(image.lens)
        uniq, inverse = np.unique(zs.ravel(), return_inverse=True)
        table = np.stack([
            gaussian_coc_psf(summary.effective_focal_length_mm,
                             summary.working_f_number, float(z), f_d_m,
                             pitch, k).kernel
            for z in uniq
        ]).astype(np.float32)
        kernels = table[inverse].reshape(h, w, k, k)
        return PsfField(kernels, pitch, name)

    frustum = Frustum.from_lens(image.lens)
    flat_x, flat_y, flat_z = xs.ravel(), ys.ravel(), zs.ravel()

    if isinstance(provider, MlpModel):
        inputs = np.stack([flat_x, flat_y, frustum.normalize_depth(flat_z),
                           np.full_like(flat_z, frustum.normalize_depth(f_d_m))], axis=1)
        out = mlp_forward_batch(provider, inputs).astype(np.float32)
        return PsfField(out.reshape(h, w, k, k), pitch, name)

    if isinstance(provider, GridModel):
        out = _grid_batch(provider, flat_x, flat_y, flat_z, f_d_m)
        return PsfField(out.reshape(h, w, k, k).astype(np.float32), pitch, name)

    # ray-traced ground truth
    focused = focus_to(image.lens, f_d_m)
    pts = frustum.point_from_normalized(flat_x, flat_y, flat_z)
    out = raytraced_psfs(focused, pts, spp, seed, pitch, k=k, pmap=pmap,
                         on_empty="uniform")
    return PsfField(out.reshape(h, w, k, k).astype(np.float32), pitch, name)


def _grid_batch(model: GridModel, xs, ys, zs, f_d_m) -> np.ndarray:
    """Vectorized trilinear lookup (nearest stored focus)."""
    fi = int(np.argmin(np.abs(model.focus_samples_m - f_d_m)))
    block = model.kernels[fi]

    def cell(nodes, vals):
        idx = np.clip(np.searchsorted(nodes, vals, side="right") - 1, 0, len(nodes) - 2)
        w = (vals - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
        return idx, np.clip(w, 0.0, 1.0)

    ix, wx = cell(model.x_nodes, np.clip(xs, model.x_nodes[0], model.x_nodes[-1]))
    iy, wy = cell(model.y_nodes, np.clip(ys, model.y_nodes[0], model.y_nodes[-1]))
    iz, wz = cell(model.depths_m, np.clip(zs, model.depths_m[0], model.depths_m[-1]))
    out = np.zeros((len(xs), model.k, model.k))
    for dz, fz in ((0, 1 - wz), (1, wz)):
        for dy, fy in ((0, 1 - wy), (1, wy)):
            for dx, fx in ((0, 1 - wx), (1, wx)):
                w = (fz * fy * fx)[:, None, None]
                out += w * block[iz + dz, iy + dy, ix + dx]
    sums = out.sum(axis=(1, 2), keepdims=True)
    return out / np.where(sums > 0, sums, 1.0)


def local_convolve(image: np.ndarray, psf_field: PsfField) -> np.ndarray:
    """Spatially-varying gather convolution with replicate padding.

    output(p) = sum over the k x k neighborhood q of input(q) * kernel_p(q):
    each output pixel applies its own kernel to its padded neighborhood.
    """
    kernels = psf_field.kernels
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    if kernels.shape[:2] != (h, w):
        raise ValueError(f"field {kernels.shape[:2]} does not match image {(h, w)}")
    k = kernels.shape[-1]
    pad = k // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for r in range(k):
        for s in range(k):
            out += padded[r : r + h, s : s + w] * kernels[:, :, r, s, None].astype(np.float64)
    return out[:, :, 0] if squeeze else out


def local_convolve_patched(image: np.ndarray, psf_field: PsfField,
                           patch=DEFAULT_PATCH) -> np.ndarray:
    """Patch-wise variant bounding peak memory on large images.

    Patches are processed independently with their own replicate padding, so
    rows/columns within one kernel radius of an interior patch seam may
    differ from the unpatched result; everywhere else the outputs match.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, _ = img.shape
    ph, pw = patch
    out = np.zeros_like(img)
    for i0 in range(0, h, ph):
        i1 = min(i0 + ph, h)
        for j0 in range(0, w, pw):
            j1 = min(j0 + pw, w)
            sub = PsfField(psf_field.kernels[i0:i1, j0:j1],
                           psf_field.pixel_pitch_mm, psf_field.provenance)
            out[i0:i1, j0:j1] = local_convolve(img[i0:i1, j0:j1], sub)
    return out[:, :, 0] if squeeze else out


def stack_focus_distances(depth_m: np.ndarray, size: int, perturb_frac: float,
                          seed: int) -> np.ndarray:
    """Linear focus spacing over the image's depth range with uniform
    jitter of +-perturb_frac of the inter-frame spacing, sorted ascending."""
    if size < 1:
        raise ValueError("stack size must be >= 1")
    lo = float(depth_m.min())
    hi = float(depth_m.max())
    if hi - lo < 1e-12:
        log.warning("constant-depth image: all %d focus distances collapse to %g m",
                    size, lo)
        base = np.full(size, lo)
        spacing = 0.0
    elif size == 1:
        base = np.array([(lo + hi) / 2.0])
        spacing = 0.0
    else:
        base = np.linspace(lo, hi, size)
        spacing = (hi - lo) / (size - 1)
    if perturb_frac > 0 and spacing > 0:
        jitter = stream(seed, "jitter").uniform(-perturb_frac, perturb_frac, size)
        base = base + jitter * spacing
    base = np.clip(base, FOCUS_RANGE_M[0], FOCUS_RANGE_M[1])
    base = np.sort(base)
    # keep strictly ascending after clipping
    for i in range(1, size):
        if base[i] <= base[i - 1]:
            base[i] = np.nextafter(base[i - 1], np.inf)
    return base


def simulate_stack(
    image: RgbdImage,
    size: int = 10,
    perturb_frac: float = 0.25,
    seed: int = 0,
    provider="gaussian",
    k: int = 11,
    spp: int = RENDER_SPP,
    pmap: ParallelMap = SERIAL,
    patch=None,
) -> FocalStack:
    """Render a focal stack: linearly spaced, jittered focus distances over
    the image's depth range, one spatially-varying convolution per frame."""
    distances = stack_focus_distances(image.depth_m, size, perturb_frac, seed)
    frames = np.empty((size, image.height, image.width, 3))
    name = _provider_name(provider)
    for si, f_d in enumerate(distances):
        field = pixel_psf_field(image, float(f_d), provider, k=k, spp=spp,
                                seed=seed, pmap=pmap)
        if patch is None:
            frames[si] = local_convolve(image.rgb, field)
        else:
            frames[si] = local_convolve_patched(image.rgb, field, patch)
    return FocalStack(frames, distances, image.lens.name, name, source=image)


# ----------------------------------------------------------------------------
# Stack manifests
# ----------------------------------------------------------------------------


def save_stack(directory, stack: FocalStack, stem: str = "frame") -> Path:
    """Write frames as PNGs plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(stack.frames):
        fname = f"{stem}_{i:03d}.png"
        imageio.save_rgb(directory / fname, frame)
        names.append(fname)
    manifest = {
        "frames": names,
        "focus_distances_m": [float(f) for f in stack.focus_distances_m],
        "lens": stack.lens_name,
        "psf_source": stack.psf_source,
    }
    path = directory / "stack.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_stack_manifest(manifest_path) -> FocalStack:
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    frames = np.stack([
        imageio.load_rgb(manifest_path.parent / name) for name in meta["frames"]
    ])
    return FocalStack(frames, np.asarray(meta["focus_distances_m"]),
                      meta.get("lens", ""), meta.get("psf_source", "gaussian"))
