"""Classical depth-from-focus over focal stacks, all-in-focus synthesis, and
the depth metric suite.

The estimator assumes the sharpest frame is the best focused one: a per-pixel
focus measure over the stack is turned into a probability volume (softmax),
and depth is the probability-weighted blend of the frame focus distances.
This is the verification harness for aberration-induced depth errors, not a
learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .render import FocalStack

__all__ = [
    "FocusProbability",
    "DepthMetrics",
    "sharpness_volume",
    "estimate_depth",
    "synthesize_aif",
    "compute_metrics",
    "radial_error_map",
    "radial_ratio",
    "psnr",
    "DEFAULT_WINDOW",
]

DEFAULT_WINDOW = 9


@dataclass
class FocusProbability:
    """Per-pixel distribution over stack frames; sums to 1 along axis 0."""

    volume: np.ndarray  # (S, H, W)

    def __post_init__(self):
        self.volume = np.asarray(self.volume, dtype=np.float64)
        if not np.isfinite(self.volume).all() or (self.volume < 0).any():
            raise ValueError("probability volume must be finite and nonnegative")
        sums = self.volume.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError("probability volume must sum to 1 per pixel")


@dataclass
class DepthMetrics:
    mae: float
    mse: float
    rmse: float
    abs_rel: float
    sqr_rel: float
    delta1: float
    delta2: float
    delta3: float

    def row(self) -> str:
        return (f"{self.mae:.4f} {self.mse:.4f} {self.rmse:.4f} "
                f"{self.abs_rel:.4f} {self.sqr_rel:.4f} "
                f"{self.delta1:.4f} {self.delta2:.4f} {self.delta3:.4f}")


def _luminance(frame: np.ndarray) -> np.ndarray:
    return frame.mean(axis=2) if frame.ndim == 3 else frame


def sharpness_volume(stack: FocalStack, measure: str = "modified_laplacian",
                     window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Per-frame, per-pixel focus measure; higher is sharper.

    "modified_laplacian" is the window-summed modified Laplacian;
    "gradient_magnitude" is the window-summed gradient magnitude.
    """
    if window % 2 == 0:
        raise ValueError("window must be odd")
    out = np.empty((stack.size, *stack.frames.shape[1:3]))
    for s in range(stack.size):
        lum = _luminance(stack.frames[s])
        if measure == "modified_laplacian":
            mlx = np.abs(2 * lum - np.roll(lum, 1, axis=1) - np.roll(lum, -1, axis=1))
            mly = np.abs(2 * lum - np.roll(lum, 1, axis=0) - np.roll(lum, -1, axis=0))
            # roll wraps; replicate the border behavior instead
            mlx[:, 0] = mlx[:, 1]
            mlx[:, -1] = mlx[:, -2]
            mly[0, :] = mly[1, :]
            mly[-1, :] = mly[-2, :]
            raw = mlx + mly
        elif measure == "gradient_magnitude":
            gy, gx = np.gradient(lum)
            raw = np.hypot(gx, gy)
        else:
            raise ValueError(f"unknown focus measure {measure!r}")
        out[s] = ndimage.uniform_filter(raw, size=window, mode="nearest")
    return out


def estimate_depth(stack: FocalStack, temperature: float | None = None,
                   measure: str = "modified_laplacian",
                   window: int = DEFAULT_WINDOW):
    """Depth by focus interpolation.

    The probability volume is a per-pixel softmax of sharpness/temperature
    over the stack; depth is the probability-weighted sum of the frame focus
    distances. temperature=None uses 0.1x the per-pixel sharpness range;
    temperature=0 degenerates to the argmax frame (lowest index on ties).

    Returns (depth map in meters, FocusProbability).
    """
    sharp = sharpness_volume(stack, measure=measure, window=window)
    s, h, w = sharp.shape
    distances = stack.focus_distances_m

    if temperature is not None and temperature == 0.0:
        best = np.argmax(sharp == sharp.max(axis=0), axis=0)  # first max
        prob = np.zeros((s, h, w))
        np.put_along_axis(prob, best[None], 1.0, axis=0)
        depth = distances[best]
        return depth, FocusProbability(prob)

    if temperature is None:
        span = sharp.max(axis=0) - sharp.min(axis=0)
        temp = 0.1 * np.where(span > 0, span, 1.0)
    else:
        temp = np.full((h, w), float(temperature))
    logits = sharp / temp
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    prob = e / e.sum(axis=0, keepdims=True)
    depth = np.tensordot(distances, prob, axes=(0, 0))
    return depth, FocusProbability(prob)


def synthesize_aif(stack: FocalStack, prob: FocusProbability) -> np.ndarray:
    """All-in-focus image: per-pixel probability blend of the frames."""
    if prob.volume.shape != (stack.size, *stack.frames.shape[1:3]):
        raise ValueError("probability volume does not match the stack")
    return np.einsum("shw,shwc->hwc", prob.volume, stack.frames)


def compute_metrics(pred: np.ndarray, gt: np.ndarray,
                    mask: np.ndarray | None = None) -> DepthMetrics:
    """Standard depth error metrics over a validity mask.

    delta_n is the fraction of pixels with max(pred/gt, gt/pred) < 1.25**n.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt dimensions disagree")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    p, g = pred[mask], gt[mask]
    if (g <= 0).any():
        raise ValueError("ground-truth depth must be > 0 inside the mask")
    diff = p - g
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff**2))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        mae=mae,
        mse=mse,
        rmse=math.sqrt(mse),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sqr_rel=float(np.mean(diff**2 / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def radial_error_map(error_maps) -> np.ndarray:
    """Pixelwise mean of absolute depth errors over a set of scenes."""
    maps = [np.abs(np.asarray(m, dtype=np.float64)) for m in error_maps]
    if not maps:
        raise ValueError("no error maps to accumulate")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("error maps must share dimensions")
    return np.mean(maps, axis=0)


def radial_ratio(error_map: np.ndarray, inner: float = 0.1, outer: float = 0.9) -> float:
    """Mean |error| in the outer radial annulus over the central disk.

    Radii are normalized by the image half-diagonal: the annulus keeps
    pixels with r_norm >= outer, the disk r_norm <= inner.
    """
    h, w = error_map.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy + 0.5 - h / 2, xx + 0.5 - w / 2)
    r_norm = r / math.hypot(h / 2, w / 2)
    annulus = error_map[r_norm >= outer]
    disk = error_map[r_norm <= inner]
    if len(annulus) == 0 or len(disk) == 0:
        raise ValueError("radial bands are empty; image too small")
    denom = float(disk.mean())
    return float(annulus.mean()) / max(denom, 1e-12)


def psnr(image: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(image) - np.asarray(reference)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
