"""Image and depth-map files.

RGB images are PNG (8- or 16-bit); 8-bit files are assumed sRGB-encoded and
are linearized on load, since all rendering happens in linear light. Depth
maps are PFM (portable float map, little-endian, scale -1.0) or 16-bit PNG
with an explicit meters-per-unit scale.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = [
    "srgb_to_linear",
    "linear_to_srgb",
    "load_rgb",
    "save_rgb",
    "read_pfm",
    "write_pfm",
    "load_depth",
]


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1 / 2.4) - 0.055)


def load_rgb(path, assume_srgb: bool = True) -> np.ndarray:
    """Load a PNG as linear-light float (H, W, 3) in [0, 1]."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = arr[:, :, :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    x = arr.astype(np.float64) / scale
    return srgb_to_linear(x) if assume_srgb else x


def save_rgb(path, rgb: np.ndarray, encode_srgb: bool = True) -> None:
    """Save as 8-bit PNG, sRGB-encoded by default. (Pillow has no 16-bit RGB
    writer; 16-bit stays a read-side format.)"""
    x = linear_to_srgb(rgb) if encode_srgb else np.clip(rgb, 0.0, 1.0)
    arr = (x * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, "RGB" if arr.ndim == 3 else "L").save(path)


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a PFM file (negative scale = little-endian, rows bottom-up)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(f"{scale:.1f}\n".encode())
        flipped = np.flipud(data)
        fh.write(flipped.astype("<f4" if scale < 0 else ">f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: header {header!r}")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().rstrip())
        count = width * height * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(count * 4), dtype=dtype)
    shape = (height, width, 3) if header == b"PF" else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64).copy()


def load_depth(path, depth_scale: float | None = None) -> np.ndarray:
    """Load a depth map in meters from PFM or 16-bit PNG (+ scale)."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        return read_pfm(path)
    arr = np.asarray(Image.open(path))
    if depth_scale is None:
        raise ValueError("PNG depth maps need an explicit meters-per-unit scale")
    return arr.astype(np.float64) * depth_scale
