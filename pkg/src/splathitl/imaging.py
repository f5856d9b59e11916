"""PNG encoding of rendered frames."""
from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .renderer.camera import CameraIntrinsics


def depth_to_gray(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Map [near, far] to [255, 0]; invalid (0.0) pixels stay 0."""
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0.0
    g = np.zeros(d.shape, dtype=np.uint8)
    scaled = (K.far - np.clip(d, K.near, K.far)) / (K.far - K.near) * 255.0
    g[valid] = np.floor(scaled[valid] + 0.5).astype(np.uint8)
    return g


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def rgb_to_png(rgb: np.ndarray) -> bytes:
    return _png(np.ascontiguousarray(rgb, dtype=np.uint8))


def depth_to_png(depth: np.ndarray, K: CameraIntrinsics) -> bytes:
    return _png(depth_to_gray(depth, K))
