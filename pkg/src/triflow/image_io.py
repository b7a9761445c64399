"""Image round trips: 8-bit PNG for eyes, float64 sidecar for exact tests."""

from pathlib import Path

import numpy as np
from PIL import Image

from triflow.errors import ShapeError


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1,1] float pixels to [0,255] bytes."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] image, got {image.shape}")
    scaled = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def uint8_to_image(bytes_img: np.ndarray) -> np.ndarray:
    """Inverse 8-bit mapping back into [-1,1] (lossy by quantization)."""
    return bytes_img.astype(np.float64) / 127.5 - 1.0


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(image_to_uint8(image), mode="RGB").save(str(path))


def load_png(path) -> np.ndarray:
    return uint8_to_image(np.asarray(Image.open(str(path)).convert("RGB")))


def save_raw(path, image: np.ndarray) -> None:
    """Lossless float64 sidecar (numpy .npy bytes, whatever the suffix)."""
    with open(str(path), "wb") as fh:
        np.save(fh, np.asarray(image, dtype=np.float64))


def load_raw(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        return np.load(fh)


def save_image_pair(stem) -> tuple:
    """Return (png_path, raw_path) for a stem like dir/image_v1."""
    stem = Path(stem)
    return stem.with_suffix(".png"), stem.with_suffix(".raw")
