"""PNG reading and writing for float images in [0, 1]."""

from pathlib import Path

import cv2
import numpy as np

_MAX = {8: 255, 16: 65535}


def quantize(img, bits=16):
    """Round a float image onto the integer grid of a ``bits``-deep PNG."""
    peak = _MAX[bits]
    return np.round(np.clip(img, 0.0, 1.0) * peak) / peak


def write_png(path, img, bits=16):
    """Write an H x W or H x W x 3 float image in [0, 1] as an 8/16-bit PNG."""
    if bits not in _MAX:
        raise ValueError(f"unsupported bit depth {bits}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    dtype = np.uint8 if bits == 8 else np.uint16
    data = np.round(np.clip(img, 0.0, 1.0) * _MAX[bits]).astype(dtype)
    if data.ndim == 3:
        data = data[..., ::-1]  # cv2 stores BGR
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise OSError(f"could not write {path}")


def read_png(path, channels=None):
    """Read a PNG into a float64 array in [0, 1].

    Grayscale files come back as H x W unless ``channels=3`` is requested.
    """
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"could not read {path}")
    if data.dtype == np.uint8:
        peak = 255.0
    elif data.dtype == np.uint16:
        peak = 65535.0
    else:
        raise OSError(f"unsupported pixel type {data.dtype} in {path}")
    if data.ndim == 3:
        if data.shape[2] == 4:
            data = data[..., :3]
        data = data[..., ::-1]
    img = data.astype(np.float64) / peak
    if channels == 3 and img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif channels == 1 and img.ndim == 3:
        img = img.mean(axis=2)
    return np.ascontiguousarray(img)
