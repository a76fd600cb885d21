"""Image tensors and binary PPM (P6, 8-bit RGB) file io.

An image is an (H, W, 3) float array with values in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import InputError


def validate_image(img: np.ndarray, size: int | None = None) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"image must be HxWx3, got {img.shape}")
    if size is not None and img.shape[:2] != (size, size):
        raise InputError(f"image must be {size}x{size}, got {img.shape[:2]}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return img


def ppm_write(path, img: np.ndarray):
    img = validate_image(img)
    h, w = img.shape[:2]
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(raw.tobytes())


def ppm_read(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise InputError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width height, maxval, each ending in one whitespace byte
    fields, pos = [], 2
    while len(fields) < 3:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        fields.append(int(blob[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise InputError(f"{path}: expected maxval 255, got {maxval}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (raw.reshape(h, w, 3).astype(np.float32)) / 255.0


def uniform_noise_images(n: int, size: int, seed: int) -> np.ndarray:
    """(n, size, size, 3) uniform noise; the maximally out-of-distribution baseline."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, size, size, 3)).astype(np.float32)
