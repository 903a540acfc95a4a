"""Dataset ingestion: synthetic generators and directories of PNG/PPM
images, scaled to [0, 1] with optional center cropping.

Iteration order is deterministic: directory files load in sorted-name
order, synthetic images in index order, and the noise pattern draws from
the provided seed alone.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .config import DatasetSpec


def checkerboard_image(height: int, width: int, phase: int = 0) -> np.ndarray:
    """(3, H, W) with pixel (r, c) = (r + c + phase) mod 2, all channels."""
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    plane = ((r + c + phase) % 2).astype(np.float64)
    return np.broadcast_to(plane, (3, height, width)).copy()


def gradient_image(height: int, width: int, phase: int = 0) -> np.ndarray:
    """Horizontal ramp over [0, 1]; channels get shifted copies so the
    image is not grayscale."""
    ramp = np.linspace(0.0, 1.0, width)[None, :]
    img = np.empty((3, height, width))
    for ch in range(3):
        img[ch] = np.roll(ramp, (phase + ch) * width // 4, axis=1)
    return img


def noise_image(height: int, width: int, rng) -> np.ndarray:
    return rng.random((3, height, width))


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Center window of a (3, H, W) image; e.g. 256 from 300 starts at 22."""
    h, w = img.shape[1], img.shape[2]
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image extents {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return img[:, r0:r0 + size, c0:c0 + size]


def write_ppm(img: np.ndarray, path: str):
    """Binary P6, maxval 255; [0, 1] floats quantize by round-half-up."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected a (3, H, W) image")
    pix = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Binary P6 only; returns (3, H, W) floats in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1                    # single whitespace byte after the header
    pix = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def _read_image(path: str) -> np.ndarray:
    if path.lower().endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def load_dataset(spec: DatasetSpec, seed: int = 0) -> np.ndarray:
    """Materialize the dataset as one (M, 3, H, W) array in [0, 1].

    Directory datasets skip unreadable files with a counted warning;
    an empty result is always an error.
    """
    imgs = []
    if spec.type == "synthetic":
        rng = np.random.default_rng(seed)
        for i in range(spec.count):
            if spec.pattern == "checkerboard":
                img = checkerboard_image(spec.height, spec.width, phase=i)
            elif spec.pattern == "gradient":
                img = gradient_image(spec.height, spec.width, phase=i)
            else:
                img = noise_image(spec.height, spec.width, rng)
            imgs.append(img)
    else:
        names = sorted(os.listdir(spec.path))
        skipped = 0
        for name in names:
            if len(imgs) >= spec.count:
                break
            if not name.lower().endswith((".png", ".ppm")):
                continue
            full = os.path.join(spec.path, name)
            try:
                imgs.append(_read_image(full))
            except Exception as exc:
                skipped += 1
                warnings.warn(f"skipping unreadable image {full}: {exc}")
        if skipped:
            warnings.warn(f"skipped {skipped} unreadable file(s) in "
                          f"{spec.path}")
    if spec.crop:
        imgs = [center_crop(im, spec.crop) for im in imgs]
    if not imgs:
        raise ValueError("dataset is empty")
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ValueError(f"images disagree on extents: {sorted(shapes)}")
    return np.stack(imgs)
