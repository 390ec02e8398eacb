"""Grayscale PGM (P5) output plus raw float dumps.

PGM is used because it is dependency-free and byte-exactly specified:
header ``P5\\n<width> <height>\\n<maxval>\\n`` followed by row-major
samples, one byte per pixel for maxval 255 or two bytes big-endian for
maxval 65535.

Label images map class id c to gray level round(c * maxval / (M-1)), so
for the 4-class palette at 8 bit: background 0, LV pool 85,
LV myocardium 170, RV pool 255.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .serial import write_blob

RAW_MAGIC = "NISF-RAW"
RAW_VERSION = 1


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractError(f"images must be 2-D [rows, cols], got shape {img.shape}")
    return img


def write_pgm8(path: str, img: np.ndarray) -> None:
    """Intensity image in [0,1] to 8-bit PGM (values scaled by 255, rounded)."""
    img = _check_image(img)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractError("pgm8 expects intensities in [0,1]")
    data = np.rint(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm16(path: str, img: np.ndarray) -> None:
    """Intensity image in [0,1] to 16-bit big-endian PGM."""
    img = _check_image(img)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractError("pgm16 expects intensities in [0,1]")
    data = np.rint(img * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def write_label_pgm(path: str, labels: np.ndarray, num_classes: int) -> None:
    """Label image to 8-bit PGM with the documented class->gray palette."""
    labels = _check_image(labels)
    if num_classes < 2:
        raise ContractError("label palette needs >= 2 classes")
    if labels.size and int(labels.max()) >= num_classes:
        raise ContractError("label id outside palette")
    gray = np.rint(labels.astype(np.float64) * (255.0 / (num_classes - 1))).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{labels.shape[1]} {labels.shape[0]}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read P5 PGM back (uint8 for maxval<=255, uint16 otherwise)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ContractError(f"{path} is not a P5 PGM")
        dims = f.readline().split()
        maxval = int(f.readline())
        width, height = int(dims[0]), int(dims[1])
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = f.read(width * height * dt.itemsize)
        if len(raw) != width * height * dt.itemsize:
            raise ContractError(f"{path}: truncated PGM payload")
        return np.frombuffer(raw, dtype=dt).reshape(height, width)


def write_raw_f64(path: str, name: str, array: np.ndarray,
                  extra: dict | None = None) -> None:
    """Raw float dump: the standard blob envelope around one float64 array."""
    header = {"name": name}
    if extra:
        header.update(extra)
    with open(path, "wb") as f:
        write_blob(f, RAW_MAGIC, RAW_VERSION, header,
                   {name: np.asarray(array, dtype=np.float64)})
