"""PNG images/masks and PGAD float sidecars."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

SIDECAR_MAGIC = b"PGAD"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path)


def load_png(path: str | Path) -> np.ndarray:
    """RGB as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    save_png(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float64)


def save_sidecar(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(SIDECAR_MAGIC + struct.pack("<III", w, h, c) + data.tobytes())


def load_sidecar(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a PGAD sidecar")
    w, h, c = struct.unpack_from("<III", raw, 4)
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c).copy()
