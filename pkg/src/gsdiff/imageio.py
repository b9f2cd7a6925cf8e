"""8-bit PNG read/write for float images in [0, 1] (no colour management)."""
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write image {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(Path(path)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"failed to read image {path}: {exc}") from exc
    return arr / 255.0
