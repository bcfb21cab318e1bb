"""Small file and array helpers shared by every stage."""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def atomic_save(path, save_fn, suffix=""):
    """Run ``save_fn(tmp_path)`` then move the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp" + suffix)
    os.close(fd)
    try:
        save_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path, array):
    array = np.asarray(array)
    mode = "RGB" if array.ndim == 3 else "L"
    if array.dtype == bool:
        img = Image.fromarray(array.astype(np.uint8) * 255, mode="L").convert("1")
    else:
        img = Image.fromarray(array.astype(np.uint8), mode=mode)
    atomic_save(path, lambda tmp: img.save(tmp, format="PNG"))


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def read_gray(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8).copy()


def heatmap_to_uint8(heatmap: np.ndarray) -> np.ndarray:
    peak = float(heatmap.max())
    if peak <= 0:
        return np.zeros(heatmap.shape, dtype=np.uint8)
    return np.round(heatmap / peak * 255.0).astype(np.uint8)


def image_digest(image: np.ndarray) -> str:
    image = np.ascontiguousarray(image)
    h = hashlib.sha1()
    h.update(str(image.shape).encode())
    h.update(image.tobytes())
    return h.hexdigest()


def resize_map(array, size, mode="bilinear"):
    """Resize a 2-D float map to ``size`` (H, W) with torch interpolation."""
    array = np.asarray(array, dtype=np.float64)
    if array.shape == tuple(size):
        return array.copy()
    t = torch.from_numpy(array)[None, None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=tuple(size), mode=mode, **kwargs)
    return out[0, 0].numpy()


def resize_image(image, size):
    """Bilinear resize of an H x W x 3 uint8 image; returns uint8."""
    image = np.asarray(image)
    if image.shape[:2] == tuple(size):
        return image.copy()
    t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    out = out[0].permute(1, 2, 0).numpy()
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
