"""Scene and image files.

Scenes are binary little-endian PLY with one ``vertex`` element and the
``float`` properties, in this order::

    x y z  f_dc_0 f_dc_1 f_dc_2  opacity  scale_0 scale_1 scale_2  rot_0 rot_1 rot_2 rot_3

``f_dc_*`` hold linear RGB in ``[0, 1]``, ``opacity`` is linear in
``[0, 1]``, scales are linear standard deviations and ``rot_*`` is a
``(w, x, y, z)`` quaternion.  An optional ``int`` property ``object``
records which layout object a Gaussian belongs to.

Raw image dumps are ``float32`` little-endian, row-major ``height x width
x 3`` after an 8-byte header of two ``u32`` values: width, height.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from ..errors import LoadError
from .primitives import GaussianBatch

PLY_FIELDS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
RAW_HEADER = struct.Struct("<II")


def write_ply(batch: GaussianBatch, path) -> None:
    dtype = [(name, "<f4") for name in PLY_FIELDS]
    if batch.owner is not None:
        dtype.append(("object", "<i4"))
    arr = np.empty(len(batch), dtype=dtype)
    cols = np.concatenate([batch.mu, batch.color, batch.opacity[:, None], batch.scale, batch.rotation], axis=1)
    for k, name in enumerate(PLY_FIELDS):
        arr[name] = cols[:, k]
    if batch.owner is not None:
        arr["object"] = batch.owner
    el = PlyElement.describe(arr, "vertex")
    # plyfile writes the header comment verbatim, keep it constant for byte-identical output
    PlyData([el], text=False, byte_order="<", comments=["eegsplat gaussian scene"]).write(str(path))


def read_ply(path) -> GaussianBatch:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except FileNotFoundError:
        raise LoadError(f"{path}: no such file") from None
    except (PlyParseError, KeyError, ValueError, OSError, struct.error) as exc:
        raise LoadError(f"{path}: not a valid Gaussian PLY ({exc})") from None
    names = v.dtype.names or ()
    missing = [n for n in PLY_FIELDS if n not in names]
    if missing:
        raise LoadError(f"{path}: missing vertex properties {missing}")
    cols = np.stack([np.asarray(v[n], dtype=np.float64) for n in PLY_FIELDS], axis=1).reshape(-1, len(PLY_FIELDS))
    if not np.isfinite(cols).all():
        raise LoadError(f"{path}: non-finite vertex values")
    owner = np.asarray(v["object"], dtype=np.int64) if "object" in names else None
    rot = cols[:, 10:14]
    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms == 0):
        raise LoadError(f"{path}: zero quaternion")
    return GaussianBatch(cols[:, 0:3], rot / norms[:, None], cols[:, 7:10], cols[:, 3:6], cols[:, 6],
                         owner=owner)


def read_points(path) -> np.ndarray:
    """Vertex positions of any PLY file."""
    path = Path(path)
    try:
        v = PlyData.read(str(path))["vertex"].data
        return np.stack([np.asarray(v[c], dtype=np.float64) for c in "xyz"], axis=1)
    except FileNotFoundError:
        raise LoadError(f"{path}: no such file") from None
    except (PlyParseError, KeyError, ValueError, OSError, struct.error) as exc:
        raise LoadError(f"{path}: cannot read vertex positions ({exc})") from None


def to_uint8(pixels) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_png(pixels, path) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(str(path)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise LoadError(f"{path}: cannot read image ({exc})") from None


def write_raw(pixels, path) -> None:
    pixels = np.asarray(pixels)
    h, w, _ = pixels.shape
    Path(path).write_bytes(RAW_HEADER.pack(w, h) + pixels.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < RAW_HEADER.size:
        raise LoadError(f"{path}: truncated raw image")
    w, h = RAW_HEADER.unpack_from(blob)
    if len(blob) != RAW_HEADER.size + 12 * w * h:
        raise LoadError(f"{path}: raw image size does not match {w}x{h}")
    return np.frombuffer(blob, dtype="<f4", offset=RAW_HEADER.size).reshape(h, w, 3).astype(np.float64)
