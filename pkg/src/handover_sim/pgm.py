"""PGM dumps for depth images, class images and grasp maps.

Depth: 16-bit big-endian binary PGM, value = depth in millimeters rounded
half-up, 0 marking invalid pixels. Class: 8-bit binary PGM with label codes
0=background, 1=object, 2=hand, 3=body. Grasp maps dump as three 16-bit PGMs
(quality scaled by 65535, angle by 65535/pi, width in millimeters).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from handover_sim.geometry import DepthImage


def _write_pgm(path, array: np.ndarray, maxval: int) -> None:
    array = np.asarray(array)
    h, w = array.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        body = array.astype(">u2").tobytes()
    else:
        body = array.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by this module (16-bit values big-endian)."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while raw[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        start = i
        while not raw[i : i + 1].isspace():
            i += 1
        fields.append(raw[start:i])
    i += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(raw[i:], dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def depth_to_millimeters(depth: DepthImage) -> np.ndarray:
    """Quantize to whole millimeters (half-up), clamped to the 16-bit range."""
    mm = np.floor(depth.data * 1000.0 + 0.5)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def write_depth_pgm(path, depth: DepthImage) -> None:
    _write_pgm(path, depth_to_millimeters(depth), 65535)


def write_class_pgm(path, class_image: np.ndarray) -> None:
    _write_pgm(path, class_image.astype(np.uint8), 255)


def write_grasp_map_pgms(prefix, quality: np.ndarray, angle: np.ndarray, width: np.ndarray) -> None:
    """Dump a grasp map as <prefix>_quality/angle/width.pgm heat maps."""
    prefix = str(prefix)
    q = np.clip(np.floor(quality * 65535.0 + 0.5), 0, 65535).astype(np.uint16)
    a = np.clip(np.floor(angle * (65535.0 / math.pi) + 0.5), 0, 65535).astype(np.uint16)
    wmm = np.clip(np.floor(width * 1000.0 + 0.5), 0, 65535).astype(np.uint16)
    _write_pgm(prefix + "_quality.pgm", q, 65535)
    _write_pgm(prefix + "_angle.pgm", a, 65535)
    _write_pgm(prefix + "_width.pgm", wmm, 65535)
