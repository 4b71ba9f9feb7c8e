"""Netpbm (P5/P6) and PFM readers/writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(magic: str, w: int, h: int, maxval: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines += [f"{w} {h}", str(maxval)]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_pgm(path, mask: np.ndarray, comment: str | None = None) -> None:
    """Binary mask as 8-bit PGM with values 0/255 (non-bool input is clipped to [0, 1])."""
    a = np.asarray(mask)
    img = (a.astype(bool) * 255).astype(np.uint8) if a.dtype == bool else np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(_header("P5", w, h, 255, comment) + img.tobytes())


def write_ppm(path, rgb: np.ndarray, comment: str | None = None) -> None:
    img = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(_header("P6", w, h, 255, comment) + img.tobytes())


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, found {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError("only 8-bit netpbm files are supported")
    return w, h, data[pos + 1:]


def read_pgm(path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P5")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P6")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    a = np.asarray(values, dtype="<f4")
    h, w = a.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError(f"{path}: not a single-channel PFM")
    w, h = map(int, parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(parts[3][: 4 * w * h], dtype=dtype).reshape(h, w)[::-1].astype(np.float64)
