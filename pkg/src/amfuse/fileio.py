"""Plain-text and netpbm file I/O for frames, point clouds, and event streams.

Formats: PPM (P6, 8-bit) for RGB frames, PGM (P5) at 16-bit for depth and
8-bit for label maps, ".xyz" text point clouds ("X Y Z [class]" per line),
".evt" text event streams ("x y t_us polarity" per line).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, FormatError


def _read_pnm_header(buf: bytes, magic: bytes, path):
    if not buf.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad header token {buf[start:pos]!r}")
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path, frame: np.ndarray) -> None:
    """3xHxW floats in [0,1] -> 8-bit P6."""
    _, h, w = frame.shape
    pix = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pix.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, off = _read_pnm_header(buf, b"P6", path)
    raw = np.frombuffer(buf[off:off + 3 * w * h], dtype=np.uint8)
    if raw.size != 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm16(path, arr: np.ndarray) -> None:
    """HxW floats in [0,1] -> 16-bit P5 (big-endian per netpbm)."""
    h, w = arr.shape
    pix = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(pix.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, off = _read_pnm_header(buf, b"P5", path)
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    raw = np.frombuffer(buf[off:off + 2 * w * h], dtype=">u2")
    if raw.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return raw.reshape(h, w).astype(np.float64) / 65535.0


def write_pgm8(path, arr: np.ndarray) -> None:
    """HxW small nonnegative ints (label map) -> 8-bit P5."""
    h, w = arr.shape
    if arr.min() < 0 or arr.max() > 255:
        raise DataError(f"{path}: label values outside [0,255]")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def read_pgm8(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, off = _read_pnm_header(buf, b"P5", path)
    if maxval != 255:
        raise FormatError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    raw = np.frombuffer(buf[off:off + w * h], dtype=np.uint8)
    if raw.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return raw.reshape(h, w).astype(np.int64)


def write_xyz(path, points: np.ndarray, class_ids: np.ndarray | None = None) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(points):
            line = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if class_ids is not None:
                line += f" {int(class_ids[i])}"
            fh.write(line + "\n")


def read_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    points, classes = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{ln}: expected 'X Y Z [class]'")
            try:
                points.append([float(v) for v in parts[:3]])
            except ValueError:
                raise FormatError(f"{path}:{ln}: bad coordinate")
            classes.append(int(parts[3]) if len(parts) == 4 else -1)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cls = np.asarray(classes, dtype=np.int64)
    return pts, (cls if (cls >= 0).any() else None)


def write_evt(path, events: np.ndarray) -> None:
    """events: (N,4) rows of x, y, t_us, polarity(+-1)."""
    with open(path, "w") as fh:
        for x, y, t, p in events:
            fh.write(f"{int(x)} {int(y)} {int(t)} {int(p)}\n")


def read_evt(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{ln}: expected 'x y t_us polarity'")
            try:
                x, y, t, p = (int(v) for v in parts)
            except ValueError:
                raise FormatError(f"{path}:{ln}: bad integer field")
            if p not in (-1, 1):
                raise DataError(f"{path}:{ln}: polarity must be +-1, got {p}")
            rows.append((x, y, t, p))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)
