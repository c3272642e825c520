"""Point-set files: ASCII PLY and the little-endian ``PMF1`` binary format.

``PMF1`` layout: 4-byte magic ``b"PMF1"``, u32 point count n, then 3n
float32 values (x, y, z per point).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

PMF_MAGIC = b"PMF1"
EXTENSIONS = (".ply", ".pmf")


def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, props, end = None, [], None
    for i, line in enumerate(text):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok[0] == "property" and n is not None:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if n is None or end is None or props[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: malformed PLY header")
    body = text[end + 1:end + 1 + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(body)}")
    return np.array([[float(v) for v in row.split()[:3]] for row in body], dtype=np.float64).reshape(n, 3)


def write_pmf(path, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(PMF_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_pmf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != PMF_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != 12 * n:
        raise ValueError(f"{path}: expected {12 * n} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, 3)


def write_points(path, points) -> None:
    path = os.fspath(path)
    if path.endswith(".pmf"):
        write_pmf(path, points)
    else:
        write_ply(path, points)


def read_points(path) -> np.ndarray:
    path = os.fspath(path)
    if path.endswith(".pmf"):
        return read_pmf(path)
    if path.endswith(".ply"):
        return read_ply(path)
    raise ValueError(f"{path}: unknown point-set extension (use .ply or .pmf)")


def list_point_files(directory) -> dict[str, Path]:
    """Point-set files in ``directory`` keyed by filename stem."""
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix in EXTENSIONS}
