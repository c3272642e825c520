"""Checkpoint files.

Layout::

    b"PMFCKPT1"
    u64 LE   header length
    header   UTF-8 JSON: {"config": <INI text>, "step": int, "extra": {...},
             "header_sha256": ..., "blobs": [{"name", "shape", "sha256"}, ...]}
    blobs    float64 little-endian arrays in header order

Blob names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
``header_sha256`` covers the header with that field blanked. Writes go to a
temporary file in the target directory, then are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PMFCKPT1"
PARAM, MOM1, MOM2 = "param/", "adam_m/", "adam_v/"


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint; the message names the failing part."""


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: dict[str, np.ndarray]
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)


def _blob_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _header_digest(header: dict) -> str:
    body = dict(header, header_sha256="")
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, config_text: str, step: int, params: dict, moments: dict | None = None,
                    extra: dict | None = None) -> dict[str, str]:
    """Atomically write a checkpoint; returns ``{blob name: sha256}``."""
    named = [(PARAM + k, v) for k, v in params.items()]
    for prefix, table in ((MOM1, (moments or {}).get("m", {})), (MOM2, (moments or {}).get("v", {}))):
        named += [(prefix + k, v) for k, v in table.items()]
    payloads, index = [], []
    for name, arr in named:
        raw = _blob_bytes(arr)
        payloads.append(raw)
        index.append({"name": name, "shape": list(np.shape(arr)),
                      "sha256": hashlib.sha256(raw).hexdigest()})
    header = {"config": config_text, "step": int(step), "extra": extra or {}, "blobs": index}
    header["header_sha256"] = _header_digest(header)
    head = json.dumps(header, sort_keys=True).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for raw in payloads:
                fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return {b["name"]: b["sha256"] for b in index}


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint; any mismatch raises :class:`CheckpointError`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated inside header ({len(raw) - 16} of {hlen} bytes)")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    if header.get("header_sha256") != _header_digest(header):
        raise CheckpointError(f"{path}: header checksum mismatch")

    params, moments = {}, {"m": {}, "v": {}}
    checksums = {}
    offset = 16 + hlen
    for blob in header["blobs"]:
        name, shape = blob["name"], tuple(blob["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: blob {name!r} truncated ({len(chunk)} of {nbytes} bytes)")
        digest = hashlib.sha256(chunk).hexdigest()
        if digest != blob["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch in blob {name!r}")
        offset += nbytes
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        checksums[name] = digest
        if name.startswith(PARAM):
            params[name[len(PARAM):]] = arr
        elif name.startswith(MOM1):
            moments["m"][name[len(MOM1):]] = arr
        elif name.startswith(MOM2):
            moments["v"][name[len(MOM2):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown blob kind {name!r}")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after last blob")
    return Checkpoint(header["config"], int(header["step"]), params, moments,
                      header.get("extra", {}), checksums)
