"""Binary particle snapshots.

Layout (little-endian)::

    magic        4 bytes  b"VXF1"
    version      u32
    count        u64
    time         f64
    blob_radius  f64
    fingerprint  32 bytes (SHA-256 of the producing scenario)
    body         count * (x f64, y f64, Gamma f64), index order

Velocities, when kept, go to a ``.vel.npy`` sidecar next to the snapshot.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FloatArray, ParticleEnsemble

MAGIC = b"VXF1"
VERSION = 1
_HEADER = struct.Struct("<4sIQdd32s")
_BODY = np.dtype("<f8")


class SnapshotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SnapshotFile:
    ensemble: ParticleEnsemble
    fingerprint: bytes
    version: int = VERSION


def encode_snapshot(ensemble: ParticleEnsemble, fingerprint: bytes) -> bytes:
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    n = len(ensemble)
    header = _HEADER.pack(MAGIC, VERSION, n, ensemble.time, ensemble.blob_radius, fingerprint)
    body = np.empty((n, 3), dtype=_BODY)
    body[:, :2] = ensemble.positions
    body[:, 2] = ensemble.circulations
    return header + body.tobytes()


def decode_snapshot(data: bytes, *, source: str = "<bytes>") -> SnapshotFile:
    if len(data) < _HEADER.size:
        raise SnapshotFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, n, t, delta, fp = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotFormatError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + 24 * n
    if len(data) != expected:
        raise SnapshotFormatError(f"{source}: body length {len(data) - _HEADER.size} != 24 * {n}")
    body = np.frombuffer(data, dtype=_BODY, offset=_HEADER.size).reshape(n, 3)
    try:
        ens = ParticleEnsemble(body[:, :2], body[:, 2], delta, t)
    except ValueError as e:
        raise SnapshotFormatError(f"{source}: {e}") from None
    return SnapshotFile(ens, fp, version)


def write_snapshot(path: str | Path, ensemble: ParticleEnsemble, fingerprint: bytes, velocities: FloatArray | None = None) -> Path:
    """Atomically write a snapshot (and optional velocity sidecar)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_snapshot(ensemble, fingerprint))
    os.replace(tmp, path)
    if velocities is not None:
        vtmp = path.with_name(path.name + ".vel.tmp.npy")
        np.save(vtmp, np.asarray(velocities, dtype="<f8"))
        os.replace(vtmp, velocity_path(path))
    return path


def velocity_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".vel.npy")


def read_snapshot(path: str | Path) -> SnapshotFile:
    path = Path(path)
    return decode_snapshot(path.read_bytes(), source=str(path))


def read_velocities(path: str | Path) -> FloatArray | None:
    vp = velocity_path(path)
    return np.load(vp) if vp.exists() else None
