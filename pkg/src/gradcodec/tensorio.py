"""Binary tensor dumps (``GRD1``), packed zero-masks (``MSK1``) and atomic writes.

Tensor layout, all little-endian::

    b"GRD1" | u32 version (=1) | u64 element count | count x f32

Mask layout::

    b"MSK1" | u32 version (=1) | u64 element count | ceil(count/8) bytes,
    bits packed most-significant first, final byte zero padded

An optional JSON sidecar at ``<path>.json`` carries ``layer_id``, free-form
``metadata`` and an optional ``mask`` path (relative to the tensor's directory).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import DomainError, FormatError, TruncatedError

TENSOR_MAGIC = b"GRD1"
MASK_MAGIC = b"MSK1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class TensorDump:
    values: np.ndarray
    layer_id: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32).reshape(-1))
        object.__setattr__(self, "values", v)
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise DomainError(f"non-finite value {v[bad[0]]!r} at index {bad[0]}")

    @property
    def element_count(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.element_count


@dataclass(frozen=True)
class ZeroMask:
    """One boolean per tensor element; ``True`` marks left-mode membership."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool).reshape(-1))

    def __len__(self) -> int:
        return int(self.bits.size)


def atomic_write(path: str | os.PathLike, writer: Callable[[object], None], mode: str = "wb") -> None:
    """Write through a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _read_header(data: bytes, magic: bytes, path) -> int:
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    _, version, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return count


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def read_tensor(path: str | os.PathLike) -> TensorDump:
    data = Path(path).read_bytes()
    count = _read_header(data, TENSOR_MAGIC, path)
    payload = len(data) - _HEADER.size
    if payload < 4 * count:
        raise TruncatedError(
            f"{path}: truncated payload, header declares {count} elements but only "
            f"{payload // 4} present"
        )
    if payload != 4 * count:
        raise FormatError(
            f"{path}: count mismatch, header declares {count} elements but payload holds "
            f"{payload / 4:g}"
        )
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DomainError(f"{path}: non-finite value {values[bad[0]]!r} at index {bad[0]}")

    layer_id, metadata = "", {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        layer_id = str(meta.get("layer_id", ""))
        metadata = {str(k): str(v) for k, v in meta.get("metadata", {}).items()}
        if meta.get("mask"):
            metadata.setdefault("mask", str(meta["mask"]))
    return TensorDump(values, layer_id, metadata)


def tensor_bytes(dump: TensorDump) -> bytes:
    header = _HEADER.pack(TENSOR_MAGIC, VERSION, dump.element_count)
    return header + dump.values.astype("<f4", copy=False).tobytes()


def write_tensor(dump: TensorDump, path: str | os.PathLike) -> None:
    blob = tensor_bytes(dump)
    atomic_write(path, lambda fh: fh.write(blob))
    if dump.layer_id or dump.metadata:
        meta = {"layer_id": dump.layer_id, "metadata": dict(sorted(dump.metadata.items()))}
        if "mask" in dump.metadata:
            meta["mask"] = dump.metadata["mask"]
        text = json.dumps(meta, indent=2, sort_keys=True) + "\n"
        atomic_write(sidecar_path(path), lambda fh: fh.write(text), mode="w")


def read_mask(path: str | os.PathLike) -> ZeroMask:
    data = Path(path).read_bytes()
    count = _read_header(data, MASK_MAGIC, path)
    nbytes = (count + 7) // 8
    payload = len(data) - _HEADER.size
    if payload < nbytes:
        raise TruncatedError(f"{path}: truncated mask, need {nbytes} bytes, have {payload}")
    if payload != nbytes:
        raise FormatError(f"{path}: count mismatch, {payload} payload bytes for {count} bits")
    packed = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    return ZeroMask(np.unpackbits(packed, count=count).astype(bool))


def write_mask(mask: ZeroMask, path: str | os.PathLike) -> None:
    blob = _HEADER.pack(MASK_MAGIC, VERSION, len(mask)) + np.packbits(mask.bits).tobytes()
    atomic_write(path, lambda fh: fh.write(blob))


def load_mask_for(dump: TensorDump, tensor_path: str | os.PathLike) -> ZeroMask | None:
    """Resolve the mask referenced by a tensor's sidecar, if any."""
    ref = dump.metadata.get("mask")
    if not ref:
        return None
    p = Path(ref)
    if not p.is_absolute():
        p = Path(tensor_path).parent / p
    mask = read_mask(p)
    if len(mask) != dump.element_count:
        raise FormatError(f"mask {p} has {len(mask)} bits for {dump.element_count} elements")
    return mask
