"""Binary tensor/checkpoint containers, PGM ingestion, atomic file writes.

Tensor container (little-endian, no padding)::

    b"COVT" | version:u8 | dtype:u8 (0=f32, 1=f64) | ndim:u8 | dims:u32 * ndim | payload

Checkpoint container::

    b"COVC" | version:u8 | count:u32 | count * (name_len:u16 | name | tensor container)
           | meta_count:u32 | meta_count * (name_len:u16 | name | value_len:u32 | utf-8 value)
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .errors import ContainerError, IngestionError

TENSOR_MAGIC = b"COVT"
CHECKPOINT_MAGIC = b"COVC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

PathLike = Union[str, os.PathLike]


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def encode_tensor(t) -> bytes:
    arr = _to_numpy(t)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}; only float32 and float64 are stored")
    if arr.ndim > 255:
        raise ContainerError("too many dimensions")
    header = TENSOR_MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise ContainerError(f"truncated container while reading {what}")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one tensor container at ``offset``; returns ``(array, end_offset)``."""
    _need(buf, offset, 7, "tensor header")
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ContainerError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise ContainerError(f"unsupported tensor container version {version}")
    if code not in _DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    offset += 7
    _need(buf, offset, 4 * ndim, "tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    _need(buf, offset, nbytes, "tensor payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def encode_checkpoint(tensors: Mapping[str, object], metadata: Mapping[str, str] = None) -> bytes:
    metadata = metadata or {}
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(t)]
    parts.append(struct.pack("<I", len(metadata)))
    for name, value in metadata.items():
        raw, val = name.encode("utf-8"), str(value).encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", len(val)), val]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, str]]:
    _need(buf, 0, 4, "checkpoint magic")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ContainerError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    _need(buf, 4, 5, "checkpoint header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    offset = 9
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        _need(buf, offset, 2, "entry name length")
        (n,) = struct.unpack_from("<H", buf, offset)
        _need(buf, offset + 2, n, "entry name")
        name = bytes(buf[offset + 2 : offset + 2 + n]).decode("utf-8")
        if name in tensors:
            raise ContainerError(f"duplicate entry name {name!r}")
        tensors[name], offset = decode_tensor(buf, offset + 2 + n)
    _need(buf, offset, 4, "metadata count")
    (meta_count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    metadata: Dict[str, str] = {}
    for _ in range(meta_count):
        _need(buf, offset, 2, "metadata name length")
        (n,) = struct.unpack_from("<H", buf, offset)
        _need(buf, offset + 2, n + 4, "metadata name")
        name = bytes(buf[offset + 2 : offset + 2 + n]).decode("utf-8")
        (vlen,) = struct.unpack_from("<I", buf, offset + 2 + n)
        start = offset + 6 + n
        _need(buf, start, vlen, "metadata value")
        if name in metadata:
            raise ContainerError(f"duplicate metadata name {name!r}")
        metadata[name] = bytes(buf[start : start + vlen]).decode("utf-8")
        offset = start + vlen
    if offset != len(buf):
        raise ContainerError(f"{len(buf) - offset} trailing bytes after checkpoint")
    return tensors, metadata


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: PathLike, t) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def read_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        arr, end = decode_tensor(buf)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from exc
    if end != len(buf):
        raise ContainerError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def write_checkpoint(path: PathLike, tensors: Mapping[str, object], metadata: Mapping[str, str] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors, metadata))


def read_checkpoint(path: PathLike):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    try:
        return decode_checkpoint(buf)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from exc


# --- PGM -----------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int, path) -> Tuple[list, int]:
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise IngestionError(f"{path}: truncated PGM header")
        tokens.append(buf[start:i])
    return tokens, i + 1  # single whitespace byte ends the header


def read_pgm(path: PathLike) -> np.ndarray:
    """Binary (P5) 8- or 16-bit PGM scaled to [0, 1] by its maxval."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable ({exc.strerror})") from exc
    if buf[:2] != b"P5":
        raise IngestionError(f"{path}: not a binary PGM (P5) file")
    try:
        (w, h, maxval), start = _pgm_tokens(buf, 3, path)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval < 65536) or w < 1 or h < 1:
        raise IngestionError(f"{path}: invalid PGM header values {w}x{h} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(buf) - start < need:
        raise IngestionError(f"{path}: PGM payload is truncated")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_pgm(path: PathLike, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise IngestionError(f"PGM images must be 2-D, got shape {img.shape}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    codes = np.clip(np.round(np.asarray(img, dtype=np.float64) * maxval), 0, maxval).astype(dtype)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + codes.tobytes())


def ingest_images(directory: PathLike) -> np.ndarray:
    """Load every ``.pgm``/``.covt`` image in ``directory`` (sorted by name) as (n, H, W)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".covt"))
    if not files:
        raise IngestionError(f"{directory}: no .pgm or .covt images found")
    images = []
    for path in files:
        if path.suffix.lower() == ".pgm":
            img = read_pgm(path)
        else:
            try:
                img = read_tensor(path).astype(np.float64)
            except ContainerError as exc:
                raise IngestionError(str(exc)) from exc
            if img.ndim == 3 and img.shape[0] == 1:
                img = img[0]
            if img.ndim != 2:
                raise IngestionError(f"{path}: expected a 2-D image tensor, got shape {img.shape}")
            if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
                raise IngestionError(f"{path}: tensor intensities must lie in [0, 1]")
        if images and img.shape != images[0].shape:
            raise IngestionError(f"{path}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
    return np.stack(images)
