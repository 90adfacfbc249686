"""Binary file formats: checkpoints, teacher logits caches and IDX datasets.

Checkpoint layout (little-endian)::

    b"BARCKPT1"
    u32 array count
    per array: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=u32), u8 rank,
               u32 dims[rank], raw data
    u32 CRC32 of every preceding byte

Logits cache: b"BARLOGT1", u32 N, u32 C, f32 data[N*C], u32 CRC32.

Datasets follow IDX with big-endian headers: images carry magic 0x00000803
followed by count, H, W and a fourth u32 for C, then u8 pixels in
(count, H, W, C) order; labels carry magic 0x00000801, count, u8 labels.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError

CKPT_MAGIC = b"BARCKPT1"
CACHE_MAGIC = b"BARLOGT1"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<u4"): 1}


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _check_crc(data: bytes, path) -> bytes:
    if len(data) < 4:
        raise IntegrityError(f"{path}: file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{path}: CRC32 mismatch")
    return body


def _write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = np.dtype("<f4") if arr.dtype.kind == "f" else np.dtype("<u4")
        if arr.dtype.kind not in "fu":
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return _with_crc(b"".join(parts))


def decode_checkpoint(data: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    body = _check_crc(data, path)
    if body[:8] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: bad checkpoint magic")
    try:
        (count,) = struct.unpack_from("<I", body, 8)
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            if name in out:
                raise IntegrityError(f"{path}: duplicate array {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise IntegrityError(f"{path}: array {name!r} runs past the end of the file")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: malformed checkpoint ({exc})") from None
    if pos != len(body):
        raise IntegrityError(f"{path}: trailing bytes after last array")
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    _write_atomic(path, encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# teacher logits cache


def encode_cache(logits: np.ndarray) -> bytes:
    logits = np.ascontiguousarray(logits, dtype="<f4")
    n, c = logits.shape
    return _with_crc(CACHE_MAGIC + struct.pack("<II", n, c) + logits.tobytes())


def decode_cache(data: bytes, path="<bytes>") -> np.ndarray:
    body = _check_crc(data, path)
    if body[:8] != CACHE_MAGIC:
        raise IntegrityError(f"{path}: bad logits-cache magic")
    n, c = struct.unpack_from("<II", body, 8)
    if len(body) != 16 + 4 * n * c:
        raise IntegrityError(f"{path}: logits-cache size does not match its header")
    return np.frombuffer(body, dtype="<f4", offset=16).reshape(n, c).copy()


def save_cache(path, logits: np.ndarray) -> None:
    _write_atomic(path, encode_cache(logits))


def load_cache(path) -> np.ndarray:
    return decode_cache(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# IDX datasets


def encode_idx_images(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 4:
        raise ValueError(f"images must be (count, H, W, C), got {pixels.shape}")
    return struct.pack(">5I", IDX_IMAGES, *pixels.shape) + pixels.tobytes()


def decode_idx_images(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < 20:
        raise IntegrityError(f"{path}: images file truncated")
    magic, n, h, w, c = struct.unpack_from(">5I", data, 0)
    if magic != IDX_IMAGES:
        raise IntegrityError(f"{path}: bad IDX images magic 0x{magic:08x}")
    if len(data) != 20 + n * h * w * c:
        raise IntegrityError(f"{path}: images payload does not match header")
    return np.frombuffer(data, dtype=np.uint8, offset=20).reshape(n, h, w, c).copy()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return struct.pack(">2I", IDX_LABELS, labels.shape[0]) + labels.tobytes()


def decode_idx_labels(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise IntegrityError(f"{path}: labels file truncated")
    magic, n = struct.unpack_from(">2I", data, 0)
    if magic != IDX_LABELS:
        raise IntegrityError(f"{path}: bad IDX labels magic 0x{magic:08x}")
    if len(data) != 8 + n:
        raise IntegrityError(f"{path}: labels payload does not match header")
    return np.frombuffer(data, dtype=np.uint8, offset=8).copy()


def save_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    if len(pixels) != len(labels):
        raise ValueError("image and label counts differ")
    _write_atomic(images_path, encode_idx_images(pixels))
    _write_atomic(labels_path, encode_idx_labels(labels))


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    pixels = decode_idx_images(Path(images_path).read_bytes(), images_path)
    labels = decode_idx_labels(Path(labels_path).read_bytes(), labels_path)
    if len(pixels) != len(labels):
        raise IntegrityError(f"{images_path}: {len(pixels)} images but {labels_path} has {len(labels)} labels")
    return pixels, labels
