"""Binary checkpoint ("CSLE") and feature-dump ("CSFE") formats.

Checkpoint layout (little-endian)::

    b"CSLE" | version u32 | param count u32
    per param: name length u16 | name utf-8 | rank u8 | extents u32 * rank | float64 values

Feature dump layout::

    b"CSFE" | count u32 | dim u32 | float64 rows (count * dim) | labels u32 * count
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"CSLE"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"CSFE"


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.array(getattr(value, "data", value), dtype="<f8", order="C")  # keeps rank 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    if len(payload) < 12 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise FormatError("not a CSLE checkpoint")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = 12
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * size > len(payload):
                raise FormatError(f"truncated values for {name}")
            params[name] = np.frombuffer(payload, dtype="<f8", count=size,
                                         offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if offset != len(payload):
        raise FormatError("trailing bytes after last parameter")
    return params


def checkpoint_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    return checkpoint_digest(encode_checkpoint(params))


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> str:
    payload = encode_checkpoint(params)
    Path(path).write_bytes(payload)
    return checkpoint_digest(payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def encode_features(features: np.ndarray, labels: np.ndarray) -> bytes:
    feats = np.ascontiguousarray(features, dtype="<f8")
    if feats.ndim != 2 or len(labels) != feats.shape[0]:
        raise FormatError("feature dump needs count x dim rows and one label per row")
    labs = np.asarray(labels)
    if labs.size and (labs.min() < 0 or labs.max() > 0xFFFFFFFF):
        raise FormatError("labels must fit in u32")
    return b"".join([FEATURE_MAGIC, struct.pack("<II", *feats.shape), feats.tobytes(),
                     labs.astype("<u4").tobytes()])


def decode_features(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(payload) < 12 or payload[:4] != FEATURE_MAGIC:
        raise FormatError("not a CSFE feature dump")
    count, dim = struct.unpack_from("<II", payload, 4)
    expected = 12 + 8 * count * dim + 4 * count
    if len(payload) != expected:
        raise FormatError(f"feature dump size {len(payload)} != expected {expected}")
    feats = np.frombuffer(payload, dtype="<f8", count=count * dim, offset=12)
    labels = np.frombuffer(payload, dtype="<u4", count=count, offset=12 + 8 * count * dim)
    return feats.reshape(count, dim).astype(np.float64), labels.astype(np.int64)


def save_features(features, labels, path) -> None:
    Path(path).write_bytes(encode_features(features, labels))


def load_features(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_features(Path(path).read_bytes())
