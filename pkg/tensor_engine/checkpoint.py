"""GHRC checkpoint files: named float32 tensors in one little-endian blob."""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .main import Tensor, TensorError
from .params import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"GHRC"
VERSION = 1

_HEADER = struct.Struct("<4sBI")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


class CheckpointError(TensorError):
    """Base class for checkpoint failures."""


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class MissingTensor(CheckpointError):
    pass


class UnexpectedTensor(CheckpointError):
    pass


def encode_checkpoint(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    chunks = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_RANK.pack(data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    """Parse a whole GHRC blob; any defect raises before a tensor is returned."""
    if len(raw) < 4:
        raise TruncatedCheckpoint(f"{source}: {len(raw)} bytes is too short for a GHRC header")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpoint(f"{source}: header cut short")
    _, version, count = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatch(f"{source}: GHRC version {version}, this build reads version {VERSION}")

    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise TruncatedCheckpoint(f"{source}: truncated while reading {what} at byte {offset}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    for position in range(count):
        (name_len,) = _NAME_LEN.unpack(take(_NAME_LEN.size, f"name length of tensor #{position}"))
        try:
            name = take(name_len, f"name of tensor #{position}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor #{position} name is not UTF-8") from e
        (rank,) = _RANK.unpack(take(_RANK.size, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(n_bytes, f"data of {name}"), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor name {name}")
        tensors[name] = data.astype(np.float32)

    if offset != len(raw):
        raise TruncatedCheckpoint(f"{source}: {len(raw) - offset} trailing bytes after {count} tensors")
    return tensors


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: Union[str, Path], tensors: Union[ParameterSet, Mapping[str, Union[Tensor, np.ndarray]]],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write atomically (temp file + rename); ``metadata`` goes to ``<path>.json``."""
    path = Path(path)
    if isinstance(tensors, ParameterSet):
        tensors = dict(tensors.items())
    blob = encode_checkpoint(tensors)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote checkpoint {path} ({len(tensors)} tensors, {len(blob)} bytes)")
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return decode_checkpoint(raw, str(path))


def read_metadata(path: Union[str, Path]) -> Optional[Dict[str, Any]]:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        return None
    try:
        return json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{sidecar}: invalid JSON ({e.msg})") from e


def load_checkpoint(path: Union[str, Path], params: ParameterSet) -> ParameterSet:
    params.load_state_dict(read_checkpoint(path))
    logger.info(f"Loaded checkpoint {path} into {len(params)} tensors")
    return params
