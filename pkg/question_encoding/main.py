#!/usr/bin/env python3
"""
Question Encoding
Precomputed sentence-embedding ingestion (GHRQ files) and a deterministic toy embedder.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"GHRQ"
VERSION = 1
MIN_TOY_DIM = 8
_HASH_KEY = b"ghr-vqa-toy-embed"

_HEADER = struct.Struct("<4sBII")
_ID_LEN = struct.Struct("<H")


class QuestionEncodingError(ValueError):
    """Base class for question-embedding failures."""


class DimensionMismatch(QuestionEncodingError):
    pass


class DuplicateId(QuestionEncodingError):
    pass


class MalformedFile(QuestionEncodingError):
    pass


class EmptyQuestion(QuestionEncodingError):
    pass


class EmbeddingSource(str, Enum):
    PRECOMPUTED = "precomputed"
    TOY_HASH = "toy_hash"


@dataclass(frozen=True)
class QuestionEmbedding:
    qa_id: str
    vector: np.ndarray
    source: EmbeddingSource = EmbeddingSource.PRECOMPUTED

    @property
    def dim(self) -> int:
        return int(self.vector.size)


def write_embeddings(path: Union[str, Path], vectors: Mapping[str, np.ndarray]) -> None:
    vectors = {k: np.asarray(v, dtype="<f4").reshape(-1) for k, v in vectors.items()}
    dims = {v.size for v in vectors.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"Embeddings of mixed widths {sorted(dims)} cannot share one file")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(vectors), dim))
        for qa_id, vector in vectors.items():
            encoded = qa_id.encode("utf-8")
            f.write(_ID_LEN.pack(len(encoded)))
            f.write(encoded)
            f.write(vector.tobytes())
    logger.info(f"Wrote {len(vectors)} question embeddings (dim {dim}) to {path}")


def load_embeddings(path: Union[str, Path], expected_dim: int) -> Dict[str, QuestionEmbedding]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise MalformedFile(f"{path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise MalformedFile(f"{path}: too short for a GHRQ header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFile(f"{path}: unsupported GHRQ version {version}")
    if dim != expected_dim:
        raise DimensionMismatch(f"{path}: embeddings have dim {dim}, expected {expected_dim}")

    offset = _HEADER.size
    out: Dict[str, QuestionEmbedding] = {}
    for position in range(count):
        if offset + _ID_LEN.size > len(raw):
            raise MalformedFile(f"{path}: truncated at entry #{position}")
        (id_len,) = _ID_LEN.unpack_from(raw, offset)
        offset += _ID_LEN.size
        end = offset + id_len + 4 * dim
        if end > len(raw):
            raise MalformedFile(f"{path}: truncated at entry #{position}")
        try:
            qa_id = raw[offset:offset + id_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedFile(f"{path}: entry #{position} id is not UTF-8") from e
        vector = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset + id_len).astype(np.float32)
        offset = end
        if qa_id in out:
            raise DuplicateId(f"{path}: duplicate qa_id {qa_id!r}")
        if not np.all(np.isfinite(vector)):
            raise MalformedFile(f"{path}: non-finite values in embedding {qa_id!r}")
        out[qa_id] = QuestionEmbedding(qa_id, vector, EmbeddingSource.PRECOMPUTED)
    if offset != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - offset} trailing bytes")
    logger.info(f"Loaded {len(out)} question embeddings from {path}")
    return out


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def toy_embed(question: str, d_q: int, qa_id: str = "") -> QuestionEmbedding:
    """Bag of hashed tokens: mean of per-token unit vectors, L2-normalized."""
    if d_q < MIN_TOY_DIM:
        raise DimensionMismatch(f"toy_embed needs d_q >= {MIN_TOY_DIM}, got {d_q}")
    tokens = question.lower().split()
    if not tokens:
        raise EmptyQuestion(f"Question {qa_id!r} has no tokens")
    mean = np.mean([_token_vector(t, d_q) for t in tokens], axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise EmptyQuestion(f"Question {qa_id!r} embeds to the zero vector")
    return QuestionEmbedding(qa_id, (mean / norm).astype(np.float32), EmbeddingSource.TOY_HASH)
