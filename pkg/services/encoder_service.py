"""
Encoder Service
Turns texts (or document ids) into fixed-dimension vectors through pluggable deterministic
backends, and provides the cosine similarity used by the slant score.

Precomputed embedding files:
    CSV     header `id,v0,v1,...,v{d-1}`, one document per row.
    Binary  magic b"EMB1", little-endian u32 dim, then records of
            (u64 id-hash, d little-endian f32). The id-hash is the first 8 bytes of
            blake2b(id.encode("utf-8")) read as little-endian u64.
"""
import csv
import hashlib
import logging
import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Iterable, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field, model_validator

from services.formatters import strip_urls, tokenize
from utils.exceptions import DomainError, EmbeddingLookupError, ParseError

logger = logging.getLogger(__name__)

EmbeddingVector = NDArray[np.float64]

BINARY_MAGIC = b"EMB1"


class BackendConfig(BaseModel):
    kind: Literal["hashed-ngram", "precomputed-file"] = "hashed-ngram"
    dim: int = Field(default=256, gt=0)
    ngram_min: int = Field(default=3, ge=1)
    ngram_max: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    preprocess: bool = False

    @model_validator(mode="after")
    def _ngram_range(self) -> "BackendConfig":
        if self.ngram_min > self.ngram_max:
            raise ValueError("ngram_min must not exceed ngram_max")
        return self


def as_embedding(values: Iterable[float], dim: Optional[int] = None) -> EmbeddingVector:
    vector = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if vector.ndim != 1:
        raise DomainError("embedding must be one-dimensional")
    if dim is not None and vector.size != dim:
        raise DomainError(f"embedding has dimension {vector.size}, expected {dim}")
    if not np.all(np.isfinite(vector)):
        raise DomainError("embedding has non-finite entries")
    return vector


def id_hash(doc_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(doc_id.encode("utf-8"), digest_size=8).digest(), "little")


class EncoderBackend(ABC):
    """Deterministic text-to-vector backend; immutable after construction."""

    kind: str
    dim: int
    uses_ids: bool = False

    @abstractmethod
    def encode(self, key: str) -> EmbeddingVector:
        ...

    def encode_document(self, doc_id: str, text: str) -> EmbeddingVector:
        """Encode a corpus document with whichever key this backend is keyed on."""
        return self.encode(doc_id if self.uses_ids else text)

    def encode_many(self, keys: Sequence[str]) -> NDArray[np.float64]:
        if not keys:
            return np.zeros((0, self.dim))
        return np.vstack([self.encode(key) for key in keys])


class HashedNgramBackend(EncoderBackend):
    """
    Seeded feature hashing of character n-grams taken inside `<token>` windows.
    Signed buckets, L2-normalized. N-grams never cross word boundaries, so texts with the
    same bag of words map to the same vector.
    """

    kind = "hashed-ngram"

    def __init__(self, dim: int = 256, ngram_range: Tuple[int, int] = (3, 5), seed: int = 0, preprocess: bool = False):
        if dim <= 0:
            raise DomainError("dim must be positive")
        self.dim = dim
        self.ngram_range = ngram_range
        self.seed = seed
        self.preprocess = preprocess
        self._key = seed.to_bytes(8, "little")

    def _bucket(self, gram: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
        value = int.from_bytes(digest, "little")
        sign = 1.0 if value & 1 else -1.0
        return (value >> 1) % self.dim, sign

    def _grams(self, text: str):
        tokens = tokenize(text) or text.casefold().split()
        low, high = self.ngram_range
        for token in tokens:
            padded = f"<{token}>"
            for n in range(low, high + 1):
                if len(padded) < n:
                    if n == low:
                        yield padded
                    continue
                for i in range(len(padded) - n + 1):
                    yield padded[i:i + n]

    def encode(self, key: str) -> EmbeddingVector:
        text = strip_urls(key) if self.preprocess else key
        vector = np.zeros(self.dim, dtype=np.float64)
        for gram in self._grams(text):
            index, sign = self._bucket(gram)
            vector[index] += sign
        norm = math.sqrt(float(np.sum(vector * vector)))
        if norm == 0.0:
            raise DomainError(f"text {key[:40]!r} produced an all-zero embedding")
        return vector / norm


class PrecomputedBackend(EncoderBackend):
    """Lookup table id -> vector loaded from a CSV or EMB1 file."""

    kind = "precomputed-file"
    uses_ids = True

    def __init__(self, table: Mapping[str, EmbeddingVector], dim: int, hashed: Optional[Mapping[int, EmbeddingVector]] = None):
        self.dim = dim
        self._by_id: Dict[str, EmbeddingVector] = dict(table)
        self._by_hash: Dict[int, EmbeddingVector] = dict(hashed or {})
        for doc_id, vector in self._by_id.items():
            self._by_hash.setdefault(id_hash(doc_id), vector)

    def __len__(self) -> int:
        return len(self._by_hash)

    @property
    def ids(self) -> Sequence[str]:
        return list(self._by_id)

    def encode(self, key: str) -> EmbeddingVector:
        vector = self._by_id.get(key)
        if vector is None:
            vector = self._by_hash.get(id_hash(key))
        if vector is None:
            raise EmbeddingLookupError(key)
        return vector.copy()


def build_backend(config: BackendConfig, embeddings_path: Optional[Union[str, Path]] = None) -> EncoderBackend:
    if config.kind == "precomputed-file":
        if embeddings_path is None:
            raise DomainError("precomputed-file backend needs an embeddings path")
        return load_precomputed(embeddings_path)
    return HashedNgramBackend(config.dim, (config.ngram_min, config.ngram_max), config.seed, config.preprocess)


def encode(b: EncoderBackend, key: str) -> EmbeddingVector:
    return b.encode(key)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """
    dot(a, b) / (|a| |b|) clamped to [-1, 1]. Reductions go through np.sum (pairwise
    summation), not BLAS dot, so the result does not depend on the BLAS build.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = math.sqrt(float(np.sum(a * a)))
    norm_b = math.sqrt(float(np.sum(b * b)))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DomainError("cosine similarity of a zero vector")
    value = float(np.sum(a * b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def cosine_to_reference(matrix: NDArray[np.float64], reference: EmbeddingVector) -> NDArray[np.float64]:
    """Row-wise cosine similarity of a (n, d) matrix against one reference vector."""
    matrix = np.asarray(matrix, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != reference.size:
        raise DomainError(f"dimension mismatch: {matrix.shape} vs {reference.shape}")
    ref_norm = math.sqrt(float(np.sum(reference * reference)))
    row_norms = np.sqrt(np.sum(matrix * matrix, axis=1))
    if ref_norm == 0.0 or np.any(row_norms == 0.0):
        raise DomainError("cosine similarity of a zero vector")
    sims = np.sum(matrix * reference, axis=1) / (row_norms * ref_norm)
    return np.clip(sims, -1.0, 1.0)


# ===========================
# Precomputed files
# ===========================

def _binary_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def _load_csv(path: Path) -> PrecomputedBackend:
    table: Dict[str, EmbeddingVector] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise ParseError("header must start with 'id'", 1)
        dim = len(header) - 1
        if dim <= 0:
            raise ParseError("header declares no vector columns", 1)
        for line_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ParseError(f"expected {dim + 1} fields, found {len(row)}", line_no)
            try:
                vector = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"unparseable value ({e})", line_no)
            if not np.all(np.isfinite(vector)):
                raise ParseError("non-finite value", line_no)
            table.setdefault(row[0], vector)
    return PrecomputedBackend(table, dim)


def _load_binary(path: Path) -> PrecomputedBackend:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ParseError("truncated EMB1 header")
    dim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if dim <= 0:
        raise ParseError("EMB1 header declares dim 0")
    dtype = _binary_dtype(dim)
    body = len(raw) - 8
    if body % dtype.itemsize:
        raise ParseError(f"EMB1 body of {body} bytes is not a whole number of {dtype.itemsize}-byte records")
    records = np.frombuffer(raw, dtype=dtype, offset=8)
    hashed: Dict[int, EmbeddingVector] = {}
    for index, record in enumerate(records):
        vector = record["v"].astype(np.float64)
        if not np.all(np.isfinite(vector)):
            raise ParseError(f"non-finite value in record {index + 1}")
        hashed.setdefault(int(record["id"]), vector)
    return PrecomputedBackend({}, dim, hashed)


def load_precomputed(path: Union[str, Path]) -> PrecomputedBackend:
    """Load a CSV or EMB1 embedding table; the format is detected from the magic bytes."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    backend = _load_binary(path) if magic == BINARY_MAGIC else _load_csv(path)
    logger.info(f"[ENCODER] loaded {len(backend)} embeddings of dim {backend.dim} from {path.name}")
    return backend


def write_precomputed(table: Mapping[str, EmbeddingVector], path: Union[str, Path], fmt: Literal["csv", "binary"] = "csv") -> Path:
    """Write an id -> vector table. CSV keeps full double precision; binary stores f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = list(table)
    if not ids:
        raise DomainError("cannot write an empty embedding table")
    dim = len(table[ids[0]])

    if fmt == "binary":
        records = np.zeros(len(ids), dtype=_binary_dtype(dim))
        records["id"] = [id_hash(doc_id) for doc_id in ids]
        records["v"] = np.vstack([as_embedding(table[doc_id], dim) for doc_id in ids]).astype("<f4")
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(np.array([dim], dtype="<u4").tobytes())
            f.write(records.tobytes())
        return path

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id"] + [f"v{j}" for j in range(dim)])
        for doc_id in ids:
            vector = as_embedding(table[doc_id], dim)
            writer.writerow([doc_id] + [format(float(v), ".17g") for v in vector])
    return path
