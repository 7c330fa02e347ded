"""Exact Euclidean nearest-neighbour index over guidebook image embeddings.

Vectors are kept as float32 exactly as written to disk so that a saved and
reloaded index answers every query identically. Distances are computed in
float64 from those stored values.

File layout (little-endian)::

    magic   4s   b"GBIX"
    version u16
    dim     u32
    count   u32
    matrix  count*dim float32
    table   count * (u32 len + utf8 id, u32 len + utf8 payload-json)
    crc32   u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"GBIX"
FORMAT_VERSION = 1
DEFAULT_DIM = 512
_HEADER = struct.Struct("<4sHII")
_U32 = struct.Struct("<I")


class EmbedIndexError(Exception):
    """Base class for index problems."""


class DimensionMismatch(EmbedIndexError, ValueError):
    pass


class DuplicateId(EmbedIndexError, ValueError):
    pass


class IndexFormatError(EmbedIndexError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    id: str
    vector: Sequence[float]
    clue: str
    source: str = "other"


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    distance: float
    clue: str
    source: str


@dataclass(frozen=True, eq=False)
class Index:
    ids: tuple[str, ...]
    matrix: np.ndarray
    payloads: tuple[dict, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def distances(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimensionMismatch(f"query has shape {q.shape}, index dim is {self.dim}")
        diff = self.matrix.astype(np.float64) - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def query(self, q, k: int = 3, d_t: float = 30.0) -> list[RetrievalHit]:
        """Up to ``k`` entries with distance <= ``d_t``, nearest first.

        Equal distances keep insertion order.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not d_t > 0:
            raise ValueError(f"d_t must be > 0, got {d_t}")
        dist = self.distances(q)
        passing = np.flatnonzero(dist <= d_t)
        order = passing[np.argsort(dist[passing], kind="stable")][:k]
        return [
            RetrievalHit(
                id=self.ids[i],
                distance=float(dist[i]),
                clue=self.payloads[i]["clue"],
                source=self.payloads[i].get("source", "other"),
            )
            for i in order
        ]

    def save(self, path) -> None:
        Path(path).write_bytes(to_bytes(self))


def build(entries: Iterable[IndexEntry]) -> Index:
    entries = list(entries)
    if not entries:
        raise ValueError("cannot build an index from zero entries")
    dim = len(entries[0].vector)
    if dim == 0:
        raise DimensionMismatch("vectors must have at least one component")
    seen: set[str] = set()
    for e in entries:
        if len(e.vector) != dim:
            raise DimensionMismatch(f"entry {e.id!r} has dim {len(e.vector)}, expected {dim}")
        if e.id in seen:
            raise DuplicateId(f"duplicate id {e.id!r}")
        seen.add(e.id)
    matrix = np.asarray([e.vector for e in entries], dtype=np.float32)
    matrix.setflags(write=False)
    return Index(
        ids=tuple(e.id for e in entries),
        matrix=matrix,
        payloads=tuple({"clue": e.clue, "source": e.source} for e in entries),
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def to_bytes(index: Index) -> bytes:
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, index.dim, index.n),
        index.matrix.astype("<f4").tobytes(),
    ]
    for id_, payload in zip(index.ids, index.payloads):
        parts.append(_pack_str(id_))
        parts.append(_pack_str(json.dumps(payload, sort_keys=True, ensure_ascii=False)))
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(data: bytes) -> Index:
    if len(data) < _HEADER.size + _U32.size:
        raise IndexFormatError("file too short for header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported format version {version}")
    body, (crc,) = data[:-4], _U32.unpack(data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IndexFormatError("checksum mismatch (file truncated or corrupted)")
    if count == 0 or dim == 0:
        raise IndexFormatError("empty index")

    offset = _HEADER.size
    nbytes = count * dim * 4
    if offset + nbytes > len(body):
        raise IndexFormatError("truncated vector matrix")
    matrix = np.frombuffer(body, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    matrix = matrix.astype(np.float32)
    matrix.setflags(write=False)
    offset += nbytes

    def read_str() -> str:
        nonlocal offset
        if offset + 4 > len(body):
            raise IndexFormatError("truncated payload table")
        (length,) = _U32.unpack_from(body, offset)
        offset += 4
        if offset + length > len(body):
            raise IndexFormatError("truncated payload table")
        raw = body[offset : offset + length]
        offset += length
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"invalid utf-8 in payload table: {exc}") from None

    ids, payloads = [], []
    for _ in range(count):
        ids.append(read_str())
        try:
            payloads.append(json.loads(read_str()))
        except json.JSONDecodeError as exc:
            raise IndexFormatError(f"invalid payload json: {exc}") from None
    if offset != len(body):
        raise IndexFormatError("trailing bytes after payload table")
    return Index(ids=tuple(ids), matrix=matrix, payloads=tuple(payloads))


def load(path) -> Index:
    return from_bytes(Path(path).read_bytes())


def save(index: Index, path) -> None:
    index.save(path)
