"""Corpus chunking, dense vector index, exact cosine top-k, and the DRIX file format.

Index file layout (little-endian)::

    b"DRIX" | version u32 | dim u32 | count u64
    metadata length u64 | metadata (UTF-8 JSON, sorted keys)
    payload: count x [chunk_id length u32 | chunk_id UTF-8 | dim x f32 | norm f32]
    CRC32(payload) u32

Chunk texts, titles and spans live in the metadata block (``chunks``), next to
``payload_bytes`` which lets truncation be told apart from corruption.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateChunkId,
    EmptyCorpus,
    FormatError,
    InvalidChunking,
)

MAGIC = b"DRIX"
FORMAT_VERSION = 1
DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
WHITESPACE_WINDOW = 50


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.body:
            raise ValueError(f"document {self.doc_id!r} has an empty body")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    char_span: tuple[int, int]


@dataclass(frozen=True)
class Snippet:
    chunk_id: str
    doc_id: str
    text: str
    title: str
    score: float


def load_corpus(path: str | os.PathLike) -> list[Document]:
    """Read a JSON-lines corpus with fields doc_id, title, body."""
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Document(str(rec["doc_id"]), str(rec.get("title", "")), rec["body"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if doc.doc_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    if not docs:
        raise EmptyCorpus(f"{path}: no documents")
    return docs


def corpus_fingerprint(docs: Iterable[Document]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(json.dumps([d.doc_id, d.title, d.body], ensure_ascii=False).encode("utf-8"))
    return h.hexdigest()


def chunk_document(
    doc: Document,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    snap_to_whitespace: bool = True,
) -> list[Chunk]:
    """Split ``doc.body`` into overlapping character windows.

    Consecutive chunks share exactly ``overlap`` characters. When snapping is
    on, a cut that would fall inside a word moves left to the nearest
    whitespace within ``WHITESPACE_WINDOW`` characters, provided the chunk
    still advances past the overlap region.
    """
    if chunk_size <= 0 or overlap < 0:
        raise InvalidChunking("chunk_size must be positive and overlap non-negative")
    if overlap >= chunk_size:
        raise InvalidChunking(f"overlap ({overlap}) must be smaller than chunk_size ({chunk_size})")
    body = doc.body
    n = len(body)
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + chunk_size, n)
        if snap_to_whitespace and end < n and not body[end].isspace():
            lowest = max(end - WHITESPACE_WINDOW, start + overlap + 1)
            for cut in range(end - 1, lowest - 1, -1):
                if body[cut].isspace():
                    end = cut
                    break
        chunks.append(Chunk(f"{doc.doc_id}:{len(chunks):05d}", doc.doc_id, body[start:end], (start, end)))
        if end >= n:
            return chunks
        start = end - overlap


def chunk_corpus(docs: Sequence[Document], chunk_size=DEFAULT_CHUNK_SIZE,
                 overlap=DEFAULT_OVERLAP, snap_to_whitespace=True) -> list[Chunk]:
    out: list[Chunk] = []
    for d in docs:
        out.extend(chunk_document(d, chunk_size, overlap, snap_to_whitespace))
    return out


@dataclass
class VectorIndex:
    """Immutable in-memory index; rows are sorted by chunk_id."""

    dim: int
    chunk_ids: list[str]
    vectors: np.ndarray  # (N, dim) float32
    norms: np.ndarray  # (N,) float32, as persisted
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.norms = np.ascontiguousarray(self.norms, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape != (len(self.chunk_ids), self.dim):
            raise DimensionMismatch(
                f"vectors shape {self.vectors.shape} != ({len(self.chunk_ids)}, {self.dim})")
        if len(set(self.chunk_ids)) != len(self.chunk_ids):
            raise DuplicateChunkId("chunk ids must be unique")
        self.vectors.flags.writeable = False
        self._vec64 = self.vectors.astype(np.float64)
        self._norm64 = np.linalg.norm(self._vec64, axis=1)
        self._chunks = self.metadata.get("chunks", {})

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (self.dim == other.dim and self.chunk_ids == other.chunk_ids
                and self.metadata == other.metadata
                and self.vectors.tobytes() == other.vectors.tobytes()
                and self.norms.tobytes() == other.norms.tobytes())

    def snippet(self, row: int, score: float) -> Snippet:
        cid = self.chunk_ids[row]
        info = self._chunks.get(cid, {})
        return Snippet(cid, info.get("doc_id", ""), info.get("text", ""), info.get("title", ""), score)

    def scores(self, query_vec) -> np.ndarray:
        """Cosine similarity of ``query_vec`` against every row (float64)."""
        q = np.asarray(query_vec, dtype=np.float32).astype(np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query has shape {q.shape}, index dim is {self.dim}")
        qn = np.linalg.norm(q)
        denom = self._norm64 * qn
        out = np.zeros(len(self.chunk_ids))
        ok = denom > 0
        out[ok] = (self._vec64[ok] @ q) / denom[ok]
        return np.clip(out, -1.0, 1.0)


def build_index(
    chunks: Sequence[Chunk],
    embedder,
    *,
    titles: dict[str, str] | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    corpus_fp: str = "",
    batch_size: int = 64,
) -> VectorIndex:
    """Embed ``chunks`` with ``embedder.embed`` and seal them into a VectorIndex."""
    if not chunks:
        raise EmptyCorpus("cannot build an index from zero chunks")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DuplicateChunkId(f"duplicate chunk_id {dup!r}")
    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    vectors: list[np.ndarray] = []
    for i in range(0, len(ordered), batch_size):
        batch = ordered[i:i + batch_size]
        vectors.extend(embedder.embed([c.text for c in batch]))
    dims = {v.shape[0] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"embedder returned mixed dimensions {sorted(dims)}")
    mat = np.vstack(vectors).astype(np.float32)
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    if np.any(norms == 0):
        bad = ordered[int(np.argmin(norms))].chunk_id
        raise DimensionMismatch(f"chunk {bad!r} embedded to a zero vector")
    titles = titles or {}
    metadata = {
        "embedder_id": getattr(embedder, "embedder_id", type(embedder).__name__),
        "chunk_size": chunk_size,
        "overlap": overlap,
        "corpus_fingerprint": corpus_fp,
        "chunks": {
            c.chunk_id: {"doc_id": c.doc_id, "title": titles.get(c.doc_id, ""),
                         "text": c.text, "span": list(c.char_span)}
            for c in ordered
        },
    }
    return VectorIndex(mat.shape[1], [c.chunk_id for c in ordered], mat,
                       norms.astype(np.float32), metadata)


def index_corpus(docs: Sequence[Document], embedder, chunk_size=DEFAULT_CHUNK_SIZE,
                 overlap=DEFAULT_OVERLAP, snap_to_whitespace=True) -> VectorIndex:
    chunks = chunk_corpus(docs, chunk_size, overlap, snap_to_whitespace)
    return build_index(chunks, embedder, titles={d.doc_id: d.title for d in docs},
                       chunk_size=chunk_size, overlap=overlap,
                       corpus_fp=corpus_fingerprint(docs))


def retrieve_top_k(index: VectorIndex, query_vec, k: int) -> list[Snippet]:
    """Exact top-k by cosine similarity; ties go to the smaller chunk_id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    scores = index.scores(query_vec)
    if k == 0:
        return []
    # rows are in chunk_id order, so a stable sort breaks ties by chunk_id
    order = np.argsort(-scores, kind="stable")[:k]
    return [index.snippet(int(r), float(scores[r])) for r in order]


# --------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sIIQ")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def _encode_payload(index: VectorIndex) -> bytes:
    parts = []
    for row, cid in enumerate(index.chunk_ids):
        raw = cid.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(index.vectors[row].astype("<f4").tobytes())
        parts.append(index.norms[row:row + 1].astype("<f4").tobytes())
    return b"".join(parts)


def dumps_index(index: VectorIndex) -> bytes:
    payload = _encode_payload(index)
    meta = dict(index.metadata, payload_bytes=len(payload))
    meta_raw = json.dumps(meta, sort_keys=True, ensure_ascii=False,
                          separators=(",", ":")).encode("utf-8")
    return b"".join([
        _HEADER.pack(MAGIC, FORMAT_VERSION, index.dim, len(index.chunk_ids)),
        _U64.pack(len(meta_raw)), meta_raw, payload,
        _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF),
    ])


def save_index(index: VectorIndex, path: str | os.PathLike) -> None:
    data = dumps_index(index)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def loads_index(data: bytes) -> VectorIndex:
    if len(data) < _HEADER.size + _U64.size:
        raise FormatError("file too short for a DRIX header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = _HEADER.size
    (meta_len,) = _U64.unpack_from(data, pos)
    pos += _U64.size
    if pos + meta_len > len(data):
        raise FormatError("truncated metadata block")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        payload_len = int(meta.pop("payload_bytes"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"unreadable metadata block ({exc})") from exc
    pos += meta_len
    if len(data) != pos + payload_len + _U32.size:
        raise FormatError(f"expected {pos + payload_len + _U32.size} bytes, found {len(data)}")
    payload = data[pos:pos + payload_len]
    (crc,) = _U32.unpack_from(data, pos + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("payload CRC32 does not match trailer")

    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float32)
    norms = np.empty(count, dtype=np.float32)
    off = 0
    try:
        for row in range(count):
            (n,) = _U32.unpack_from(payload, off)
            off += _U32.size
            ids.append(payload[off:off + n].decode("utf-8"))
            off += n
            vectors[row] = np.frombuffer(payload, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            norms[row] = np.frombuffer(payload, dtype="<f4", count=1, offset=off)[0]
            off += 4
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed payload ({exc})") from exc
    if off != payload_len:
        raise FormatError("payload length disagrees with entry count")
    return VectorIndex(dim, ids, vectors, norms, meta)


def load_index(path: str | os.PathLike) -> VectorIndex:
    with open(path, "rb") as fh:
        return loads_index(fh.read())
