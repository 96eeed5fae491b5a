"""Term-text rendering and initial token embeddings.

Embeddings come from a precomputed file (binary ``GOEMB1`` or TSV) produced by
an external text encoder, or from a deterministic hash-seeded fallback so the
whole pipeline runs without one.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ontology import GoTerm
from .vocab import Vocabulary, PAD, MASK, UNK

MAGIC = b"GOEMB1"


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class TermText:
    term: str
    text: str


def render_term_text(term: GoTerm) -> TermText:
    """Key-value rendering of a term's attributes, fixed key order."""
    text = (f"id: {term.id}; name: {term.name}; "
            f"namespace: {term.namespace}; definition: {term.definition}")
    return TermText(term=term.id, text=text)


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(),
                          "little")


def fallback_embedding(text: TermText | str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-embedding: PRNG seeded by a 64-bit hash of the
    text, d draws from Normal(0, 1/sqrt(d)). Norm concentrates near 1."""
    if dim < 1:
        raise EmbeddingError(f"dim must be >= 1, got {dim}")
    raw = text.text if isinstance(text, TermText) else text
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _text_seed(raw)])))
    return rng.normal(0.0, dim ** -0.5, size=dim).astype(np.float32)


@dataclass
class EmbeddingMatrix:
    dim: int
    rows: dict[str, np.ndarray]
    source: str                  # "file" | "fallback" | "random"
    fallback_fills: int = 0

    def matrix(self, vocab: Vocabulary) -> np.ndarray:
        """Dense [vocab_size, dim] table in vocabulary index order."""
        out = np.zeros((len(vocab), self.dim), dtype=np.float32)
        for token, idx in vocab.items():
            out[idx] = self.rows[token]
        return out


def _special_rows(dim: int, seed: int) -> dict[str, np.ndarray]:
    return {
        PAD: np.zeros(dim, dtype=np.float32),
        MASK: fallback_embedding("[MASK]", dim, seed),
        UNK: fallback_embedding("[UNK]", dim, seed),
    }


def build_fallback(vocab: Vocabulary, texts: dict[str, TermText],
                   dim: int, seed: int = 0) -> EmbeddingMatrix:
    """Fallback provider for the whole vocabulary (no file needed)."""
    rows = _special_rows(dim, seed)
    for term in vocab.terms:
        rows[term] = fallback_embedding(texts[term], dim, seed)
    return EmbeddingMatrix(dim=dim, rows=rows, source="fallback")


def build_random(vocab: Vocabulary, dim: int, seed: int = 0) -> EmbeddingMatrix:
    """No-semantics ablation: every term row is a seeded random vector with no
    dependence on term text. Specials keep their fixed rules."""
    rows = _special_rows(dim, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xABBA])))
    for term in vocab.terms:
        rows[term] = rng.normal(0.0, dim ** -0.5, size=dim).astype(np.float32)
    return EmbeddingMatrix(dim=dim, rows=rows, source="random")


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int,
                    texts: dict[str, TermText], seed: int = 0) -> EmbeddingMatrix:
    """Load a term->vector file; vocabulary terms missing from the file are
    filled from the fallback and counted."""
    path = Path(path)
    data = path.read_bytes()
    if data[:6] == MAGIC:
        file_rows, file_dim = _read_binary(data)
    else:
        file_rows, file_dim = _read_tsv(data.decode("utf-8"))
    if file_dim != dim:
        raise EmbeddingError(f"file dimension {file_dim} != requested {dim}")

    rows = _special_rows(dim, seed)
    fills = 0
    for term in vocab.terms:
        if term in file_rows:
            vec = file_rows[term]
            if not np.all(np.isfinite(vec)):
                raise EmbeddingError(f"non-finite embedding for {term}")
            rows[term] = vec
        else:
            rows[term] = fallback_embedding(texts[term], dim, seed)
            fills += 1
    return EmbeddingMatrix(dim=dim, rows=rows, source="file", fallback_fills=fills)


def _read_binary(data: bytes) -> tuple[dict[str, np.ndarray], int]:
    off = len(MAGIC)
    dim, = struct.unpack_from("<I", data, off)
    off += 4
    count, = struct.unpack_from("<Q", data, off)
    off += 8
    rows = {}
    for _ in range(count):
        id_len, = struct.unpack_from("<H", data, off)
        off += 2
        term = data[off:off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        rows[term] = vec
    return rows, dim


def _read_tsv(text: str) -> tuple[dict[str, np.ndarray], int]:
    rows = {}
    dim = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        term, _, values = line.partition("\t")
        vec = np.array([float(x) for x in values.split(",")], dtype=np.float32)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise EmbeddingError(f"line {line_no}: dimension {len(vec)} != {dim}")
        rows[term] = vec
    if dim is None:
        raise EmbeddingError("empty embedding file")
    return rows, dim


def save_embeddings(path: str | Path, rows: dict[str, np.ndarray], dim: int) -> None:
    """Write the binary GOEMB1 layout; iteration order is sorted term id."""
    parts = [MAGIC, struct.pack("<I", dim), struct.pack("<Q", len(rows))]
    for term in sorted(rows):
        vec = np.asarray(rows[term], dtype="<f4")
        if vec.shape != (dim,):
            raise EmbeddingError(f"{term}: expected shape ({dim},), got {vec.shape}")
        raw = term.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(vec.tobytes())
    Path(path).write_bytes(b"".join(parts))
