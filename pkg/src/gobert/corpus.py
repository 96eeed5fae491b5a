"""Annotation corpus: load gene->term records, dedupe, embed, and split
genes into train/valid/test by K-means over averaged term embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .embeddings import EmbeddingMatrix, render_term_text
from .ontology import GoDag, is_term_id


class CorpusError(Exception):
    pass


@dataclass
class GeneExample:
    gene: str
    terms: list[str]          # ascending, deduplicated
    texts: list[str]          # parallel rendered descriptions

    def to_json(self) -> str:
        return json.dumps({"gene": self.gene, "terms": self.terms, "texts": self.texts},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "GeneExample":
        obj = json.loads(line)
        return cls(gene=obj["gene"], terms=obj["terms"], texts=obj["texts"])


@dataclass
class CorpusSplit:
    train: list[str]
    valid: list[str]
    test: list[str]
    seed: int
    k: int

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "valid": self.valid, "test": self.test,
                           "seed": self.seed, "k": self.k},
                          separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusSplit":
        obj = json.loads(text)
        return cls(train=obj["train"], valid=obj["valid"], test=obj["test"],
                   seed=obj["seed"], k=obj["k"])


@dataclass
class LoadStats:
    lines: int = 0
    dropped_terms: int = 0      # unknown / obsolete term references
    skipped_genes: int = 0      # genes left with zero valid terms
    truncated_genes: int = 0


def load_annotations(source: str | IO, dag: GoDag, max_len: int = 64,
                     stats: LoadStats | None = None) -> list[GeneExample]:
    """Parse ``gene_id<TAB>GO:xxxxxxx`` lines into per-gene examples.

    Terms unknown to the dag or obsolete are dropped and counted; genes with
    no surviving terms are skipped. Output order is first-appearance order of
    the gene in the stream; per-gene terms sorted ascending, truncated to
    max_len.
    """
    text = source if isinstance(source, str) else source.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    stats = stats if stats is not None else LoadStats()

    order: list[str] = []
    per_gene: dict[str, set[str]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        stats.lines += 1
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[0]:
            raise CorpusError(f"line {line_no}: expected 'gene<TAB>term', got {line!r}")
        gene, term = parts
        if not is_term_id(term):
            raise CorpusError(f"line {line_no}: malformed term id {term!r}")
        if gene not in per_gene:
            per_gene[gene] = set()
            order.append(gene)
        if term not in dag.terms or dag.terms[term].is_obsolete:
            stats.dropped_terms += 1
            continue
        per_gene[gene].add(term)

    examples = []
    for gene in order:
        terms = sorted(per_gene[gene])
        if not terms:
            stats.skipped_genes += 1
            continue
        if len(terms) > max_len:
            terms = terms[:max_len]
            stats.truncated_genes += 1
        texts = [render_term_text(dag.terms[t]).text for t in terms]
        examples.append(GeneExample(gene=gene, terms=terms, texts=texts))
    return examples


def dedupe_examples(examples: Iterable[GeneExample]) -> list[GeneExample]:
    """Drop genes whose term set duplicates an earlier kept gene's set."""
    seen: set[tuple[str, ...]] = set()
    kept = []
    for ex in examples:
        key = tuple(ex.terms)
        if key in seen:
            continue
        seen.add(key)
        kept.append(ex)
    return kept


def gene_embedding(example: GeneExample, provider: EmbeddingMatrix) -> np.ndarray:
    """Arithmetic mean of the term embedding vectors."""
    if not example.terms:
        raise CorpusError(f"gene {example.gene} has no terms")
    vecs = np.stack([provider.rows[t] for t in example.terms])
    return vecs.mean(axis=0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def lloyd(points: np.ndarray, k: int, seed: int, max_iter: int = 100):
    """Seeded k-means++ init then Lloyd iterations to assignment fixpoint.

    Returns (assignments, centroids, inertia_history).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC1])))
    pts = np.asarray(points, dtype=np.float64)
    centroids = _kmeans_pp_init(pts, k, rng)
    assign = np.full(pts.shape[0], -1)
    history = []
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(pts)), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return assign, centroids, history


def kmeans_split(examples: list[GeneExample], provider: EmbeddingMatrix,
                 k: int, ratios: tuple[float, float, float], seed: int) -> CorpusSplit:
    """Cluster-exclusive split: whole K-means clusters assigned greedily
    (largest cluster first) to whichever split is furthest below its target
    gene count."""
    if len(examples) < k:
        raise CorpusError(f"{len(examples)} genes < K={k}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be non-negative and sum to 1, got {ratios}")

    points = np.stack([gene_embedding(ex, provider) for ex in examples])
    assign, _, _ = lloyd(points, k, seed)

    clusters: dict[int, list[str]] = {c: [] for c in range(k)}
    for ex, c in zip(examples, assign):
        clusters[int(c)].append(ex.gene)

    n = len(examples)
    targets = [r * n for r in ratios]
    counts = [0, 0, 0]
    buckets: list[list[str]] = [[], [], []]
    order = sorted(range(k), key=lambda c: (-len(clusters[c]), c))
    for c in order:
        if not clusters[c]:
            continue
        deficits = [targets[s] - counts[s] for s in range(3)]
        s = max(range(3), key=lambda i: (deficits[i], -i))
        buckets[s].extend(clusters[c])
        counts[s] += len(clusters[c])
    return CorpusSplit(train=sorted(buckets[0]), valid=sorted(buckets[1]),
                       test=sorted(buckets[2]), seed=seed, k=k)


# -- corpus files --------------------------------------------------------------

def write_corpus(path, examples: list[GeneExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")


def read_corpus(path) -> list[GeneExample]:
    with open(path, encoding="utf-8") as f:
        return [GeneExample.from_json(line) for line in f if line.strip()]
