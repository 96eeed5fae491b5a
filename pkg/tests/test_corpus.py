import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gobert.corpus import (CorpusError, GeneExample, LoadStats, dedupe_examples,
                           gene_embedding, kmeans_split, lloyd,
                           load_annotations, read_corpus, write_corpus)
from gobert.embeddings import EmbeddingMatrix, build_fallback, render_term_text
from gobert.vocab import Vocabulary

from synthdata import make_random_dag


def _provider_for(dag, dim=8, seed=0):
    vocab = Vocabulary.from_dag(dag)
    texts = {t: render_term_text(dag.terms[t]) for t in vocab.terms}
    return build_fallback(vocab, texts, dim, seed=seed)


class TestLoadAnnotations:
    def test_dedup_within_gene(self, chain_dag):
        tsv = "g1\tGO:0000002\ng1\tGO:0000002\n"
        ex = load_annotations(tsv, chain_dag)
        assert len(ex) == 1
        assert ex[0].terms == ["GO:0000002"]

    def test_obsolete_only_gene_skipped(self, fixture40):
        tsv = "g1\tGO:0000399\n"
        stats = LoadStats()
        ex = load_annotations(tsv, fixture40, stats=stats)
        assert ex == []
        assert stats.skipped_genes == 1
        assert stats.dropped_terms == 1

    def test_malformed_line(self, chain_dag):
        with pytest.raises(CorpusError, match="line 2"):
            load_annotations("g1\tGO:0000002\nbroken line\n", chain_dag)

    def test_grouping_matches_sort_group_oracle(self, fixture40):
        rng = np.random.Generator(np.random.PCG64(7))
        active = fixture40.ordering
        lines = []
        for _ in range(200):
            g = f"g{int(rng.integers(30))}"
            t = active[int(rng.integers(len(active)))]
            lines.append(f"{g}\t{t}")
        tsv = "\n".join(lines) + "\n"
        examples = load_annotations(tsv, fixture40)
        # independent oracle: sort-and-group the raw pairs
        groups = {}
        for line in lines:
            g, t = line.split("\t")
            groups.setdefault(g, set()).add(t)
        assert {ex.gene: set(ex.terms) for ex in examples} == groups
        for ex in examples:
            assert ex.terms == sorted(ex.terms)
            assert len(ex.texts) == len(ex.terms)

    def test_max_len_truncation(self, fixture40):
        lines = [f"g1\t{t}" for t in fixture40.ordering[:20]]
        ex = load_annotations("\n".join(lines), fixture40, max_len=5)
        assert len(ex[0].terms) == 5


class TestDedupe:
    def test_identical_sets_collapse(self):
        a = GeneExample("g1", ["GO:0000001"], ["x"])
        b = GeneExample("g2", ["GO:0000001"], ["x"])
        assert dedupe_examples([a, b]) == [a]

    def test_different_sets_kept(self):
        a = GeneExample("g1", ["GO:0000001"], ["x"])
        b = GeneExample("g2", ["GO:0000001", "GO:0000002"], ["x", "y"])
        assert len(dedupe_examples([a, b])) == 2

    def test_planted_duplicates(self):
        dag = make_random_dag(60, seed=2)
        rng = np.random.Generator(np.random.PCG64(3))
        examples = []
        for g in range(43):
            terms = sorted(set(rng.choice(dag.ordering, size=5, replace=False)))
            examples.append(GeneExample(f"g{g:03d}", list(terms), list(terms)))
        # plant 7 duplicates of earlier genes
        for i in range(7):
            src = examples[i * 3]
            examples.append(GeneExample(f"dup{i}", list(src.terms), list(src.texts)))
        kept = dedupe_examples(examples)
        # brute-force pairwise oracle
        expect = []
        for ex in examples:
            if not any(set(ex.terms) == set(e.terms) for e in expect):
                expect.append(ex)
        assert kept == expect
        assert len(kept) == 43

    @given(st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=4),
                    max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, term_sets):
        examples = [GeneExample(f"g{i}", sorted({f"GO:{t:07d}" for t in ts}), [])
                    for i, ts in enumerate(term_sets)]
        once = dedupe_examples(examples)
        assert dedupe_examples(once) == once


class TestGeneEmbedding:
    def test_single_term(self, fixture40):
        provider = _provider_for(fixture40)
        t = fixture40.ordering[0]
        ex = GeneExample("g", [t], ["x"])
        assert np.array_equal(gene_embedding(ex, provider), provider.rows[t])

    def test_opposite_vectors_cancel(self):
        x = np.ones(4, dtype=np.float32)
        provider = EmbeddingMatrix(dim=4, rows={"GO:0000001": x, "GO:0000002": -x},
                                   source="fallback")
        ex = GeneExample("g", ["GO:0000001", "GO:0000002"], ["a", "b"])
        assert np.allclose(gene_embedding(ex, provider), 0.0)

    def test_matches_extended_precision_sum(self, fixture40):
        provider = _provider_for(fixture40)
        terms = fixture40.ordering[:5]
        ex = GeneExample("g", list(terms), ["x"] * 5)
        got = gene_embedding(ex, provider)
        expect = sum(provider.rows[t].astype(np.float64) for t in terms) / 5
        assert np.allclose(got, expect, rtol=1e-6)

    def test_empty_errors(self):
        provider = EmbeddingMatrix(dim=2, rows={}, source="fallback")
        with pytest.raises(CorpusError):
            gene_embedding(GeneExample("g", [], []), provider)


class TestKmeansSplit:
    def _blob_setup(self, seed=0):
        """Three well-separated blobs: inter-centroid distance 100x spread."""
        rng = np.random.Generator(np.random.PCG64(seed))
        centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        rows = {}
        examples = []
        for b in range(3):
            for i in range(12):
                term = f"GO:{b * 100 + i:07d}"
                rows[term] = (centers[b] + rng.normal(0, 1.0, 2)).astype(np.float32)
                examples.append(GeneExample(f"g{b}_{i}", [term], ["x"]))
        provider = EmbeddingMatrix(dim=2, rows=rows, source="fallback")
        return examples, provider, centers

    def test_blobs_become_splits(self):
        examples, provider, centers = self._blob_setup()
        split = kmeans_split(examples, provider, 3, (1 / 3, 1 / 3, 1 / 3), seed=1)
        buckets = [set(split.train), set(split.valid), set(split.test)]
        # brute-force nearest-centroid check: each blob lands whole in one split
        for b in range(3):
            genes = {f"g{b}_{i}" for i in range(12)}
            assert any(genes <= bucket for bucket in buckets)

    def test_deterministic(self):
        examples, provider, _ = self._blob_setup()
        s1 = kmeans_split(examples, provider, 3, (0.8, 0.1, 0.1), seed=42)
        s2 = kmeans_split(examples, provider, 3, (0.8, 0.1, 0.1), seed=42)
        assert s1 == s2

    def test_partition_property(self):
        examples, provider, _ = self._blob_setup()
        for seed in range(5):
            split = kmeans_split(examples, provider, 5, (0.6, 0.2, 0.2), seed=seed)
            all_genes = {ex.gene for ex in examples}
            buckets = [set(split.train), set(split.valid), set(split.test)]
            assert buckets[0] | buckets[1] | buckets[2] == all_genes
            assert not (buckets[0] & buckets[1])
            assert not (buckets[0] & buckets[2])
            assert not (buckets[1] & buckets[2])

    def test_too_few_genes(self):
        examples, provider, _ = self._blob_setup()
        with pytest.raises(CorpusError):
            kmeans_split(examples[:2], provider, 3, (0.8, 0.1, 0.1), seed=0)

    def test_lloyd_objective_non_increasing(self):
        rng = np.random.Generator(np.random.PCG64(11))
        pts = rng.normal(size=(200, 4))
        _, _, history = lloyd(pts, 6, seed=0)
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


class TestSerialization:
    def test_round_trip_bit_identical(self, tmp_path, fixture40):
        lines = [f"g{i}\t{t}" for i, t in enumerate(fixture40.ordering[:10])]
        examples = load_annotations("\n".join(lines), fixture40)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_corpus(p1, examples)
        write_corpus(p2, read_corpus(p1))
        assert p1.read_bytes() == p2.read_bytes()
