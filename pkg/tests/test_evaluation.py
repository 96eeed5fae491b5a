import numpy as np
import pytest

from gobert.evaluation import (ABLATION_ROWS, EvalReport, EvaluationError,
                               PositionScores, _rank_of, _vocab_depths,
                               ablation_text_table, ablation_tsv,
                               bucketed_topk_by_depth, evaluate,
                               predecessor_ranking, restricted_ranking,
                               run_ablation_suite, topk_at_depth_from_scores,
                               topk_from_scores)
from gobert.embeddings import render_term_text
from gobert.model import init_parameters
from gobert.ontology import UnknownTermError
from gobert.training import TrainConfig
from gobert.vocab import MASK_ID, Vocabulary

from synthdata import leaves, make_random_dag
from test_training import some_genes, tiny_model, tiny_world


def rank_oracle(logits, cand_ids, truth):
    ranked = sorted(cand_ids, key=lambda c: (-logits[c], c))
    return ranked.index(truth) + 1


class TestRankOf:
    def test_matches_sort_oracle(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(200):
            n = int(rng.integers(5, 60))
            logits = rng.normal(size=n)
            cands = rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False)
            truth = int(rng.choice(cands))
            assert _rank_of(logits, cands, truth) == rank_oracle(logits, cands, truth)

    def test_ties_broken_by_ascending_index(self):
        # quantized logits force ties; oracle sorts by (-score, index)
        rng = np.random.Generator(np.random.PCG64(1))
        for _ in range(200):
            logits = rng.integers(0, 4, size=30).astype(float)
            cands = np.arange(30)
            truth = int(rng.integers(30))
            assert _rank_of(logits, cands, truth) == rank_oracle(logits, cands, truth)

    def test_top_scorer_ranks_first(self):
        logits = np.array([0.0, 5.0, 1.0])
        assert _rank_of(logits, np.arange(3), 1) == 1
        assert _rank_of(logits, np.arange(3), 2) == 2
        assert _rank_of(logits, np.arange(3), 0) == 3


def _fixed_scores(vocab_size, rows):
    """rows: list of (logits, truth_id). Input ids are irrelevant here."""
    return PositionScores(
        logits=[np.asarray(l, dtype=float) for l, _ in rows],
        truth_ids=[t for _, t in rows],
        input_ids=[np.zeros(1, dtype=np.int64) for _ in rows])


class TestTopkFromScores:
    @pytest.fixture
    def world(self):
        return tiny_world(n_terms=12)

    def test_hand_built_positions(self, world):
        dag, vocab, _ = world
        first = vocab.first_term_id
        n = len(vocab)
        # position 0: truth is the argmax -> top-1 hit
        l0 = np.zeros(n)
        l0[first + 2] = 9.0
        # position 1: truth ranks 3rd among terms -> top-5 only
        l1 = np.zeros(n)
        l1[first] = 3.0
        l1[first + 1] = 2.0
        l1[first + 4] = 1.0
        scores = _fixed_scores(n, [(l0, first + 2), (l1, first + 4)])
        assert topk_from_scores(scores, vocab, 1) == (1, 2)
        assert topk_from_scores(scores, vocab, 5) == (2, 2)

    def test_specials_never_candidates(self, world):
        dag, vocab, _ = world
        n = len(vocab)
        # huge logits on PAD/MASK/UNK must not displace the truth
        l = np.full(n, -1.0)
        l[:vocab.first_term_id] = 100.0
        l[vocab.first_term_id] = 0.0
        scores = _fixed_scores(n, [(l, vocab.first_term_id)])
        assert topk_from_scores(scores, vocab, 1) == (1, 1)

    def test_monotone_in_k(self, world):
        dag, vocab, _ = world
        rng = np.random.Generator(np.random.PCG64(7))
        n = len(vocab)
        rows = [(rng.normal(size=n), int(rng.integers(vocab.first_term_id, n)))
                for _ in range(50)]
        scores = _fixed_scores(n, rows)
        prev = 0
        for k in (1, 2, 5, n):
            c, t = topk_from_scores(scores, vocab, k)
            assert t == 50
            assert c >= prev
            prev = c
        assert prev == 50  # k == candidate count is always a hit

    def test_random_logits_match_chance(self):
        """With random scores over 40 candidates the hit rate is ~k/40."""
        dag = make_random_dag(40, seed=2, n_namespaces=1)
        vocab = Vocabulary.from_dag(dag)
        n = len(vocab)
        rng = np.random.Generator(np.random.PCG64(3))
        rows = [(rng.normal(size=n), int(rng.integers(vocab.first_term_id, n)))
                for _ in range(4000)]
        scores = _fixed_scores(n, rows)
        c1, t = topk_from_scores(scores, vocab, 1)
        c5, _ = topk_from_scores(scores, vocab, 5)
        assert abs(c1 / t - 1 / 40) < 0.01
        assert abs(c5 / t - 5 / 40) < 0.02

    def test_invalid_k(self, world):
        dag, vocab, _ = world
        with pytest.raises(EvaluationError):
            topk_from_scores(_fixed_scores(len(vocab), []), vocab, 0)

    def test_exclude_input_terms(self, world):
        dag, vocab, _ = world
        first = vocab.first_term_id
        n = len(vocab)
        # a present input term outscores the truth; excluding it restores
        # the top-1 hit
        l = np.zeros(n)
        l[first] = 5.0
        l[first + 1] = 4.0
        scores = PositionScores(
            logits=[l], truth_ids=[first + 1],
            input_ids=[np.array([first, MASK_ID], dtype=np.int64)])
        assert topk_from_scores(scores, vocab, 1) == (0, 1)
        assert topk_from_scores(scores, vocab, 1, exclude_input_terms=True) == (1, 1)


class TestDepthRestricted:
    @pytest.fixture
    def world(self):
        return tiny_world(n_terms=30)

    def test_restricted_at_least_as_good(self, world):
        """The depth-restricted candidate set is a subset containing the
        truth, so its rank can only improve."""
        dag, vocab, _ = world
        rng = np.random.Generator(np.random.PCG64(4))
        n = len(vocab)
        rows = [(rng.normal(size=n), int(rng.integers(vocab.first_term_id, n)))
                for _ in range(300)]
        scores = _fixed_scores(n, rows)
        for k in (1, 5):
            c_full, t_full = topk_from_scores(scores, vocab, k)
            c_depth, t_depth, skipped = topk_at_depth_from_scores(scores, vocab, dag, k)
            assert skipped == 0
            assert t_depth == t_full
            assert c_depth >= c_full

    def test_position_level_oracle(self, world):
        dag, vocab, _ = world
        depths = _vocab_depths(vocab, dag)
        rng = np.random.Generator(np.random.PCG64(5))
        n = len(vocab)
        correct = total = 0
        rows = []
        for _ in range(200):
            logits = rng.normal(size=n)
            truth = int(rng.integers(vocab.first_term_id, n))
            rows.append((logits, truth))
            cands = [i for i in range(n) if depths[i] == depths[truth] and depths[i] >= 0]
            if rank_oracle(logits, cands, truth) <= 1:
                correct += 1
            total += 1
        got = topk_at_depth_from_scores(_fixed_scores(n, rows), vocab, dag, 1)
        assert got == (correct, total, 0)

    def test_unique_depth_always_hits(self, world):
        dag, vocab, _ = world
        depths = _vocab_depths(vocab, dag)
        vals, counts = np.unique(depths[depths >= 0], return_counts=True)
        singletons = vals[counts == 1]
        if len(singletons) == 0:
            pytest.skip("no depth level with a single term in this dag")
        truth = int(np.nonzero(depths == singletons[0])[0][0])
        worst = np.zeros(len(vocab))
        worst[truth] = -100.0
        scores = _fixed_scores(len(vocab), [(worst, truth)])
        assert topk_at_depth_from_scores(scores, vocab, dag, 1) == (1, 1, 0)

    def test_depthless_truth_skipped(self, world):
        dag, vocab, _ = world
        scores = _fixed_scores(len(vocab), [(np.zeros(len(vocab)), MASK_ID)])
        assert topk_at_depth_from_scores(scores, vocab, dag, 1) == (0, 0, 1)

    def test_bucketed_groups_by_truth_depth(self, world):
        dag, vocab, _ = world
        depths = _vocab_depths(vocab, dag)
        rng = np.random.Generator(np.random.PCG64(6))
        n = len(vocab)
        rows = [(rng.normal(size=n), int(rng.integers(vocab.first_term_id, n)))
                for _ in range(200)]
        buckets = bucketed_topk_by_depth(_fixed_scores(n, rows), vocab, dag, 5)
        assert set(buckets) <= set(int(d) for d in depths[depths >= 0])
        assert all(0.0 <= v <= 100.0 for v in buckets.values())
        # weighted recombination equals the unrestricted rate
        per_depth_totals = {}
        for _, truth in rows:
            d = int(depths[truth])
            per_depth_totals[d] = per_depth_totals.get(d, 0) + 1
        c, t = topk_from_scores(_fixed_scores(n, rows), vocab, 5)
        recombined = sum(buckets[d] / 100.0 * per_depth_totals[d] for d in buckets)
        assert recombined == pytest.approx(c)


@pytest.fixture(scope="module")
def eval_setup():
    dag, vocab, table = tiny_world(n_terms=20)
    params = init_parameters(tiny_model(dag, vocab), table, seed=0)
    genes = some_genes(dag, 10, seed=1)
    return dag, vocab, params, genes


class TestEvaluate:
    @pytest.fixture
    def setup(self, eval_setup):
        return eval_setup

    def test_report_shape_and_stats(self, setup):
        dag, vocab, params, genes = setup
        rep = evaluate(params, genes, dag, vocab, seeds=(0, 1, 2))
        assert rep.seeds == [0, 1, 2]
        for m in ("top1", "top5", "top1_depth", "top5_depth"):
            vals = rep.per_seed[m]
            assert len(vals) == 3
            assert rep.mean[m] == pytest.approx(float(np.mean(vals)))
            assert rep.std[m] == pytest.approx(float(np.std(vals, ddof=1)))
            for (c, t), v in zip(rep.counts[m], vals):
                assert v == pytest.approx(100.0 * c / t if t else 0.0)

    def test_deterministic(self, setup):
        dag, vocab, params, genes = setup
        a = evaluate(params, genes, dag, vocab, seeds=(0, 1))
        b = evaluate(params, genes, dag, vocab, seeds=(0, 1))
        assert a.to_json() == b.to_json()

    def test_table_row_format(self, setup):
        dag, vocab, params, genes = setup
        rep = evaluate(params, genes, dag, vocab, seeds=(0, 1))
        row = rep.table_row()
        for m in ("top1", "top5", "top1_depth", "top5_depth"):
            mean_s, pm, std_s = row[m].split()
            assert pm == "±"
            assert float(mean_s) == pytest.approx(rep.mean[m], abs=0.005)
            assert float(std_s) == pytest.approx(rep.std[m], abs=0.005)

    def test_json_round_trip_fields(self, setup):
        import json
        dag, vocab, params, genes = setup
        rep = evaluate(params, genes, dag, vocab, seeds=(0, 1),
                       config={"note": "x"})
        obj = json.loads(rep.to_json())
        assert set(obj) == {"mean", "std", "per_seed", "counts", "seeds", "config"}
        assert obj["config"] == {"note": "x"}


class TestQueryModes:
    @pytest.fixture
    def setup(self, eval_setup):
        dag, vocab, params, _ = eval_setup
        return dag, vocab, params

    def test_restricted_ranking_candidates_and_probs(self, setup):
        dag, vocab, params = setup
        ns = dag.terms[dag.ordering[0]].namespace
        depth = 1
        expected = sorted(t for t in vocab.terms
                          if dag.terms[t].namespace == ns
                          and dag.has_depth(t) and dag.depth(t) == depth)
        if not expected:
            pytest.skip("no terms at depth 1")
        known = [t for t in dag.ordering if t not in expected][:3]
        ranked = restricted_ranking(params, known, ns, depth, dag, vocab)
        assert sorted(t for t, _ in ranked) == expected
        probs = [p for _, p in ranked]
        assert probs == sorted(probs, reverse=True)
        assert sum(probs) == pytest.approx(1.0)

    def test_restricted_ranking_no_candidates(self, setup):
        dag, vocab, params = setup
        ns = dag.terms[dag.ordering[0]].namespace
        with pytest.raises(EvaluationError):
            restricted_ranking(params, [dag.ordering[0]], ns, 99, dag, vocab)

    def test_unknown_term_rejected(self, setup):
        dag, vocab, params = setup
        ns = dag.terms[dag.ordering[0]].namespace
        with pytest.raises(UnknownTermError):
            restricted_ranking(params, ["GO:9999999"], ns, 1, dag, vocab)

    def test_predecessor_ranking(self, setup):
        dag, vocab, params = setup
        anchor = next(t for t in dag.ordering if dag.predecessors(t))
        ranked = predecessor_ranking(params, [dag.ordering[0]], anchor, dag, vocab)
        assert sorted(t for t, _ in ranked) == sorted(dag.predecessors(anchor))
        assert sum(p for _, p in ranked) == pytest.approx(1.0)

    def test_predecessor_ranking_leaf_anchor(self, setup):
        dag, vocab, params = setup
        leaf = sorted(leaves(dag))[0]
        with pytest.raises(EvaluationError):
            predecessor_ranking(params, [dag.ordering[0]], leaf, dag, vocab)


class TestAblationHarness:
    def _fake_reports(self):
        reports = {}
        for i, (_, label) in enumerate(ABLATION_ROWS):
            vals = {m: [10.0 * i + j for j in range(3)]
                    for m in ("top1", "top5", "top1_depth", "top5_depth")}
            reports[label] = EvalReport(
                mean={m: float(np.mean(v)) for m, v in vals.items()},
                std={m: float(np.std(v, ddof=1)) for m, v in vals.items()},
                per_seed=vals,
                counts={m: [(0, 1)] * 3 for m in vals},
                seeds=[0, 1, 2])
        return reports

    def test_tsv_layout(self):
        tsv = ablation_tsv(self._fake_reports())
        lines = tsv.strip().split("\n")
        assert lines[0] == "method\ttop1\ttop5\ttop1_depth\ttop5_depth"
        assert len(lines) == 5
        labels = [l.split("\t")[0] for l in lines[1:]]
        assert labels == [label for _, label in ABLATION_ROWS]
        assert lines[1].split("\t")[1] == "1.00 ± 1.00"

    def test_text_table_layout(self):
        text = ablation_text_table(self._fake_reports())
        lines = text.strip().split("\n")
        assert lines[0].startswith("Method")
        assert set(lines[1]) == {"-"}
        assert len(lines) == 6
        assert lines[-1].startswith("full")

    def test_suite_runs_all_rows_and_is_deterministic(self):
        dag, vocab, table = tiny_world(n_terms=12, dim=16)
        texts = {t: render_term_text(dag.terms[t]) for t in dag.terms}
        genes = some_genes(dag, 8, seed=2)
        mc = tiny_model(dag, vocab, hidden=16)
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
        kwargs = dict(train_examples=genes[:6], test_examples=genes[6:],
                      dag=dag, vocab=vocab, texts=texts, embed_dim=16,
                      seeds=(0, 1))
        a = run_ablation_suite(cfg, mc, **kwargs)
        assert list(a) == [label for _, label in ABLATION_ROWS]
        for label, rep in a.items():
            assert len(rep.per_seed["top1"]) == 2
        b = run_ablation_suite(cfg, mc, **kwargs)
        assert ablation_tsv(a) == ablation_tsv(b)
