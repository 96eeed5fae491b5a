"""Top-k evaluation (overall and depth-aware), case-study query modes, and
the ablation comparison harness."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import GeneExample
from .masking import IGNORE, collate, mask_candidates, sample_mask
from .model import ModelConfig, ModelParameters, forward
from .ontology import GoDag, UnknownTermError
from .vocab import MASK, MASK_ID, Vocabulary

DEFAULT_MASK_SEEDS = (0, 1, 2, 3, 4)


class EvaluationError(Exception):
    pass


def _vocab_depths(vocab: Vocabulary, dag: GoDag) -> np.ndarray:
    """Depth per vocab index; -1 for specials and depthless terms."""
    depths = np.full(len(vocab), -1, dtype=np.int64)
    for term in vocab.terms:
        if dag.has_depth(term):
            depths[vocab.id(term)] = dag.depth(term)
    return depths


def _rank_of(logits: np.ndarray, candidate_ids: np.ndarray, truth_id: int) -> int:
    """1-based rank of truth among candidates; ties broken by ascending
    vocab index (== ascending term id)."""
    scores = logits[candidate_ids]
    order = candidate_ids[np.argsort(-scores, kind="stable")]
    return int(np.nonzero(order == truth_id)[0][0]) + 1


@dataclass
class PositionScores:
    """Masked-position logits plus ground truth, shared by all metrics."""
    logits: list[np.ndarray]
    truth_ids: list[int]
    input_ids: list[np.ndarray]


def _score_positions(params: ModelParameters, examples: list[GeneExample],
                     dag: GoDag, vocab: Vocabulary, seed: int,
                     alpha_mask: float = 0.15, max_len: int = 64,
                     batch_size: int = 64) -> PositionScores:
    scores = PositionScores(logits=[], truth_ids=[], input_ids=[])
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        plans = []
        for i, ex in enumerate(chunk):
            sub = int(np.random.SeedSequence([seed, lo + i]).generate_state(1)[0])
            cands = mask_candidates(ex, dag)
            plans.append(sample_mask(ex, cands, alpha_mask, sub))
        if not any(p.selected for p in plans):
            continue
        batch = collate(chunk, plans, vocab, dag, max_len=max_len)
        out = forward(params, batch)
        sup = np.argwhere(batch.labels != IGNORE)
        for b, s in sup:
            scores.logits.append(out.mlm_logits[b, s])
            scores.truth_ids.append(int(batch.labels[b, s]))
            scores.input_ids.append(batch.input_ids[b])
    return scores


def topk_from_scores(scores: PositionScores, vocab: Vocabulary, k: int,
                     exclude_input_terms: bool = False) -> tuple[int, int]:
    """(correct, total) over masked positions, ranking all non-special
    vocabulary entries."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    all_terms = np.arange(vocab.first_term_id, len(vocab))
    correct = 0
    for logits, truth, inp in zip(scores.logits, scores.truth_ids, scores.input_ids):
        cands = all_terms
        if exclude_input_terms:
            present = set(int(t) for t in inp if t >= vocab.first_term_id)
            present.discard(truth)
            cands = np.array([c for c in all_terms if int(c) not in present])
        if _rank_of(logits, cands, truth) <= k:
            correct += 1
    return correct, len(scores.truth_ids)


def topk_at_depth_from_scores(scores: PositionScores, vocab: Vocabulary,
                              dag: GoDag, k: int) -> tuple[int, int, int]:
    """(correct, total, skipped): candidates restricted to vocabulary terms
    at the truth's exact depth; depthless truths are skipped."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    depths = _vocab_depths(vocab, dag)
    correct = total = skipped = 0
    for logits, truth in zip(scores.logits, scores.truth_ids):
        d = depths[truth]
        if d < 0:
            skipped += 1
            continue
        cands = np.nonzero(depths == d)[0]
        if _rank_of(logits, cands, truth) <= k:
            correct += 1
        total += 1
    return correct, total, skipped


def topk_accuracy(params: ModelParameters, examples: list[GeneExample],
                  dag: GoDag, vocab: Vocabulary, k: int, seed: int,
                  alpha_mask: float = 0.15, exclude_input_terms: bool = False) -> float:
    scores = _score_positions(params, examples, dag, vocab, seed, alpha_mask)
    correct, total = topk_from_scores(scores, vocab, k, exclude_input_terms)
    return 100.0 * correct / total if total else 0.0


def topk_accuracy_at_depth(params: ModelParameters, examples: list[GeneExample],
                           dag: GoDag, vocab: Vocabulary, k: int, seed: int,
                           alpha_mask: float = 0.15) -> float:
    scores = _score_positions(params, examples, dag, vocab, seed, alpha_mask)
    correct, total, _ = topk_at_depth_from_scores(scores, vocab, dag, k)
    return 100.0 * correct / total if total else 0.0


def bucketed_topk_by_depth(scores: PositionScores, vocab: Vocabulary,
                           dag: GoDag, k: int) -> dict[int, float]:
    """Alternative 'w/ depth' reading: unrestricted ranking, results grouped
    by ground-truth depth."""
    depths = _vocab_depths(vocab, dag)
    all_terms = np.arange(vocab.first_term_id, len(vocab))
    hits: dict[int, list[int]] = {}
    for logits, truth in zip(scores.logits, scores.truth_ids):
        d = int(depths[truth])
        if d < 0:
            continue
        ok = _rank_of(logits, all_terms, truth) <= k
        hits.setdefault(d, []).append(int(ok))
    return {d: 100.0 * sum(v) / len(v) for d, v in sorted(hits.items())}


# -- evaluation report ---------------------------------------------------------

METRIC_KEYS = ("top1", "top5", "top1_depth", "top5_depth")


@dataclass
class EvalReport:
    mean: dict[str, float]
    std: dict[str, float]
    per_seed: dict[str, list[float]]
    counts: dict[str, list[tuple[int, int]]]   # (correct, total) per seed
    seeds: list[int]
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std,
                           "per_seed": self.per_seed, "counts": self.counts,
                           "seeds": self.seeds, "config": self.config},
                          sort_keys=True, indent=1) + "\n"

    def table_row(self) -> dict[str, str]:
        return {m: f"{self.mean[m]:.2f} ± {self.std[m]:.2f}" for m in METRIC_KEYS}


def evaluate(params: ModelParameters, examples: list[GeneExample], dag: GoDag,
             vocab: Vocabulary, seeds=DEFAULT_MASK_SEEDS, ks=(1, 5),
             alpha_mask: float = 0.15, config: dict | None = None) -> EvalReport:
    """Top-1/top-5 accuracy, overall and depth-restricted, mean +- sample std
    over the mask seeds."""
    per_seed: dict[str, list[float]] = {m: [] for m in METRIC_KEYS}
    counts: dict[str, list[tuple[int, int]]] = {m: [] for m in METRIC_KEYS}
    k1, k5 = ks
    for seed in seeds:
        scores = _score_positions(params, examples, dag, vocab, seed, alpha_mask)
        for k, key in ((k1, "top1"), (k5, "top5")):
            c, t = topk_from_scores(scores, vocab, k)
            per_seed[key].append(100.0 * c / t if t else 0.0)
            counts[key].append((c, t))
        for k, key in ((k1, "top1_depth"), (k5, "top5_depth")):
            c, t, _ = topk_at_depth_from_scores(scores, vocab, dag, k)
            per_seed[key].append(100.0 * c / t if t else 0.0)
            counts[key].append((c, t))
    mean = {m: float(np.mean(v)) for m, v in per_seed.items()}
    std = {m: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
           for m, v in per_seed.items()}
    return EvalReport(mean=mean, std=std, per_seed=per_seed, counts=counts,
                      seeds=list(seeds), config=config or {})


# -- case-study query modes ----------------------------------------------------

def _mask_query_logits(params: ModelParameters, known_terms: list[str],
                       dag: GoDag, vocab: Vocabulary) -> np.ndarray:
    """Forward one example of sorted known terms plus a trailing MASK; return
    the MLM logits at the MASK position."""
    for t in known_terms:
        if t not in vocab:
            raise UnknownTermError(t)
    terms = sorted(set(known_terms))
    ids = np.array([[vocab.id(t) for t in terms] + [MASK_ID]], dtype=np.int64)
    from .masking import MaskedBatch
    batch = MaskedBatch(input_ids=ids,
                        labels=np.full_like(ids, IGNORE),
                        attention_mask=np.ones_like(ids),
                        term_rows=np.full_like(ids, -1))
    out = forward(params, batch)
    return out.mlm_logits[0, -1]


def restricted_ranking(params: ModelParameters, known_terms: list[str],
                       namespace: str, depth: int, dag: GoDag,
                       vocab: Vocabulary) -> list[tuple[str, float]]:
    """Rank every term of the given namespace and depth by predicted
    probability at an appended MASK position."""
    cands = [t for t in vocab.terms
             if dag.terms[t].namespace == namespace
             and dag.has_depth(t) and dag.depth(t) == depth]
    if not cands:
        raise EvaluationError(f"no candidate terms at namespace={namespace} depth={depth}")
    logits = _mask_query_logits(params, known_terms, dag, vocab)
    cand_ids = np.array([vocab.id(t) for t in cands])
    z = logits[cand_ids] - logits[cand_ids].max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    return [(cands[i], float(probs[i])) for i in order]


def predecessor_ranking(params: ModelParameters, known_terms: list[str],
                        anchor: str, dag: GoDag,
                        vocab: Vocabulary) -> list[tuple[str, float]]:
    """Rank the anchor term's direct predecessors by MASK-position probability."""
    preds = sorted(dag.predecessors(anchor))
    preds = [t for t in preds if t in vocab]
    if not preds:
        raise EvaluationError(f"{anchor} has no predecessors")
    logits = _mask_query_logits(params, known_terms, dag, vocab)
    cand_ids = np.array([vocab.id(t) for t in preds])
    z = logits[cand_ids] - logits[cand_ids].max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    return [(preds[i], float(probs[i])) for i in order]


# -- ablation harness ----------------------------------------------------------

ABLATION_ROWS = (
    ("no_neighborhood", "w/o Neighborhood Prediction"),
    ("no_semantics", "w/o Semantic Information"),
    ("naive_masking", "w/o Masking Strategy"),
    ("none", "full"),
)


def run_ablation_suite(train_config, model_config: ModelConfig,
                       train_examples: list[GeneExample],
                       test_examples: list[GeneExample], dag: GoDag,
                       vocab: Vocabulary, texts: dict, embed_dim: int,
                       embed_seed: int = 0,
                       seeds=DEFAULT_MASK_SEEDS) -> dict[str, EvalReport]:
    """Train the full model plus the three ablations with shared seeds and
    evaluate each over the mask seeds. Returns one report per row."""
    from .embeddings import build_fallback, build_random
    from .training import TrainConfig, train

    reports: dict[str, EvalReport] = {}
    semantic = build_fallback(vocab, texts, embed_dim, seed=embed_seed)
    random_init = build_random(vocab, embed_dim, seed=embed_seed)
    for ablation, label in ABLATION_ROWS:
        cfg = TrainConfig.from_dict({**train_config.to_dict(), "ablation": ablation})
        provider = random_init if ablation == "no_semantics" else semantic
        result = train(cfg, model_config, train_examples, dag, vocab,
                       provider.matrix(vocab))
        reports[label] = evaluate(result.params, test_examples, dag, vocab,
                                  seeds=seeds, alpha_mask=cfg.alpha_mask,
                                  config={"ablation": ablation})
    return reports


def ablation_tsv(reports: dict[str, EvalReport]) -> str:
    lines = ["method\t" + "\t".join(METRIC_KEYS)]
    for label, rep in reports.items():
        row = rep.table_row()
        lines.append(label + "\t" + "\t".join(row[m] for m in METRIC_KEYS))
    return "\n".join(lines) + "\n"


def ablation_text_table(reports: dict[str, EvalReport]) -> str:
    headers = ["Method", "Top-1 Acc", "Top-5 Acc", "Top-1 Acc w/ depth",
               "Top-5 Acc w/ depth"]
    rows = [[label] + [rep.table_row()[m] for m in METRIC_KEYS]
            for label, rep in reports.items()]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(headers), sep] + [fmt(r) for r in rows]) + "\n"
