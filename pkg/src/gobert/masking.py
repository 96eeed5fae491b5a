"""DAG-aware masking: exclude roots and terms whose predecessor co-occurs in
the gene's annotation set, sample at alpha_mask, corrupt 80/10/10."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import GeneExample
from .ontology import GoDag
from .vocab import MASK_ID, PAD_ID, Vocabulary

IGNORE = -100


class MaskingError(Exception):
    pass


@dataclass
class MaskPlan:
    gene: str
    candidates: list[int]                    # positions eligible for corruption
    selected: list[tuple[int, str]]          # (position, action); action in mask|random|keep
    alpha_mask: float
    seed: int

    @property
    def usable(self) -> bool:
        """False when the example offers no MLM supervision at all."""
        return bool(self.selected)

    def to_json(self) -> str:
        return json.dumps({"gene": self.gene, "candidates": self.candidates,
                           "selected": [[p, a] for p, a in self.selected],
                           "alpha_mask": self.alpha_mask, "seed": self.seed},
                          separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MaskPlan":
        obj = json.loads(line)
        return cls(gene=obj["gene"], candidates=obj["candidates"],
                   selected=[(p, a) for p, a in obj["selected"]],
                   alpha_mask=obj["alpha_mask"], seed=obj["seed"])


def mask_candidates(example: GeneExample, dag: GoDag, naive: bool = False) -> list[int]:
    """Positions eligible for masking.

    Default rule: the term is not a namespace root, and none of its direct
    predecessors appears in the gene's own term set (a present predecessor
    makes the masked term trivially inferable). ``naive=True`` skips both
    exclusions (masking-strategy ablation).
    """
    if naive:
        return list(range(len(example.terms)))
    roots = dag.root_ids()
    term_set = set(example.terms)
    out = []
    for pos, term in enumerate(example.terms):
        if term in roots:
            continue
        if dag.predecessors(term) & term_set:
            continue
        out.append(pos)
    return out


def sample_mask(example: GeneExample, candidates: list[int], alpha_mask: float,
                seed: int, force_one: bool = True) -> MaskPlan:
    """Independent Bernoulli(alpha_mask) selection over candidates, then
    80/10/10 mask/random/keep assignment per selected position.

    If the Bernoulli pass selects nothing but candidates exist, one uniform
    candidate is forced so short genes still contribute MLM signal.
    """
    if not 0.0 < alpha_mask <= 1.0:
        raise MaskingError(f"alpha_mask must be in (0, 1], got {alpha_mask}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x3A5])))
    picks = [p for p in candidates if rng.random() < alpha_mask]
    if not picks and candidates and force_one:
        picks = [candidates[int(rng.integers(len(candidates)))]]
    selected = []
    for pos in picks:
        u = rng.random()
        action = "mask" if u < 0.8 else ("random" if u < 0.9 else "keep")
        selected.append((pos, action))
    return MaskPlan(gene=example.gene, candidates=list(candidates),
                    selected=selected, alpha_mask=alpha_mask, seed=seed)


def plan_masks(examples: list[GeneExample], dag: GoDag, alpha_mask: float,
               seed: int, naive: bool = False, force_one: bool = True) -> list[MaskPlan]:
    """Per-example plans with seeds derived from (seed, example index)."""
    plans = []
    for idx, ex in enumerate(examples):
        sub = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        cands = mask_candidates(ex, dag, naive=naive)
        plans.append(sample_mask(ex, cands, alpha_mask, sub, force_one=force_one))
    return plans


@dataclass
class MaskedBatch:
    input_ids: np.ndarray        # [B, S] vocab indices, PAD-padded
    labels: np.ndarray           # [B, S] vocab indices or IGNORE
    attention_mask: np.ndarray   # [B, S] 1 at real tokens
    term_rows: np.ndarray        # [B, S] label-space index of the ORIGINAL term, -1 at PAD

    @property
    def shape(self):
        return self.input_ids.shape


def collate(examples: list[GeneExample], plans: list[MaskPlan],
            vocab: Vocabulary, dag: GoDag, max_len: int = 64) -> MaskedBatch:
    """PAD-pad examples to a rectangle and apply the mask plans.

    ``term_rows`` keeps each position's original term (as an index into the
    dag ordering) so neighborhood targets stay well-defined at corrupted
    positions.
    """
    if len(examples) != len(plans):
        raise MaskingError("examples and plans must be parallel")
    lengths = [len(ex.terms) for ex in examples]
    if max(lengths, default=0) > max_len:
        raise MaskingError(f"example longer than max_len={max_len}")
    B, S = len(examples), max(lengths, default=0)
    input_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    labels = np.full((B, S), IGNORE, dtype=np.int64)
    attention = np.zeros((B, S), dtype=np.int64)
    term_rows = np.full((B, S), -1, dtype=np.int64)

    n_specials = vocab.first_term_id
    n_terms = len(vocab) - n_specials
    for b, (ex, plan) in enumerate(zip(examples, plans)):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([plan.seed, 0x7A4D])))
        for s, term in enumerate(ex.terms):
            input_ids[b, s] = vocab.id(term)
            attention[b, s] = 1
            term_rows[b, s] = dag.index[term]
        for pos, action in plan.selected:
            labels[b, pos] = vocab.id(ex.terms[pos])
            if action == "mask":
                input_ids[b, pos] = MASK_ID
            elif action == "random":
                input_ids[b, pos] = n_specials + int(rng.integers(n_terms))
            # "keep" leaves the original id
    return MaskedBatch(input_ids=input_ids, labels=labels,
                       attention_mask=attention, term_rows=term_rows)
