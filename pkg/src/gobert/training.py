"""Seeded pretraining loop: batching, Adam updates, per-epoch metrics and
checkpoints, and the three ablation configurations.

Every random draw is keyed by (seed, epoch, step) through SeedSequence, so a
run resumed from a checkpoint continues bitwise-identically to an
uninterrupted one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .corpus import GeneExample
from .masking import collate, mask_candidates, sample_mask
from .model import (ModelConfig, ModelParameters, ModelError, gradients,
                    init_parameters, read_checkpoint, write_checkpoint)
from .ontology import GoDag
from .vocab import Vocabulary

ABLATIONS = ("none", "no_neighborhood", "no_semantics", "naive_masking")


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lam: float = 0.5
    alpha_mask: float = 0.15
    neg_downsample: float = 0.001
    ablation: str = "none"
    max_len: int = 64
    warmup_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be > 0, got {self.lr}")
        if self.ablation not in ABLATIONS:
            raise TrainingError(f"unknown ablation {self.ablation!r}; "
                                f"choose from {ABLATIONS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   v={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   step=0)


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, arr in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        arr -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(arr.dtype)


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


@dataclass
class TrainResult:
    params: ModelParameters
    state: AdamState
    metrics: list[dict]
    aborted: bool = False


def train(config: TrainConfig, model_config: ModelConfig,
          examples: list[GeneExample], dag: GoDag, vocab: Vocabulary,
          token_embedding: np.ndarray, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          metrics_path: str | Path | None = None) -> TrainResult:
    """Pretrain on ``examples`` (already restricted to the train split).

    Fresh mask plans are drawn every epoch. Writes one checkpoint per epoch
    into ``out_dir`` (when given) and appends one JSONL metrics record per
    epoch to ``metrics_path``. On a non-finite loss the run aborts with the
    last finished epoch's checkpoint retained.
    """
    if not examples:
        raise TrainingError("empty training set")
    model_config = _apply_ablation(config, model_config)
    adjacency = dag.adjacency_matrix()
    naive = config.ablation == "naive_masking"

    start_epoch = 0
    if resume_from is not None:
        params, extras, meta = read_checkpoint(resume_from)
        state = AdamState(
            m={k[len("adam_m/"):]: v for k, v in extras.items() if k.startswith("adam_m/")},
            v={k[len("adam_v/"):]: v for k, v in extras.items() if k.startswith("adam_v/")},
            step=int(meta["step"]))
        start_epoch = int(meta["epoch"]) + 1
    else:
        params = init_parameters(model_config, token_embedding,
                                 seed=_derived_seed(config.seed, 0x1817))
        state = AdamState.zeros_like(params)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    aborted = False

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, 0x5F, epoch])))
        order = rng.permutation(len(examples))
        sums = {"total": 0.0, "mlm": 0.0, "nbr": 0.0}
        steps = 0
        step_in_epoch = 0
        try:
            for lo in range(0, len(order), config.batch_size):
                idxs = order[lo:lo + config.batch_size]
                batch_examples = [examples[i] for i in idxs]
                plans = []
                for i, ex in zip(idxs, batch_examples):
                    cands = mask_candidates(ex, dag, naive=naive)
                    plans.append(sample_mask(
                        ex, cands, config.alpha_mask,
                        _derived_seed(config.seed, 0x4A5C, epoch, int(i))))
                if not any(p.selected for p in plans):
                    step_in_epoch += 1
                    continue
                batch = collate(batch_examples, plans, vocab, dag,
                                max_len=config.max_len)
                losses, grads = gradients(
                    params, batch, adjacency=adjacency,
                    seed=_derived_seed(config.seed, 0x57E9, epoch, step_in_epoch))
                lr = config.lr
                if config.warmup_steps and state.step < config.warmup_steps:
                    lr *= (state.step + 1) / config.warmup_steps
                adam_step(params, grads, state, lr,
                          config.beta1, config.beta2, config.eps)
                sums["total"] += losses.total
                sums["mlm"] += losses.mlm
                if losses.neighborhood is not None:
                    sums["nbr"] += losses.neighborhood
                steps += 1
                step_in_epoch += 1
        except ModelError:
            aborted = True

        if aborted:
            break
        record = {"epoch": epoch,
                  "loss_total": sums["total"] / max(steps, 1),
                  "loss_im": sums["mlm"] / max(steps, 1),
                  "seconds": time.perf_counter() - t0}
        if model_config.neighbor_head:
            record["loss_ex"] = sums["nbr"] / max(steps, 1)
        metrics.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if out_dir is not None:
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", params, state,
                            epoch=epoch, config=config)
    return TrainResult(params=params, state=state, metrics=metrics, aborted=aborted)


def _apply_ablation(config: TrainConfig, model_config: ModelConfig) -> ModelConfig:
    mc = ModelConfig.from_dict(model_config.to_dict())
    mc.lam = config.lam
    mc.neg_downsample = config.neg_downsample
    if config.ablation == "no_neighborhood":
        mc.neighbor_head = False
        mc.lam = 0.0
    return mc


def save_checkpoint(path: str | Path, params: ModelParameters, state: AdamState,
                    epoch: int, config: TrainConfig) -> None:
    extras = {}
    for k, arr in state.m.items():
        extras[f"adam_m/{k}"] = arr
    for k, arr in state.v.items():
        extras[f"adam_v/{k}"] = arr
    write_checkpoint(path, params, extra_arrays=extras,
                     meta={"epoch": epoch, "step": state.step,
                           "train_config": config.to_dict()})
