"""Single entry point wiring every stage into reproducible batch workflows.

Exit codes: 0 success, 1 validation or domain failure, 2 usage error.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .corpus import (CorpusError, CorpusSplit, LoadStats, dedupe_examples,
                     kmeans_split, load_annotations, read_corpus, write_corpus)
from .embeddings import EmbeddingError, build_fallback, build_random, load_embeddings, render_term_text
from .evaluation import (EvaluationError, ablation_text_table, ablation_tsv,
                         bucketed_topk_by_depth, evaluate, predecessor_ranking,
                         restricted_ranking, run_ablation_suite, _score_positions)
from .model import ModelConfig, ModelError, read_checkpoint
from .ontology import (DagValidationError, OboParseError, OntologyError,
                       edges_to_tsv, is_term_id, parse_obo, terms_to_json, validate)
from .training import ABLATIONS, TrainConfig, TrainingError, train
from .vocab import Vocabulary

DOMAIN_ERRORS = (OntologyError, CorpusError, EmbeddingError, ModelError,
                 TrainingError, EvaluationError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, subcommand: str, config: dict,
                    inputs: dict[str, Path], seed: int | None) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in inputs.items()},
        "seed": seed,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_dag(obo_path: Path, allow_violations: bool = False):
    return parse_obo(obo_path.read_text(encoding="utf-8"), strict=not allow_violations)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise click.BadParameter("ratios must be three comma-separated numbers")
    return tuple(parts)  # type: ignore[return-value]


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace("..", ",").split(",") if x != ""]


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _split_configs(flat: dict) -> tuple[dict, dict]:
    """Flat JSON keys -> (TrainConfig kwargs, ModelConfig kwargs)."""
    train_keys = set(TrainConfig().to_dict())
    model_keys = {"hidden", "layers", "heads", "ffn_dim", "embed_dim"}
    t = {k: v for k, v in flat.items() if k in train_keys}
    m = {k: v for k, v in flat.items() if k in model_keys}
    unknown = set(flat) - train_keys - model_keys
    if unknown:
        raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
    return t, m


@click.group()
@click.version_option(__version__)
def main():
    """Ontology-informed gene-function pretraining toolkit."""


def _domain_guard(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DOMAIN_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


@main.command("parse-obo")
@click.option("--obo", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--allow-violations", is_flag=True, default=False)
@_domain_guard
def cmd_parse_obo(obo: Path, out: Path, allow_violations: bool):
    """Parse an OBO file; export the edge list, term table, and validation report."""
    out.mkdir(parents=True, exist_ok=True)
    dag = _load_dag(obo, allow_violations=allow_violations)
    report = validate(dag)
    (out / "edges.tsv").write_text(edges_to_tsv(dag), encoding="utf-8")
    (out / "terms.json").write_text(terms_to_json(dag), encoding="utf-8")
    (out / "validation.txt").write_text(report.summary() + "\n", encoding="utf-8")
    _write_manifest(out, "parse-obo",
                    {"allow_violations": allow_violations,
                     "term_count": dag.term_count,
                     "edge_count": len(dag.edges),
                     "warnings": dag.warnings},
                    {"obo": obo}, seed=None)
    if not report.ok:
        click.echo(report.summary(), err=True)
        if not allow_violations:
            sys.exit(1)
    click.echo(f"{dag.term_count} active terms, {len(dag.edges)} edges")


@main.command("build-corpus")
@click.option("--annotations", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--obo", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True)
@click.option("--seed", type=int, default=0, envvar="GOBERT_SEED", show_default=True)
@click.option("--max-len", type=int, default=64, show_default=True)
@click.option("--embed-dim", type=int, default=256, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_domain_guard
def cmd_build_corpus(annotations: Path, obo: Path, k: int, ratios: str,
                     seed: int, max_len: int, embed_dim: int, out: Path):
    """Load gene annotations, dedupe, and K-means-split into train/valid/test."""
    ratios_t = _parse_ratios(ratios)
    out.mkdir(parents=True, exist_ok=True)
    dag = _load_dag(obo)
    stats = LoadStats()
    examples = load_annotations(annotations.read_text(encoding="utf-8"), dag,
                                max_len=max_len, stats=stats)
    examples = dedupe_examples(examples)
    vocab = Vocabulary.from_dag(dag)
    texts = {t: render_term_text(dag.terms[t]) for t in vocab.terms}
    provider = build_fallback(vocab, texts, embed_dim, seed=seed)
    if k == 1:
        genes = sorted(ex.gene for ex in examples)
        split = CorpusSplit(train=genes, valid=[], test=[], seed=seed, k=1)
    else:
        split = kmeans_split(examples, provider, k, ratios_t, seed)
    write_corpus(out / "corpus.jsonl", examples)
    (out / "split.json").write_text(split.to_json() + "\n", encoding="utf-8")
    shutil.copyfile(obo, out / "ontology.obo")
    _write_manifest(out, "build-corpus",
                    {"k": k, "ratios": list(ratios_t), "max_len": max_len,
                     "embed_dim": embed_dim, "genes": len(examples),
                     "train": len(split.train), "valid": len(split.valid),
                     "test": len(split.test),
                     "dropped_terms": stats.dropped_terms,
                     "skipped_genes": stats.skipped_genes},
                    {"annotations": annotations, "obo": obo}, seed=seed)
    click.echo(f"{len(examples)} genes -> train {len(split.train)} / "
               f"valid {len(split.valid)} / test {len(split.test)}")


def _load_corpus_dir(corpus_dir: Path):
    dag = _load_dag(corpus_dir / "ontology.obo")
    examples = read_corpus(corpus_dir / "corpus.jsonl")
    split = CorpusSplit.from_json((corpus_dir / "split.json").read_text(encoding="utf-8"))
    vocab = Vocabulary.from_dag(dag)
    return dag, examples, split, vocab


def _embedding_matrix(vocab, dag, embeddings: Path | None, dim: int, seed: int,
                      ablation: str):
    texts = {t: render_term_text(dag.terms[t]) for t in vocab.terms}
    if ablation == "no_semantics":
        return build_random(vocab, dim, seed=seed), texts
    if embeddings is not None:
        return load_embeddings(embeddings, vocab, dim, texts, seed=seed), texts
    return build_fallback(vocab, texts, dim, seed=seed), texts


@main.command("pretrain")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--embeddings", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--fallback", "use_fallback", is_flag=True, default=False,
              help="Use the deterministic hash-seeded embedding provider.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None)
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None, envvar="GOBERT_SEED")
@click.option("--resume", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_domain_guard
def cmd_pretrain(corpus_dir: Path, embeddings: Path | None, use_fallback: bool,
                 config_path: Path | None, ablation: str | None,
                 epochs: int | None, batch_size: int | None, lr: float | None,
                 seed: int | None, resume: Path | None, figures: bool, out: Path):
    """Pretrain on the corpus train split; write per-epoch checkpoints and metrics."""
    if embeddings is None and not use_fallback:
        use_fallback = True
    out.mkdir(parents=True, exist_ok=True)
    flat = _load_config_file(config_path)
    train_kwargs, model_kwargs = _split_configs(flat)
    for key, val in (("ablation", ablation), ("epochs", epochs),
                     ("batch_size", batch_size), ("lr", lr), ("seed", seed)):
        if val is not None:
            train_kwargs[key] = val
    train_cfg = TrainConfig(**train_kwargs)

    dag, examples, split, vocab = _load_corpus_dir(corpus_dir)
    train_genes = set(split.train)
    train_examples = [ex for ex in examples if ex.gene in train_genes]
    embed_dim = model_kwargs.pop("embed_dim", None) or model_kwargs.get("hidden", 256)
    model_cfg = ModelConfig(vocab_size=len(vocab), label_size=dag.term_count,
                            lam=train_cfg.lam, neg_downsample=train_cfg.neg_downsample,
                            embed_dim=None if embed_dim == model_kwargs.get("hidden", 256)
                            else embed_dim,
                            **model_kwargs)
    provider, _ = _embedding_matrix(vocab, dag, embeddings, embed_dim,
                                    train_cfg.seed, train_cfg.ablation)

    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    result = train(train_cfg, model_cfg, train_examples, dag, vocab,
                   provider.matrix(vocab), out_dir=out, resume_from=resume,
                   metrics_path=metrics_path)
    inputs = {"corpus": corpus_dir / "corpus.jsonl",
              "split": corpus_dir / "split.json",
              "obo": corpus_dir / "ontology.obo"}
    if embeddings is not None:
        inputs["embeddings"] = embeddings
    _write_manifest(out, "pretrain",
                    {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(),
                     "embedding_source": provider.source},
                    inputs, seed=train_cfg.seed)
    if figures and result.metrics:
        from .reporting import plot_loss_curves
        plot_loss_curves(result.metrics, out / "loss_curves.png")
    if result.aborted:
        click.echo("error: non-finite loss; last good checkpoint retained", err=True)
        sys.exit(1)
    click.echo(f"trained {len(result.metrics)} epochs; "
               f"final loss {result.metrics[-1]['loss_total']:.4f}")


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--k", "ks", default="1,5", show_default=True)
@click.option("--split", "which_split", type=click.Choice(["train", "valid", "test"]),
              default="test", show_default=True)
@click.option("--alpha-mask", type=float, default=0.15, show_default=True)
@click.option("--bucket-depth", is_flag=True, default=False,
              help="Also report per-depth buckets of unrestricted accuracy.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_domain_guard
def cmd_evaluate(checkpoint: Path, corpus_dir: Path, seeds: str, ks: str,
                 which_split: str, alpha_mask: float, bucket_depth: bool,
                 figures: bool, out: Path):
    """Top-1/top-5 accuracy (overall and depth-restricted) on a corpus split."""
    out.mkdir(parents=True, exist_ok=True)
    seed_list = _parse_int_list(seeds)
    k_list = _parse_int_list(ks)
    if len(k_list) != 2:
        raise click.UsageError("--k expects two comma-separated values, e.g. 1,5")
    dag, examples, split, vocab = _load_corpus_dir(corpus_dir)
    genes = set(getattr(split, which_split))
    subset = [ex for ex in examples if ex.gene in genes]
    if not subset:
        raise EvaluationError(f"split {which_split!r} is empty")
    params, _, meta = read_checkpoint(checkpoint)
    report = evaluate(params, subset, dag, vocab, seeds=seed_list,
                      ks=tuple(k_list), alpha_mask=alpha_mask,
                      config={"checkpoint": str(checkpoint), "split": which_split})
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    row = report.table_row()
    text = "\n".join(f"{m}: {row[m]}" for m in row) + "\n"
    if bucket_depth:
        scores = _score_positions(params, subset, dag, vocab, seed_list[0], alpha_mask)
        for k in k_list:
            buckets = bucketed_topk_by_depth(scores, vocab, dag, k)
            text += f"top-{k} by depth (unrestricted): " + ", ".join(
                f"d={d}: {pct:.2f}" for d, pct in buckets.items()) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    _write_manifest(out, "evaluate",
                    {"seeds": seed_list, "ks": k_list, "split": which_split,
                     "alpha_mask": alpha_mask},
                    {"checkpoint": checkpoint,
                     "corpus": corpus_dir / "corpus.jsonl"}, seed=seed_list[0])
    if figures:
        from .reporting import plot_eval_report
        plot_eval_report(report, out / "report.png")
    click.echo(text, nl=False)


@main.command("ablation")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--seed", type=int, default=None, envvar="GOBERT_SEED")
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_domain_guard
def cmd_ablation(corpus_dir: Path, config_path: Path | None, seeds: str,
                 seed: int | None, figures: bool, out: Path):
    """Train the full model plus three ablations and emit a comparison table."""
    out.mkdir(parents=True, exist_ok=True)
    flat = _load_config_file(config_path)
    train_kwargs, model_kwargs = _split_configs(flat)
    if seed is not None:
        train_kwargs["seed"] = seed
    train_cfg = TrainConfig(**train_kwargs)
    dag, examples, split, vocab = _load_corpus_dir(corpus_dir)
    train_genes, test_genes = set(split.train), set(split.test)
    train_examples = [ex for ex in examples if ex.gene in train_genes]
    test_examples = [ex for ex in examples if ex.gene in test_genes]
    embed_dim = model_kwargs.pop("embed_dim", None) or model_kwargs.get("hidden", 256)
    model_cfg = ModelConfig(vocab_size=len(vocab), label_size=dag.term_count,
                            **model_kwargs)
    from .embeddings import render_term_text as _render
    texts = {t: _render(dag.terms[t]) for t in vocab.terms}
    reports = run_ablation_suite(train_cfg, model_cfg, train_examples,
                                 test_examples, dag, vocab, texts, embed_dim,
                                 embed_seed=train_cfg.seed,
                                 seeds=_parse_int_list(seeds))
    (out / "ablation.tsv").write_text(ablation_tsv(reports), encoding="utf-8")
    table = ablation_text_table(reports)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    _write_manifest(out, "ablation",
                    {"train": train_cfg.to_dict(), "model": model_cfg.to_dict(),
                     "mask_seeds": _parse_int_list(seeds)},
                    {"corpus": corpus_dir / "corpus.jsonl",
                     "obo": corpus_dir / "ontology.obo"}, seed=train_cfg.seed)
    if figures:
        from .reporting import plot_ablation
        plot_ablation(reports, out / "ablation.png")
    click.echo(table, nl=False)


@main.command("predict")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--terms", required=True, help="Comma-separated known GO term ids.")
@click.option("--namespace", default=None)
@click.option("--depth", type=int, default=None)
@click.option("--predecessors-of", "anchor", default=None)
@click.option("--top", type=int, default=10, show_default=True)
@_domain_guard
def cmd_predict(checkpoint: Path, corpus_dir: Path, terms: str,
                namespace: str | None, depth: int | None, anchor: str | None,
                top: int):
    """Rank candidate functions for a MASK appended to the known terms."""
    known = [t.strip() for t in terms.split(",") if t.strip()]
    for t in known + ([anchor] if anchor else []):
        if not is_term_id(t):
            raise click.UsageError(f"invalid term id {t!r}")
    if anchor is not None and (namespace is not None or depth is not None):
        raise click.UsageError("--predecessors-of excludes --namespace/--depth")
    if anchor is None and (namespace is None or depth is None):
        raise click.UsageError("provide --namespace and --depth, or --predecessors-of")
    dag, _, _, vocab = _load_corpus_dir(corpus_dir)
    params, _, _ = read_checkpoint(checkpoint)
    if anchor is not None:
        ranked = predecessor_ranking(params, known, anchor, dag, vocab)
    else:
        ranked = restricted_ranking(params, known, namespace, depth, dag, vocab)
    for rank, (term, prob) in enumerate(ranked[:top], start=1):
        name = dag.terms[term].name
        click.echo(f"{rank}\t{term}\t{prob:.6f}\t{name}")


if __name__ == "__main__":
    main()
