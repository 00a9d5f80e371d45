"""Command line entry point: ``msgblocks <command>``."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click

from . import featurizer as fz
from .blocks import Preprocessor
from .config import load_config
from .corpus import CorpusError, SplitSpec, generate_synthetic, load_corpus, prepare_subset, save_corpus, split
from .harness import (METHODS, Workbench, compare_all, evaluate, get_method, load_checkpoint,
                      precision_recall, prepare_bench, results_text, run_method, save_checkpoint,
                      write_report)


def _load(path):
    try:
        return load_corpus(path)
    except CorpusError as exc:
        raise click.ClickException(str(exc)) from exc


def _splits(ds, cfg, seed):
    sp = cfg.split
    return split(ds, SplitSpec(sp.train, sp.val, sp.test, seed))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Message classification with jointly trained text and metadata blocks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--mode", type=click.Choice(["metadata_only", "conflict"]), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--n-per-class", type=int, default=500, show_default=True)
@click.option("--n-classes", type=int, default=4, show_default=True)
@click.option("--conflict-fraction", type=float, default=0.3, show_default=True)
@click.option("--imbalance", type=float, default=0.0, show_default=True)
def synth(mode, seed, out, n_per_class, n_classes, conflict_fraction, imbalance):
    """Write a synthetic JSONL corpus."""
    ds = generate_synthetic(seed, n_per_class, n_classes, mode, conflict_fraction, imbalance)
    save_corpus(ds, out)
    click.echo(f"wrote {len(ds)} messages ({len(ds.label_set)} classes) to {out}")


@main.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cap", type=int, required=True, help="First N messages per class.")
@click.option("--keep", type=int, required=True, help="Longest K of those per class.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def prepare(corpus, cap, keep, out):
    """Cap each class, drop text-less messages and keep the longest texts."""
    ds = prepare_subset(_load(corpus), cap, keep)
    save_corpus(ds, out)
    click.echo(f"kept {len(ds)} messages: {ds.class_counts()}")


@main.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
def featurize(corpus, out, config_path, seed):
    """Fit the metadata featurizer on the training split and save it as JSON."""
    cfg = load_config(config_path)
    train_ds, _, _ = _splits(_load(corpus), cfg, seed)
    model = fz.fit(train_ds, cfg.featurizer)
    model.save(out)
    click.echo(f"featurizer: {model.dim} slots -> {out}")


@main.command("train")
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", type=click.IntRange(1, 10), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--featurizer", "featurizer_path", type=click.Path(exists=True, dir_okay=False),
              help="Reuse a featurizer written by `featurize` instead of refitting.")
def train_cmd(corpus, method, config_path, seed, out, featurizer_path):
    """Train one method and write a checkpoint."""
    cfg = load_config(config_path)
    train_ds, val_ds, test_ds = _splits(_load(corpus), cfg, seed)
    pre = Preprocessor.fit(train_ds, cfg.model, cfg.featurizer)
    if featurizer_path:
        pre.featurizer = fz.FeaturizerModel.load(featurizer_path)
    bench = Workbench(train_ds, val_ds, test_ds, cfg, seed, pre)
    result, fitted = run_method(get_method(method), bench, Path(corpus).stem, return_model=True)
    save_checkpoint(fitted, out)
    click.echo(f"method {method}: test accuracy {result.accuracy:.4f} -> {out}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--json", "as_json", is_flag=True, help="Print metrics as JSON.")
def eval_cmd(checkpoint, corpus, as_json):
    """Evaluate a checkpoint on every message of a corpus."""
    fitted = load_checkpoint(checkpoint)
    ds = _load(corpus)
    try:
        batch = fitted.preprocessor.encode(ds)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    pred, _ = fitted.predict_encoded(batch)
    acc, conf = evaluate(pred, batch.labels, len(fitted.classes))
    prec, rec = precision_recall(conf)
    if as_json:
        click.echo(json.dumps({"method": fitted.spec.id, "accuracy": acc, "classes": list(fitted.classes),
                               "confusion": conf.tolist(), "precision": prec, "recall": rec}))
        return
    click.echo(f"method {fitted.spec.id} ({fitted.spec.description})")
    click.echo(f"accuracy {acc:.4f} on {len(ds)} messages")
    width = max(len(c) for c in fitted.classes)
    for c, row, p, r in zip(fitted.classes, conf, prec, rec):
        click.echo(f"  {c:>{width}}  {' '.join(f'{v:5d}' for v in row)}   P={p:.3f} R={r:.3f}")


@main.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), required=True,
              help="Report path; REPORT.csv and REPORT.txt are written.")
def compare(corpus, config_path, seed, report):
    """Run the method grid on one corpus and write the results table."""
    cfg = load_config(config_path)
    bench = prepare_bench(_load(corpus), cfg, seed)
    rows = compare_all(bench, Path(corpus).stem)
    csv_path, txt_path = write_report(rows, report)
    click.echo(results_text(rows), nl=False)
    click.echo(f"wrote {csv_path} and {txt_path}")


@main.command("methods")
def list_methods():
    """List the method grid."""
    for m in METHODS:
        click.echo(f"{m.id:2d}  {m.encoder_mode:9s} {m.metadata_mode:6s} {m.head:16s} {m.description}")


if __name__ == "__main__":
    main()
