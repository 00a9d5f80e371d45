import csv
import io
import json

import numpy as np
import numpy.testing as npt
import pytest
import yaml
from click.testing import CliRunner

from msgblocks.cli import main
from msgblocks.config import RunConfig, load_config
from msgblocks.corpus import generate_synthetic, save_corpus
from msgblocks.harness import (METHODS, PUBLISHED_TABLE, RunResult, compare_all, evaluate, fit_method,
                               get_method, load_checkpoint, precision_recall, prepare_bench,
                               results_csv, results_text, save_checkpoint, write_report)

SMALL = {
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "t_max": 16, "vocab_size": 200},
    "training": {"epochs": 2, "batch_size": 16},
    "forest": {"n_trees": 5},
}


def small_config() -> RunConfig:
    return RunConfig.from_dict(SMALL)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(3, 30, 3, "conflict")


@pytest.fixture(scope="module")
def bench(corpus):
    return prepare_bench(corpus, small_config(), seed=11)


# -- grid ----------------------------------------------------------------------------


def test_grid_rows():
    got = [(m.id, m.encoder_mode, m.metadata_mode, m.head) for m in METHODS]
    assert got == [
        (1, "frozen", "none", "dense"), (2, "frozen", "none", "forest"),
        (3, "frozen", "concat", "dense"), (4, "frozen", "concat", "forest"),
        (5, "finetuned", "none", "dense"), (6, "finetuned", "none", "forest"),
        (7, "finetuned", "concat", "dense"), (8, "finetuned", "concat", "forest"),
        (9, "finetuned", "block", "average_combine"), (10, "finetuned", "block", "weighted_combine"),
    ]
    assert set(PUBLISHED_TABLE) == set(range(1, 11))
    assert PUBLISHED_TABLE[10] == (0.77, 0.40, 0.62, 0.53)


@pytest.mark.parametrize("bad", [0, 11, -1, "x"])
def test_invalid_method_id(bad):
    with pytest.raises(ValueError, match="invalid method"):
        get_method(bad)


# -- evaluation ----------------------------------------------------------------------


def test_evaluate_example():
    acc, conf = evaluate([0, 1, 1, 2, 2, 0], [0, 1, 2, 2, 0, 0], 3)
    assert acc == pytest.approx(4 / 6, abs=1e-9)
    npt.assert_array_equal(conf, [[2, 0, 1], [0, 1, 0], [0, 1, 1]])
    assert conf.sum() == 6
    prec, rec = precision_recall(conf)
    assert prec == pytest.approx([1.0, 0.5, 0.5])
    assert rec == pytest.approx([2 / 3, 1.0, 0.5])


def test_evaluate_errors_and_empty_class():
    with pytest.raises(ValueError):
        evaluate([0, 1], [0])
    with pytest.raises(ValueError):
        evaluate([], [])
    _, conf = evaluate([0, 0], [0, 0], 3)
    prec, rec = precision_recall(conf)
    assert prec == [1.0, 0.0, 0.0] and rec == [1.0, 0.0, 0.0]


def _row(method, acc, best=False):
    return RunResult(method, "toy", acc, [[1]], [1.0], [1.0], 0, {}, 0.5, best)


def test_report_formats(tmp_path):
    rows = [_row(1, 0.5), _row(10, 0.75, best=True)]
    parsed = list(csv.DictReader(io.StringIO(results_csv(rows))))
    assert [r["method"] for r in parsed] == ["1", "10"]
    assert float(parsed[1]["accuracy"]) == 0.75 and parsed[1]["best"] == "1"
    assert parsed[1]["published:Enron Emails"] == "0.53"
    text = results_text(rows)
    assert "0.7500 *" in text and "Method#" in text
    csv_path, txt_path = write_report(rows, tmp_path / "rep.csv")
    assert csv_path.name == "rep.csv" and txt_path.name == "rep.txt"
    assert txt_path.read_text() == text


# -- workbench -----------------------------------------------------------------------


def test_frozen_rows_share_embeddings(bench):
    embs = [bench.batch("train", get_method(i)).emb for i in (1, 2, 3, 4)]
    for e in embs[1:]:
        assert np.array_equal(embs[0], e)
    # the frozen encoder never moves: recomputing gives the same bits
    fresh = bench.frozen_encoder().encode(bench.batches["train"].tokens, bench.batches["train"].mask)[0]
    assert np.array_equal(fresh, embs[0])
    tuned = bench.batch("train", get_method(5)).emb
    assert not np.array_equal(tuned, embs[0])


def test_frozen_encoder_untouched_by_concat_training(bench):
    before = {p.name: p.value.copy() for p in bench.frozen_encoder().parameters()}
    fit_method(3, bench)
    for p in bench.frozen_encoder().parameters():
        assert np.array_equal(p.value, before[p.name])


@pytest.mark.parametrize("method", range(1, 11))
def test_checkpoint_round_trip(bench, corpus, method, tmp_path):
    fitted = fit_method(method, bench)
    path = tmp_path / f"m{method}.npz"
    save_checkpoint(fitted, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == fitted.spec and loaded.classes == fitted.classes
    msgs = list(corpus.messages[:40])
    la, pa = fitted.predict(msgs)
    lb, pb = loaded.predict(msgs)
    assert la == lb
    assert np.array_equal(pa, pb)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.array(json.dumps({"format": "other"})))
    with pytest.raises(ValueError, match="not a"):
        load_checkpoint(path)


def test_compare_subset_flags_best(bench):
    rows = compare_all(bench, "toy", methods=(1, 3))
    assert [r.method for r in rows] == [1, 3]
    best = max(r.accuracy for r in rows)
    assert [r.best for r in rows] == [r.accuracy == best for r in rows]
    for r in rows:
        assert sum(map(sum, r.confusion)) == len(bench.datasets["test"])


# -- config --------------------------------------------------------------------------


def test_config_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    cfg = load_config(path)
    assert cfg.model.d_model == 8 and cfg.training.epochs == 2 and cfg.forest.n_trees == 5
    assert cfg.model.n_heads == 2 and cfg.split.train == 0.6
    assert load_config(None) == RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [{"modle": {}}, {"model": {"depth": 3}}])
def test_config_unknown_keys(bad):
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict(bad)


def test_config_replace():
    cfg = RunConfig().replace(training={"epochs": 3})
    assert cfg.training.epochs == 3 and cfg.training.batch_size == RunConfig().training.batch_size


# -- command line --------------------------------------------------------------------


def test_cli_end_to_end(tmp_path):
    runner = CliRunner()
    corpus_path = tmp_path / "syn.jsonl"
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(SMALL))

    r = runner.invoke(main, ["synth", "--mode", "metadata_only", "--seed", "2", "--n-per-class", "20",
                             "--out", str(corpus_path)])
    assert r.exit_code == 0, r.output
    assert len(corpus_path.read_text().splitlines()) == 80

    feat = tmp_path / "feat.json"
    r = runner.invoke(main, ["featurize", "--corpus", str(corpus_path), "--out", str(feat)])
    assert r.exit_code == 0, r.output
    assert json.loads(feat.read_text())["format"] == "msgblocks-featurizer"

    ckpt = tmp_path / "m10.npz"
    r = runner.invoke(main, ["train", "--corpus", str(corpus_path), "--method", "10", "--config",
                             str(cfg_path), "--seed", "1", "--out", str(ckpt), "--featurizer", str(feat)])
    assert r.exit_code == 0, r.output
    assert "test accuracy" in r.output

    r = runner.invoke(main, ["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus_path), "--json"])
    assert r.exit_code == 0, r.output
    metrics = json.loads(r.output)
    assert metrics["method"] == 10 and 0.0 <= metrics["accuracy"] <= 1.0
    assert np.asarray(metrics["confusion"]).sum() == 80

    r = runner.invoke(main, ["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus_path)])
    assert r.exit_code == 0 and "accuracy" in r.output


def test_cli_compare_writes_report(tmp_path):
    ds = generate_synthetic(0, 15, 2, "conflict")
    corpus_path = tmp_path / "c.jsonl"
    save_corpus(ds, corpus_path)
    cfg = dict(SMALL, methods=[1, 2, 9])
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    r = CliRunner().invoke(main, ["compare", "--corpus", str(corpus_path), "--config", str(cfg_path),
                                  "--report", str(tmp_path / "rep")])
    assert r.exit_code == 0, r.output
    rows = list(csv.DictReader((tmp_path / "rep.csv").open()))
    assert [row["method"] for row in rows] == ["1", "2", "9"]
    assert (tmp_path / "rep.txt").exists()


def test_cli_errors(tmp_path):
    runner = CliRunner()
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    r = runner.invoke(main, ["train", "--corpus", str(bad), "--method", "11", "--out", "x"])
    assert r.exit_code != 0
    r = runner.invoke(main, ["synth", "--mode", "nope", "--out", str(tmp_path / "o")])
    assert r.exit_code != 0
    r = runner.invoke(main, ["methods"])
    assert r.exit_code == 0 and len(r.output.splitlines()) == 10
