import json
import re

import pytest

from psdiora import cli
from psdiora import diff_core as dc
from psdiora import train as tr
from psdiora.corpus_io import load_corpus, load_predictions, write_constraints


def run(*argv):
    return cli.main([str(a) for a in argv])


def kv(path):
    return dict(line.rstrip("\n").split("=", 1) for line in open(path, encoding="utf-8"))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 260, "--seed", 2, "--split", "200,30,30", "--out-dir", d / "data") == 0
    model = d / "m.npz"
    code = run(
        "train", "--train", d / "data/train.ptb", "--valid", d / "data/valid.ptb",
        "--constraints", d / "data/train.constraints.tsv", "--valid-constraints", d / "data/valid.constraints.tsv",
        "--dim", 8, "--max-epochs", 3, "--learning-rate", 0.01, "--batch-size", 16, "--out", model,
    )
    assert code == 0
    return d, model


def test_synth_outputs(workspace):
    d, _ = workspace
    for name in ("train", "valid", "test"):
        assert (d / f"data/{name}.ptb").exists() and (d / f"data/{name}.constraints.tsv").exists()
    assert len(load_corpus(d / "data/train.ptb", "ptb_brackets")) == 200
    man = json.loads((d / "data/synth.manifest.json").read_text())
    assert man["command"] == "synth" and len(man["config_hash"]) > 0
    assert "config=" in (d / "data/train.constraints.tsv").read_text().splitlines()[0]


def test_train_outputs_log_and_manifest(workspace):
    d, model = workspace
    lines = open(str(model) + ".log").read().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch=1 ")
    man = json.loads(open(str(model) + ".manifest.json").read())
    _, config, vocab, meta, _ = tr.load_model(model)
    assert man["train_config_hash"] == meta["config_hash"] == config.hash()
    assert man["vocab_hash"] == vocab.digest()


def test_parse_then_eval_reproduces_validation_f1(workspace):
    d, model = workspace
    pred = d / "valid.pred"
    assert run("parse", "--model", model, "--corpus", d / "data/valid.ptb", "--format", "ptb_brackets", "--out", pred) == 0
    assert run("eval", "--gold", d / "data/valid.ptb", "--pred", pred, "--report", d / "rep.txt") == 0
    best = max(
        (float(m.group(1)) for m in re.finditer(r"val_F1=([0-9.]+)", open(str(model) + ".log").read())),
    )
    assert kv(str(d / "rep.txt") + ".kv")["run0.F1"] == f"{best:.6f}"
    _, _, _, meta, _ = tr.load_model(model)
    assert open(pred).readline().startswith(f"# config={meta['config_hash']} vocab={meta['vocab_hash']}")


def test_constrained_parse_with_covered_constraints_is_identical(workspace):
    d, model = workspace
    plain = d / "plain.pred"
    assert run("parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets", "--out", plain) == 0
    trees, _ = load_predictions(plain)
    z = {i: set(sorted(t.spans())[:2]) for i, t in enumerate(trees) if t.spans()}
    write_constraints(z, d / "cover.tsv")
    cons = d / "cons.pred"
    assert run(
        "parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets",
        "--constraints", d / "cover.tsv", "--out", cons,
    ) == 0
    assert plain.read_bytes() == cons.read_bytes()
    assert json.loads(open(str(cons) + ".manifest.json").read())["decoder"] == "ccky"


def test_eval_extras_and_stats(workspace, capsys):
    d, model = workspace
    pred = d / "t.pred"
    run("parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets", "--out", pred)
    code = run(
        "eval", "--gold", d / "data/test.ptb", "--pred", pred, "--constraints", d / "data/test.constraints.tsv",
        "--bucket", "--upper-bound", "--report", d / "r2.txt",
    )
    assert code == 0
    values = kv(str(d / "r2.txt") + ".kv")
    assert "run0.R_z" in values and "upper_bound" in values
    assert run("stats", "--corpus", d / "data/test.ptb", "--constraints", d / "data/test.constraints.tsv", "--out", d / "s.kv") == 0
    assert float(kv(d / "s.kv")["EM"]) == 100.0
    assert "EM" in capsys.readouterr().out


def test_extract_constraints_methods(workspace, tmp_path):
    d, _ = workspace
    corpus = d / "data/train.ptb"
    assert run(
        "extract-constraints", "--corpus", corpus, "--format", "ptb_brackets", "--method", "gazetteer",
        "--gazetteer", d / "data/entities.txt", "--out", tmp_path / "g.tsv",
    ) == 0
    assert run(
        "extract-constraints", "--corpus", corpus, "--format", "ptb_brackets", "--method", "pmi",
        "--min-count", 2, "--lexicon-out", tmp_path / "lex.txt", "--out", tmp_path / "p.tsv",
    ) == 0
    assert run(
        "extract-constraints", "--corpus", corpus, "--format", "ptb_brackets", "--method", "synth",
        "--labels", "PP", "--target-count", 5, "--forbid-nesting", "--out", tmp_path / "s.tsv",
    ) == 0
    rows = [l for l in (tmp_path / "s.tsv").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 5
    assert (tmp_path / "g.tsv.manifest.json").exists() and (tmp_path / "lex.txt").exists()
    assert run("extract-constraints", "--corpus", corpus, "--method", "gazetteer", "--out", tmp_path / "x.tsv") == 1


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    for m in re.finditer(r"max_rel_error=(\S+)", out):
        assert float(m.group(1)) < 1e-4
    assert run("gradcheck", "--variants", "hinge") == 1


def test_usage_and_data_exit_codes(workspace, tmp_path):
    d, model = workspace
    assert run("train", "--bogus-flag") == 1
    assert run() == 1
    assert run("parse", "--model", tmp_path / "none.npz", "--corpus", d / "data/test.ptb", "--out", tmp_path / "o") == 2
    assert run("parse", "--model", model, "--corpus", tmp_path / "missing.txt", "--out", tmp_path / "o") == 2
    assert run(
        "parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets",
        "--expect-config", "deadbeef", "--out", tmp_path / "o",
    ) == 2
    bad = tmp_path / "bad.ptb"
    bad.write_text("(S (X a) (X b)\n")
    assert run("stats", "--corpus", bad, "--constraints", d / "data/test.constraints.tsv") == 2


def test_resume_rejects_changed_config(workspace, tmp_path):
    d, model = workspace
    common = ["train", "--train", d / "data/train.ptb", "--batch-size", 16, "--learning-rate", 0.01]
    assert run(*common, "--dim", 8, "--seed", 5, "--resume", str(model) + ".last", "--out", tmp_path / "r.npz") == 2
    assert run(*common, "--dim", 8, "--max-epochs", 4, "--resume", str(model) + ".last", "--out", tmp_path / "r.npz",
               "--valid", d / "data/valid.ptb", "--constraints", d / "data/train.constraints.tsv",
               "--valid-constraints", d / "data/valid.constraints.tsv") == 0
    lines = open(str(tmp_path / "r.npz") + ".log").read().splitlines()
    assert lines[0].startswith("epoch=4 ")


def test_eval_refuses_mismatched_vocabularies(workspace, tmp_path):
    d, model = workspace
    a = tmp_path / "a.pred"
    run("parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets", "--out", a)
    text = a.read_text().splitlines()
    b = tmp_path / "b.pred"
    b.write_text("\n".join([re.sub(r"vocab=\S+", "vocab=0000", text[0])] + text[1:]) + "\n")
    assert run("eval", "--gold", d / "data/test.ptb", "--pred", a, "--pred", b) == 2
    assert run("eval", "--gold", d / "data/test.ptb", "--pred", a, "--expect-vocab", "0000") == 2
    assert run("eval", "--gold", d / "data/test.ptb", "--pred", a, "--pred", a) == 0


def test_config_file_with_flag_override(workspace, tmp_path):
    d, _ = workspace
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# desk\ndim=6\nmax-epochs=1\nbatch_size=8\nlearning_rate=0.5\n")
    out = tmp_path / "c.npz"
    assert run("train", "--config", cfg, "--train", d / "data/train.ptb", "--learning-rate", 0.01, "--out", out) == 0
    _, config, *_ = tr.load_model(out)
    assert (config.dim, config.max_epochs, config.batch_size, config.learning_rate) == (6, 1, 8, 0.01)
    cfg.write_text("nonsense_key=1\n")
    assert run("train", "--config", cfg, "--train", d / "data/train.ptb", "--out", out) == 1
    assert run("train", "--config", tmp_path / "nope.cfg", "--train", d / "data/train.ptb", "--out", out) == 2


def test_divergence_exits_three(workspace, tmp_path, monkeypatch):
    d, _ = workspace

    def boom(*args, **kw):
        raise dc.NumericalError("forced")

    monkeypatch.setattr(tr, "batch_loss", boom)
    out = tmp_path / "div.npz"
    assert run("train", "--train", d / "data/train.ptb", "--dim", 4, "--max-epochs", 1, "--out", out) == 3
    assert out.exists()


def test_threads_flag_accepted(workspace, tmp_path):
    d, model = workspace
    assert run("--threads", 2, "parse", "--model", model, "--corpus", d / "data/test.ptb", "--format", "ptb_brackets", "--out", tmp_path / "p") == 0
