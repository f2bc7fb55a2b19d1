import json

import pytest

from conftest import DATA
from seqtag.cli import main

TOY = str(DATA / "toy_train.conll")
VECTORS = str(DATA / "toy_vectors.txt")
SMALL_TRAIN = ["--hidden-size", "64", "--d-lm", "8", "--d-char", "8", "--dev-metric", "loss",
               "--max-epochs", "50", "--seed", "1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--train", TOY, "--dev", TOY, "--test", TOY, "--word-vectors", VECTORS,
                 "--out", str(out), *SMALL_TRAIN])
    assert code == 0
    return out


def test_corpus_stats_fixture(fixtures_dir, capsys, tmp_path):
    assert main(["corpus-stats", str(fixtures_dir / "three.conll"), "--format", "json",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    (stats,) = doc.values()
    assert stats["annotation_count"] == 2
    assert stats["sentence_count"] == 3
    assert (tmp_path / "corpus-stats-config.json").exists()


def test_corpus_stats_empty_file(tmp_path, capsys):
    p = tmp_path / "empty.conll"
    p.write_text("")
    assert main(["corpus-stats", str(p)]) == 0
    out = capsys.readouterr().out
    assert "sentences\t0" in out and "annotations\t0" in out


def test_corpus_stats_malformed(tmp_path, capsys):
    p = tmp_path / "bad.conll"
    p.write_text("a\tO\nb\n")
    assert main(["corpus-stats", str(p)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    p = tmp_path / "x.conll"
    p.write_text("a\tO\n")
    assert main(["corpus-stats", str(p), "--no-such-key", "1"]) == 2
    assert "no_such_key" in capsys.readouterr().err


def test_config_file_and_override(tmp_path, capsys):
    p = tmp_path / "x.conll"
    p.write_text("a NN B-X\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"paths": [str(p)], "tag_col": 1, "format": "json"}))
    # the command-line value wins over the file
    assert main(["corpus-stats", "--config", str(cfg), "--tag-col", "2"]) == 0
    assert '"X": 1' in capsys.readouterr().out


def test_evaluate_identical(tmp_path, capsys):
    p = tmp_path / "g.conll"
    p.write_text("a\tB-D\nb\tI-D\nc\tO\n")
    assert main(["evaluate", "--gold", str(p), "--pred", str(p)]) == 0
    micro = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("micro"))
    assert micro.split()[4:7] == ["100.00", "100.00", "100.00"]


def test_evaluate_eight_two_two(tmp_path, capsys):
    lines = ["w B-D B-D\n"] * 8 + ["w O B-D\n"] * 2 + ["w B-D O\n"] * 2
    p = tmp_path / "three.conll"
    p.write_text("\n".join(lines))
    assert main(["evaluate", "--gold", str(p), "--out", str(tmp_path / "ev")]) == 0
    micro = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("micro"))
    assert micro.split()[1:7] == ["8", "2", "2", "80.00", "80.00", "80.00"]
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["micro"]["tp"] == 8


def test_evaluate_scorer_fixture(fixtures_dir, capsys):
    assert main(["evaluate", "--gold", str(fixtures_dir / "scorer20.conll"), "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert (report["micro"]["tp"], report["micro"]["fp"], report["micro"]["fn"]) == (11, 11, 10)
    assert report["repairs"] == 3


def test_evaluate_misaligned(tmp_path, capsys):
    g, p = tmp_path / "g", tmp_path / "p"
    g.write_text("a\tO\nb\tO\n")
    p.write_text("a\tO\nc\tO\n")
    assert main(["evaluate", "--gold", str(g), "--pred", str(p)]) == 2
    assert "line 2" in capsys.readouterr().err
    p.write_text("a\tO\n")
    assert main(["evaluate", "--gold", str(g), "--pred", str(p)]) == 2


def test_train_outputs(trained):
    log_lines = (trained / "training.log").read_text().splitlines()
    entries = [json.loads(l) for l in (trained / "training.jsonl").read_text().splitlines()]
    assert len(log_lines) == len(entries) == entries[-1]["epoch"]
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["initial_lr"] == 0.1 and cfg["batch_size"] == 32 and cfg["hidden_size"] == 64
    report = json.loads((trained / "train_report.json").read_text())
    assert report["micro"]["f1"] == 1.0
    assert (trained / "best-model.ckpt").exists()


def test_tag_reproduces_gold(trained, tmp_path):
    out = tmp_path / "tagged.conll"
    assert main(["tag", "--model", str(trained / "best-model.ckpt"), "--input", TOY, "--output", str(out)]) == 0
    src = open(TOY).read().splitlines()
    got = out.read_text().splitlines()
    assert len(got) == len(src)
    for a, b in zip(src, got):
        if a.strip():
            fields = b.split("\t")
            assert fields[-1] == fields[-2]
    assert (tmp_path / "tagged.conll.config.json").exists()


def test_tag_empty_input(trained, tmp_path):
    src, out = tmp_path / "in", tmp_path / "out"
    src.write_text("")
    assert main(["tag", "--model", str(trained / "best-model.ckpt"), "--input", str(src),
                 "--output", str(out)]) == 0
    assert out.read_text() == ""


def test_tag_corrupt_checkpoint(trained, tmp_path, capsys):
    data = bytearray((trained / "best-model.ckpt").read_bytes())
    data[len(data) // 2] ^= 0x10
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    assert main(["tag", "--model", str(bad), "--input", TOY]) == 2
    assert "error" in capsys.readouterr().err


def test_train_missing_dev(tmp_path):
    assert main(["train", "--train", TOY, "--word-vectors", VECTORS, "--out", str(tmp_path)]) == 2
    assert main(["train", "--train", TOY, "--dev", str(tmp_path / "nope"), "--word-vectors", VECTORS,
                 "--out", str(tmp_path)]) == 2


def test_train_numerical_failure(tmp_path, capsys):
    vectors = tmp_path / "nan.txt"
    vectors.write_text("aspirin nan 1.0\n")
    code = main(["train", "--train", TOY, "--dev", TOY, "--word-vectors", str(vectors), "--out", str(tmp_path),
                 "--hidden-size", "4", "--d-lm", "2", "--d-char", "2", "--max-epochs", "3"])
    assert code == 3
    assert "parameter norms" in capsys.readouterr().err


def test_bad_thread_setting(tmp_path, monkeypatch):
    p = tmp_path / "x.conll"
    p.write_text("a\tO\n")
    monkeypatch.setenv("SEQTAG_THREADS", "zero")
    assert main(["corpus-stats", str(p)]) == 2


@pytest.fixture
def lm_text(tmp_path):
    p = tmp_path / "raw.txt"
    p.write_text("abc" * 100 + "\n")
    return p


LM_ARGS = ["--d-char", "8", "--d-lm", "16", "--bptt-window", "20", "--batch", "4"]


def test_pretrain_lm(lm_text, tmp_path):
    out = tmp_path / "lm"
    assert main(["pretrain-lm", "--raw-text", str(lm_text), "--out", str(out), *LM_ARGS]) == 0
    last = (out / "perplexity.log").read_text().splitlines()[-1].split()
    assert float(last[3]) < 1.5 and float(last[5]) < 1.5
    assert (out / "lm-forward.ckpt").exists() and (out / "lm-backward.ckpt").exists()
    assert json.loads((out / "config.json").read_text())["seed"] == 1


def test_pretrain_lm_zero_epochs_and_determinism(lm_text, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["pretrain-lm", "--raw-text", str(lm_text), "--out", str(d), "--epochs", "0",
                     "--seed", "7", *LM_ARGS]) == 0
    assert (a / "lm-forward.ckpt").read_bytes() == (b / "lm-forward.ckpt").read_bytes()
    assert (a / "perplexity.log").read_text() == ""


def test_pretrain_lm_empty_corpus(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    assert main(["pretrain-lm", "--raw-text", str(p), "--out", str(tmp_path / "o")]) == 2


def test_train_with_pretrained_lms(lm_text, tmp_path):
    lm_dir = tmp_path / "lm"
    assert main(["pretrain-lm", "--raw-text", str(lm_text), "--out", str(lm_dir), "--epochs", "1", *LM_ARGS]) == 0
    out = tmp_path / "run"
    assert main(["train", "--train", TOY, "--dev", TOY, "--word-vectors", VECTORS, "--out", str(out),
                 "--lm-forward", str(lm_dir / "lm-forward.ckpt"), "--lm-backward", str(lm_dir / "lm-backward.ckpt"),
                 "--hidden-size", "4", "--max-epochs", "2"]) == 0
    assert len((out / "training.log").read_text().splitlines()) == 2
