import json

import pytest

from dictg2p.cli import main
from dictg2p.evaluation import load_attention


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text("d_model=16\nheads=2\nsemantic_layers=1\nlinguistic_layers=1\nbatch_size=8\nlog_every=5\n")
    corpus = root / "corpus"
    assert main(["gen-corpus", "--chars", "20", "--polyphones", "4", "--classes", "3", "--n", "60", "--d-model", "16", "--seed", "1", "--out", str(corpus)]) == 0
    ckpt = root / "model.ckpt"
    assert main(["train", "--corpus", str(corpus), "--config", str(cfg), "--seed", "1", "--steps", "10", "--out", str(ckpt), "--metrics", str(root / "m.jsonl"), "--deterministic"]) == 0
    return root, corpus, ckpt


def test_gen_corpus_layout(workspace):
    _, corpus, _ = workspace
    for name in ("spec.json", "dict.txt", "keys.bin", "corpus.jsonl", "acoustics.npz", "labels.txt"):
        assert (corpus / name).exists()


def test_train_writes_metrics(workspace):
    root, _, ckpt = workspace
    assert ckpt.stat().st_size > 0
    lines = [json.loads(x) for x in (root / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [5, 10]
    assert {"loss", "tau", "lr"} <= set(lines[0])


def test_eval_report(workspace, capsys):
    root, corpus, ckpt = workspace
    out = root / "report.json"
    assert main(["eval", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["kind"] == "objective"
    assert 0 <= rep["ser"] <= 1 and rep["per"] >= 0
    assert rep["n_sentences"] == 6


def test_g2p_and_export(workspace, capsys):
    root, corpus, ckpt = workspace
    text = json.loads((corpus / "corpus.jsonl").read_text(encoding="utf-8").splitlines()[0])["text"]
    capsys.readouterr()
    assert main(["g2p", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--text", text]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith(text + "\t") and line.count("|") == len(text) - 1
    assert main(["g2p", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--text", text, "--sample-gumbel", "--seed", "3"]) == 0
    out = root / "attn.jsonl"
    assert main(["export-attn", "--corpus", str(corpus), "--checkpoint", str(ckpt), "--text", text, "--out", str(out)]) == 0
    recs = load_attention(out)
    assert len(recs) == len(text)
    for r in recs:
        assert abs(sum(r["attention"]) - 1.0) < 1e-6
        if len(r["w"]) == 1:
            assert r["w"] == [1.0]


def test_build_dict(workspace, tmp_path, capsys):
    _, corpus, _ = workspace
    assert main(["build-dict", "--in", str(corpus / "dict.txt"), "--out", str(tmp_path / "d.bin")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["chars"] == 20 and stats["polyphones"] == 4


def test_seed_is_required(workspace, tmp_path, capsys):
    _, corpus, _ = workspace
    assert main(["gen-corpus", "--out", str(tmp_path / "c")]) != 0
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "x")]) != 0
    assert "seed" in capsys.readouterr().err


def test_failures_exit_nonzero(tmp_path, capsys):
    assert main(["build-dict", "--in", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "d.bin")]) != 0
    assert main(["g2p", "--bogus"]) != 0
    assert main(["nonsense"]) != 0
    err = capsys.readouterr().err
    assert "not found" in err
