import csv
import json

import numpy as np
import pytest

from micvae.cli import main

TINY = {"steps": 3, "eval_every": 3, "max_tokens": 120,
        "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "ffn_dim": 16, "K": 2, "C": 4}}


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("MICVAE_SEED", raising=False)


def body(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--modes", "2", "--pairs", "60", "--seed", "4", "--mono", "20",
                 "--out", str(root / "data")]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["train", "--mode", "micvae_bow", "--data", str(root / "data"), "--config",
                 str(root / "tiny.json"), "--mono", str(root / "data" / "mono.txt"),
                 "--out", str(root / "run")]) == 0
    return root


# -- synth-data -----------------------------------------------------------------------------
def test_synth_data_line_count_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["synth-data", "--modes", "1", "--pairs", "100", "--seed", "9",
                     "--out", str(tmp_path / name)]) == 0
    assert len(body(tmp_path / "a" / "train.tsv")) == 100
    for f in ("train.tsv", "valid.tsv", "mono.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "train.tsv").read_text().startswith("# seed=9")
    assert (tmp_path / "a" / "manifest.json").exists()


def test_synth_data_usage_errors(tmp_path, capsys):
    assert main(["synth-data", "--pairs", "0", "--out", str(tmp_path / "z")]) == 2
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    assert main(["synth-data", "--pairs", "5", "--out", str(tmp_path / "full")]) == 2
    assert main(["synth-data", "--pairs", "5", "--out", str(tmp_path / "full"), "--force"]) == 0
    assert "usage" in capsys.readouterr().err


def test_env_seed_overrides_flag(tmp_path, monkeypatch):
    main(["synth-data", "--pairs", "20", "--seed", "1", "--out", str(tmp_path / "flag")])
    main(["synth-data", "--pairs", "20", "--seed", "5", "--out", str(tmp_path / "five")])
    monkeypatch.setenv("MICVAE_SEED", "5")
    main(["synth-data", "--pairs", "20", "--seed", "1", "--out", str(tmp_path / "env")])
    env = (tmp_path / "env" / "train.tsv").read_bytes()
    assert env == (tmp_path / "five" / "train.tsv").read_bytes()
    assert env != (tmp_path / "flag" / "train.tsv").read_bytes()


# -- train ----------------------------------------------------------------------------------
def test_unknown_mode_lists_choices(tmp_path, capsys):
    assert main(["train", "--mode", "vae", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "micvae_bow" in capsys.readouterr().err


def test_missing_data_is_data_error(tmp_path):
    assert main(["train", "--mode", "dcvae", "--data", str(tmp_path / "nope.tsv"),
                 "--out", str(tmp_path / "o")]) == 3


def test_train_outputs_and_manifest(run):
    out = run / "run"
    for f in ("checkpoint.json", "metrics.csv", "losses.csv", "manifest.json"):
        assert (out / f).exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["mode"] == "micvae_bow" and man["config"]["steps"] == 3
    assert man["config"]["self_training"] is True
    kinds = {r["kind"] for r in csv.DictReader(open(out / "losses.csv"))}
    assert kinds == {"supervised", "bow", "mono"}


def test_flags_override_config(run, tmp_path):
    assert main(["train", "--mode", "dcvae", "--data", str(run / "data"), "--config", str(run / "tiny.json"),
                 "--steps", "2", "--eval-every", "1", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["steps"] == 2 and man["config"]["model"]["d_model"] == 8


# -- eval ------------------------------------------------------------------------------------
def test_eval_beam_one_matches_greedy(run, capsys):
    ck, data = str(run / "run" / "checkpoint.json"), str(run / "data" / "valid.tsv")
    assert main(["eval", "--ckpt", ck, "--data", data, "--out", str(run / "greedy")]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= report["bleu"] <= 100.0 and report["nll_per_token"] > 0
    assert main(["eval", "--ckpt", ck, "--data", data, "--beam", "1", "--out", str(run / "beam1")]) == 0
    greedy = (run / "greedy" / "hypotheses.txt").read_text()
    assert greedy and greedy == (run / "beam1" / "hypotheses.txt").read_text()
    assert (run / "beam1" / "manifest.json").exists()


def test_eval_corrupt_checkpoint(run, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text((run / "run" / "checkpoint.json").read_text()[:500])
    assert main(["eval", "--ckpt", str(bad), "--data", str(run / "data" / "valid.tsv")]) == 3


def test_eval_vocab_mismatch(run, tmp_path):
    alien = tmp_path / "alien.tsv"
    alien.write_text("zzz qqq\tzzz qqq\n")
    assert main(["eval", "--ckpt", str(run / "run" / "checkpoint.json"), "--data", str(alien),
                 "--out", str(tmp_path / "e")]) == 3


# -- diagnose and dump-latents ------------------------------------------------------------------
def test_diagnose_residual_and_csv(run, capsys):
    out = run / "diag.csv"
    for _ in range(2):
        assert main(["diagnose", "--ckpt", str(run / "run" / "checkpoint.json"),
                     "--data", str(run / "data" / "valid.tsv"), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["decomposition_residual"] < 1e-9
    assert len(out.read_text().splitlines()) == 3
    assert (run / "diag.csv.manifest.json").exists()


def test_dump_latents(run):
    data = run / "data"
    out = run / "lat.csv"
    assert main(["dump-latents", "--ckpt", str(run / "run" / "checkpoint.json"), "--data-a",
                 str(data / "valid.tsv"), "--data-b", str(data / "mono.txt"), "--label-a", "valid",
                 "--label-b", "mono", "--out", str(out)]) == 0
    n = len(body(data / "valid.tsv")) + len(body(data / "mono.txt"))
    lines = out.read_text().splitlines()
    assert lines[0] == "# corpus_labels=valid,mono"
    rows = list(csv.reader(lines[2:]))
    assert len(rows) == n * TINY["model"]["K"]
    np.testing.assert_allclose(np.array([r[3:] for r in rows], dtype=float).sum(1), 1.0, atol=1e-9)
