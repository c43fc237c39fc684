import hashlib
import json

import pytest

from ptts.cli import EXIT_CONFIG, EXIT_DATA, main
from ptts.config import ConfigError, load_config


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"max_step": 3}}))
    with pytest.raises(ConfigError, match="max_step"):
        load_config(path, env={})
    path.write_text(json.dumps({"colour": 1}))
    with pytest.raises(ConfigError, match="colour"):
        load_config(path, env={})


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "train": {"max_steps": 7, "batch_size": 3}}))
    cfg = load_config(path, {"train.max_steps": 9}, env={})
    assert cfg.train.max_steps == 9 and cfg.train.batch_size == 3
    assert cfg.seed == 4 and cfg.train.seed == 4
    cfg = load_config(path, {"seed": 5}, env={"PTTS_SEED": "11"})
    assert cfg.seed == 11 and cfg.train.seed == 11
    with pytest.raises(ConfigError):
        load_config(None, env={"PTTS_SEED": "x"})


def test_invalid_values(tmp_path):
    with pytest.raises(ConfigError, match="bank"):
        load_config(None, {"context_study.bank_sizes": [3]}, env={})
    with pytest.raises(ConfigError, match="80 mel"):
        load_config(None, {"frame.mel_bins": 40}, env={})


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["prepare", "--config", str(bad)]) == EXIT_CONFIG
    assert "kind=config" in capsys.readouterr().err
    assert main(["prepare", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "kind=data" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    before = tree_digest(toy_corpus)
    common = ["--corpus", str(toy_corpus), "--out", str(out)]
    assert main(["prepare", *common]) == 0
    assert main(["train", *common, "--max-steps", "2", "--batch-size", "2"]) == 0
    return out, common, before


def test_prepare_is_idempotent(pipeline, toy_corpus, capsys):
    out, common, before = pipeline
    capsys.readouterr()
    inventory = (out / "inventory.json").read_bytes()
    assert main(["prepare", *common]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["rebuilt"] == 0 and report["reused"] == 5
    assert (out / "inventory.json").read_bytes() == inventory
    assert tree_digest(toy_corpus) == before


def test_synth_cli(pipeline, tmp_path, capsys):
    out, common, _ = pipeline
    ckpt = str(out / "train" / "latest.ckpt")
    args = ["synth", *common, "--checkpoint", ckpt, "--text", "sil m a sil"]
    assert main([*args, "-o", str(tmp_path / "a.wav")]) == 0
    assert main([*args, "-o", str(tmp_path / "b.wav")]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    capsys.readouterr()
    assert main(["synth", *common, "--checkpoint", ckpt, "--text", "sil qq sil"]) == EXIT_DATA
    assert "qq" in capsys.readouterr().err
    assert main([*args, "--dur-scale", "3"]) == EXIT_CONFIG
    assert "force" in capsys.readouterr().err
    assert main([*args, "--dur-scale", "3", "--force", "-o", str(tmp_path / "c.wav")]) == 0


def test_synth_reference_mismatch(pipeline, tmp_path, capsys):
    out, common, _ = pipeline
    lab = tmp_path / "r.lab"
    lab.write_text("sil\t0\t50\na\t50\t100\n")
    f0 = tmp_path / "r.f0"
    f0.write_text("\n".join(["120"] * 20) + "\n")
    args = ["synth", *common, "--checkpoint", str(out / "train" / "latest.ckpt"), "--text", "sil m a sil",
            "--ref-dur", str(lab), "--ref-f0", str(f0)]
    capsys.readouterr()
    assert main(args) == EXIT_CONFIG
    assert "expected 4 phonemes, got 2" in capsys.readouterr().err


def test_eval_cli(pipeline, capsys):
    out, common, _ = pipeline
    assert main(["eval", *common, "--checkpoint", str(out / "train" / "latest.ckpt"), "--split", "all"]) == 0
    assert (out / "eval" / "f0_metrics.csv").exists()
    assert "all (audio)" in (out / "eval" / "report.txt").read_text()


def test_eval_empty_test_split(pipeline, capsys):
    out, common, _ = pipeline
    capsys.readouterr()
    assert main(["eval", *common, "--checkpoint", str(out / "train" / "latest.ckpt")]) == EXIT_DATA
    assert "empty test set" in capsys.readouterr().err


def test_bench_rtf_reports_hardware(pipeline):
    out, common, _ = pipeline
    assert main(["bench-rtf", *common, "--checkpoint", str(out / "train" / "latest.ckpt"),
                 "--text", "sil m a sil", "--repeats", "1"]) == 0
    rows = (out / "bench" / "rtf.csv").read_text().splitlines()
    assert rows[0] == "text,synth_seconds,audio_seconds,RTF,hardware"
    assert [r.split(",")[0] for r in rows[1:]] == ["1x", "2x"]


def test_context_study_cli(toy_corpus, tmp_path):
    args = ["context-study", "--corpus", str(toy_corpus), "--out", str(tmp_path), "--steps", "2",
            "--banks", "2,16"]
    assert main(args) == 0
    text = (tmp_path / "context_study.txt").read_text()
    assert "receptive field" in text and "published reference" in text
    assert main([*args[:-1], "3"]) == EXIT_CONFIG
