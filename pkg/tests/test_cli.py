import json
import subprocess
import sys

import numpy as np
import pytest

from phonosep import dsp
from phonosep.cli import FLAG_KEYS, SECTIONS, build_parser, main
from phonosep.conditioning import MODEL_VARIANTS
from phonosep.evaluation import CEILING_DB, read_report

TINY_DOC = {
    "unet": {"depth": 3, "base_channels": 4, "n_frames": 64, "n_bins": 512},
    "train": {"batch_size": 2, "batches_per_epoch": 2, "val_batches": 1, "max_epochs": 1},
    "synth": {"n_songs": 3, "duration": 4.0, "n_val": 1, "n_test": 1},
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_DOC))
    assert main(["synth-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "2"]) == 0
    return root, cfg


def test_help_lists_every_flag():
    out = subprocess.run([sys.executable, "-m", "phonosep.cli", "separate", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("--config", "--seed", "--jobs", "--out", "--mixture", "--annotations", "--model", "--baseline",
                 "--variant", "--mask-override"):
        assert flag in out, flag
    top = subprocess.run([sys.executable, "-m", "phonosep.cli", "--help"], capture_output=True, text=True).stdout
    for cmd in ("synth-data", "build-sources", "split", "train", "separate", "evaluate", "count-params", "grad-check"):
        assert cmd in top


def test_config_keys_and_flags_bijective():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices["separate"]
    dests = {a.dest for a in sub._actions} - {"help", "config"}
    assert dests == set(FLAG_KEYS)


def test_exit_codes(tmp_path, capsys):
    assert main(["count-params", "--variant", "S_s"]) == 0
    assert main(["no-such-command"]) == 1
    assert main(["separate", "--mask-override", "1.0"]) == 1  # missing --mixture/--out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert main(["count-params", "--config", str(bad)]) == 1
    assert main(["train", str(tmp_path / "x.jsonl"), "--out", str(tmp_path)]) == 2  # missing manifest
    assert main(["separate", "--mixture", str(tmp_path / "missing.wav"), "--out", str(tmp_path),
                 "--mask-override", "1.0"]) == 2
    err = capsys.readouterr().err
    assert "usage error" in err and "error:" in err


def test_unknown_section_key_rejected(corpus, tmp_path):
    root, _ = corpus
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr_typo": 1}}))
    assert main(["train", str(root / "data" / "manifest.jsonl"), "--config", str(bad), "--out", str(tmp_path)]) == 1
    commands = {"unet": ["count-params"], "synth": ["synth-data", "--out", str(tmp_path / "d")],
                "split": ["split", str(root / "data" / "manifest.jsonl"), "--out", str(tmp_path / "s")]}
    for section, argv in commands.items():
        bad.write_text(json.dumps({section: {"bogus": 1}}))
        assert main(argv + ["--config", str(bad)]) == 1, section
    assert set(commands) | {"train"} == set(SECTIONS)


def test_count_params_table(capsys):
    assert main(["count-params"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = {l.split()[0]: l.split() for l in lines[1:]}
    assert set(rows) == set(MODEL_VARIANTS)
    incs = {k: int(v[-1].replace(",", "")) for k, v in rows.items()}
    expected = {"S_s*": 80, "S_s": 480, "S_f*": 640, "S_c*": 40960, "S_f": 40320, "S_c": 80640,
                "S_a*": 327680, "S_a": 1966080, "unet": 0}
    for k, v in expected.items():
        assert incs[k] == v, k


def test_separate_mask_one_reproduces_mixture(corpus, tmp_path):
    root, _ = corpus
    mix = root / "data" / "songs" / "synth0000" / "mixture.wav"
    assert main(["separate", "--mixture", str(mix), "--out", str(tmp_path), "--mask-override", "1.0"]) == 0
    voc = dsp.read_wav(tmp_path / "vocals.wav").samples
    ref = dsp.read_wav(mix).samples
    assert len(voc) == len(ref)
    np.testing.assert_allclose(voc[512:-1024], ref[512:-1024], atol=1e-6)


def test_evaluate_reference_pairs_hit_ceiling(corpus, tmp_path):
    root, _ = corpus
    est = tmp_path / "est"
    for song in (root / "data" / "songs").iterdir():
        d = est / song.name
        d.mkdir(parents=True)
        for name in ("vocals", "accompaniment"):
            (d / f"{name}.wav").write_bytes((song / f"{name}.wav").read_bytes())
    out = tmp_path / "report"
    assert main(["evaluate", str(root / "data" / "manifest.jsonl"), str(est), "--out", str(out), "--jobs", "2"]) == 0
    report = read_report(out / "report.jsonl")
    assert len(report.tracks) == 3
    for t in report.tracks:
        assert np.all(t.sdr >= CEILING_DB - 1e-6)


def test_split_and_build_sources(corpus, tmp_path):
    root, _ = corpus
    assert main(["split", str(root / "data" / "manifest.jsonl"), "--out", str(tmp_path / "s")]) == 0
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["test.jsonl", "train.jsonl", "val.jsonl"]
    song = root / "data" / "songs" / "synth0000"
    (tmp_path / "p.txt").write_text("vocals 0.9\naccompaniment 0.2\n")
    args = ["build-sources", str(tmp_path / "p.txt"), str(song / "vocals.wav"), str(song / "accompaniment.wav"),
            "--out", str(tmp_path / "b")]
    assert main(args) == 0
    np.testing.assert_array_equal(dsp.read_wav(tmp_path / "b" / "vocals.wav").samples,
                                  dsp.read_wav(song / "vocals.wav").samples)


def test_train_resume_evaluate_deterministic(corpus, tmp_path):
    root, cfg = corpus
    manifest = str(root / "data" / "manifest.jsonl")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", manifest, "--config", str(cfg), "--variant", "S_s", "--seed", "4",
                     "--out", str(out)]) == 0
        runs.append(out)
    assert (runs[0] / "metrics.tsv").read_text() == (runs[1] / "metrics.tsv").read_text()
    assert (runs[0] / "best.ckpt").read_bytes() == (runs[1] / "best.ckpt").read_bytes()
    assert main(["train", manifest, "--model", str(runs[0] / "last.ckpt"), "--out", str(tmp_path / "r")]) == 0
    assert main(["evaluate", str(root / "data" / "test.jsonl"), "--model", str(runs[0] / "best.ckpt"),
                 "--baseline", str(runs[1] / "best.ckpt"), "--out", str(tmp_path / "ev")]) == 0
    text = (tmp_path / "ev" / "report.txt").read_text()
    assert "summary" in text
    mix = root / "data" / "songs" / "synth0002"
    assert main(["separate", "--mixture", str(mix / "mixture.wav"), "--annotations", str(mix / "annotations.json"),
                 "--model", str(runs[0] / "best.ckpt"), "--out", str(tmp_path / "sep")]) == 0
    assert (tmp_path / "sep" / "vocals.wav").exists()


def test_synth_data_deterministic_under_seed(corpus, tmp_path):
    root, cfg = corpus
    assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--seed", "2", "--jobs", "2"]) == 0
    a = (root / "data" / "songs" / "synth0001" / "mixture.wav").read_bytes()
    b = (tmp_path / "d" / "songs" / "synth0001" / "mixture.wav").read_bytes()
    assert a == b


def test_grad_check_subcommand(capsys):
    assert main(["grad-check", "--variant", "S_s*", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) > 10 and all(line.startswith("PASS ") for line in lines)
