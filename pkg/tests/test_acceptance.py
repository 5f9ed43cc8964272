"""End-to-end acceptance checks, one test per criterion.

``pytest tests/test_acceptance.py`` prints a PASS/FAIL line per criterion at
the end of the run (see ``conftest.py``). Criterion 7 trains three models
and takes tens of minutes.
"""
import dataclasses
import time

import numpy as np
import pytest

from _oracles import bss_normal_equations, film_strong_loop
from phonosep import dsp
from phonosep.cli import main
from phonosep.conditioning import basis_shape, film_strong
from phonosep.dataset import SongRecord, split_by_agreement
from phonosep.evaluation import FLOOR_DB, bss_eval, pes_eps
from phonosep.gradsuite import run_suite
from phonosep.phonemes import N_PHONEMES
from phonosep.tensor import Tensor
from phonosep.training import AUGMENTED, BatchSampler, PatchDataset, Song, TrainConfig, Trainer, scheduler_trace
from phonosep.unet import TINY, SeparationModel

TABLE_INCREMENTS = {"S_s*": 80, "S_s": 480, "S_f*": 640, "S_c*": 40960, "S_f": 40320, "S_c": 80640,
                    "S_a*": 327680, "S_a": 1966080}


def test_criterion_01_parameter_counts(capsys, record_property):
    assert main(["count-params"]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()[1:]]
    total = {r[0]: int(r[-2].replace(",", "")) for r in rows}
    inc = {r[0]: int(r[-1].replace(",", "")) for r in rows}
    base = total["unet"]
    record_property("detail", f"base {base:,}, W_si +{inc['W_si']:,}, W_co +{inc['W_co']:,}")
    assert {k: inc[k] for k in TABLE_INCREMENTS} == TABLE_INCREMENTS
    assert abs(base - 9.83e6) <= 0.01 * 9.83e6
    assert abs(inc["W_si"] - 14060) <= 0.05 * 14060
    assert abs(inc["W_co"] - 2.35e6) <= 0.05 * 2.35e6


def test_criterion_02_strong_film_oracle(record_property):
    r = np.random.default_rng(2024)
    variants = ("all", "channel", "frequency", "scalar")
    worst = 0.0
    for case in range(50):
        variant = variants[case % 4]
        nb, w, h, c = (int(v) for v in r.integers(1, [4, 9, 7, 6]))
        x = r.standard_normal((nb, w, h, c))
        z = r.random((nb, w, N_PHONEMES))
        z /= z.sum(axis=-1, keepdims=True)
        g = r.standard_normal(basis_shape(variant, h, c))
        b = r.standard_normal(basis_shape(variant, h, c))
        out = film_strong(Tensor(x), z, g, b, variant).data
        worst = max(worst, float(np.max(np.abs(out - film_strong_loop(x, z, g, b, variant)))))
    record_property("detail", f"50 cases, max abs deviation {worst:.2e}")
    assert worst < 1e-6


def test_criterion_03_gradient_suite(record_property):
    start = time.time()
    reports = run_suite(range(20), variants=("unet", "W_si", "W_co", "S_a", "S_c*", "S_s"))
    seconds = time.time() - start
    failed = [f"{name}@seed{seed}" for name, reps in reports.items() for seed, rep in enumerate(reps) if not rep.passed]
    worst = max(rep.max_rel_error for reps in reports.values() for rep in reps)
    record_property("detail", f"{len(reports)} checks x 20 seeds, worst rel. error {worst:.2e}, {seconds:.0f} s")
    assert not failed, failed
    assert all(len(reps) == 20 for reps in reports.values())
    assert seconds < 300


def test_criterion_04_dsp_roundtrip(record_property):
    r = np.random.default_rng(4)
    snrs = []
    for _ in range(10):
        x = r.standard_normal(3 * dsp.SAMPLE_RATE)
        y = dsp.istft(dsp.stft(x), len(x)).samples
        inner = slice(dsp.WINDOW, len(x) - dsp.WINDOW)
        err = x[inner] - y[inner]
        snrs.append(10 * np.log10(np.sum(x[inner] ** 2) / max(np.sum(err ** 2), 1e-300)))
    record_property("detail", f"min interior SNR {min(snrs):.1f} dB")
    assert min(snrs) > 60


def test_criterion_05_bss_oracle(record_property):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        refs = r.standard_normal((2, 1000))
        ests = np.array([[1.0, 0.3], [0.2, 0.9]]) @ refs + 0.2 * r.standard_normal((2, 1000))
        got = np.array(bss_eval(refs, ests))
        for j in range(2):
            worst = max(worst, float(np.max(np.abs(got[:, j] - bss_normal_equations(refs, ests[j], j)))))
    ref = np.ones(6400)
    ref[2304:3328] = 0.0
    est = ref.copy()
    est[2304:3328] = 0.0
    pes, _ = pes_eps(ref, est)
    record_property("detail", f"max deviation {worst:.2e} dB, PES floor case {pes}")
    assert worst < 0.01
    assert pes == FLOOR_DB == -80.0


def test_criterion_06_scheduler_traces(record_property):
    halve = scheduler_trace([1.0] * 16)["lr"]
    stop = scheduler_trace([1.0] * 40)["stop_epoch"]
    dip_small = scheduler_trace([1.0, 1.0 - 5e-6] + [1.0 - 5e-6] * 40)["stop_epoch"]
    dip_large = scheduler_trace([1.0, 1.0 - 2e-5] + [1.0 - 2e-5] * 40)["stop_epoch"]
    record_property("detail", f"lr halves at epoch {halve.index(5e-4) + 1}, stop at {stop}, "
                              f"5e-6 dip stop {dip_small}, 2e-5 dip stop {dip_large}")
    assert halve == [1e-3] * 15 + [5e-4]
    assert stop == 31 and dip_small == 31 and dip_large == 32


@pytest.mark.slow
def test_criterion_07_conditioning_benefit(record_property):
    from phonosep.experiment import ExperimentConfig, run

    result = run(ExperimentConfig())
    print(result.summary())
    gain_c, gain_s = result.val_gain("conditioned"), result.val_gain("shuffled")
    med_c, med_u = result.median_sdr("conditioned"), result.median_sdr("unconditioned")
    t = result.sdr_test("conditioned")
    minutes = sum(a.seconds for a in result.arms.values()) / 60
    record_property("detail", f"L1 gain {100 * gain_c:.2f} % (shuffled {100 * gain_s:.2f} %), median SDR "
                              f"{med_c:.2f} vs {med_u:.2f} dB, paired t={t.t:.2f} p={t.p:.3g}, {minutes:.0f} min")
    assert gain_c >= 0.03
    assert med_c >= med_u
    assert gain_s < 0.01
    assert minutes <= 45


def test_criterion_08_split_boundaries(record_property):
    etas = {"a": 0.75, "b": 0.885, "c": 0.95, "d": 0.5}
    parts, counts = split_by_agreement([SongRecord(k, "", "", "", "", v) for k, v in etas.items()])
    got = {r.song_id: name for name, recs in parts.items() for r in recs}
    record_property("detail", str(counts))
    assert got == {"a": "train", "b": "val", "c": "test"} and counts["excluded"] == 1


def _songs(n, seconds, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        voc, acc = 0.1 * r.standard_normal((2, int(seconds * dsp.SAMPLE_RATE)))
        t = dsp.frame_count(len(voc))
        z = np.zeros((t, N_PHONEMES), np.float32)
        z[:, -1] = 1
        out.append(Song(f"s{i}", voc + acc, voc, acc, z))
    return out


def test_criterion_09_augmentation_ratio(record_property):
    data = PatchDataset(_songs(3, 12.0), n_frames=64, n_bins=64)
    cfg = TrainConfig()
    sampler = BatchSampler(data, cfg, np.random.default_rng(9))
    augmented = 0
    for _ in range(cfg.batches_per_epoch):
        augmented += int(np.count_nonzero(sampler.sample_batch().provenance == AUGMENTED))
    total = cfg.batches_per_epoch * cfg.batch_size
    record_property("detail", f"{augmented} of {total} samples augmented")
    assert abs(augmented - total / 5) <= 1


def test_criterion_10_checkpoint_roundtrip(tmp_path, record_property):
    data = PatchDataset(_songs(3, 9.0, seed=1), n_frames=64, n_bins=64)
    cfg = TrainConfig(batch_size=4, batches_per_epoch=3, val_batches=2, seed=5)
    trainer = Trainer(SeparationModel(dataclasses.replace(TINY.with_variant("W_si"), seed=2)), data, data, cfg)
    trainer.fit(max_epochs=1)
    trainer.save_checkpoint(tmp_path / "t.ckpt")
    expected = trainer.train_step()
    got = Trainer.resume(tmp_path / "t.ckpt", data, data).train_step()
    record_property("detail", f"|delta loss| = {abs(expected - got):.1e}")
    assert abs(expected - got) < 1e-6
