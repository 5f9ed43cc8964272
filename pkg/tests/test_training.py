import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from phonosep import dsp
from phonosep.errors import ConfigError, NonFiniteError
from phonosep.phonemes import N_PHONEMES
from phonosep.tensor import Tensor
from phonosep.training import (
    AUGMENTED, REAL, BatchSampler, EarlyStopping, PatchDataset, ReduceOnPlateau, Song, TrainConfig, Trainer,
    augment, fixed_batches, l1_loss, scheduler_trace,
)
from phonosep.unet import TINY, SeparationModel


def make_song(seed, seconds, name=None, silent_accomp=False):
    r = np.random.default_rng(seed)
    n = int(seconds * dsp.SAMPLE_RATE)
    voc = 0.1 * r.standard_normal(n)
    acc = np.zeros(n) if silent_accomp else 0.1 * r.standard_normal(n)
    t = dsp.frame_count(n)
    z = np.zeros((t, N_PHONEMES), np.float32)
    z[np.arange(t), r.integers(0, N_PHONEMES, t)] = 1
    return Song(name or f"s{seed}", voc + acc, voc, acc, z)


@pytest.fixture(scope="module")
def small_set():
    return PatchDataset([make_song(i, s) for i, s in enumerate((7.0, 9.0, 12.0))], n_frames=64, n_bins=64)


def small_config(**kw):
    base = dict(batch_size=4, batches_per_epoch=3, val_batches=2, lr=1e-3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# -- config ------------------------------------------------------------------------
def test_defaults_and_validation():
    c = TrainConfig()
    assert (c.batch_size, c.batches_per_epoch, c.lr) == (128, 1024, 1e-3)
    assert (c.plateau_patience, c.early_stop_patience, c.min_delta, c.plateau_factor) == (15, 30, 1e-5, 0.5)
    for bad in (dict(batch_size=0), dict(min_delta=-1.0), dict(lr=0.0), dict(augment_period=1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- schedulers ------------------------------------------------------------------------
def test_plateau_halves_once_at_epoch_16():
    trace = scheduler_trace([1.0] * 16)
    lrs = trace["lr"]
    assert lrs[:15] == [1e-3] * 15 and lrs[15] == 5e-4
    assert trace["stop_epoch"] is None


def test_early_stop_at_epoch_31():
    trace = scheduler_trace([1.0] * 40)
    assert trace["stop_epoch"] == 31 and len(trace["lr"]) == 31
    # first epoch sets the best; two plateau reductions happen before stopping
    assert trace["lr"][15] == 5e-4 and trace["lr"][30] == 2.5e-4


def test_min_delta_boundary():
    # a single 5e-6 dip is not an improvement: the stop epoch does not move
    stalled = scheduler_trace([1.0, 1.0 - 5e-6] + [1.0 - 5e-6] * 40)
    assert stalled["stop_epoch"] == 31 and stalled["lr"][15] == 5e-4
    # a 2e-5 dip is, and restarts both patience counters
    moved = scheduler_trace([1.0, 1.0 - 2e-5] + [1.0 - 2e-5] * 40)
    assert moved["stop_epoch"] == 32 and moved["lr"][15] == 1e-3 and moved["lr"][16] == 5e-4


@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=80))
def test_lr_non_increasing(losses):
    lrs = scheduler_trace(losses)["lr"]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(lr > 0 for lr in lrs)


def test_monitor_classes_direct():
    p = ReduceOnPlateau(patience=2, min_delta=0.0, factor=0.5)
    lr = 1.0
    for v in (3.0, 3.0, 3.0):
        lr = p.step(v, lr)
    assert lr == 0.5
    e = EarlyStopping(patience=1)
    assert not e.step(1.0) and e.step(1.0)


# -- sampling ----------------------------------------------------------------------
def test_sampler_frequency_proportional_to_patch_count(small_set):
    rng = np.random.default_rng(0)
    idx = small_set.draw(rng, 10_000)
    observed = np.bincount(idx[:, 0], minlength=3)
    expected = 10_000 * small_set.patch_counts / small_set.patch_counts.sum()
    assert np.all(np.abs(observed - expected) <= 0.05 * expected)
    assert stats.chisquare(observed, expected).pvalue > 1e-3
    offsets_ok = idx[:, 1] < small_set.patch_counts[idx[:, 0]]
    assert offsets_ok.all() and (idx[:, 1] >= 0).all()


def test_sampler_deterministic(small_set):
    cfg = small_config()
    a = BatchSampler(small_set, cfg, np.random.default_rng(9))
    b = BatchSampler(small_set, cfg, np.random.default_rng(9))
    for _ in range(3):
        x, y = a.sample_batch(), b.sample_batch()
        assert np.array_equal(x.index, y.index) and np.array_equal(x.mixture, y.mixture)
        assert x.mixture.shape == (4, 64, 64) and x.z.shape == (4, 64, N_PHONEMES)


def test_full_size_batch_has_128_samples():
    data = PatchDataset([make_song(0, 20.0)])
    batch = BatchSampler(data, TrainConfig(), np.random.default_rng(0)).sample_batch()
    assert batch.mixture.shape == (128, 128, 512)
    assert np.count_nonzero(batch.provenance == AUGMENTED) in (25, 26)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        PatchDataset([]).draw(np.random.default_rng(0), 1)


def test_short_song_padded():
    data = PatchDataset([make_song(0, 2.0)], n_frames=64, n_bins=64)
    assert len(data) == 1
    mix, voc, z = data.real(0, 0)
    assert mix.shape == (64, 64) and np.all(z[dsp.frame_count(2 * 8192):, -1] == 1)


# -- augmentation ------------------------------------------------------------------------
def test_augmented_fraction_over_an_epoch(small_set):
    cfg = small_config(batch_size=8, batches_per_epoch=1024)
    sampler = BatchSampler(small_set, cfg, np.random.default_rng(0))
    flags = [sampler.is_augmented(i) for i in range(cfg.batch_size * cfg.batches_per_epoch)]
    total = len(flags)
    assert abs(sum(flags) - total / 5) <= 1
    assert all(flags[i] == (i % 5 == 4) for i in range(total))


def test_augmented_provenance_follows_stream(small_set):
    sampler = BatchSampler(small_set, small_config(batch_size=3), np.random.default_rng(0))
    prov = np.concatenate([sampler.sample_batch().provenance for _ in range(5)])
    assert np.array_equal(np.flatnonzero(prov == AUGMENTED), [4, 9, 14])


def test_augment_with_silent_accompaniment_returns_vocals():
    songs = [make_song(i, 9.0, silent_accomp=True) for i in range(2)]
    data = PatchDataset(songs, n_frames=64, n_bins=64)
    mix, voc, z = augment(data, 1, 5, data, np.random.default_rng(0))
    np.testing.assert_allclose(mix, voc, atol=1e-5)
    real_mix, real_voc, real_z = data.real(1, 5)
    assert np.array_equal(voc, real_voc) and np.array_equal(z, real_z)


def test_augment_target_is_the_patch_vocals(small_set):
    mix, voc, z = augment(small_set, 2, 10, small_set, np.random.default_rng(1))
    _, real_voc, real_z = small_set.real(2, 10)
    assert np.array_equal(voc, real_voc) and np.array_equal(z, real_z)
    assert not np.allclose(mix, small_set.real(2, 10)[0])


def test_empty_pool_disables_augmentation(small_set, caplog):
    sampler = BatchSampler(small_set, small_config(), np.random.default_rng(0), pool=PatchDataset([]))
    assert not sampler.augment_enabled and "disabled" in caplog.text
    assert not any(sampler.sample_batch().provenance)


def test_validation_batches_never_augmented(small_set):
    for batch in fixed_batches(small_set, 6, 5, seed=2):
        assert np.all(batch.provenance == REAL)
        for (s, o), x in zip(batch.index, batch.mixture):
            assert np.array_equal(x, small_set.real(s, o)[0])


# -- loss --------------------------------------------------------------------------------
@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_l1_non_negative_and_zero_on_target(seed):
    r = np.random.default_rng(seed)
    x = np.abs(r.standard_normal((2, 4, 5)))
    mask = r.random((2, 4, 5))
    y = np.abs(r.standard_normal((2, 4, 5)))
    assert l1_loss(Tensor(mask), x, y).item() >= 0
    assert l1_loss(Tensor(np.ones_like(x)), x, x).item() == 0.0


# -- trainer -----------------------------------------------------------------------------
def test_fit_writes_run_directory(small_set, tmp_path):
    model = SeparationModel(TINY.with_variant("S_s"))
    trainer = Trainer(model, small_set, small_set, small_config(), run_dir=tmp_path)
    history = trainer.fit(max_epochs=2)
    assert [h["epoch"] for h in history] == [1, 2]
    for name in ("config.json", "metrics.tsv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "train_loss", "val_loss", "lr"] and len(lines) == 3
    assert all(math.isfinite(h["val_loss"]) and h["train_loss"] >= 0 for h in history)


def test_model_dataset_mismatch_rejected(small_set):
    with pytest.raises(ConfigError, match="patches"):
        Trainer(SeparationModel(dataclasses.replace(TINY, n_bins=128)), small_set, None, small_config())


@pytest.mark.parametrize("variant", ["unet", "W_co", "S_s"])
def test_checkpoint_resume_reproduces_next_loss(small_set, tmp_path, variant):
    cfg = small_config()
    trainer = Trainer(SeparationModel(TINY.with_variant(variant)), small_set, small_set, cfg)
    trainer.fit(max_epochs=1)
    trainer.save_checkpoint(tmp_path / "c.ckpt")
    expected = [trainer.train_step() for _ in range(2)]
    resumed = Trainer.resume(tmp_path / "c.ckpt", small_set, small_set)
    got = [resumed.train_step() for _ in range(2)]
    assert np.max(np.abs(np.subtract(expected, got))) < 1e-6
    assert resumed.epoch == 1 and resumed.sampler.counter == trainer.sampler.counter


def test_lr_scale_groups(small_set):
    cfg = small_config(basis_lr_scale=10.0, control_lr_scale=0.1)
    for variant, prefix, scale in (("S_s", "bases.", 10.0), ("W_si", "control.", 0.1)):
        trainer = Trainer(SeparationModel(TINY.with_variant(variant)), small_set, None, cfg)
        scales = dict(zip(trainer.params, trainer.optimizer.lr_scale))
        assert any(n.startswith(prefix) for n in scales)
        for name, s in scales.items():
            assert s == (scale if name.startswith(prefix) else 1.0), name


def test_nan_loss_aborts_with_diagnostic_checkpoint(small_set, tmp_path):
    trainer = Trainer(SeparationModel(TINY), small_set, None, small_config(), run_dir=tmp_path)
    batch = trainer.sampler.sample_batch()
    batch.vocals[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="non-finite"):
        trainer.train_step(batch)
    assert (tmp_path / "nan-abort.ckpt").exists()


def test_training_lr_never_increases(small_set):
    cfg = small_config(plateau_patience=1, early_stop_patience=50, batches_per_epoch=1)
    trainer = Trainer(SeparationModel(TINY), small_set, small_set, cfg)
    lrs = [h["lr"] for h in trainer.fit(max_epochs=5)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
