import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phonosep import dsp
from phonosep.dataset import (
    PHONEME_TABLE, SongRecord, SplitConfig, SynthConfig, TrackVoiceProfile, build_sources, read_manifest,
    read_profiles, songs_for_training, split_by_agreement, synth_generate, synth_song, vocal_track_ids,
    write_manifest, write_profiles,
)
from phonosep.evaluation import bss_eval
from phonosep.phonemes import INDEX, N_PHONEMES, PHONEMES, load_annotations

SMALL = SynthConfig(n_songs=4, duration=6.0, seed=5, n_val=1, n_test=1)


def profiles(*probs):
    return [TrackVoiceProfile(f"t{i}", p) for i, p in enumerate(probs)]


# -- stems ---------------------------------------------------------------------------
def test_build_sources_threshold_examples():
    r = np.random.default_rng(0)
    a, b = r.standard_normal(100), r.standard_normal(80)
    voc, acc, mix = build_sources({"t0": a, "t1": b}, profiles(0.9, 0.1))
    assert np.array_equal(voc, a) and np.array_equal(acc[:80], b) and np.all(acc[80:] == 0)
    voc, acc, _ = build_sources({"t0": a, "t1": b}, profiles(0.90, 0.89))
    assert np.array_equal(voc[:80], a[:80] + b) and not acc.any()
    voc, acc, mix = build_sources({"t0": a}, profiles(0.3))
    assert np.array_equal(voc, a) and not acc.any()


def test_build_sources_rejects_mismatch():
    with pytest.raises(ValueError, match="profiles"):
        build_sources({"t0": np.ones(3)}, profiles(0.5, 0.4))
    with pytest.raises(ValueError):
        build_sources({}, [])
    with pytest.raises(ValueError):
        TrackVoiceProfile("x", 1.5)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.integers(0, 1000))
def test_build_sources_invariants(probs, seed):
    r = np.random.default_rng(seed)
    tracks = {f"t{i}": r.standard_normal(r.integers(5, 40)) for i in range(len(probs))}
    voc, acc, mix = build_sources(tracks, profiles(*probs))
    assert np.array_equal(mix, voc + acc) and len(mix) == max(len(t) for t in tracks.values())
    top = f"t{int(np.argmax(probs))}"
    assert top in vocal_track_ids(profiles(*probs))


def test_profile_file_roundtrip(tmp_path):
    p = profiles(0.25, 0.875)
    write_profiles(tmp_path / "p.txt", p)
    (tmp_path / "p.txt").write_text("# comment\n" + (tmp_path / "p.txt").read_text() + "\n")
    assert read_profiles(tmp_path / "p.txt") == p
    (tmp_path / "bad.txt").write_text("a 0.1 extra\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_profiles(tmp_path / "bad.txt")


# -- splits ----------------------------------------------------------------------------
def record(name, eta):
    return SongRecord(name, "", "", "", "", eta)


def test_split_boundaries():
    parts, counts = split_by_agreement([record(str(e), e) for e in (0.75, 0.885, 0.95, 0.5)])
    assert [r.song_id for r in parts["train"]] == ["0.75"]
    assert [r.song_id for r in parts["val"]] == ["0.885"]
    assert [r.song_id for r in parts["test"]] == ["0.95"]
    assert counts == {"train": 1, "val": 1, "test": 1, "excluded": 1}
    cfg = SplitConfig()
    assert (cfg.assign(0.7), cfg.assign(0.88), cfg.assign(0.89), cfg.assign(0.6999)) == ("train", "val", "test", None)


@given(st.lists(st.floats(0.0, 1.0), max_size=40))
def test_split_is_partition(etas):
    recs = [record(f"s{i}", e) for i, e in enumerate(etas)]
    parts, counts = split_by_agreement(recs)
    ids = [r.song_id for p in parts.values() for r in p]
    assert len(ids) == len(set(ids)) == sum(e >= 0.7 for e in etas)
    assert counts["excluded"] == sum(e < 0.7 for e in etas)
    assert all(r.split == name for name, p in parts.items() for r in p)


# -- manifests ------------------------------------------------------------------------
def test_manifest_roundtrip_and_validation(tmp_path):
    for name in ("m.wav", "v.wav", "a.wav", "ann.json"):
        (tmp_path / name).write_text("")
    recs = [SongRecord("x", "m.wav", "v.wav", "a.wav", "ann.json", 0.9, "test")]
    write_manifest(tmp_path / "man.jsonl", recs)
    back = read_manifest(tmp_path / "man.jsonl")
    assert back[0].song_id == "x" and back[0].mixture == str(tmp_path / "m.wav")
    (tmp_path / "v.wav").unlink()
    with pytest.raises(FileNotFoundError, match="vocals"):
        read_manifest(tmp_path / "man.jsonl")
    assert len(read_manifest(tmp_path / "man.jsonl", validate=False)) == 1
    write_manifest(tmp_path / "dup.jsonl", recs * 2)
    with pytest.raises(ValueError, match="duplicate"):
        read_manifest(tmp_path / "dup.jsonl", validate=False)


# -- synthetic corpus --------------------------------------------------------------------
@pytest.fixture(scope="module")
def corpus():
    return synth_generate(SMALL)


def test_synth_deterministic(corpus):
    again = synth_generate(SMALL)
    for a, b in zip(corpus, again):
        assert a.vocals.tobytes() == b.vocals.tobytes()
        assert a.accompaniment.tobytes() == b.accompaniment.tobytes()
        assert a.annotations == b.annotations
    other = synth_song(SynthConfig(n_songs=4, duration=6.0, seed=6, n_val=1, n_test=1), 0)
    assert not np.array_equal(other.vocals, corpus[0].vocals)


def test_synth_split_counts():
    cfg = SynthConfig(n_songs=55, n_val=5, n_test=10)
    tags = [cfg.split_of(i) for i in range(55)]
    assert (tags.count("train"), tags.count("val"), tags.count("test")) == (40, 5, 10)


def test_schedule_rasterizes_exactly(corpus):
    for song, rec in zip(corpus, songs_for_training(corpus)):
        n_frames = rec.z.shape[0]
        centers = (np.arange(n_frames) * dsp.HOP + dsp.WINDOW // 2) / dsp.SAMPLE_RATE
        expected = np.zeros((n_frames, N_PHONEMES))
        for t0, t1, _word, phones in song.schedule:
            rows = (centers >= t0) & (centers < t1)
            expected[np.ix_(rows, [INDEX[p] for p in phones])] = 1
        expected[:, -1] = expected[:, :-1].sum(axis=1) == 0
        np.testing.assert_array_equal(rec.z, expected)
        assert song.annotations.agreement == 1.0


def test_vocal_formant_peaks(corpus):
    song = corpus[0]
    sr = dsp.SAMPLE_RATE
    checked = 0
    for t0, t1, _word, phones in song.schedule[:6]:
        seg = int(round((t1 - t0) * sr / len(phones)))
        for k, p in enumerate(phones):
            start = int(round(t0 * sr)) + k * seg
            x = song.vocals[start : start + seg] * np.hanning(seg)
            spec = np.abs(np.fft.rfft(x, n=sr))  # 1 Hz bins
            f0, *formants = PHONEME_TABLE[INDEX[p]]
            harm = np.arange(f0, sr / 2, f0)
            mags = np.concatenate([[0.0], spec[harm.astype(int)], [0.0]])
            peaks = [harm[i - 1] for i in range(1, len(mags) - 1) if mags[i] > mags[i - 1] and mags[i] >= mags[i + 1]]
            bin_hz = sr / dsp.WINDOW
            for fc in formants:
                assert min(abs(pk - fc) for pk in peaks) <= bin_hz, (p, fc, peaks)
            checked += 1
    assert checked >= 10


def test_phoneme_table_distinct():
    assert PHONEME_TABLE.shape == (len(PHONEMES), 4)
    assert len({tuple(r) for r in PHONEME_TABLE}) == len(PHONEMES)
    assert np.all(PHONEME_TABLE % 8 == 0)


def test_oracle_mask_sdr_above_10_db(corpus):
    for song in corpus[:2]:
        spec = dsp.stft(song.mixture)
        v = np.abs(dsp.stft(song.vocals).values)
        a = np.abs(dsp.stft(song.accompaniment).values)
        mask = v / np.maximum(v + a, 1e-12)
        est = dsp.istft(dsp.ComplexSpectrogram(dsp.apply_mask(np.ones(mask.shape), mask) * spec.values, None,
                                               len(song.mixture))).samples
        refs = np.stack([song.vocals, song.accompaniment])
        sdr, _, _ = bss_eval(refs, np.stack([est, song.mixture - est]))
        assert sdr[0] > 10.0, sdr


def test_synth_to_disk(tmp_path):
    cfg = SynthConfig(n_songs=3, duration=3.0, seed=1, n_val=1, n_test=1)
    recs = synth_generate(cfg, tmp_path, jobs=2)
    assert [r.split for r in recs] == ["train", "val", "test"]
    back = read_manifest(tmp_path / "manifest.jsonl")
    assert [r.song_id for r in back] == [r.song_id for r in recs]
    assert len(read_manifest(tmp_path / "test.jsonl")) == 1
    clip = dsp.read_wav(back[0].vocals)
    mem = synth_song(cfg, 0)
    np.testing.assert_allclose(clip.samples, mem.vocals, atol=1e-6)
    assert load_annotations(back[0].annotations) == mem.annotations
