"""Stems, splits, manifests and the synthetic sung-phoneme corpus."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import butter, sosfilt

from . import dsp
from .phonemes import (
    INDEX,
    PHONEMES,
    AnnotationSequence,
    WordAnnotation,
    build_activation_matrix,
    load_annotations,
    load_lexicon,
    save_annotations,
)

logger = logging.getLogger(__name__)

NU = 0.98


# -- stems from multitracks ------------------------------------------------------------
@dataclass(frozen=True)
class TrackVoiceProfile:
    track_id: str
    voice_probability: float

    def __post_init__(self):
        if not 0.0 <= self.voice_probability <= 1.0:
            raise ValueError(f"track {self.track_id}: voice probability {self.voice_probability} not in [0, 1]")


def read_profiles(path) -> List[TrackVoiceProfile]:
    """Read ``track_id  probability`` lines; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'track_id probability', got {raw!r}")
        out.append(TrackVoiceProfile(parts[0], float(parts[1])))
    return out


def write_profiles(path, profiles: Sequence[TrackVoiceProfile]) -> None:
    Path(path).write_text("".join(f"{p.track_id}  {p.voice_probability:.6f}\n" for p in profiles))


def vocal_track_ids(profiles: Sequence[TrackVoiceProfile], nu: float = NU) -> List[str]:
    """Tracks whose probability reaches ``nu`` times the largest one."""
    top = max(p.voice_probability for p in profiles)
    return [p.track_id for p in profiles if p.voice_probability >= top * nu]


def build_sources(tracks: Mapping[str, np.ndarray], profiles: Sequence[TrackVoiceProfile],
                  nu: float = NU) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merge tracks into (vocals, accompaniment, mixture), zero-padded to the longest."""
    if not tracks:
        raise ValueError("at least one track is required")
    ids = {p.track_id for p in profiles}
    if ids != set(tracks) or len(ids) != len(profiles):
        raise ValueError(
            f"profiles do not match tracks: missing={sorted(set(tracks) - ids)} extra={sorted(ids - set(tracks))}"
        )
    length = max(len(t) for t in tracks.values())
    vocal_ids = set(vocal_track_ids(profiles, nu))
    vocals = np.zeros(length)
    accomp = np.zeros(length)
    for tid, samples in tracks.items():
        target = vocals if tid in vocal_ids else accomp
        target[: len(samples)] += np.asarray(samples, dtype=np.float64)
    return vocals, accomp, vocals + accomp


# -- manifests ---------------------------------------------------------------------------
MANIFEST_FIELDS = ("song_id", "mixture", "vocals", "accompaniment", "annotations", "eta", "split")


@dataclass
class SongRecord:
    song_id: str
    mixture: str
    vocals: str
    accompaniment: str
    annotations: str
    eta: float
    split: str = ""

    def resolve(self, base: Path) -> "SongRecord":
        def r(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

        return SongRecord(self.song_id, r(self.mixture), r(self.vocals), r(self.accompaniment),
                          r(self.annotations), self.eta, self.split)


def write_manifest(path, records: Sequence[SongRecord]) -> None:
    """One JSON object per line with keys in ``MANIFEST_FIELDS`` order.

    Relative paths are relative to the manifest's directory.
    """
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: getattr(r, k) for k in MANIFEST_FIELDS}) + "\n")


def read_manifest(path, validate: bool = True) -> List[SongRecord]:
    path = Path(path)
    out = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        unknown = set(rec) - set(MANIFEST_FIELDS)
        if unknown:
            raise ValueError(f"{path}:{lineno}: unknown manifest fields {sorted(unknown)}")
        r = SongRecord(**rec).resolve(path.parent)
        if r.song_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate song {r.song_id}")
        seen.add(r.song_id)
        out.append(r)
    if validate:
        for r in out:
            for kind in ("mixture", "vocals", "accompaniment", "annotations"):
                p = getattr(r, kind)
                if p and not Path(p).exists():
                    raise FileNotFoundError(f"{path}: song {r.song_id}: {kind} file {p} does not exist")
    return out


# -- splits ------------------------------------------------------------------------------
@dataclass(frozen=True)
class SplitConfig:
    train_min: float = 0.7
    val_min: float = 0.88
    test_min: float = 0.89

    def __post_init__(self):
        if not self.train_min <= self.val_min <= self.test_min:
            raise ValueError("split thresholds must be ordered train_min <= val_min <= test_min")

    def assign(self, eta: float) -> Optional[str]:
        if eta >= self.test_min:
            return "test"
        if eta >= self.val_min:
            return "val"
        if eta >= self.train_min:
            return "train"
        return None


def split_by_agreement(records: Sequence[SongRecord], config: SplitConfig = SplitConfig()):
    """Partition records by agreement score; returns ``({split: records}, counts)``."""
    parts: Dict[str, List[SongRecord]] = {"train": [], "val": [], "test": []}
    excluded = 0
    for r in records:
        tag = config.assign(r.eta)
        if tag is None:
            excluded += 1
            continue
        parts[tag].append(SongRecord(r.song_id, r.mixture, r.vocals, r.accompaniment, r.annotations, r.eta, tag))
    counts = {k: len(v) for k, v in parts.items()}
    counts["excluded"] = excluded
    return parts, counts


# -- loading songs for training ------------------------------------------------------------
def load_song(record: SongRecord, lexicon=None):
    from .training import Song

    mix = dsp.read_wav(record.mixture).samples
    voc = dsp.read_wav(record.vocals).samples
    acc = dsp.read_wav(record.accompaniment).samples
    ann = load_annotations(record.annotations)
    z = build_activation_matrix(ann, dsp.frame_count(len(mix)), lexicon)
    return Song(record.song_id, mix, voc, acc, z)


# -- synthetic corpus -----------------------------------------------------------------------
def phoneme_table() -> np.ndarray:
    """``(39, 4)`` rows of (f0, F1, F2, F3) in Hz, one per phoneme.

    Every frequency is a multiple of the 8 Hz bin spacing and each formant
    sits on a harmonic of its phoneme's fundamental, two or more harmonics
    above the previous formant. Fundamentals are all distinct, so no two
    phonemes render alike.
    """
    rows = []
    n = len(PHONEMES)
    for i in range(n):
        f0 = 8.0 * (12 + (7 * i) % n)  # 96 .. 400 Hz, a permutation since gcd(7, 39) = 1
        targets = (
            300.0 + 600.0 * ((0.618034 * i) % 1.0),
            950.0 + 1200.0 * ((0.414214 * i + 0.3) % 1.0),
            2300.0 + 1100.0 * ((0.732051 * i + 0.6) % 1.0),
        )
        harm = []
        for t in targets:
            # at least one harmonic between neighbouring formants keeps them separate peaks
            harm.append(max(round(t / f0), harm[-1] + 2 if harm else 1))
        rows.append([f0] + [f0 * h for h in harm])
    return np.array(rows)


PHONEME_TABLE = phoneme_table()
FORMANT_GAINS = (1.0, 0.7, 0.5)
FORMANT_WIDTH = 60.0  # Hz


def harmonic_amplitudes(phoneme: str) -> Tuple[float, np.ndarray]:
    f0, *formants = PHONEME_TABLE[INDEX[phoneme]]
    h = np.arange(1, int((dsp.SAMPLE_RATE / 2 - 1) // f0) + 1)
    f = h * f0
    amp = np.full(h.shape, 0.02)
    for g, fc in zip(FORMANT_GAINS, formants):
        amp += g / (1.0 + ((f - fc) / FORMANT_WIDTH) ** 2)
    return f0, amp / amp.max()


def render_tone(phoneme: str, n_samples: int, rng: np.random.Generator, gain: float,
                fade: int = 64) -> np.ndarray:
    f0, amp = harmonic_amplitudes(phoneme)
    t = np.arange(n_samples) / dsp.SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi, len(amp))
    h = np.arange(1, len(amp) + 1)
    tone = np.sin(2 * np.pi * f0 * t[:, None] * h[None, :] + phase[None, :]) @ amp
    tone *= gain / len(amp) ** 0.5
    env = np.ones(n_samples)
    k = min(fade, n_samples // 2)
    if k:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[n_samples - k :] = ramp[::-1]
    return tone * env


@dataclass(frozen=True)
class SynthConfig:
    n_songs: int = 55
    duration: float = 20.0
    seed: int = 0
    n_val: int = 5
    n_test: int = 10
    vocal_gain: float = 0.3
    pad_gain: Tuple[float, float] = (0.12, 0.24)
    noise_rms: float = 0.02

    def __post_init__(self):
        if self.n_songs < 1 or self.duration <= 1.0:
            raise ValueError("need n_songs >= 1 and duration > 1 s")
        if self.n_val + self.n_test > self.n_songs:
            raise ValueError("n_val + n_test exceeds n_songs")

    def split_of(self, index: int) -> str:
        n_train = self.n_songs - self.n_val - self.n_test
        if index < n_train:
            return "train"
        return "val" if index < n_train + self.n_val else "test"


@dataclass
class SynthSong:
    song_id: str
    vocals: np.ndarray
    accompaniment: np.ndarray
    annotations: AnnotationSequence
    schedule: List[Tuple[float, float, str, Tuple[str, ...]]] = field(default_factory=list)

    @property
    def mixture(self) -> np.ndarray:
        return self.vocals + self.accompaniment


def _place(buf: np.ndarray, start: int, x: np.ndarray) -> None:
    stop = min(len(buf), start + len(x))
    buf[start:stop] += x[: stop - start]


def _sing(buf: np.ndarray, rng: np.random.Generator, lexicon, words, gain) -> list:
    """Fill ``buf`` with randomly chosen words, one harmonic tone per phoneme."""
    sr = dsp.SAMPLE_RATE
    n = len(buf)
    schedule = []
    t = rng.uniform(0.2, 0.8)
    while True:
        word = words[rng.integers(len(words))]
        phones = lexicon[word]
        # snap to the sample grid so annotation times are exact sample positions
        seg = max(1, int(round(rng.uniform(0.10, 0.22) * sr)))
        start = int(round(t * sr))
        stop = start + seg * len(phones)
        if stop > n - int(0.2 * sr):
            return schedule
        g = gain()
        for k, p in enumerate(phones):
            _place(buf, start + k * seg, render_tone(p, seg, rng, g))
        schedule.append((start / sr, stop / sr, word, tuple(phones)))
        gap = rng.uniform(0.05, 0.25) if rng.random() < 0.7 else rng.uniform(0.5, 1.5)
        t = stop / sr + gap


def synth_song(config: SynthConfig, index: int, lexicon: Optional[Dict[str, List[str]]] = None) -> SynthSong:
    """Render song ``index`` deterministically from ``(config.seed, index)``.

    Vocals are words sung phoneme by phoneme as harmonic tones. The
    accompaniment is band-limited noise plus two quieter backing voices
    rendered by the same process, so timbre and rhythm cannot tell voice
    from backing; only level and the annotation can.
    """
    rng = np.random.default_rng([config.seed, index])
    lexicon = load_lexicon() if lexicon is None else lexicon
    words = sorted(lexicon)
    sr = dsp.SAMPLE_RATE
    n = int(round(config.duration * sr))
    vocals = np.zeros(n)
    accomp = np.zeros(n)
    schedule = _sing(vocals, rng, lexicon, words, lambda: config.vocal_gain)
    for _voice in range(2):
        _sing(accomp, rng, lexicon, words, lambda: rng.uniform(*config.pad_gain))

    sos = butter(4, [150.0, 1500.0], btype="bandpass", fs=sr, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    accomp += noise * (config.noise_rms / max(noise.std(), 1e-12))

    ann = AnnotationSequence([WordAnnotation(t0, t1, w) for t0, t1, w, _ in schedule], "words", 1.0)
    return SynthSong(f"synth{index:04d}", vocals, accomp, ann, schedule)


def _synth_to_disk(args):
    config, index, root = args
    song = synth_song(config, index)
    d = Path(root) / "songs" / song.song_id
    d.mkdir(parents=True, exist_ok=True)
    for name, x in (("mixture", song.mixture), ("vocals", song.vocals), ("accompaniment", song.accompaniment)):
        dsp.write_wav(d / f"{name}.wav", dsp.AudioClip(x))
    save_annotations(d / "annotations.json", song.annotations)
    rel = f"songs/{song.song_id}"
    return SongRecord(song.song_id, f"{rel}/mixture.wav", f"{rel}/vocals.wav", f"{rel}/accompaniment.wav",
                      f"{rel}/annotations.json", 1.0, config.split_of(index))


def synth_generate(config: SynthConfig, out_dir=None, jobs: int = 1):
    """Build the corpus; in memory (list of :class:`SynthSong`) or on disk.

    On disk this writes ``songs/<id>/{mixture,vocals,accompaniment}.wav``,
    ``songs/<id>/annotations.json``, ``manifest.jsonl`` (all songs) and one
    manifest per split, and returns the records.
    """
    if out_dir is None:
        return [synth_song(config, i) for i in range(config.n_songs)]
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(config, i, str(root)) for i in range(config.n_songs)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            records = list(pool.map(_synth_to_disk, tasks))
    else:
        records = [_synth_to_disk(t) for t in tasks]
    write_manifest(root / "manifest.jsonl", records)
    for split in ("train", "val", "test"):
        write_manifest(root / f"{split}.jsonl", [r for r in records if r.split == split])
    (root / "synth_config.json").write_text(json.dumps(config.__dict__, indent=1))
    return records


def songs_for_training(synth: Sequence[SynthSong]):
    """In-memory synthetic songs as training records (activation matrix on the STFT grid)."""
    from .training import Song

    out = []
    for s in synth:
        z = build_activation_matrix(s.annotations, dsp.frame_count(len(s.vocals)))
        out.append(Song(s.song_id, s.mixture, s.vocals, s.accompaniment, z))
    return out
