"""Word-level lyric annotations and the phoneme activation matrix.

A word activates all of its phonemes at once (a "bag of phonemes") over
every STFT frame whose centre time falls inside ``[t_start, t_end)``.
Row 39 is the non-phoneme indicator: 1 exactly when nothing else is active.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsp import HOP, SAMPLE_RATE, WINDOW

logger = logging.getLogger(__name__)

PHONEMES: Tuple[str, ...] = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P",
    "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)  # fmt: skip
NON_PHONEME = "NON_PHONEME"
VOCABULARY: Tuple[str, ...] = PHONEMES + (NON_PHONEME,)
N_PHONEMES = len(VOCABULARY)  # 40
NON_PHONEME_INDEX = N_PHONEMES - 1
INDEX: Dict[str, int] = {sym: i for i, sym in enumerate(VOCABULARY)}
FRAME_RATE = SAMPLE_RATE / HOP


def vocabulary_fingerprint() -> str:
    return hashlib.sha256(" ".join(VOCABULARY).encode()).hexdigest()[:16]


# -- annotations ---------------------------------------------------------------
@dataclass
class WordAnnotation:
    t_start: float
    t_end: float
    text: str
    freq_range: Tuple[float, float] = (0.0, 0.0)
    parent_index: int = -1

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"annotation {self.text!r}: t_start {self.t_start} must be < t_end {self.t_end}")
        f_min, f_max = self.freq_range
        if f_min > f_max:
            raise ValueError(f"annotation {self.text!r}: f_min {f_min} > f_max {f_max}")


@dataclass
class AnnotationSequence:
    words: List[WordAnnotation] = field(default_factory=list)
    granularity: str = "words"
    agreement: float = 1.0

    def __post_init__(self):
        for a, b in zip(self.words, self.words[1:]):
            if a.t_end > b.t_start:
                raise ValueError(
                    f"annotations overlap or are unordered: {a.text!r} ends at {a.t_end}, "
                    f"{b.text!r} starts at {b.t_start}"
                )
        if not 0.0 <= self.agreement <= 1.0:
            raise ValueError(f"agreement score must be in [0, 1], got {self.agreement}")

    def __len__(self) -> int:
        return len(self.words)


def save_annotations(path, seq: AnnotationSequence) -> None:
    """Write the JSON annotation document.

    Fields: ``granularity``, ``agreement`` and ``words``, a list of objects
    with ``t_start``, ``t_end``, ``f_min``, ``f_max``, ``text`` and
    ``parent_index``.
    """
    words = []
    for w in seq.words:
        words.append(
            {
                "t_start": w.t_start,
                "t_end": w.t_end,
                "f_min": w.freq_range[0],
                "f_max": w.freq_range[1],
                "text": w.text,
                "parent_index": w.parent_index,
            }
        )
    doc = {"granularity": seq.granularity, "agreement": seq.agreement, "words": words}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_annotations(path) -> AnnotationSequence:
    doc = json.loads(Path(path).read_text())
    words = [
        WordAnnotation(
            float(w["t_start"]),
            float(w["t_end"]),
            str(w["text"]),
            (float(w.get("f_min", 0.0)), float(w.get("f_max", 0.0))),
            int(w.get("parent_index", -1)),
        )
        for w in doc["words"]
    ]
    return AnnotationSequence(words, doc.get("granularity", "words"), float(doc.get("agreement", 1.0)))


# -- lexicon -------------------------------------------------------------------
def parse_lexicon(lines) -> Dict[str, List[str]]:
    """Parse CMUdict text; only the first pronunciation of a word is kept."""
    lexicon: Dict[str, List[str]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith(";;;"):
            continue
        parts = line.split()
        word = parts[0].lower()
        if re.search(r"\(\d+\)$", word):
            continue
        phones = [re.sub(r"\d", "", p).upper() for p in parts[1:]]
        if not phones or any(p not in INDEX or p == NON_PHONEME for p in phones):
            logger.warning("lexicon line %d malformed, skipped: %r", lineno, raw.rstrip())
            continue
        lexicon.setdefault(word, phones)
    return lexicon


@lru_cache(maxsize=None)
def _packaged_lexicon() -> Dict[str, List[str]]:
    text = resources.files("phonosep").joinpath("data/cmudict-subset.txt").read_text()
    return parse_lexicon(text.splitlines())


def load_lexicon(path=None) -> Dict[str, List[str]]:
    if path is None:
        return dict(_packaged_lexicon())
    with open(path, encoding="latin-1") as fh:
        return parse_lexicon(fh)


def word_to_phonemes(word: str, lexicon: Optional[Dict[str, List[str]]] = None) -> List[str]:
    lexicon = _packaged_lexicon() if lexicon is None else lexicon
    key = re.sub(r"[^a-z']", "", word.lower())
    if not key:
        return []
    phones = lexicon.get(key)
    if phones is None:
        logger.warning("word %r not in lexicon", word)
        return []
    return list(phones)


# -- activation matrix -----------------------------------------------------------
def frame_centers(n_frames: int) -> np.ndarray:
    return (np.arange(n_frames) * HOP + WINDOW / 2) / SAMPLE_RATE


def build_activation_matrix(
    annotations: AnnotationSequence,
    n_frames: int,
    lexicon: Optional[Dict[str, List[str]]] = None,
) -> np.ndarray:
    """Binary ``(n_frames, 40)`` matrix; words render as simultaneous phonemes."""
    z = np.zeros((n_frames, N_PHONEMES), dtype=np.float32)
    centers = frame_centers(n_frames)
    covered = ((n_frames - 1) * HOP + WINDOW) / SAMPLE_RATE
    truncated = False
    for word in annotations.words:
        cols = [INDEX[p] for p in word_to_phonemes(word.text, lexicon)]
        lo = int(np.searchsorted(centers, word.t_start, side="left"))
        hi = int(np.searchsorted(centers, word.t_end, side="left"))
        truncated |= word.t_end > covered
        if cols and hi > lo:
            z[lo:hi, cols] = 1.0
    if truncated:
        logger.warning("annotations extend past %d frames and were truncated", n_frames)
    z[:, NON_PHONEME_INDEX] = (z[:, :NON_PHONEME_INDEX].sum(axis=1) == 0).astype(np.float32)
    return z


def normalize_strong(z: np.ndarray) -> np.ndarray:
    """Softmax over the phoneme axis, so every frame lies on the simplex."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def downsample_to_depth(z_norm: np.ndarray, depth: int) -> np.ndarray:
    """Average-pool the time axis (second to last) by ``2**depth``."""
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    n = z_norm.shape[-2]
    factor = 2 ** depth
    if n % factor:
        raise ValueError(f"time extent {n} is not divisible by 2**{depth}")
    if depth == 0:
        return z_norm
    shape = z_norm.shape[:-2] + (n // factor, factor, z_norm.shape[-1])
    return z_norm.reshape(shape).mean(axis=-2)


def shuffle_columns(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute all 40 columns (non-phoneme included) with one random permutation."""
    return z[..., rng.permutation(z.shape[-1])]
