"""Audio front end: resampling, STFT/ISTFT, patching and masking.

The pipeline runs at 8192 Hz with a 1024-sample Hann window and a hop of
768 samples. Frame ``k`` covers samples ``[768 k, 768 k + 1024)``. Of the
513 one-sided bins the Nyquist bin is set aside, leaving 512 bins for the
model; the spectrogram keeps the Nyquist row separately so that inversion
of an unmodified spectrogram is exact.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

SAMPLE_RATE = 8192
WINDOW = 1024
HOP = 768
N_BINS = 512
PATCH_FRAMES = 128
RESAMPLE_ZERO_CROSSINGS = 32  # per side, i.e. 64 sinc lobes per output phase


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip expects mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        peak = np.abs(self.samples).max(initial=0.0)
        if peak > 10:
            logger.warning("audio peak %.1f exceeds 10; input is probably not normalised", peak)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Frames x 512 complex bins plus the set-aside Nyquist row."""

    values: np.ndarray
    nyquist: Optional[np.ndarray] = None
    length: Optional[int] = None
    window: int = WINDOW
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)


@dataclass
class MagnitudePatch:
    magnitude: np.ndarray
    offset: int
    valid_frames: int
    phase: Optional[np.ndarray] = None


def hann(n: int = WINDOW) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


# -- resampling ----------------------------------------------------------------
def resample(audio: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Band-limited downsampling with a Kaiser-windowed sinc.

    Each output sample is a weighted sum over 64 zero crossings of the
    low-pass kernel (32 per side), normalised to unit DC gain.
    """
    src = audio.sample_rate
    if src == target_rate:
        return AudioClip(audio.samples.copy(), src)
    if src < target_rate:
        raise ValueError(f"upsampling {src} Hz -> {target_rate} Hz is not supported")
    ratio = Fraction(target_rate, src)
    cutoff = float(ratio)  # of the source Nyquist
    n_out = int(math.floor(len(audio) * ratio))
    half = int(math.ceil(RESAMPLE_ZERO_CROSSINGS / cutoff))
    taps = np.arange(-half, half + 1)
    x = np.concatenate([np.zeros(half), audio.samples, np.zeros(half + 1)])
    out = np.empty(n_out)
    beta = 8.6
    chunk = max(1, 2 ** 20 // len(taps))
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        pos = n * (src / target_rate)
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        t = taps[None, :] - frac[:, None]  # offset of each tap from the ideal position
        kernel = np.sinc(cutoff * t) * _kaiser(t / (half + 1), beta)
        kernel /= kernel.sum(axis=1, keepdims=True)
        idx = base[:, None] + taps[None, :] + half
        out[n] = (x[idx] * kernel).sum(axis=1)
    return AudioClip(out, target_rate)


def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    inside = np.abs(u) < 1.0
    w = np.zeros_like(u)
    w[inside] = np.i0(beta * np.sqrt(1.0 - u[inside] ** 2)) / np.i0(beta)
    return w


# -- STFT ------------------------------------------------------------------------
def frame_count(n_samples: int) -> int:
    if n_samples <= WINDOW:
        return 1
    return int(math.ceil(n_samples / HOP))


def _frames(samples: np.ndarray, n_frames: int) -> np.ndarray:
    needed = (n_frames - 1) * HOP + WINDOW
    padded = np.zeros(max(needed, len(samples)))
    padded[: len(samples)] = samples
    return sliding_window_view(padded[:needed], WINDOW)[::HOP]


def stft(audio, n_frames: Optional[int] = None) -> ComplexSpectrogram:
    """Hann-windowed STFT keeping 512 bins (Nyquist stored separately).

    ``audio`` is an :class:`AudioClip` at 8192 Hz or a raw sample array.
    """
    if isinstance(audio, AudioClip):
        if audio.sample_rate != SAMPLE_RATE:
            raise ValueError(f"stft expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz")
        samples = audio.samples
    else:
        samples = np.asarray(audio, dtype=np.float64)
    n_frames = frame_count(len(samples)) if n_frames is None else n_frames
    spec = np.fft.rfft(_frames(samples, n_frames) * hann(), axis=1)
    return ComplexSpectrogram(spec[:, :N_BINS], spec[:, N_BINS].copy(), len(samples))


def istft(spec: ComplexSpectrogram, length: Optional[int] = None) -> AudioClip:
    """Weighted overlap-add inverse normalised by the summed squared window.

    A missing Nyquist row is treated as zero. Samples where the window sum
    is below 1e-8 (the very first sample) are left at zero.
    """
    n_frames = spec.n_frames
    full = np.zeros((n_frames, N_BINS + 1), dtype=np.complex128)
    full[:, :N_BINS] = spec.values
    if spec.nyquist is not None:
        full[:, N_BINS] = spec.nyquist
    frames = np.fft.irfft(full, n=WINDOW, axis=1) * hann()
    total = (n_frames - 1) * HOP + WINDOW
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = hann() ** 2
    for k in range(n_frames):
        out[k * HOP : k * HOP + WINDOW] += frames[k]
        norm[k * HOP : k * HOP + WINDOW] += w2
    ok = norm > 1e-8
    out[ok] /= norm[ok]
    out[~ok] = 0.0
    length = length if length is not None else (spec.length if spec.length is not None else total)
    if length > total:
        out = np.concatenate([out, np.zeros(length - total)])
    return AudioClip(out[:length], SAMPLE_RATE)


# -- patches -----------------------------------------------------------------
def extract_patches(spec: ComplexSpectrogram, n_frames: int = PATCH_FRAMES) -> List[MagnitudePatch]:
    """Split into non-overlapping patches; the last one is zero padded."""
    mag = spec.magnitude
    phase = spec.phase
    patches = []
    for offset in range(0, max(spec.n_frames, 1), n_frames):
        valid = min(n_frames, spec.n_frames - offset)
        m = np.zeros((n_frames, mag.shape[1]))
        p = np.zeros((n_frames, mag.shape[1]))
        m[:valid] = mag[offset : offset + valid]
        p[:valid] = phase[offset : offset + valid]
        patches.append(MagnitudePatch(m, offset, valid, p))
    return patches


def reassemble(patches: List[MagnitudePatch], attr: str = "magnitude") -> np.ndarray:
    """Concatenate patches in offset order, dropping padding frames."""
    ordered = sorted(patches, key=lambda p: p.offset)
    return np.concatenate([getattr(p, attr)[: p.valid_frames] for p in ordered], axis=0)


def apply_mask(mixture_mag: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mixture_mag = np.asarray(mixture_mag)
    mask = np.asarray(mask)
    if mixture_mag.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match magnitude shape {mixture_mag.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ValueError(f"mask values must lie in [0, 1], got [{mask.min()}, {mask.max()}]")
    return mixture_mag * mask


def segment_bounds(frame_offset: int, n_frames: int) -> Tuple[int, int]:
    """Sample range whose STFT yields frames ``[frame_offset, frame_offset + n_frames)``."""
    start = frame_offset * HOP
    return start, start + (n_frames - 1) * HOP + WINDOW


# -- WAV I/O ---------------------------------------------------------------------
def read_wav(path, resample_to: Optional[int] = SAMPLE_RATE) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    clip = AudioClip(samples, int(rate))
    if resample_to is not None and clip.sample_rate != resample_to:
        clip = resample(clip, resample_to)
    return clip


def write_wav(path, audio: AudioClip, fmt: str = "float32") -> None:
    from scipy.io import wavfile

    if fmt == "float32":
        data = audio.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, audio.sample_rate, data)
