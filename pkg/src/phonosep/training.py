"""Batch sampling, mix augmentation, L1 training loop, schedulers, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dsp
from .errors import ConfigError, NonFiniteError
from .phonemes import N_PHONEMES, NON_PHONEME_INDEX, shuffle_columns
from .tensor import Adam, Tape, backward, ops
from .unet import SeparationModel, load_model, save_model

logger = logging.getLogger(__name__)

REAL, AUGMENTED = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    batches_per_epoch: int = 1024
    lr: float = 1e-3
    basis_lr_scale: float = 1.0  # learning-rate multiplier for strong-conditioning basis tensors
    control_lr_scale: float = 1.0  # learning-rate multiplier for the weak control network
    plateau_patience: int = 15
    plateau_factor: float = 0.5
    early_stop_patience: int = 30
    min_delta: float = 1e-5
    augment_period: int = 5  # sample s is a fake mixture when s % period == period - 1
    val_batches: int = 256
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "batches_per_epoch", "plateau_patience", "early_stop_patience",
                     "val_batches", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")
        if self.lr <= 0 or min(self.basis_lr_scale, self.control_lr_scale) <= 0 or not 0 < self.plateau_factor < 1:
            raise ConfigError("lr must be positive and plateau_factor in (0, 1)")
        if self.augment_period < 0 or self.augment_period == 1:
            raise ConfigError("augment_period must be 0 (off) or >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- schedulers ------------------------------------------------------------------
@dataclass
class _Monitor:
    patience: int
    min_delta: float = 1e-5
    best: float = math.inf
    wait: int = 0

    def _observe(self, value: float) -> None:
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1


@dataclass
class ReduceOnPlateau(_Monitor):
    """Multiply the learning rate by ``factor`` after ``patience`` stale epochs."""

    factor: float = 0.5

    def step(self, value: float, lr: float) -> float:
        self._observe(value)
        if self.wait >= self.patience:
            self.wait = 0
            return lr * self.factor
        return lr


@dataclass
class EarlyStopping(_Monitor):
    def step(self, value: float) -> bool:
        self._observe(value)
        return self.wait >= self.patience


def scheduler_trace(val_losses: Sequence[float], config: TrainConfig = TrainConfig()) -> dict:
    """Replay validation losses through both schedulers (epochs are 1-based).

    Returns the learning rate in force after each epoch and the epoch at
    which early stopping fires (``None`` if it never does).
    """
    plateau = ReduceOnPlateau(config.plateau_patience, config.min_delta, factor=config.plateau_factor)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    lr = config.lr
    lrs, stop = [], None
    for epoch, v in enumerate(val_losses, 1):
        lr = plateau.step(v, lr)
        lrs.append(lr)
        if stopper.step(v):
            stop = epoch
            break
    return {"lr": lrs, "stop_epoch": stop}


# -- data ------------------------------------------------------------------------
@dataclass
class Song:
    song_id: str
    mixture: np.ndarray
    vocals: np.ndarray
    accompaniment: np.ndarray
    z: np.ndarray  # (T, 40) binary activation matrix on the STFT grid


@dataclass
class Batch:
    mixture: np.ndarray  # (B, N, M)
    vocals: np.ndarray  # (B, N, M) target magnitudes
    z: np.ndarray  # (B, N, 40)
    provenance: np.ndarray  # REAL / AUGMENTED per sample
    index: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))


class PatchDataset:
    """Songs indexed by ``(song, frame offset)`` over every valid patch position.

    ``n_bins`` keeps the lowest bins only (used by reduced-width models).
    ``shuffle_seed`` permutes the 40 phoneme columns once per song.
    """

    def __init__(self, songs: Sequence[Song], n_frames: int = dsp.PATCH_FRAMES, n_bins: int = dsp.N_BINS,
                 shuffle_seed: Optional[int] = None):
        self.songs = list(songs)
        self.n_frames = n_frames
        self.n_bins = n_bins
        self.mix_mag: List[np.ndarray] = []
        self.voc_mag: List[np.ndarray] = []
        self.z: List[np.ndarray] = []
        counts = []
        shuffle_rng = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)
        for song in self.songs:
            mix = dsp.stft(song.mixture).magnitude[:, :n_bins]
            voc = dsp.stft(song.vocals).magnitude[:, :n_bins]
            t = mix.shape[0]
            if song.z.shape != (t, N_PHONEMES):
                raise ValueError(f"song {song.song_id}: activation matrix {song.z.shape} != ({t}, {N_PHONEMES})")
            z = song.z.astype(np.float32)
            if shuffle_rng is not None:
                z = shuffle_columns(z, shuffle_rng)
            if t < n_frames:
                mix, voc = _pad_frames(mix, n_frames), _pad_frames(voc, n_frames)
                pad = np.zeros((n_frames - t, N_PHONEMES), np.float32)
                pad[:, NON_PHONEME_INDEX] = 1.0
                z = np.concatenate([z, pad])
            self.mix_mag.append(mix.astype(np.float32))
            self.voc_mag.append(voc.astype(np.float32))
            self.z.append(z)
            counts.append(mix.shape[0] - n_frames + 1)
        self.patch_counts = np.array(counts, dtype=np.int64)
        self._cum = np.concatenate([[0], np.cumsum(self.patch_counts)])

    def __len__(self) -> int:
        return int(self._cum[-1])

    def locate(self, flat: np.ndarray) -> np.ndarray:
        """Flat patch indices -> ``(song, offset)`` rows."""
        song = np.searchsorted(self._cum, flat, side="right") - 1
        return np.stack([song, flat - self._cum[song]], axis=1)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty dataset")
        return self.locate(rng.integers(0, len(self), size=n))

    def real(self, song: int, offset: int):
        sl = slice(offset, offset + self.n_frames)
        return self.mix_mag[song][sl], self.voc_mag[song][sl], self.z[song][sl]


def _pad_frames(a: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + a.shape[1:], a.dtype)
    out[: a.shape[0]] = a
    return out


def _segment(samples: np.ndarray, offset: int, n_frames: int) -> np.ndarray:
    start, stop = dsp.segment_bounds(offset, n_frames)
    seg = np.zeros(stop - start)
    part = samples[start:stop]
    seg[: len(part)] = part
    return seg


def augment(dataset: PatchDataset, song: int, offset: int, pool: Optional[PatchDataset],
            rng: np.random.Generator):
    """Fake mixture: the patch's vocal waveform plus a random accompaniment segment.

    Returns ``(mixture_mag, vocals_mag, z)``; the target and phonemes are the
    vocal patch's own.
    """
    _, voc_mag, z = dataset.real(song, offset)
    n = dataset.n_frames
    vocals = _segment(dataset.songs[song].vocals, offset, n)
    other, other_offset = pool.draw(rng, 1)[0]
    accomp = _segment(pool.songs[other].accompaniment, other_offset, n)
    mix_mag = dsp.stft(vocals + accomp, n_frames=n).magnitude[:, : dataset.n_bins]
    return mix_mag.astype(np.float32), voc_mag, z


class BatchSampler:
    """Uniform patch sampler with a persistent 4:1 real:fake sample stream."""

    def __init__(self, dataset: PatchDataset, config: TrainConfig, rng: np.random.Generator,
                 pool: Optional[PatchDataset] = None):
        self.dataset = dataset
        self.config = config
        self.rng = rng
        self.pool = pool if pool is not None else dataset
        self.counter = 0
        self.augment_enabled = config.augment_period > 0
        if self.augment_enabled and len(self.pool) == 0:
            logger.warning("accompaniment pool is empty; augmentation disabled")
            self.augment_enabled = False

    def is_augmented(self, stream_index: int) -> bool:
        p = self.config.augment_period
        return self.augment_enabled and stream_index % p == p - 1

    def sample_batch(self, batch_size: Optional[int] = None) -> Batch:
        b = batch_size or self.config.batch_size
        idx = self.dataset.draw(self.rng, b)
        n, m = self.dataset.n_frames, self.dataset.n_bins
        x = np.empty((b, n, m), np.float32)
        y = np.empty((b, n, m), np.float32)
        z = np.empty((b, n, N_PHONEMES), np.float32)
        prov = np.zeros(b, np.int8)
        for i, (song, offset) in enumerate(idx):
            if self.is_augmented(self.counter):
                x[i], y[i], z[i] = augment(self.dataset, song, offset, self.pool, self.rng)
                prov[i] = AUGMENTED
            else:
                x[i], y[i], z[i] = self.dataset.real(song, offset)
            self.counter += 1
        return Batch(x, y, z, prov, idx)


def fixed_batches(dataset: PatchDataset, n_batches: int, batch_size: int, seed: int) -> List[Batch]:
    """Pre-drawn, never augmented batches (validation)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        idx = dataset.draw(rng, batch_size)
        parts = [dataset.real(s, o) for s, o in idx]
        out.append(
            Batch(
                np.stack([p[0] for p in parts]),
                np.stack([p[1] for p in parts]),
                np.stack([p[2] for p in parts]),
                np.zeros(batch_size, np.int8),
                idx,
            )
        )
    return out


# -- loss ------------------------------------------------------------------------
def l1_loss(mask, mixture, target):
    """Mean absolute error between the masked mixture and the target magnitude."""
    return ops.mean_abs_error(ops.mul(mask, mixture), target)


# -- trainer -----------------------------------------------------------------------
class Trainer:
    def __init__(self, model: SeparationModel, train_set: PatchDataset, val_set: Optional[PatchDataset],
                 config: TrainConfig = TrainConfig(), run_dir=None):
        cfg = model.config
        if (train_set.n_frames, train_set.n_bins) != (cfg.n_frames, cfg.n_bins):
            raise ConfigError(
                f"dataset patches {train_set.n_frames}x{train_set.n_bins} do not fit model "
                f"{cfg.n_frames}x{cfg.n_bins}"
            )
        self.model = model
        self.config = config
        self.train_set = train_set
        self.rng = np.random.default_rng(config.seed)
        self.sampler = BatchSampler(train_set, config, self.rng)
        self.val_batches = (
            fixed_batches(val_set, config.val_batches, config.batch_size, config.seed + 1)
            if val_set is not None and len(val_set)
            else []
        )
        self.params = dict(model.named_parameters())
        scale = [config.basis_lr_scale if n.startswith("bases.") else
                 config.control_lr_scale if n.startswith("control.") else 1.0 for n in self.params]
        self.optimizer = Adam(list(self.params.values()), lr=config.lr, lr_scale=scale)
        self.plateau = ReduceOnPlateau(config.plateau_patience, config.min_delta, factor=config.plateau_factor)
        self.stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
        self.epoch = 0
        self.best_val = math.inf
        self.history: List[Dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            snapshot = {"model": model.config.to_dict(), "train": config.to_dict()}
            (self.run_dir / "config.json").write_text(json.dumps(snapshot, indent=1))

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def _forward_loss(self, batch: Batch, training: bool):
        self.model.train(training)
        z = batch.z if self.model.config.conditioning != "none" else None
        mask = self.model(batch.mixture, z, self.rng)
        return l1_loss(mask, batch.mixture, batch.vocals)

    def train_step(self, batch: Optional[Batch] = None) -> float:
        batch = batch if batch is not None else self.sampler.sample_batch()
        with Tape():
            loss = self._forward_loss(batch, training=True)
            value = float(loss.data)
            if not np.isfinite(value):
                self._abort(f"non-finite training loss {value}")
            self.optimizer.zero_grad()
            backward(loss, self.optimizer.params)
        try:
            self.optimizer.step()
        except NonFiniteError as exc:
            self._abort(str(exc))
        return value

    def _abort(self, reason: str):
        if self.run_dir is not None:
            path = self.run_dir / "nan-abort.ckpt"
            self.save_checkpoint(path, extra={"abort_reason": reason})
            reason += f" (diagnostic checkpoint: {path})"
        raise NonFiniteError(reason)

    def validate(self) -> float:
        if not self.val_batches:
            return math.nan
        losses = [float(self._forward_loss(b, training=False).data) for b in self.val_batches]
        self.model.train(True)
        return float(np.mean(losses))

    def run_epoch(self) -> Dict:
        losses = [self.train_step() for _ in range(self.config.batches_per_epoch)]
        self.epoch += 1
        val = self.validate()
        record = {"epoch": self.epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": self.lr}
        self.history.append(record)
        return record

    def fit(self, max_epochs: Optional[int] = None, log=None) -> List[Dict]:
        max_epochs = max_epochs or self.config.max_epochs
        while self.epoch < max_epochs:
            rec = self.run_epoch()
            val = rec["val_loss"] if np.isfinite(rec["val_loss"]) else rec["train_loss"]
            improved = val < self.best_val
            if improved:
                self.best_val = val
            self.optimizer.lr = self.plateau.step(val, self.optimizer.lr)
            stop = self.stopper.step(val)
            if self.run_dir is not None:
                self._log_metrics(rec)
                self.save_checkpoint(self.run_dir / "last.ckpt")
                if improved:
                    self.save_checkpoint(self.run_dir / "best.ckpt")
            if log is not None:
                log(rec)
            if stop:
                logger.info("early stopping at epoch %d", self.epoch)
                break
        return self.history

    def _log_metrics(self, rec: Dict) -> None:
        path = self.run_dir / "metrics.tsv"
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write("epoch\ttrain_loss\tval_loss\tlr\n")
            fh.write(f"{rec['epoch']}\t{rec['train_loss']:.8g}\t{rec['val_loss']:.8g}\t{rec['lr']:.8g}\n")

    # -- checkpointing -----------------------------------------------------------
    def save_checkpoint(self, path, extra: Optional[dict] = None) -> None:
        names = list(self.params)
        moments = self.optimizer.state(names)
        arrays = {f"optim/{k}": v for k, v in moments.items()}
        meta = {
            "epoch": self.epoch,
            "best_val_loss": self.best_val,
            "history": self.history,
            "train_config": self.config.to_dict(),
            "optimizer": {"step": self.optimizer.step_count, "lr": self.optimizer.lr},
            "rng": self.rng.bit_generator.state,
            "sample_counter": self.sampler.counter,
            "plateau": dataclasses.asdict(self.plateau),
            "early_stopping": dataclasses.asdict(self.stopper),
            **(extra or {}),
        }
        save_model(path, self.model, arrays, meta)

    @classmethod
    def resume(cls, path, train_set: PatchDataset, val_set: Optional[PatchDataset], run_dir=None) -> "Trainer":
        model, arrays, meta = load_model(path)
        config = TrainConfig.from_dict(meta["train_config"])
        trainer = cls(model, train_set, val_set, config, run_dir)
        names = list(trainer.params)
        moments = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
        opt = meta["optimizer"]
        trainer.optimizer.load_state(names, moments, opt["step"], opt["lr"])
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.sampler.counter = int(meta["sample_counter"])
        trainer.plateau = ReduceOnPlateau(**meta["plateau"])
        trainer.stopper = EarlyStopping(**meta["early_stopping"])
        trainer.epoch = int(meta["epoch"])
        trainer.best_val = float(meta["best_val_loss"])
        trainer.history = list(meta["history"])
        return trainer
