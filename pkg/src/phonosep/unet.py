"""Conditioned U-Net producing a soft vocal mask."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import dsp
from .conditioning import (
    CONDITIONING_MODES,
    INSERTIONS,
    MODEL_VARIANTS,
    STRONG_VARIANTS,
    StrongBases,
    WeakControl,
    WeakControlConfig,
    film_strong,
    film_weak,
)
from .errors import ConfigError, ShapeError
from .phonemes import N_PHONEMES, AnnotationSequence, build_activation_matrix, vocabulary_fingerprint
from .tensor import Module, Tensor, ops, truncated_normal


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 6
    base_channels: int = 16
    n_frames: int = 128
    n_bins: int = 512
    leaky_slope: float = 0.2
    dropout: float = 0.5
    dropout_blocks: int = 3
    conditioning: str = "none"
    strong_variant: str = "scalar"
    insertion: str = "complete"
    bn_momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.strong_variant not in STRONG_VARIANTS:
            raise ConfigError(f"strong_variant must be one of {STRONG_VARIANTS}, got {self.strong_variant!r}")
        if self.insertion not in INSERTIONS:
            raise ConfigError(f"insertion must be one of {INSERTIONS}, got {self.insertion!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be positive")
        step = 2 ** self.depth
        if self.n_frames % step or self.n_bins % step:
            raise ConfigError(f"input {self.n_frames}x{self.n_bins} not divisible by 2**{self.depth}")

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * 2 ** (d - 1) for d in range(1, self.depth + 1))

    @property
    def conditioned_depths(self) -> Tuple[int, ...]:
        if self.conditioning == "none":
            return ()
        if self.conditioning == "strong" and self.insertion == "bottleneck":
            return (self.depth,)
        return tuple(range(1, self.depth + 1))

    def with_variant(self, name: str) -> "UNetConfig":
        if name not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant {name!r}")
        cond, variant, insertion = MODEL_VARIANTS[name]
        return dataclasses.replace(self, conditioning=cond, strong_variant=variant, insertion=insertion)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d)


TINY = UNetConfig(depth=3, base_channels=4, n_frames=64, n_bins=64)


class SeparationModel(Module):
    """Encoder/decoder mirror with skip concatenations and optional FiLM.

    Encoder block: conv 5x5/2 -> batch-norm -> FiLM (if conditioned) -> leaky ReLU.
    Decoder block: transposed conv 5x5/2 -> batch-norm -> ReLU -> dropout
    (first ``dropout_blocks`` blocks) -> concat with the mirrored encoder
    output. The last decoder block maps to one channel with a sigmoid.
    """

    def __init__(self, config: UNetConfig = UNetConfig(), init: str = "random", dtype=np.float32):
        super().__init__()
        self.config = config
        self.metadata: Dict = {}
        self.rng = np.random.default_rng(config.seed)
        rng = np.random.default_rng(config.seed)

        def weight(shape, fan_in):
            if init == "zeros":
                return np.zeros(shape, dtype=dtype)
            return truncated_normal(rng, shape, fan_in, dtype)

        ch = config.channels
        backbone = self.add_child("backbone", Module())
        cin = 1
        for d, cout in enumerate(ch, 1):
            backbone.add_param(f"enc{d}.kernel", weight((5, 5, cin, cout), 25 * cin))
            backbone.add_param(f"enc{d}.bias", np.zeros(cout, dtype=dtype))
            backbone.add_param(f"enc{d}.bn.gamma", np.ones(cout, dtype=dtype))
            backbone.add_param(f"enc{d}.bn.beta", np.zeros(cout, dtype=dtype))
            backbone.add_buffer(f"enc{d}.bn.mean", np.zeros(cout, dtype=dtype))
            backbone.add_buffer(f"enc{d}.bn.var", np.ones(cout, dtype=dtype))
            cin = cout
        for i in range(1, config.depth + 1):
            cin = ch[-1] if i == 1 else 2 * ch[config.depth - i]
            cout = ch[config.depth - i - 1] if i < config.depth else 1
            backbone.add_param(f"dec{i}.kernel", weight((5, 5, cout, cin), 25 * cin))
            backbone.add_param(f"dec{i}.bias", np.zeros(cout, dtype=dtype))
            if i < config.depth:
                backbone.add_param(f"dec{i}.bn.gamma", np.ones(cout, dtype=dtype))
                backbone.add_param(f"dec{i}.bn.beta", np.zeros(cout, dtype=dtype))
                backbone.add_buffer(f"dec{i}.bn.mean", np.zeros(cout, dtype=dtype))
                backbone.add_buffer(f"dec{i}.bn.var", np.ones(cout, dtype=dtype))
        self.backbone = backbone

        self.control: Optional[WeakControl] = None
        self.bases: Optional[StrongBases] = None
        if config.conditioning in ("weak_simple", "weak_complex"):
            variant = config.conditioning.split("_")[1]
            self.control = self.add_child(
                "control",
                WeakControl(WeakControlConfig(variant, ch), rng, config.dropout, config.bn_momentum, dtype),
            )
        elif config.conditioning == "strong":
            freq = {d: config.n_bins // 2 ** d for d in range(1, config.depth + 1)}
            chans = dict(zip(range(1, config.depth + 1), ch))
            self.bases = self.add_child(
                "bases", StrongBases(config.strong_variant, config.conditioned_depths, freq, chans, rng, dtype)
            )

    # ------------------------------------------------------------------
    def _bn(self, x, prefix, rng=None):
        p, b = self.backbone._params, self.backbone._buffers
        return ops.batch_norm(
            x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], b[f"{prefix}.bn.mean"],
            b[f"{prefix}.bn.var"], self.training, self.config.bn_momentum,
        )

    def __call__(self, x, z=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, z, rng)

    def forward(self, x, z=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Map mixture magnitudes ``(B, N, M)`` (and phonemes ``(B, N, 40)``) to a mask ``(B, N, M)``."""
        cfg = self.config
        rng = self.rng if rng is None else rng
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self._dtype())
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (cfg.n_frames, cfg.n_bins):
            raise ShapeError(f"input block: expected (B, {cfg.n_frames}, {cfg.n_bins}), got {x.shape}")
        nb = x.shape[0]
        if cfg.conditioning != "none":
            if z is None:
                raise ShapeError(f"conditioning={cfg.conditioning} requires a phoneme matrix")
            z = z if isinstance(z, Tensor) else Tensor(z, dtype=x.dtype)
            if z.ndim == 2:
                z = ops.reshape(z, (1,) + z.shape)
            if z.shape != (nb, cfg.n_frames, N_PHONEMES):
                raise ShapeError(f"phoneme block: expected ({nb}, {cfg.n_frames}, {N_PHONEMES}), got {z.shape}")

        weak = self.control(z, rng) if self.control is not None else None
        z_norm = ops.softmax(z, axis=-1) if self.bases is not None else None

        p = self.backbone._params
        h = ops.reshape(x, x.shape + (1,))
        skips = []
        for d in range(1, cfg.depth + 1):
            h = ops.conv2d(h, p[f"enc{d}.kernel"], p[f"enc{d}.bias"])
            h = self._bn(h, f"enc{d}")
            if d in cfg.conditioned_depths:
                if weak is not None:
                    h = film_weak(h, *weak[d - 1])
                else:
                    g, b = self.bases.bases(d)
                    h = film_strong(h, _pool_time(z_norm, d), g, b, cfg.strong_variant)
            h = ops.leaky_relu(h, cfg.leaky_slope)
            skips.append(h)
        for i in range(1, cfg.depth + 1):
            h = ops.conv2d_transpose(h, p[f"dec{i}.kernel"], p[f"dec{i}.bias"])
            if i == cfg.depth:
                break
            h = ops.relu(self._bn(h, f"dec{i}"))
            if i <= cfg.dropout_blocks:
                h = ops.dropout(h, cfg.dropout, self.training, rng)
            h = ops.concat([h, skips[cfg.depth - i - 1]], axis=-1)
        mask = ops.sigmoid(h)
        return ops.reshape(mask, (nb, cfg.n_frames, cfg.n_bins))

    def _dtype(self):
        return self.backbone._params["enc1.kernel"].dtype

    def count_parameters(self) -> Dict[str, int]:
        counts = {"backbone": self.backbone.num_parameters(), "control": 0, "basis": 0}
        if self.control is not None:
            counts["control"] = self.control.num_parameters()
        if self.bases is not None:
            counts["basis"] = self.bases.num_parameters()
        counts["total"] = counts["backbone"] + counts["control"] + counts["basis"]
        return counts

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "vocabulary": vocabulary_fingerprint(),
            "parameters": self.count_parameters(),
            "metadata": self.metadata,
        }


def _pool_time(z_norm: Tensor, depth: int) -> Tensor:
    nb, n, p = z_norm.shape
    f = 2 ** depth
    return ops.mean(ops.reshape(z_norm, (nb, n // f, f, p)), axis=2)


def count_parameters(model: SeparationModel) -> Dict[str, int]:
    return model.count_parameters()


def variant_name(config: UNetConfig) -> str:
    for name, triple in MODEL_VARIANTS.items():
        if triple[0] == config.conditioning == "none":
            return name
        if config.conditioning.startswith("weak") and triple[0] == config.conditioning:
            return name
        if config.conditioning == "strong" and triple == (config.conditioning, config.strong_variant, config.insertion):
            return name
    return "custom"


# -- inference -------------------------------------------------------------------
def predict_mask(model: SeparationModel, magnitude: np.ndarray, z: Optional[np.ndarray],
                 batch_size: int = 8) -> np.ndarray:
    """Run ``model`` over non-overlapping patches of a full ``(T, M)`` magnitude."""
    cfg = model.config
    n_frames = magnitude.shape[0]
    n = cfg.n_frames
    n_patches = max(1, -(-n_frames // n))
    padded = np.zeros((n_patches * n, magnitude.shape[1]), dtype=np.float32)
    padded[:n_frames] = magnitude
    xs = padded.reshape(n_patches, n, -1)
    zs = None
    if z is not None:
        zp = np.zeros((n_patches * n, N_PHONEMES), dtype=np.float32)
        zp[:, -1] = 1.0  # padding frames carry the non-phoneme indicator
        zp[:n_frames] = z
        zs = zp.reshape(n_patches, n, N_PHONEMES)
    was_training = model.training
    model.eval()
    try:
        out = []
        for s in range(0, n_patches, batch_size):
            zb = None if zs is None else zs[s : s + batch_size]
            out.append(model(xs[s : s + batch_size], zb).data)
    finally:
        model.train(was_training)
    return np.concatenate(out).reshape(n_patches * n, -1)[:n_frames]


def separate(
    mixture: dsp.AudioClip,
    annotations: Optional[AnnotationSequence] = None,
    model: Optional[SeparationModel] = None,
    mask_override: Optional[float] = None,
    lexicon=None,
    z: Optional[np.ndarray] = None,
) -> Tuple[dsp.AudioClip, dsp.AudioClip]:
    """Estimate (vocals, accompaniment); accompaniment is mixture minus vocals.

    ``z`` supplies a ready activation matrix instead of ``annotations``.
    """
    if mixture.sample_rate != dsp.SAMPLE_RATE:
        mixture = dsp.resample(mixture)
    spec = dsp.stft(mixture)
    if mask_override is not None:
        if not 0.0 <= mask_override <= 1.0:
            raise ValueError(f"mask override must be in [0, 1], got {mask_override}")
        mask = np.full(spec.values.shape, float(mask_override))
    else:
        if model is None:
            raise ValueError("a model or a mask override is required")
        if model.config.n_bins != dsp.N_BINS:
            raise ShapeError(f"model expects {model.config.n_bins} bins, the front end produces {dsp.N_BINS}")
        if model.config.conditioning == "none":
            z = None
        elif z is None:
            if annotations is None:
                raise ValueError("conditioned model needs lyric annotations")
            z = build_activation_matrix(annotations, spec.n_frames, lexicon)
        mask = predict_mask(model, spec.magnitude, z).astype(np.float64)
    masked = dsp.ComplexSpectrogram(
        dsp.apply_mask(np.ones(mask.shape), mask) * spec.values,
        None if spec.nyquist is None else spec.nyquist * mask[:, -1],
        len(mixture),
    )
    vocals = dsp.istft(masked, len(mixture))
    accompaniment = dsp.AudioClip(mixture.samples - vocals.samples, mixture.sample_rate)
    return vocals, accompaniment


# -- persistence -------------------------------------------------------------------
def save_model(path, model: SeparationModel, extra_arrays: Optional[dict] = None, metadata: Optional[dict] = None):
    from .tensor import checkpoint

    arrays = {f"param/{n}": t.data for n, t in model.named_parameters()}
    arrays.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"model": model.manifest(), **(metadata or {})}
    checkpoint.save(path, arrays, meta)
    sidecar = str(path) + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"variant": variant_name(model.config), **meta["model"], **{k: v for k, v in meta.items()
                                                                             if k in ("history", "epoch", "best_val_loss")}},
                  fh, indent=1, default=str)


def load_model(path) -> Tuple[SeparationModel, dict, dict]:
    """Return ``(model, arrays, metadata)``; arrays holds any non-model entries."""
    from .tensor import checkpoint

    arrays, meta = checkpoint.load(path)
    info = meta["model"]
    if info["vocabulary"] != vocabulary_fingerprint():
        raise ValueError(f"{path}: phoneme vocabulary fingerprint mismatch")
    config = UNetConfig.from_dict(info["config"])
    model = SeparationModel(config, init="zeros")
    for name, t in model.named_parameters():
        t.data = arrays.pop(f"param/{name}").astype(t.dtype)
    for name, b in model.named_buffers():
        b[...] = arrays.pop(f"buffer/{name}")
    model.metadata = info.get("metadata", {})
    return model, arrays, meta
