"""FiLM conditioning: weak control networks and strong basis tensors.

Weak conditioning maps the whole phoneme patch to one affine transform per
encoder block (a scalar, or one value per channel). Strong conditioning
keeps time: learned per-phoneme basis tensors are mixed frame by frame by
the (softmax-normalised, time-downsampled) activation matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .phonemes import N_PHONEMES
from .tensor import Module, Tensor, ops, truncated_normal

CONDITIONING_MODES = ("none", "weak_simple", "weak_complex", "strong")
STRONG_VARIANTS = ("all", "channel", "frequency", "scalar")
INSERTIONS = ("complete", "bottleneck")
HEAD_SCALE = 0.1  # shrinks the initial spread of the weak-control gamma/beta heads

# Table-style model names -> (conditioning, strong_variant, insertion)
MODEL_VARIANTS: Dict[str, Tuple[str, str, str]] = {
    "unet": ("none", "scalar", "complete"),
    "W_si": ("weak_simple", "scalar", "complete"),
    "W_co": ("weak_complex", "scalar", "complete"),
    "S_a": ("strong", "all", "complete"),
    "S_a*": ("strong", "all", "bottleneck"),
    "S_c": ("strong", "channel", "complete"),
    "S_c*": ("strong", "channel", "bottleneck"),
    "S_f": ("strong", "frequency", "complete"),
    "S_f*": ("strong", "frequency", "bottleneck"),
    "S_s": ("strong", "scalar", "complete"),
    "S_s*": ("strong", "scalar", "bottleneck"),
}


@dataclass(frozen=True)
class WeakControlConfig:
    variant: str  # "simple" or "complex"
    block_channels: Tuple[int, ...]

    @property
    def widths(self) -> Tuple[int, int, int]:
        return (32, 64, 128) if self.variant == "simple" else (64, 256, 1024)

    @property
    def head_width(self) -> int:
        if self.variant == "simple":
            return len(self.block_channels)
        return int(sum(self.block_channels))


class WeakControl(Module):
    """autopool -> dense/ReLU -> 2 x (dense, dropout, batch-norm, ReLU) -> gamma and beta heads."""

    def __init__(self, config: WeakControlConfig, rng: np.random.Generator, dropout: float = 0.5,
                 bn_momentum: float = 0.99, dtype=np.float32):
        super().__init__()
        if config.variant not in ("simple", "complex"):
            raise ConfigError(f"unknown weak control variant {config.variant!r}")
        self.config = config
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.add_param("autopool_alpha", np.zeros(N_PHONEMES, dtype=dtype))
        sizes = (N_PHONEMES,) + config.widths
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.add_param(f"dense{i}.w", truncated_normal(rng, (fan_in, fan_out), fan_in, dtype))
            self.add_param(f"dense{i}.b", np.zeros(fan_out, dtype=dtype))
            if i > 0:
                self.add_param(f"bn{i}.gamma", np.ones(fan_out, dtype=dtype))
                self.add_param(f"bn{i}.beta", np.zeros(fan_out, dtype=dtype))
                self.add_buffer(f"bn{i}.mean", np.zeros(fan_out, dtype=dtype))
                self.add_buffer(f"bn{i}.var", np.ones(fan_out, dtype=dtype))
        last = config.widths[-1]
        width = config.head_width
        # heads start close to the identity transform (gamma ~ 1, beta ~ 0)
        self.add_param("gamma_head.w", HEAD_SCALE * truncated_normal(rng, (last, width), last, dtype))
        self.add_param("gamma_head.b", np.ones(width, dtype=dtype))
        self.add_param("beta_head.w", HEAD_SCALE * truncated_normal(rng, (last, width), last, dtype))
        self.add_param("beta_head.b", np.zeros(width, dtype=dtype))

    def __call__(self, z, rng: Optional[np.random.Generator] = None) -> List[Tuple[Tensor, Tensor]]:
        """Return one ``(gamma, beta)`` pair per encoder block.

        Pairs have shape ``(B, 1, 1, 1)`` (simple) or ``(B, 1, 1, C_d)`` (complex).
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != N_PHONEMES:
            raise ShapeError(f"weak control expects {N_PHONEMES} phoneme columns, got {z.shape[-1]}")
        p = self._params
        h = ops.autopool(z, p["autopool_alpha"])
        h = ops.relu(ops.dense(h, p["dense0.w"], p["dense0.b"]))
        for i in (1, 2):
            h = ops.dense(h, p[f"dense{i}.w"], p[f"dense{i}.b"])
            h = ops.dropout(h, self.dropout, self.training, rng)
            h = ops.batch_norm(
                h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self._buffers[f"bn{i}.mean"],
                self._buffers[f"bn{i}.var"], self.training, self.bn_momentum,
            )
            h = ops.relu(h)
        gammas = ops.dense(h, p["gamma_head.w"], p["gamma_head.b"])
        betas = ops.dense(h, p["beta_head.w"], p["beta_head.b"])
        nb = gammas.shape[0]
        out = []
        start = 0
        for c in self.config.block_channels:
            width = 1 if self.config.variant == "simple" else c
            sl = (slice(None), slice(start, start + width))
            out.append(
                (ops.reshape(gammas[sl], (nb, 1, 1, width)), ops.reshape(betas[sl], (nb, 1, 1, width)))
            )
            start += width
        return out


def film_weak(x, gamma, beta) -> Tensor:
    """``gamma * x + beta`` with the same transform at every time-frequency cell.

    ``gamma``/``beta`` may be scalars, per-channel vectors ``(C,)`` or carry a
    batch axis: ``(B, 1, 1, 1)`` / ``(B, 1, 1, C)``.
    """
    x = ops.as_tensor(x)
    gamma = ops.as_tensor(gamma, dtype=x.dtype)
    beta = ops.as_tensor(beta, dtype=x.dtype)
    c = x.shape[-1]
    legal = {(), (1,), (c,), (x.shape[0], 1, 1, 1), (x.shape[0], 1, 1, c), (1, 1, 1, 1), (1, 1, 1, c)}
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape not in legal:
            raise ShapeError(f"film_weak: illegal {name} shape {t.shape} for features {x.shape}")
    return ops.add(ops.mul(ops.broadcast(gamma, x.shape), x), ops.broadcast(beta, x.shape))


def basis_shape(variant: str, n_freq: int, n_channels: int) -> Tuple[int, ...]:
    if variant == "all":
        return (n_freq, n_channels, N_PHONEMES)
    if variant == "channel":
        return (n_channels, N_PHONEMES)
    if variant == "frequency":
        return (n_freq, N_PHONEMES)
    if variant == "scalar":
        return (N_PHONEMES,)
    raise ConfigError(f"unknown strong variant {variant!r}")


def _modulation(z_d: Tensor, basis: Tensor, variant: str, x_shape) -> Tensor:
    """``basis x z_d`` reshaped so it broadcasts against ``(B, W, H, C)``."""
    nb, w, h, c = x_shape
    p = basis.shape[-1]
    if basis.ndim == 1:
        mat = ops.reshape(basis, (p, 1))
    else:
        # move the phoneme axis first: (..., P) -> (P, prod(...))
        mat = ops.reshape(ops.transpose(basis, (basis.ndim - 1,) + tuple(range(basis.ndim - 1))), (p, -1))
    m = ops.matmul(ops.reshape(z_d, (nb * w, p)), mat)
    target = {
        "all": (nb, w, h, c),
        "channel": (nb, w, 1, c),
        "frequency": (nb, w, h, 1),
        "scalar": (nb, w, 1, 1),
    }[variant]
    return ops.reshape(m, target)


def film_strong(x, z_d, gamma, beta, variant: str) -> Tensor:
    """``(gamma x z_d) * x + (beta x z_d)`` with frame-wise phoneme mixing.

    ``x`` is ``(B, W, H, C)``, ``z_d`` is ``(B, W, P)`` or ``(W, P)`` and the
    basis tensors follow :func:`basis_shape` for ``variant``.
    """
    x = ops.as_tensor(x)
    z_d = ops.as_tensor(z_d, dtype=x.dtype)
    gamma = ops.as_tensor(gamma, dtype=x.dtype)
    beta = ops.as_tensor(beta, dtype=x.dtype)
    if x.ndim != 4:
        raise ShapeError(f"film_strong: features must be (B, W, H, C), got {x.shape}")
    nb, w, h, c = x.shape
    if z_d.ndim == 2:
        z_d = ops.broadcast(ops.reshape(z_d, (1,) + z_d.shape), (nb,) + z_d.shape)
    if z_d.ndim != 3 or z_d.shape[:2] != (nb, w):
        raise ShapeError(f"film_strong: activation {z_d.shape} does not match time extent of features {x.shape}")
    want = basis_shape(variant, h, c)[:-1] + (z_d.shape[-1],)
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != want:
            raise ShapeError(f"film_strong: {name} shape {t.shape} illegal for {variant} variant, expected {want}")
    mg = _modulation(z_d, gamma, variant, x.shape)
    mb = _modulation(z_d, beta, variant, x.shape)
    return ops.add(ops.mul(ops.broadcast(mg, x.shape), x), ops.broadcast(mb, x.shape))


class StrongBases(Module):
    """Per-depth ``gamma``/``beta`` basis tensors for strong conditioning."""

    def __init__(self, variant: str, depths: Sequence[int], freq_extents: Dict[int, int],
                 channels: Dict[int, int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if variant not in STRONG_VARIANTS:
            raise ConfigError(f"unknown strong variant {variant!r}")
        self.variant = variant
        self.depths = tuple(depths)
        for d in self.depths:
            shape = basis_shape(variant, freq_extents[d], channels[d])
            self.add_param(f"d{d}.gamma", (1.0 + 0.02 * rng.standard_normal(shape)).astype(dtype))
            self.add_param(f"d{d}.beta", (0.02 * rng.standard_normal(shape)).astype(dtype))

    def bases(self, depth: int) -> Tuple[Tensor, Tensor]:
        return self._params[f"d{depth}.gamma"], self._params[f"d{depth}.beta"]


def param_count(variant: str, config=None) -> int:
    """Learnable-parameter increment of ``variant`` over the plain U-Net.

    ``"unet"`` returns the plain U-Net total. Counts come from instantiated
    models, not closed-form expressions.
    """
    from .unet import SeparationModel, UNetConfig

    if variant not in MODEL_VARIANTS:
        raise ConfigError(f"unknown model variant {variant!r}; choose from {', '.join(MODEL_VARIANTS)}")
    config = config or UNetConfig()
    base = SeparationModel(config.with_variant("unet"), init="zeros").num_parameters()
    if variant == "unet":
        return base
    return SeparationModel(config.with_variant(variant), init="zeros").num_parameters() - base
