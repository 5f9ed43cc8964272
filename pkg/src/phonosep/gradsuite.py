"""Finite-difference checks over every differentiable op and the tiny model."""
from __future__ import annotations

import dataclasses
import re
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .conditioning import basis_shape, film_strong, film_weak
from .phonemes import N_PHONEMES
from .tensor import GradCheckReport, Tensor, grad_check, ops
from .unet import TINY, SeparationModel, UNetConfig

TOLERANCE = 1e-3
# depth 3 / base 4 like TINY, on a smaller patch: fewer activations means
# fewer relu kinks inside the finite-difference step
GRAD_CONFIG = dataclasses.replace(TINY, n_frames=16, n_bins=32)


def _away_from_zero(rng, shape, margin=0.05):
    """Values whose magnitude exceeds ``margin`` so kinks are never straddled."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, List[np.ndarray]]]:
    r = rng.standard_normal
    drop_seed = int(rng.integers(1 << 31))
    c = 3
    cases = [
        ("add", lambda a, b: ops.add(a, b), [r((4, 3)), r((3,))]),
        ("sub", lambda a, b: ops.sub(a, b), [r((4, 3)), r((4, 1))]),
        ("mul", lambda a, b: ops.mul(a, b), [r((2, 4, 3)), r((4, 3))]),
        ("matmul", lambda a, b: ops.matmul(a, b), [r((5, 4)), r((4, 3))]),
        ("dense", lambda x, w, b: ops.dense(x, w, b), [r((5, 4)), r((4, 3)), r((3,))]),
        ("abs", lambda a: ops.abs(a), [_away_from_zero(rng, (4, 5))]),
        ("relu", lambda a: ops.relu(a), [_away_from_zero(rng, (4, 5))]),
        ("leaky_relu", lambda a: ops.leaky_relu(a, 0.2), [_away_from_zero(rng, (4, 5))]),
        ("sigmoid", lambda a: ops.sigmoid(a), [3 * r((4, 5))]),
        ("softmax", lambda a: ops.softmax(a, axis=-1), [r((3, 6))]),
        ("sum", lambda a: ops.sum(a, axis=1), [r((3, 4, 2))]),
        ("mean", lambda a: ops.mean(a, axis=(0, 2)), [r((3, 4, 2))]),
        ("reshape", lambda a: ops.reshape(a, (6, 4)), [r((2, 3, 4))]),
        ("transpose", lambda a: ops.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("getitem", lambda a: a[1:, ::2], [r((4, 6))]),
        ("getitem_fancy", lambda a: a[np.array([0, 2, 2])], [r((4, 3))]),
        ("concat", lambda a, b: ops.concat([a, b], axis=-1), [r((2, 3, 2)), r((2, 3, 4))]),
        ("broadcast", lambda a: ops.broadcast(a, (3, 4, 2)), [r((4, 1))]),
        ("conv2d", lambda x, k, b: ops.conv2d(x, k, b), [r((2, 8, 12, 2)), 0.3 * r((5, 5, 2, 3)), r((3,))]),
        ("conv2d_transpose", lambda x, k, b: ops.conv2d_transpose(x, k, b),
         [r((2, 4, 6, 3)), 0.3 * r((5, 5, 2, 3)), r((2,))]),
        ("batch_norm_train", lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(c), np.ones(c), True),
         [r((4, 3, 2, c)), 1 + 0.1 * r((c,)), r((c,))]),
        ("batch_norm_eval", lambda x, g, b: ops.batch_norm(x, g, b, np.full(c, 0.3), np.full(c, 2.0), False),
         [r((4, 3, 2, c)), r((c,)), r((c,))]),
        ("dropout", lambda x: ops.dropout(x, 0.5, True, np.random.default_rng(drop_seed)), [r((6, 5))]),
        ("autopool", lambda x, a: ops.autopool(x, a), [r((2, 7, 4)), r((4,))]),
        ("mean_abs_error", lambda a, b: ops.mean_abs_error(a, b), [r((4, 5)), r((4, 5)) + 3.0]),
        ("film_weak_scalar", lambda x, g, b: film_weak(x, g, b), [r((2, 3, 4, c)), r((2, 1, 1, 1)), r((2, 1, 1, 1))]),
        ("film_weak_channel", lambda x, g, b: film_weak(x, g, b), [r((2, 3, 4, c)), r((2, 1, 1, c)), r((2, 1, 1, c))]),
    ]
    for variant in ("all", "channel", "frequency", "scalar"):
        h, w = 4, 5
        shape = basis_shape(variant, h, c)
        cases.append(
            (
                f"film_strong_{variant}",
                lambda x, z, g, b, v=variant: film_strong(x, z, g, b, v),
                [r((2, w, h, c)), rng.dirichlet(np.ones(N_PHONEMES), size=(2, w)), r(shape), r(shape)],
            )
        )
    return cases


def check_ops(seed: int, tolerance: float = TOLERANCE) -> List[GradCheckReport]:
    rng = np.random.default_rng(seed)
    return [
        grad_check(fn, inputs, tolerance=tolerance, seed=seed, name=name)
        for name, fn, inputs in op_cases(rng)
    ]


def _pre_norm_bias(name: str, names) -> bool:
    """Conv biases feeding a batch norm: in training mode their gradient is exactly zero."""
    m = re.fullmatch(r"(.*\.(?:enc|dec)\d+)\.bias", name)
    return bool(m) and f"{m.group(1)}.bn.gamma" in names


def check_model(variant: str, seed: int, config: UNetConfig = GRAD_CONFIG, batch: int = 4,
                max_coords: int = 6, tolerance: float = TOLERANCE, training: bool = True) -> GradCheckReport:
    """Gradient of the mask w.r.t. input, phonemes and a random sample of parameters.

    In training mode, conv biases followed by batch norm are left out of the
    sample (the normalisation removes them); eval mode covers them.
    """
    rng = np.random.default_rng(seed)
    model = SeparationModel(dataclasses.replace(config.with_variant(variant), seed=seed), dtype=np.float64)
    model.train(training)
    params = dict(model.named_parameters())
    # perturb every parameter so identity-initialised FiLM terms do not hide errors
    for t in params.values():
        t.data = t.data + 0.05 * rng.standard_normal(t.shape)
    master = {k: t.data.copy() for k, t in params.items()}
    buffers = dict(model.named_buffers())
    for k, b in buffers.items():
        b[...] = rng.uniform(0.5, 1.5, b.shape) if k.endswith(".var") else 0.1 * rng.standard_normal(b.shape)
    names = sorted(params)
    if training:
        names = [n for n in names if not _pre_norm_bias(n, params)]
    chosen = [names[i] for i in rng.choice(len(names), size=min(6, len(names)), replace=False)]
    x = rng.random((batch, config.n_frames, config.n_bins))
    z = (rng.random((batch, config.n_frames, N_PHONEMES)) < 0.15).astype(np.float64)
    drop_seed = int(rng.integers(1 << 31))
    buf_master = {k: b.copy() for k, b in buffers.items()}

    def fn(xt: Tensor, zt: Tensor, *ptensors: Tensor) -> Tensor:
        dt = xt.dtype
        for name, t in params.items():
            t.data = master[name].astype(dt)
        swapped = dict(zip(chosen, ptensors))
        _set_params(model, swapped)
        for k, b in buffers.items():
            b[...] = buf_master[k]
        try:
            return model(xt, zt if model.config.conditioning != "none" else None,
                         np.random.default_rng(drop_seed))
        finally:
            _set_params(model, {k: params[k] for k in swapped})

    inputs = [x, z] + [master[k] for k in chosen]
    wrt = [0] + ([1] if model.config.conditioning != "none" else []) + list(range(2, len(inputs)))
    return grad_check(fn, inputs, tolerance=tolerance, seed=seed, wrt=wrt, max_coords=max_coords,
                      name=f"model[{variant}{'' if training else ',eval'}]")


def _set_params(module, mapping: Dict[str, Tensor]) -> None:
    """Replace named parameters (dotted paths) in ``module``'s tree."""
    for name, tensor in mapping.items():
        owner = module
        parts = name.split(".")
        while parts[0] in owner._children and parts[0] not in owner._params:
            owner = owner._children[parts.pop(0)]
        owner._params[".".join(parts)] = tensor


def run_suite(seeds: Sequence[int], variants: Sequence[str] = ("unet", "W_co", "S_s", "S_a"),
              tolerance: float = TOLERANCE) -> Dict[str, List[GradCheckReport]]:
    out: Dict[str, List[GradCheckReport]] = {}
    for seed in seeds:
        for rep in check_ops(seed, tolerance):
            out.setdefault(rep.name, []).append(rep)
        for v in variants:
            for training in (True, False):
                rep = check_model(v, seed, tolerance=tolerance, training=training)
                out.setdefault(rep.name, []).append(rep)
    return out
