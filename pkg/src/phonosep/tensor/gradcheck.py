"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import Tape, Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_input: List[float] = field(default_factory=list)
    refined_coords: int = 0  # coordinates that needed steps below the first two

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel. error {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def _gap(a: float, b: float, noise: float) -> float:
    """Disagreement between two estimates beyond what roundoff explains."""
    return abs(a - b) - 1e-6 * max(abs(a), abs(b)) - noise


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-3,
    dtype=np.float32,
    eps: float = 1e-5,
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
    max_coords: Optional[int] = None,
    name: str = "op",
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    The analytic gradient is computed at ``dtype``; the finite differences
    always run in float64 so the reference is not limited by the precision
    under test. The scalar being differentiated is ``sum(fn(*inputs) * w)``
    for a fixed random ``w``. The error for one input is
    ``max|analytic - numeric| / max(|numeric|, |analytic|)``.
    """
    rng = np.random.default_rng(seed)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    base = [np.asarray(x, dtype=np.float64) for x in inputs]

    probe = fn(*[Tensor(x) for x in base]).data
    weights = rng.standard_normal(probe.shape)

    tensors = [Tensor(x.astype(dtype), requires_grad=i in wrt) for i, x in enumerate(base)]
    with Tape():
        out = fn(*tensors)
        loss = (out * Tensor(weights.astype(dtype))).sum()
    loss.backward(params=[tensors[i] for i in wrt])

    def f(values):
        return float((fn(*[Tensor(v) for v in values]).data * weights).sum())

    # roundoff in a central difference is about ulp(f) / h
    f_scale = 8 * np.finfo(np.float64).eps * max(abs(f(base)), 1.0)
    errors = []
    refined = 0
    for i in wrt:
        x = base[i]
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        analytic = tensors[i].grad.reshape(-1)[coords].astype(np.float64)
        for j, c in enumerate(coords):

            def central(h):
                vals = list(base)
                xp = x.copy().reshape(-1)
                xp[c] += h
                vals[i] = xp.reshape(x.shape)
                up = f(vals)
                xp[c] -= 2 * h
                vals[i] = xp.reshape(x.shape)
                return (up - f(vals)) / (2 * h)

            # shrink the step until two successive estimates agree within the
            # roundoff floor; a large step may straddle a relu kink, a tiny one
            # drowns in roundoff
            steps = (10 * eps, eps, eps / 10, eps / 100, eps / 1000)
            est = [central(steps[0]), central(steps[1])]
            agreed = _gap(est[0], est[1], f_scale / steps[1]) <= 0
            while not agreed and len(est) < len(steps):
                est.append(central(steps[len(est)]))
                agreed = _gap(est[-2], est[-1], f_scale / steps[len(est) - 1]) <= 0
            if agreed:
                numeric[j] = est[-1]
            else:
                # take the pair closest together once roundoff is charged
                gaps = [abs(a - b) + f_scale / h for a, b, h in zip(est, est[1:], steps[1:])]
                numeric[j] = est[int(np.argmin(gaps)) + 1]
            refined += len(est) > 2
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
        errors.append(0.0 if scale == 0.0 else float(np.abs(analytic - numeric).max() / scale))
    return GradCheckReport(name, max(errors, default=0.0), tolerance, errors, refined)
