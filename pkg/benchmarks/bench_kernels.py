"""Compare the compiled convolution kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from phonosep.tensor import _fallback

try:
    from phonosep.tensor import _kernels
except ImportError:  # extension not built
    _kernels = None

# (batch, padded width, padded height, channels) for the first blocks of the
# full and the tiny model on 128 x 512 / 64 x 64 patches
SHAPES = [(16, 131, 515, 1), (16, 67, 259, 16), (16, 35, 131, 32), (128, 67, 67, 4)]


def _case(shape, dtype):
    rng = np.random.default_rng(0)
    nb, wp, hp, nc = shape
    xp = rng.standard_normal(shape).astype(dtype)
    wo, ho = (wp - 3) // 2, (hp - 3) // 2
    cols = rng.standard_normal((nb, wo, ho, 5, 5, nc)).astype(dtype)
    return xp, cols, wo, ho


def bench(repeat: int = 5):
    rows = []
    for shape in SHAPES:
        xp, cols, wo, ho = _case(shape, np.float32)
        wp, hp = shape[1], shape[2]
        impls = {"fallback": _fallback}
        if _kernels is not None:
            impls["compiled"] = _kernels
            # both paths must agree before their timings mean anything
            np.testing.assert_allclose(_kernels.im2col(xp, 5, 2, wo, ho), _fallback.im2col(xp, 5, 2, wo, ho))
            np.testing.assert_allclose(_kernels.col2im(cols, wp, hp, 2), _fallback.col2im(cols, wp, hp, 2),
                                       rtol=1e-5, atol=1e-5)
        timing = {}
        for name, mod in impls.items():
            t_i = min(timeit.repeat(lambda: mod.im2col(xp, 5, 2, wo, ho), number=1, repeat=repeat))
            t_c = min(timeit.repeat(lambda: mod.col2im(cols, wp, hp, 2), number=1, repeat=repeat))
            timing[name] = (t_i, t_c)
        rows.append((shape, timing))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"{'shape (B,Wp,Hp,C)':<22} {'kernel':<7} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8}")
    for shape, timing in bench(args.repeat):
        for k, label in enumerate(("im2col", "col2im")):
            fb = timing["fallback"][k] * 1e3
            if "compiled" in timing:
                cp = timing["compiled"][k] * 1e3
                print(f"{str(shape):<22} {label:<7} {fb:12.2f} {cp:12.2f} {fb / cp:7.2f}x")
            else:
                print(f"{str(shape):<22} {label:<7} {fb:12.2f} {'n/a':>12} {'':>8}")


if __name__ == "__main__":
    main()
