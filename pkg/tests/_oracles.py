"""Slow, independent reference implementations used only by the tests."""
import numpy as np


def film_strong_loop(x, z_d, gamma, beta, variant):
    """Frame-by-frame FiLM with explicit sums over phonemes."""
    nb, w, h, c = x.shape
    out = np.empty_like(x, dtype=np.float64)
    for b in range(nb):
        for t in range(w):
            zrow = z_d[b, t] if z_d.ndim == 3 else z_d[t]
            g = np.zeros(gamma.shape[:-1])
            bb = np.zeros(beta.shape[:-1])
            for p in range(len(zrow)):
                g = g + zrow[p] * gamma[..., p]
                bb = bb + zrow[p] * beta[..., p]
            if variant == "all":
                gf, bf = g, bb  # (H, C)
            elif variant == "channel":
                gf, bf = g[None, :], bb[None, :]
            elif variant == "frequency":
                gf, bf = g[:, None], bb[:, None]
            else:
                gf, bf = g, bb
            out[b, t] = gf * x[b, t] + bf
    return out


def _delayed(ref, flen, total):
    """Columns are ``ref`` delayed by 0..flen-1 samples, zero padded to ``total``."""
    cols = np.zeros((total, flen))
    for d in range(flen):
        cols[d : d + len(ref), d] = ref
    return cols


def bss_normal_equations(refs, est, j, flen=512):
    """Decomposition of ``est`` by solving the normal equations directly."""
    n_src, length = refs.shape
    total = length + flen - 1
    e = np.zeros(total)
    e[:length] = est
    blocks = [_delayed(r, flen, total) for r in refs]
    a_all = np.hstack(blocks)
    a_j = blocks[j]

    def proj(a):
        coef = np.linalg.solve(a.T @ a, a.T @ e)
        return a @ coef

    p_all, p_j = proj(a_all), proj(a_j)
    s_target, e_interf, e_artif = p_j, p_all - p_j, e - p_all

    def ratio(num, den):
        return 10 * np.log10(np.sum(num ** 2) / np.sum(den ** 2))

    sdr = ratio(s_target, e_interf + e_artif)
    sir = ratio(s_target, e_interf)
    sar = ratio(s_target + e_interf, e_artif)
    return sdr, sir, sar


def paired_t_reference(a, b):
    """Paired t statistic with the two-sided p value from scipy's t distribution."""
    from scipy import stats

    d = np.asarray(a, float) - np.asarray(b, float)
    n = len(d)
    t = d.mean() / (d.std(ddof=1) / np.sqrt(n))
    return t, 2 * stats.t.sf(abs(t), n - 1)
