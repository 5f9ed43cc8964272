"""Separation metrics: BSS decomposition ratios, silence energies, reports, t-tests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve, toeplitz

from .dsp import HOP, WINDOW

FILTER_LEN = 512
CEILING_DB = 80.0
FLOOR_DB = -80.0
SILENCE_DB = -25.0
EPS_ENERGY = 1e-9
SOURCES = ("vocals", "accompaniment")
METRICS = ("sdr", "sir", "sar", "pes", "eps")


# -- BSS decomposition ---------------------------------------------------------------
def _xcorr(fa: np.ndarray, fb: np.ndarray, n_fft: int, flen: int) -> np.ndarray:
    """Lags 0..flen-1 of ``sum_t a[t + lag] b[t]`` from precomputed spectra."""
    c = np.fft.irfft(fa * np.conj(fb), n=n_fft)
    return c[:flen]


def _decompose(refs: np.ndarray, est: np.ndarray, j: int, active: Sequence[int], flen: int):
    """Split ``est`` into target, interference and artifact parts for source ``j``.

    The target part is the projection of ``est`` onto delayed copies (0..flen-1
    samples) of reference ``j``; interference is the extra captured by the
    span of all active references. Signals are zero-padded by ``flen - 1``.
    """
    n = refs.shape[1]
    total = n + flen - 1
    n_fft = 1 << int(math.ceil(math.log2(total + flen)))
    spec = {i: np.fft.rfft(refs[i], n=n_fft) for i in active}
    spec_est = np.fft.rfft(est, n=n_fft)

    def project(idx: Sequence[int]) -> np.ndarray:
        k = len(idx)
        gram = np.empty((k * flen, k * flen))
        rhs = np.empty(k * flen)
        for a, ia in enumerate(idx):
            rhs[a * flen : (a + 1) * flen] = _xcorr(spec_est, spec[ia], n_fft, flen)
            for b, ib in enumerate(idx):
                if b < a:
                    continue
                fwd = _xcorr(spec[ib], spec[ia], n_fft, flen)  # sum_t a[t] b[t + l]
                back = _xcorr(spec[ia], spec[ib], n_fft, flen)  # sum_t a[t + l] b[t]
                block = toeplitz(fwd, back)  # block[p, q] = <a delayed p, b delayed q>
                gram[a * flen : (a + 1) * flen, b * flen : (b + 1) * flen] = block
                gram[b * flen : (b + 1) * flen, a * flen : (a + 1) * flen] = block.T
        try:
            coef = solve(gram, rhs, assume_a="pos")
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        out_f = np.zeros(n_fft // 2 + 1, dtype=complex)
        for a, ia in enumerate(idx):
            out_f += spec[ia] * np.fft.rfft(coef[a * flen : (a + 1) * flen], n=n_fft)
        return np.fft.irfft(out_f, n=n_fft)[:total]

    s_target = project([j])
    s_all = project(list(active))
    est_pad = np.concatenate([est, np.zeros(flen - 1)])
    return s_target, s_all - s_target, est_pad - s_all


def _ratio_db(num: float, den: float) -> float:
    if num == 0.0 and den == 0.0:
        return math.nan
    if den == 0.0:
        return CEILING_DB
    if num == 0.0:
        return FLOOR_DB
    return float(np.clip(10.0 * math.log10(num / den), FLOOR_DB, CEILING_DB))


def bss_eval(references: np.ndarray, estimates: np.ndarray, flen: int = FILTER_LEN):
    """Global SDR/SIR/SAR per source with a ``flen``-tap distortion filter.

    ``references`` and ``estimates`` are ``(n_sources, n_samples)``. An
    all-zero reference yields NaN metrics for its source and is left out of
    the interference subspace of the others. Values are clipped to +/-80 dB.
    """
    refs = np.asarray(references, dtype=np.float64)
    ests = np.asarray(estimates, dtype=np.float64)
    if refs.shape != ests.shape or refs.ndim != 2:
        raise ValueError(f"references {refs.shape} and estimates {ests.shape} must be equal (n_src, n) arrays")
    active = [i for i in range(refs.shape[0]) if np.any(refs[i])]
    out = np.full((3, refs.shape[0]), np.nan)
    for j in active:
        target, interf, artif = _decompose(refs, ests[j], j, active, flen)
        t2 = float(target @ target)
        i2 = float(interf @ interf)
        a2 = float(artif @ artif)
        noise = interf + artif
        out[0, j] = _ratio_db(t2, float(noise @ noise))
        out[1, j] = _ratio_db(t2, i2)
        ta = target + interf
        out[2, j] = _ratio_db(float(ta @ ta), a2)
    return out[0], out[1], out[2]


def bss_components(references: np.ndarray, estimate: np.ndarray, j: int, flen: int = FILTER_LEN):
    """Expose ``(s_target, e_interf, e_artif)`` for source ``j``."""
    refs = np.asarray(references, dtype=np.float64)
    active = [i for i in range(refs.shape[0]) if np.any(refs[i])]
    return _decompose(refs, np.asarray(estimate, dtype=np.float64), j, active, flen)


# -- silence metrics ------------------------------------------------------------------
def frame_energies(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n_frames = 1 if len(x) <= WINDOW else -(-len(x) // HOP)
    need = (n_frames - 1) * HOP + WINDOW
    padded = np.zeros(max(need, len(x)))
    padded[: len(x)] = x
    sq = np.concatenate([[0.0], np.cumsum(padded**2)])
    starts = np.arange(n_frames) * HOP
    return sq[starts + WINDOW] - sq[starts]


def silent_frames(x: np.ndarray) -> np.ndarray:
    """Frames whose energy is at most -25 dB of the squared track peak."""
    e = frame_energies(x)
    peak = float(np.max(np.abs(x), initial=0.0))
    return e <= 10 ** (SILENCE_DB / 10.0) * peak**2


def _mean_db(energies: np.ndarray) -> Optional[float]:
    if energies.size == 0:
        return None
    db = np.maximum(10.0 * np.log10(energies + EPS_ENERGY), FLOOR_DB)
    return float(db.mean())


def pes_eps(reference: np.ndarray, estimate: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    """Energy predicted where the target is silent, and target energy missed.

    Returns ``(PES, EPS)`` in dB, ``None`` when the relevant frame set is empty.
    """
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"reference {reference.shape} and estimate {estimate.shape} differ")
    ref_silent = silent_frames(reference)
    est_silent = silent_frames(estimate)
    pes = _mean_db(frame_energies(estimate)[ref_silent])
    eps = _mean_db(frame_energies(reference)[est_silent & ~ref_silent])
    return pes, eps


# -- per-track records and reports -------------------------------------------------
@dataclass
class TrackEval:
    track_id: str
    sdr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray
    pes: Optional[float] = None
    eps: Optional[float] = None

    def value(self, metric: str, source: str = "vocals") -> float:
        if metric in ("pes", "eps"):
            v = getattr(self, metric)
            return math.nan if v is None else float(v)
        return float(getattr(self, metric)[SOURCES.index(source)])

    def to_record(self) -> dict:
        rec = {"track": self.track_id}
        for m in ("sdr", "sir", "sar"):
            for s in SOURCES:
                rec[f"{m}_{s}"] = _json_num(self.value(m, s))
        rec["pes"] = self.pes
        rec["eps"] = self.eps
        return rec


def _json_num(v: float):
    return None if not np.isfinite(v) else round(float(v), 6)


def evaluate_track(track_id: str, references: np.ndarray, estimates: np.ndarray,
                   flen: int = FILTER_LEN) -> TrackEval:
    """``references``/``estimates`` rows are (vocals, accompaniment)."""
    sdr, sir, sar = bss_eval(references, estimates, flen)
    pes, eps = pes_eps(references[0], estimates[0])
    return TrackEval(track_id, sdr, sir, sar, pes, eps)


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


@dataclass
class EvalReport:
    tracks: List[TrackEval]
    tests: Dict[str, TTestResult] = field(default_factory=dict)

    def column(self, metric: str, source: str = "vocals") -> np.ndarray:
        return np.array([t.value(metric, source) for t in self.tracks])

    def median(self, metric: str, source: str = "vocals") -> Tuple[float, int]:
        """Median over tracks with a defined value, plus the excluded count."""
        col = self.column(metric, source)
        ok = np.isfinite(col)
        return (float(np.median(col[ok])) if ok.any() else math.nan), int((~ok).sum())

    def summary(self) -> dict:
        out = {}
        for m in METRICS:
            sources = ("vocals",) if m in ("pes", "eps") else SOURCES
            for s in sources:
                key = m if m in ("pes", "eps") else f"{m}_{s}"
                med, excluded = self.median(m, s)
                out[key] = {"median": _json_num(med), "excluded": excluded}
        return out

    def compare(self, baseline: "EvalReport", metrics: Sequence[str] = ("sdr", "sir", "sar"),
                source: str = "vocals") -> Dict[str, TTestResult]:
        """Paired t-tests against ``baseline`` over tracks present in both with finite values."""
        base = {t.track_id: t for t in baseline.tracks}
        for m in metrics:
            a, b = [], []
            for t in self.tracks:
                other = base.get(t.track_id)
                if other is None:
                    continue
                va, vb = t.value(m, source), other.value(m, source)
                if np.isfinite(va) and np.isfinite(vb):
                    a.append(va)
                    b.append(vb)
            if len(a) >= 2:
                self.tests[f"{m}_{source}"] = paired_t_test(np.array(a), np.array(b))
        return self.tests


def build_report(tracks: Sequence[TrackEval]) -> EvalReport:
    return EvalReport(sorted(tracks, key=lambda t: t.track_id))


def format_table(report: EvalReport) -> str:
    cols = [f"{m}_{s}" for m in ("sdr", "sir", "sar") for s in SOURCES] + ["pes", "eps"]
    lines = ["track".ljust(16) + "".join(c.rjust(20) for c in cols)]
    for t in report.tracks:
        rec = t.to_record()
        cells = ["-" if rec[c] is None else f"{rec[c]:.3f}" for c in cols]
        lines.append(t.track_id[:16].ljust(16) + "".join(c.rjust(20) for c in cells))
    lines.append("")
    lines.append("summary (median over defined values; excluded count)")
    for key, v in report.summary().items():
        med = "-" if v["median"] is None else f"{v['median']:.3f}"
        lines.append(f"  {key:<22}{med:>12}   excluded {v['excluded']}")
    if report.tests:
        lines.append("")
        lines.append("paired t-tests vs baseline")
        for key, r in report.tests.items():
            flag = "  (zero-variance differences)" if r.degenerate else ""
            lines.append(f"  {key:<22} t={r.t:.4f}  p={r.p:.6g}  n={r.n}{flag}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> Tuple[Path, Path]:
    """Write ``report.txt`` and ``report.jsonl``.

    JSONL layout: one ``{"type": "track", ...}`` object per track, then one
    ``{"type": "summary", ...}`` object and, if present, one
    ``{"type": "ttest", "metric", "t", "p", "n", "degenerate"}`` per test.
    Undefined values are ``null``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "report.txt"
    txt.write_text(format_table(report))
    jl = out_dir / "report.jsonl"
    with open(jl, "w") as fh:
        for t in report.tracks:
            fh.write(json.dumps({"type": "track", **t.to_record()}) + "\n")
        fh.write(json.dumps({"type": "summary", **report.summary()}) + "\n")
        for key, r in report.tests.items():
            rec = {"type": "ttest", "metric": key, "t": _json_num(r.t) if np.isfinite(r.t) else str(r.t),
                   "p": r.p, "n": r.n, "degenerate": r.degenerate}
            fh.write(json.dumps(rec) + "\n")
    return txt, jl


def read_report(path) -> EvalReport:
    """Rebuild per-track records from a ``report.jsonl`` file."""
    tracks = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("type") != "track":
            continue

        def col(m):
            return np.array([math.nan if rec[f"{m}_{s}"] is None else rec[f"{m}_{s}"] for s in SOURCES])

        tracks.append(TrackEval(rec["track"], col("sdr"), col("sir"), col("sar"), rec["pes"], rec["eps"]))
    return EvalReport(tracks)


# -- paired t-test -------------------------------------------------------------------
def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with ``n - 1`` degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError(f"paired samples need equal 1-d shapes of length >= 2, got {a.shape} and {b.shape}")
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or sd <= 1e-12 * max(abs(mean), 1e-300):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, n - 1), n)
