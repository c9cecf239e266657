"""Residual diagnostics: normality, whiteness, and identification accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .connection import PhaseAssignment, phase_index, predict_differenced

KS_ALPHA = 0.05
MAX_LAG = 20
KS_NOTE = ("KS p-values compare residuals with a Gaussian of fitted mean and standard "
           "deviation using the classical Kolmogorov distribution; with fitted parameters "
           "this is conservative (rejects less often than the nominal level).")


class DegenerateSeriesError(ValueError):
    pass


def residuals(x: PhaseAssignment, ds, rs) -> np.ndarray:
    """``n(t) = v(t) - v(t, x)``, shape ``(T, M)``."""
    return ds.v - predict_differenced(x, ds, rs)


def _centered(series):
    n = np.asarray(series, dtype=float).ravel()
    d = n - n.mean()
    ss = float(d @ d)
    if not np.isfinite(ss) or ss <= 0.0 or np.ptp(n) == 0.0:
        raise DegenerateSeriesError("series has zero variance")
    return d, ss


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    passed: bool


def ks_normality(series, alpha: float = KS_ALPHA) -> KSResult:
    """One-sample Kolmogorov-Smirnov test against a fitted Gaussian.

    The Gaussian uses the sample mean and standard deviation, and the
    p-value comes from the asymptotic Kolmogorov distribution.  Because the
    parameters are estimated (the Lilliefors situation) this p-value is
    conservative: the test rejects less often than ``alpha`` suggests.
    """
    n = np.sort(np.asarray(series, dtype=float).ravel())
    if n.size < 30:
        raise ValueError(f"need at least 30 samples, got {n.size}")
    _centered(n)
    z = (n - n.mean()) / n.std(ddof=1)
    cdf = sps.norm.cdf(z)
    k = np.arange(1, n.size + 1)
    d = max(float(np.max(k / n.size - cdf)), float(np.max(cdf - (k - 1) / n.size)))
    p = float(sps.kstwobign.sf(np.sqrt(n.size) * d))
    return KSResult(d, p, bool(p >= alpha))


def autocorrelation(series, max_lag: int = MAX_LAG) -> np.ndarray:
    """Normalized autocorrelation ``r(0..max_lag)``; ``r(0) == 1``."""
    d, ss = _centered(series)
    if d.size <= max_lag:
        raise ValueError(f"series of length {d.size} is too short for lag {max_lag}")
    r = np.array([float(d[:d.size - lag] @ d[lag:]) / ss for lag in range(max_lag + 1)])
    r[0] = 1.0
    return r


@dataclass(frozen=True)
class ResidualSummary:
    load: str
    mean: float
    std: float
    ks_p_value: float | None
    ks_pass: bool | None
    max_autocorr: float | None
    white: bool | None

    def as_dict(self):
        return dict(self.__dict__)


def summarize_residuals(res: np.ndarray, load_ids, max_lag: int = MAX_LAG,
                        band: float = 4.0) -> list[ResidualSummary]:
    """Per-load summary; ``white`` means every lag sits within ``band/sqrt(T)``."""
    T = res.shape[0]
    out = []
    for m, lid in enumerate(load_ids):
        col = res[:, m]
        try:
            ks = ks_normality(col)
            ac = autocorrelation(col, max_lag)
            mx = float(np.max(np.abs(ac[1:])))
            out.append(ResidualSummary(lid, float(col.mean()), float(col.std(ddof=1)),
                                       ks.p_value, bool(ks.passed), mx,
                                       bool(mx <= band / np.sqrt(T))))
        except (DegenerateSeriesError, ValueError):
            out.append(ResidualSummary(lid, float(col.mean()),
                                       float(col.std(ddof=1)) if T > 1 else 0.0,
                                       None, None, None, None))
    return out


def accuracy(assignment: PhaseAssignment, truth) -> float:
    """Fraction of loads whose decision matches ``truth`` (load id -> label)."""
    if assignment.load_ids is None:
        raise ValueError("assignment has no load ids")
    common = [(m, lid) for m, lid in enumerate(assignment.load_ids) if lid in truth]
    if not common:
        raise ValueError("assignment and truth share no loads")
    idx = assignment.indices
    hits = sum(int(idx[m] == phase_index(assignment.classes[m], truth[lid])) for m, lid in common)
    return hits / len(common)
