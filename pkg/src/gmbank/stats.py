"""Accuracy/precision metrics and two-sample hypothesis tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

ALPHA = 0.05
KS_CRITICAL_005 = 1.3581  # asymptotic two-sample Kolmogorov-Smirnov constant at alpha = 0.05


@dataclass(frozen=True)
class TestResult:
    """Outcome of a test at level ``alpha``; ``accepted`` refers to the null."""

    statistic: float
    threshold: float
    accepted: bool
    alpha: float = ALPHA
    pvalue: float = float("nan")

    __test__ = False  # keep pytest from collecting this class


@dataclass(frozen=True, eq=False)
class ErrorSeries:
    """Per-step position errors of one run."""

    errors: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.errors, dtype=float).ravel()
        if e.size == 0:
            raise ValueError("error series is empty")
        if not np.all(np.isfinite(e)):
            raise ValueError("error series contains non-finite values")
        object.__setattr__(self, "errors", e)

    @property
    def n(self) -> int:
        return self.errors.size

    def rmse(self) -> float:
        return rmse(self.errors)

    def cep(self) -> float:
        return cep(self.errors)


def _errors(e) -> np.ndarray:
    e = np.asarray(e.errors if isinstance(e, ErrorSeries) else e, dtype=float)
    if e.size == 0 or e.shape[-1] == 0:
        raise ValueError("error series is empty")
    return e


def rmse(e, axis: int = -1):
    """Root-mean-square error along ``axis`` (one value per run for 2-D input)."""
    e = _errors(e)
    # scale first so tiny errors do not underflow when squared
    scale = np.max(np.abs(e), axis=axis, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    out = np.squeeze(safe, axis=axis) * np.sqrt(np.mean((e / safe) ** 2, axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def cep(e, axis: int = -1):
    """Circular error probable: median of ``|e|``, linearly interpolated."""
    e = _errors(e)
    out = np.median(np.abs(e), axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def _check_sizes(a, b, minimum, name):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < minimum or b.size < minimum:
        raise ValueError(f"{name} needs at least {minimum} observations per sample")
    return a, b


def ks_two_sample(a, b, alpha: float = ALPHA) -> TestResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic critical value."""
    if alpha != ALPHA:
        raise ValueError("only alpha = 0.05 has a tabulated critical value")
    a, b = _check_sizes(a, b, 10, "KS test")
    n, m = a.size, b.size
    a, b = np.sort(a), np.sort(b)
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / n
    cdf_b = np.searchsorted(b, pooled, side="right") / m
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    scale = np.sqrt((n + m) / (n * m))
    p = float(_st.kstwobign.sf(d / scale))
    threshold = KS_CRITICAL_005 * scale
    return TestResult(d, threshold, d <= threshold, alpha, p)


def ansari_bradley(a, b, alpha: float = ALPHA) -> TestResult:
    """Ansari-Bradley equal-dispersion test, normal approximation.

    Scores are ``min(rank, N + 1 - rank)`` with midranks for ties; the null
    variance is the exact permutation variance of the score sum, which
    already accounts for ties. ``statistic`` is ``|z|``.
    """
    a, b = _check_sizes(a, b, 20, "Ansari-Bradley test")
    n, m = a.size, b.size
    N = n + m
    rank = _st.rankdata(np.concatenate([a, b]))
    score = np.minimum(rank, N + 1 - rank)
    ab = score[:n].sum()
    mean = n * score.mean()
    var = n * m / (N * (N - 1)) * np.sum((score - score.mean()) ** 2)
    z = (ab - mean) / np.sqrt(var) if var > 0 else 0.0
    threshold = float(_st.norm.ppf(1 - alpha / 2))
    p = float(2 * _st.norm.sf(abs(z)))
    return TestResult(float(abs(z)), threshold, abs(z) <= threshold, alpha, p)


def confidence_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval for the mean of Monte-Carlo replicates."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ValueError("a confidence interval needs at least two values")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    half = _st.norm.ppf(0.5 + level / 2) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean() - half), float(v.mean() + half)
