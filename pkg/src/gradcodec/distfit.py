"""Distribution fitting and Kolmogorov-Smirnov ranking of gradient samples.

Log families (lognormal, loglaplace) are fitted and scored on the magnitudes of
the nonzero entries; symmetric families (normal, laplace, uniform, cauchy) on
the signed values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, InsufficientDataError

FAMILIES = ("normal", "lognormal", "laplace", "loglaplace", "uniform", "cauchy")
LOG_FAMILIES = frozenset({"lognormal", "loglaplace"})
DEFAULT_QUANTILE = 0.997


@dataclass(frozen=True)
class LognormalParams:
    """Lognormal model of |x|: ``ln|x| ~ N(mu, sigma^2)`` truncated at ``mu + k*sigma``."""

    mu: float
    sigma: float
    k: float = float("inf")

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise DomainError(f"mu must be finite, got {self.mu}")
        if not self.sigma > 0 or not np.isfinite(self.sigma):
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not self.k > 0:
            raise DomainError(f"truncation multiplier k must be positive, got {self.k}")

    def as_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "k": self.k}


@dataclass(frozen=True)
class FitReport:
    family: str
    params: tuple[float, ...] = ()
    ks_stat: float = float("nan")
    convention: str = ""
    error: str | None = None

    def as_dict(self) -> dict:
        out = {"family": self.family, "params": list(self.params), "convention": self.convention}
        if self.error is None:
            out["ks_stat"] = self.ks_stat
        else:
            out["ks_stat"] = None
            out["error"] = self.error
        return out


def log_magnitudes(samples) -> np.ndarray:
    """``ln|x|`` over the nonzero entries."""
    x = np.abs(np.asarray(samples, dtype=np.float64).reshape(-1))
    return np.log(x[x > 0])


def estimate_truncation(samples, params: LognormalParams, q: float = DEFAULT_QUANTILE) -> float:
    """Truncation multiplier ``k = (quantile_q(ln|x|) - mu) / sigma``."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile must lie in (0, 1), got {q}")
    logs = log_magnitudes(samples)
    if logs.size < 2:
        raise InsufficientDataError("need at least 2 nonzero samples")
    k = (float(np.quantile(logs, q)) - params.mu) / params.sigma
    if not k > 0:
        raise DomainError(f"estimated truncation multiplier k={k:g} is not positive")
    return k


def fit_lognormal(samples, q: float = DEFAULT_QUANTILE) -> LognormalParams:
    logs = log_magnitudes(samples)
    if logs.size < 2:
        raise InsufficientDataError(f"need at least 2 nonzero samples, got {logs.size}")
    mu = float(logs.mean())
    sigma = float(logs.std())
    if not sigma > 0:
        raise DomainError("degenerate data: log-magnitudes have zero variance")
    base = LognormalParams(mu, sigma)
    return LognormalParams(mu, sigma, estimate_truncation(samples, base, q))


# -- per-family estimators and CDFs ------------------------------------------

def _prepare(samples, family: str) -> np.ndarray:
    if family not in FAMILIES:
        raise DomainError(f"unknown family {family!r}; expected one of {', '.join(FAMILIES)}")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if family in LOG_FAMILIES:
        x = log_magnitudes(x)
    if x.size < 2:
        raise InsufficientDataError(f"{family}: need at least 2 usable samples, got {x.size}")
    return x


def fit_family(samples, family: str) -> tuple[float, ...]:
    """Deterministic point estimates; see module docstring for which domain."""
    x = _prepare(samples, family)
    if family in ("normal", "lognormal"):
        params = (float(x.mean()), float(x.std()))
    elif family in ("laplace", "loglaplace"):
        med = float(np.median(x))
        params = (med, float(np.mean(np.abs(x - med))))
    elif family == "uniform":
        params = (float(x.min()), float(x.max()))
    else:  # cauchy
        q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
        params = (float(med), float((q3 - q1) / 2))
    _check_params(family, params)
    return params


def _check_params(family: str, params: Sequence[float]) -> None:
    if len(params) != 2 or not all(np.isfinite(params)):
        raise DomainError(f"{family}: expected two finite parameters, got {params}")
    a, b = params
    if family == "uniform":
        if not b > a:
            raise DomainError(f"uniform: need lower < upper, got {params}")
    elif not b > 0:
        raise DomainError(f"{family}: scale must be positive, got {params}")


def _cdf(family: str, z: np.ndarray, params: Sequence[float]) -> np.ndarray:
    """CDF in the fitting domain (log-magnitude for log families)."""
    loc, scale = params
    if family in ("normal", "lognormal"):
        return ndtr((z - loc) / scale)
    if family in ("laplace", "loglaplace"):
        t = (z - loc) / scale
        return np.where(t < 0, 0.5 * np.exp(np.minimum(t, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(t, 0.0)))
    if family == "uniform":
        return np.clip((z - loc) / (scale - loc), 0.0, 1.0)
    return 0.5 + np.arctan((z - loc) / scale) / np.pi


def ks_statistic(samples, family: str, params: Sequence[float]) -> float:
    """Largest vertical gap between the empirical CDF and the model CDF.

    Both edges of every empirical step are checked: ``i/n - F(x_i)`` and
    ``F(x_i) - (i-1)/n`` over the sorted sample.
    """
    x = np.sort(_prepare(samples, family))
    params = tuple(float(p) for p in params)
    _check_params(family, params)
    n = x.size
    f = _cdf(family, x, params)
    i = np.arange(1, n + 1, dtype=np.float64)
    d = max(float(np.max(i / n - f)), float(np.max(f - (i - 1) / n)))
    return min(max(d, 0.0), 1.0)


def fit_report(samples, families: Sequence[str] = FAMILIES) -> list[FitReport]:
    """Fit and score each family; sorted ascending by KS statistic, failures last."""
    good, bad = [], []
    for fam in families:
        conv = "magnitude" if fam in LOG_FAMILIES else "signed"
        try:
            params = fit_family(samples, fam)
            good.append(FitReport(fam, params, ks_statistic(samples, fam, params), conv))
        except DomainError as exc:
            bad.append(FitReport(fam, (), float("nan"), conv, str(exc)))
    good.sort(key=lambda r: r.ks_stat)
    return good + bad
