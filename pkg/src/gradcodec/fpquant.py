"""Low-bit floating-point emulation, expected relative error and format search.

A format ``1-n2-n1`` has one sign bit, ``n2`` exponent bits and ``n1`` mantissa
bits.  Nonzero values are decomposed exactly as ``|x| = m * 2**E`` with
``m in [1, 2)``; exponents at or above ``E_max = 2**(n2-1)`` clamp to ``2**E_max``,
exponents below ``-E_max`` flush to zero, and everything in between keeps
``E`` and rounds ``m`` to the grid ``1 + j * 2**-n1`` (ties to even ``j``).

Two readings of the closed-form relative error are provided:

``"natural"`` (default)
    ``sigma`` is the standard deviation of ``ln|x|`` as returned by
    :func:`gradcodec.distfit.fit_lognormal`.  The binary exponent then has
    standard deviation ``sigma / ln 2`` and the mantissa term uses the grid
    spacing ``2**-n1`` of the quantizer above.  This reading agrees with
    Monte-Carlo simulation of :func:`quantize_array` to a few 1e-3.
``"printed"``
    ``sigma`` enters the expression directly and the mantissa factor is
    ``1 / (8 ln2 (2**n1 - 1))``; for ``n1 = 0`` that factor is replaced by the
    exact mean relative error of rounding ``m = 2**U`` to ``{1, 2}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy.integrate import quad
from scipy.special import erf, erfcx, ndtr

from . import _parallel
from .errors import DomainError

LN2 = math.log(2.0)
VARIANTS = ("natural", "printed")
PRIORS = ("lognormal", "normal")


@dataclass(frozen=True)
class FpFormat:
    total_bits: int
    mantissa_bits: int
    exponent_bits: int

    def __post_init__(self):
        if self.total_bits < 2 or self.mantissa_bits < 0 or self.exponent_bits < 0:
            raise DomainError(f"invalid format bit counts {self.total_bits}/{self.exponent_bits}/{self.mantissa_bits}")
        if 1 + self.mantissa_bits + self.exponent_bits != self.total_bits:
            raise DomainError(
                f"1 + {self.exponent_bits} + {self.mantissa_bits} != {self.total_bits} total bits"
            )

    @classmethod
    def split(cls, total_bits: int, exponent_bits: int) -> "FpFormat":
        return cls(total_bits, total_bits - 1 - exponent_bits, exponent_bits)

    @classmethod
    def parse(cls, text: str) -> "FpFormat":
        """Parse sign-exponent-mantissa strings such as ``"1-5-2"``."""
        parts = text.strip().split("-")
        try:
            s, e, m = (int(p) for p in parts)
        except ValueError:
            raise DomainError(f"format must look like 1-<exponent>-<mantissa>, got {text!r}") from None
        if s != 1:
            raise DomainError(f"sign field must be 1 bit, got {text!r}")
        return cls(1 + e + m, m, e)

    @property
    def emax(self) -> int:
        return 0 if self.exponent_bits == 0 else 2 ** (self.exponent_bits - 1)

    @property
    def clamp(self) -> float:
        """Largest magnitude, ``2**E_max`` (infinite when that exceeds float64)."""
        try:
            return math.ldexp(1.0, self.emax)
        except OverflowError:
            return math.inf

    @property
    def spacing(self) -> float:
        return 2.0 ** -self.mantissa_bits

    def __str__(self) -> str:
        return f"1-{self.exponent_bits}-{self.mantissa_bits}"


def _decompose(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``a = m * 2**e`` with ``m in [1, 2)`` for positive finite ``a``."""
    frac, exp = np.frexp(a)
    return frac * 2.0, exp.astype(np.int64) - 1


def quantize_array(x, fmt: FpFormat) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot quantize non-finite values")
    a = np.abs(x)
    m, e = _decompose(a)
    levels = 2.0 ** fmt.mantissa_bits
    mq = 1.0 + np.rint((m - 1.0) * levels) / levels
    q = np.ldexp(mq, e)
    q = np.where(e >= fmt.emax, fmt.clamp, q)
    q = np.where((e < -fmt.emax) | (a == 0), 0.0, q)
    return np.copysign(q, x) * (a != 0)


def quantize_value(x: float, fmt: FpFormat) -> float:
    if not math.isfinite(x):
        raise DomainError(f"cannot quantize non-finite value {x!r}")
    return float(quantize_array(np.float64(x), fmt))


def is_representable(q, fmt: FpFormat) -> np.ndarray:
    """True where ``q`` is 0, the clamp value, or ``(1 + j*2**-n1) * 2**E`` in range."""
    q = np.abs(np.asarray(q, dtype=np.float64))
    m, e = _decompose(np.where(q == 0, 1.0, q))
    j = (m - 1.0) * 2.0 ** fmt.mantissa_bits
    on_grid = (j == np.floor(j)) & (e >= -fmt.emax) & (e < fmt.emax)
    return (q == 0) | (q == fmt.clamp) | on_grid


# -- per-layer scaling ---------------------------------------------------------

def _max_exponent(x: np.ndarray) -> int:
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        raise DomainError("gradient scale needs a nonzero element")
    return int(_decompose(np.float64(peak))[1])


def gradient_scale(tensor, n2: int) -> tuple[float, float]:
    """Per-layer scale ``mu_l = floor(log2 max|X|) / log2(E_max)`` and ``2**mu_l``.

    ``mu_l`` is left real-valued; it is not rounded to an integer.
    """
    if n2 < 2:
        raise DomainError(f"gradient scaling needs n2 >= 2 so that log2(E_max) != 0, got {n2}")
    top = _max_exponent(np.asarray(tensor, dtype=np.float64))
    mu = top / (n2 - 1)  # log2(E_max) == n2 - 1
    return mu, 2.0 ** mu


def aligned_scale(tensor, n2: int) -> tuple[float, float]:
    """Integer shift putting ``max|X|`` in the top unclamped binade ``[2**(E_max-1), 2**E_max)``."""
    emax = 0 if n2 == 0 else 2 ** (n2 - 1)
    mu = float(_max_exponent(np.asarray(tensor, dtype=np.float64)) - (emax - 1))
    return mu, 2.0 ** mu


@dataclass
class QuantizedTensor:
    values: np.ndarray
    format: FpFormat
    scale_log2: float
    stats: dict = field(default_factory=dict)


def parse_scale_mode(mode) -> tuple[str, float]:
    """Normalise ``none``, ``per_layer``, ``per_layer_max``, ``fixed=<c>`` or a number."""
    if isinstance(mode, (int, float)):
        kind, c = "fixed", float(mode)
    elif isinstance(mode, tuple):
        kind, c = mode[0], float(mode[1])
    else:
        text = str(mode).strip().lower().replace("-", "_")
        if text.startswith("fixed"):
            _, _, rest = text.partition("=")
            try:
                c = float(rest)
            except ValueError:
                raise DomainError(f"fixed scale needs a value, e.g. fixed=65536, got {mode!r}") from None
            kind = "fixed"
        else:
            kind, c = text, 1.0
    if kind not in ("none", "fixed", "per_layer", "per_layer_max"):
        raise DomainError(f"unknown scale mode {mode!r}")
    if kind == "fixed" and not (c > 0 and math.isfinite(c)):
        raise DomainError(f"fixed scale must be positive, got {c}")
    return kind, c


def quantize_tensor(tensor, fmt: FpFormat, scale_mode="none") -> QuantizedTensor:
    """Scale, quantize element-wise, unscale, and collect overflow/underflow statistics.

    ``fixed`` multiplies by the constant before quantizing, ``per_layer`` divides by
    :func:`gradient_scale`'s factor, ``per_layer_max`` by :func:`aligned_scale`'s.
    """
    x = np.asarray(tensor, dtype=np.float64).reshape(-1)
    kind, c = parse_scale_mode(scale_mode)
    nonzero = np.any(x != 0)
    if kind == "fixed":
        mu = math.log2(c)
        factor = 1.0 / c
    elif kind in ("per_layer", "per_layer_max") and nonzero:
        rule = gradient_scale if kind == "per_layer" else aligned_scale
        mu, factor = rule(x, fmt.exponent_bits)
    else:
        mu, factor = 0.0, 1.0

    scaled = x / factor
    q = _parallel.map_chunks(lambda a, b: quantize_array(scaled[a:b], fmt), x.size)
    out = q * factor

    a = np.abs(scaled)
    nz = a > 0
    e = _decompose(np.where(nz, a, 1.0))[1]
    rel = np.abs(out[nz] - x[nz]) / np.abs(x[nz])
    stats = {
        "overflow_count": int(np.count_nonzero(nz & (e >= fmt.emax))),
        "underflow_count": int(np.count_nonzero(nz & (e < -fmt.emax))),
        "mean_relative_error": float(rel.mean()) if rel.size else 0.0,
        "nonzero_count": int(np.count_nonzero(nz)),
    }
    return QuantizedTensor(out, fmt, mu, stats)


# -- closed-form expected relative error ---------------------------------------

@lru_cache(maxsize=None)
def round_to_one_or_two_error() -> float:
    """Mean of ``|q(m) - m| / m`` for ``m = 2**U``, U ~ U[0,1), q rounding to 1 or 2."""
    split = math.log2(1.5)
    lower = quad(lambda u: 1.0 - 2.0 ** -u, 0.0, split, epsabs=1e-14)[0]
    upper = quad(lambda u: 2.0 ** (1.0 - u) - 1.0, split, 1.0, epsabs=1e-14)[0]
    return lower + upper


def _check_domain(sigma: float, n1: int, n2: int, variant: str) -> None:
    if not (sigma > 0 and math.isfinite(sigma)):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")
    if n1 < 0 or n2 < 1 or int(n1) != n1 or int(n2) != n2:
        raise DomainError(f"need integers n1 >= 0 and n2 >= 1, got n1={n1}, n2={n2}")
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def _mantissa_factor(n1: int, variant: str) -> float:
    if variant == "natural":
        return 1.0 / (8.0 * LN2 * 2.0 ** n1)
    if n1 == 0:
        return round_to_one_or_two_error()
    return 1.0 / (8.0 * LN2 * (2.0 ** n1 - 1.0))


def _three_terms(s: float, bound: float, emax: int, mant: float) -> float:
    """Mid-range + overflow + underflow terms for exponent std ``s`` and clamp ``bound``."""
    if math.isinf(bound):
        return mant
    r = bound / s
    inside = 2.0 * ndtr(r) - 1.0
    a = s * LN2 / math.sqrt(2.0) + bound / (math.sqrt(2.0) * s)
    # 2**(emax-1) * exp(s^2 ln^2 2 / 2) * (erf(a) - 1), evaluated via erfcx in log space
    log_tail = (emax - 1) * LN2 + 0.5 * (s * LN2) ** 2 - a * a + math.log(erfcx(a))
    overflow = 0.5 - 0.5 * erf(bound / (math.sqrt(2.0) * s)) - math.exp(log_tail)
    underflow = 1.0 - ndtr(r)
    return mant * inside + overflow + underflow


def expected_relative_error_lognormal(sigma: float, n1: int, n2: int, variant: str = "natural") -> float:
    _check_domain(sigma, n1, n2, variant)
    emax = 2 ** (n2 - 1)
    s = sigma / LN2 if variant == "natural" else sigma
    return _three_terms(s, float(emax), emax, _mantissa_factor(n1, variant))


def expected_relative_error_normal(sigma: float, n1: int, n2: int, variant: str = "natural") -> float:
    """Normal-prior counterpart: ``2**E_max`` replaces ``E_max`` inside Phi/erf arguments."""
    _check_domain(sigma, n1, n2, variant)
    emax = 2 ** (n2 - 1)
    try:
        bound = math.ldexp(1.0, emax)
    except OverflowError:
        bound = math.inf
    return _three_terms(sigma, bound, emax, _mantissa_factor(n1, variant))


def expected_relative_error(sigma: float, fmt: FpFormat, prior: str = "lognormal", variant: str = "natural") -> float:
    if prior not in PRIORS:
        raise DomainError(f"unknown prior {prior!r}; expected one of {PRIORS}")
    fn = expected_relative_error_lognormal if prior == "lognormal" else expected_relative_error_normal
    return fn(sigma, fmt.mantissa_bits, fmt.exponent_bits, variant)


def format_errors(sigma: float, total_bits: int, prior: str = "lognormal", variant: str = "natural") -> list[tuple[FpFormat, float]]:
    """Expected error of every split ``n2 = 1 .. N-1`` of an ``N``-bit format."""
    if total_bits < 2:
        raise DomainError(f"need at least 2 bits, got {total_bits}")
    fmts = [FpFormat.split(total_bits, n2) for n2 in range(1, total_bits)]
    return [(f, expected_relative_error(sigma, f, prior, variant)) for f in fmts]


def optimal_allocation(sigma: float, total_bits: int, prior: str = "lognormal", variant: str = "natural") -> FpFormat:
    """Exponent/mantissa split minimising the expected relative error; ties go to fewer exponent bits."""
    best, best_err = None, math.inf
    for fmt, err in format_errors(sigma, total_bits, prior, variant):
        if err < best_err:
            best, best_err = fmt, err
    return best


def sigma_grid(lo: float, hi: float, step: float = 0.1) -> np.ndarray:
    if hi < lo:
        raise DomainError(f"empty sigma range [{lo}, {hi}]")
    if step <= 0:
        raise DomainError(f"step must be positive, got {step}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 12)


def allocation_table(
    sigma_range: tuple[float, float],
    bits: Iterable[int],
    step: float = 0.1,
    prior: str = "lognormal",
    variant: str = "natural",
) -> list[dict]:
    """Optimal format for every (sigma grid point, N); rows ordered by N then sigma."""
    lo, hi = sigma_range
    grid = sigma_grid(lo, hi, step)
    rows = []
    for n in bits:
        for s in grid:
            fmt = optimal_allocation(float(s), n, prior, variant)
            rows.append({
                "sigma": float(s),
                "N": n,
                "n2": fmt.exponent_bits,
                "n1": fmt.mantissa_bits,
                "format": str(fmt),
                "expected_error": expected_relative_error(float(s), fmt, prior, variant),
            })
    return rows
