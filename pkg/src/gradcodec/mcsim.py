"""Monte-Carlo counterparts of the closed-form results.

Every sampler is counter-based (see :mod:`gradcodec.rng`), so a run depends
only on its :class:`SimConfig` and repetition index, never on scheduling.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import _parallel, fpquant, prune, rng
from .errors import DomainError
from .tensorio import atomic_write

RELERR_N = 10_000
PRUNE_N = 1_000_000

RELERR_COLUMNS = ("sigma", "N", "n2", "n1", "format", "analytic", "empirical", "abs_gap")
SPARSITY_COLUMNS = ("sigma", "mu", "prior", "target_S", "alpha", "analytic", "empirical", "abs_gap")
COSINE_COLUMNS = ("sigma", "k", "convention", "target_S", "alpha", "analytic", "empirical", "abs_gap")


@dataclass(frozen=True)
class SimConfig:
    mu: float = 0.0
    sigma: float = 1.0
    k: float | None = None
    n: int = RELERR_N
    seed: int = 0
    repetitions: int = 1
    signed: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"n must be at least 1, got {self.n}")
        if self.repetitions < 1:
            raise DomainError(f"repetitions must be at least 1, got {self.repetitions}")
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be non-negative, got {self.sigma}")
        if self.k is not None and not self.k > 0:
            raise DomainError(f"truncation k must be positive, got {self.k}")


def sample_lognormal(config: SimConfig, repetition: int = 0) -> np.ndarray:
    """``exp(mu + sigma Z)`` with ``Z`` conditioned on ``Z <= k`` when ``k`` is set."""
    normal_stream = rng.stream_id(rng.NORMAL, repetition)
    sign_stream = rng.stream_id(rng.SIGN, repetition)

    def block(lo: int, hi: int) -> np.ndarray:
        z = rng.normals(config.seed, normal_stream, lo, hi - lo, upper=config.k)
        x = np.exp(config.mu + config.sigma * z)
        if config.signed:
            x *= rng.signs(config.seed, sign_stream, lo, hi - lo)
        return x

    return _parallel.map_chunks(block, config.n)


def _mean_over_repetitions(config: SimConfig, fn) -> float:
    return float(np.mean([fn(r) for r in range(config.repetitions)]))


def empirical_relative_error(sigma: float, fmt: fpquant.FpFormat, config: SimConfig | None = None) -> float:
    """Mean ``|q(x) - x| / |x|`` over lognormal(0, sigma^2) samples, averaged over repetitions."""
    config = replace(config or SimConfig(), sigma=sigma)

    def one(r: int) -> float:
        x = sample_lognormal(config, r)
        return float(np.mean(np.abs(fpquant.quantize_array(x, fmt) - x) / np.abs(x)))

    return _mean_over_repetitions(config, one)


def _solve_threshold(x: np.ndarray, S: float, mu: float, sigma: float, prior: str) -> float:
    if prior == "lognormal":
        return prune.threshold_for_sparsity(S, mu, sigma)
    if prior == "normal":
        return prune.normal_threshold_for_sparsity(S, float(np.sqrt(np.mean(np.square(x)))))
    raise DomainError(f"unknown prior {prior!r}")


def empirical_sparsity(sigma: float, mu: float, S_target: float, config: SimConfig | None = None, prior: str = "lognormal") -> float:
    """Zero fraction achieved by pruning MC data at the threshold solved under ``prior``.

    The lognormal solver uses the generating parameters; the normal baseline
    takes its standard deviation from the data.
    """
    config = replace(config or SimConfig(n=PRUNE_N, signed=True), sigma=sigma, mu=mu)

    def one(r: int) -> float:
        x = sample_lognormal(config, r).astype(np.float32)
        alpha = _solve_threshold(x, S_target, mu, sigma, prior)
        pruned = prune.stochastic_prune(x, alpha, config.seed, r)
        return float(np.count_nonzero(pruned == 0)) / x.size

    return _mean_over_repetitions(config, one)


def empirical_cosine(alpha: float, config: SimConfig) -> float:
    """Cosine between a sampled tensor and its pruned copy, averaged over repetitions."""
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")

    def one(r: int) -> float:
        x = sample_lognormal(config, r)
        return prune.cosine_similarity(x, prune.stochastic_prune(x, alpha, config.seed, r))

    return _mean_over_repetitions(config, one)


# -- grid runners ------------------------------------------------------------------

def relerr_rows(sigmas: Sequence[float], bits: Sequence[int], config: SimConfig | None = None, variant: str = "natural") -> list[dict]:
    config = config or SimConfig()
    rows = []
    for n in bits:
        for sigma in sigmas:
            for n2 in range(1, n):
                fmt = fpquant.FpFormat.split(n, n2)
                analytic = fpquant.expected_relative_error_lognormal(sigma, fmt.mantissa_bits, n2, variant)
                empirical = empirical_relative_error(sigma, fmt, config)
                rows.append({
                    "sigma": sigma, "N": n, "n2": n2, "n1": fmt.mantissa_bits, "format": str(fmt),
                    "analytic": analytic, "empirical": empirical, "abs_gap": abs(analytic - empirical),
                })
    return rows


def sparsity_rows(
    sigmas: Sequence[float],
    targets: Sequence[float],
    mus: Sequence[float] = (0.0,),
    config: SimConfig | None = None,
    prior: str = "lognormal",
) -> list[dict]:
    config = config or SimConfig(n=PRUNE_N, signed=True)
    rows = []
    for mu in mus:
        for sigma in sigmas:
            for S in targets:
                cfg = replace(config, sigma=sigma, mu=mu)
                alpha = _solve_threshold(sample_lognormal(cfg).astype(np.float32), S, mu, sigma, prior)
                empirical = empirical_sparsity(sigma, mu, S, cfg, prior)
                rows.append({
                    "sigma": sigma, "mu": mu, "prior": prior, "target_S": S, "alpha": alpha,
                    "analytic": S, "empirical": empirical, "abs_gap": abs(S - empirical),
                })
    return rows


def cosine_rows(
    sigmas: Sequence[float],
    targets: Sequence[float],
    k: float = 2.5,
    convention: str = "log",
    config: SimConfig | None = None,
) -> list[dict]:
    """Analytic vs simulated cosine at the thresholds that give each target sparsity."""
    config = config or SimConfig(n=PRUNE_N)
    rows = []
    for sigma in sigmas:
        cfg = replace(config, sigma=sigma, mu=0.0, k=k)
        for S in targets:
            alpha = prune.threshold_for_sparsity(S, 0.0, sigma)
            analytic = prune.analytic_cosine(alpha, sigma, k, convention)
            empirical = empirical_cosine(alpha, cfg)
            rows.append({
                "sigma": sigma, "k": k, "convention": convention, "target_S": S, "alpha": alpha,
                "analytic": analytic, "empirical": empirical, "abs_gap": abs(analytic - empirical),
            })
    return rows


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in columns})
    return buf.getvalue()


def write_csv(rows: Iterable[dict], columns: Sequence[str], path) -> None:
    text = rows_to_csv(rows, columns)
    atomic_write(path, lambda fh: fh.write(text), mode="w")
