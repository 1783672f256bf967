"""Stochastic pruning with analytically solved thresholds.

Each element below the threshold ``alpha`` is kept as ``sign(x) * alpha`` with
probability ``|x| / alpha`` and zeroed otherwise, so the pruned tensor is an
unbiased estimate of the input.  For lognormal magnitudes the expected zero
fraction is available in closed form, which lets the threshold be solved for a
target sparsity without sorting the tensor.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc, erfcx, ndtr

from . import _parallel, rng
from .distfit import LognormalParams, fit_lognormal
from .errors import DomainError

SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
BISECT_TOL = 1e-6
BISECT_MAX_ITER = 200
DEFAULT_MAX_CAP = 0.97


class ShortfallWarning(UserWarning):
    """The allocated overall sparsity falls short of the requested budget."""


@dataclass(frozen=True)
class PruneSpec:
    target_sparsity: float
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_sparsity < 1.0:
            raise DomainError(f"target sparsity must lie in (0, 1), got {self.target_sparsity}")
        if self.alpha is not None and not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class CosineReport:
    analytic_cos: float
    empirical_cos: float | None
    alpha: float
    sparsity: float


@dataclass(frozen=True)
class LayerProfile:
    layer_id: str
    n: int
    params: LognormalParams
    depth_rank: int
    min_cosine: float | None = None
    left_ratio: float | None = None

    def __post_init__(self):
        if self.n <= 0:
            raise DomainError(f"{self.layer_id}: element count must be positive")
        if self.min_cosine is not None and not 0.0 < self.min_cosine < 1.0:
            raise DomainError(f"{self.layer_id}: min_cosine must lie in (0, 1)")
        if self.left_ratio is not None and not 0.0 <= self.left_ratio < 1.0:
            raise DomainError(f"{self.layer_id}: left_ratio must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerProfile":
        k = d.get("k")
        params = LognormalParams(float(d["mu"]), float(d["sigma"]), float("inf") if k is None else float(k))
        return cls(
            layer_id=str(d["layer_id"]),
            n=int(d["n"]),
            params=params,
            depth_rank=int(d["depth_rank"]),
            min_cosine=None if d.get("min_cosine") is None else float(d["min_cosine"]),
            left_ratio=None if d.get("left_ratio") is None else float(d["left_ratio"]),
        )


# -- sparsity <-> threshold ------------------------------------------------------

def _check_sigma(sigma: float) -> None:
    if not (sigma > 0 and math.isfinite(sigma)):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")


def _sparsity_log(u: float, sigma: float) -> float:
    """Sparsity at ``ln(alpha / e^mu) = u``."""
    if u == -math.inf:
        return 0.0
    if u == math.inf:
        return 1.0
    z = sigma / SQRT2 - u / (SQRT2 * sigma)
    if z > 0:
        tail = math.exp(0.5 * sigma * sigma - u - z * z) * erfcx(z)
    else:
        tail = math.exp(0.5 * sigma * sigma - u) * erfc(z)
    return float(min(max(ndtr(u / sigma) - 0.5 * tail, 0.0), 1.0))


def sparsity_given_threshold(alpha: float, mu: float, sigma: float) -> float:
    """Expected zero fraction after stochastic pruning of lognormal(mu, sigma^2) magnitudes."""
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    _check_sigma(sigma)
    return _sparsity_log(math.log(alpha) - mu, sigma)


def _bisect(f, target: float, lo: float, hi: float, step: float, tol: float, max_iter: int) -> float:
    """Root of increasing ``f(u) = target``; the bracket grows by ``step`` until it holds."""
    while f(lo) > target:
        lo -= step
    while f(hi) < target:
        hi += step
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val - target) < tol:
            break
        if val < target:
            lo = mid
        else:
            hi = mid
    return mid


def threshold_for_sparsity(S: float, mu: float, sigma: float, tol: float = BISECT_TOL, max_iter: int = BISECT_MAX_ITER) -> float:
    """Threshold ``alpha`` whose expected sparsity is ``S``.

    Bisection runs on ``ln(alpha) - mu`` over ``[-8 sigma, 8 sigma]``, widened when
    the target is not bracketed (small sigma with S close to 1).
    """
    if not 0.0 < S < 1.0:
        raise DomainError(f"sparsity must lie in (0, 1), got {S}")
    _check_sigma(sigma)
    span = 8.0 * sigma
    u = _bisect(lambda v: _sparsity_log(v, sigma), S, -span, span, max(span, 1.0), tol, max_iter)
    return math.exp(mu + u)


def bimodal_threshold(S: float, left_ratio: float, right: LognormalParams, tol: float = BISECT_TOL) -> float:
    """Threshold for overall sparsity ``S`` when a fraction ``left_ratio`` sits in a
    negligible low-magnitude mode: solve the right mode for ``(S - l) / (1 - l)``."""
    if not 0.0 <= left_ratio < 1.0:
        raise DomainError(f"left ratio must lie in [0, 1), got {left_ratio}")
    if not left_ratio < S:
        raise DomainError(f"infeasible sparsity: target {S} does not exceed left-mode ratio {left_ratio}")
    s_right = (S - left_ratio) / (1.0 - left_ratio)
    return threshold_for_sparsity(s_right, right.mu, right.sigma, tol=tol)


def normal_sparsity_given_threshold(alpha: float, std: float) -> float:
    """Expected sparsity when the signed values are assumed ``N(0, std^2)``."""
    if not alpha > 0 or not std > 0:
        raise DomainError("alpha and std must be positive")
    c = alpha / std
    return float((2.0 * ndtr(c) - 1.0) + 2.0 * _INV_SQRT_2PI * (math.exp(-0.5 * c * c) - 1.0) / c)


def normal_threshold_for_sparsity(S: float, std: float, tol: float = BISECT_TOL) -> float:
    """Normal-assumption baseline threshold; compared against the lognormal solver."""
    if not 0.0 < S < 1.0:
        raise DomainError(f"sparsity must lie in (0, 1), got {S}")
    if not std > 0:
        raise DomainError(f"std must be positive, got {std}")
    f = lambda v: normal_sparsity_given_threshold(math.exp(v), 1.0)
    return std * math.exp(_bisect(f, S, -10.0, 10.0, 10.0, tol, BISECT_MAX_ITER))


# -- pruning ---------------------------------------------------------------------

def stochastic_prune(tensor, alpha: float, seed: int = 0, repetition: int = 0) -> np.ndarray:
    """Prune with one uniform draw per element keyed by ``(seed, index)``.

    ``repetition`` selects an independent stream under the same seed.

    Output has the input's float dtype; kept sub-threshold values are exactly
    ``+-alpha`` rounded once to that dtype.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    x = np.asarray(tensor)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    flat = x.reshape(-1)
    a_t = flat.dtype.type(alpha)
    a64 = float(a_t)
    stream = rng.stream_id(rng.PRUNE, repetition)

    def block(lo: int, hi: int) -> np.ndarray:
        v = flat[lo:hi]
        mag = np.abs(v).astype(np.float64)
        eps = rng.uniforms(seed, stream, lo, hi - lo)
        snapped = np.where(v < 0, -a_t, a_t).astype(flat.dtype)
        kept = np.where(mag >= a64 * eps, snapped, flat.dtype.type(0))
        return np.where(mag > a64, v, kept).astype(flat.dtype)

    return _parallel.map_chunks(block, flat.size).reshape(x.shape)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def truncation_log_bound(sigma: float, k: float, convention: str = "log") -> float:
    """Upper bound on ``ln x`` for a standardised lognormal truncated by ``k``.

    ``"log"`` truncates at ``ln x <= k*sigma``; ``"linear"`` at ``x <= k*sigma``.
    """
    if convention == "log":
        return k * sigma
    if convention == "linear":
        return math.log(k * sigma)
    raise DomainError(f"unknown truncation convention {convention!r}")


def analytic_cosine(alpha: float, sigma: float, k: float = math.inf, convention: str = "log") -> float:
    """Expected cosine between a truncated lognormal(0, sigma^2) tensor and its pruned copy.

    ``alpha`` must already be normalised by ``e^mu``.  Uses the concentration
    approximation ``E[X.T] / sqrt(E|X|^2 E|T|^2)``; since pruning is unbiased,
    ``E[X.T] = E|X|^2`` and the cosine is ``sqrt(E|X|^2 / E|T|^2)``.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    _check_sigma(sigma)
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    s2 = sigma * sigma
    c = truncation_log_bound(sigma, k, convention)
    la = math.log(alpha)
    t = min(la, c)
    second = ndtr((c - 2 * s2) / sigma)                   # E[X^2; X <= e^c] / e^{2 s^2}
    if second <= 0:
        raise DomainError("truncated second moment underflows; sigma too large for k")
    below = math.exp(la - 1.5 * s2) * ndtr((t - s2) / sigma)  # alpha E[X; X <= min] / e^{2 s^2}
    above = second - ndtr((la - 2 * s2) / sigma) if la < c else 0.0
    ratio = (below + above) / second
    return float(min(1.0, math.sqrt(1.0 / ratio)))


def predict_and_prune(tensor, spec: PruneSpec, mask=None, params: LognormalParams | None = None):
    """Fit (if needed), solve the threshold, prune and measure.

    With a ``mask`` (``True`` = left mode), the right mode is fitted on the
    unmasked entries and the threshold comes from :func:`bimodal_threshold`.
    Returns ``(pruned, CosineReport, achieved_sparsity)``.
    """
    x = np.asarray(tensor)
    flat = x.reshape(-1)
    if mask is not None:
        bits = np.asarray(getattr(mask, "bits", mask), dtype=bool).reshape(-1)
        if bits.size != flat.size:
            raise DomainError(f"mask has {bits.size} entries for {flat.size} elements")
        left = float(bits.mean())
        if params is None:
            params = fit_lognormal(flat[~bits])
        alpha = spec.alpha or bimodal_threshold(spec.target_sparsity, left, params)
    else:
        if params is None:
            params = fit_lognormal(flat)
        alpha = spec.alpha or threshold_for_sparsity(spec.target_sparsity, params.mu, params.sigma)

    pruned = stochastic_prune(x, alpha, spec.seed)
    achieved = float(np.count_nonzero(pruned == 0)) / max(flat.size, 1)
    analytic = analytic_cosine(alpha / math.exp(params.mu), params.sigma, params.k)
    try:
        empirical = cosine_similarity(flat, pruned)
    except DomainError:
        empirical = None
    report = CosineReport(analytic, empirical, float(alpha), achieved)
    return pruned, report, achieved


# -- heterogeneous allocation -----------------------------------------------------

@dataclass
class LayerAllocation:
    layer_id: str
    n: int
    depth_rank: int
    spec: PruneSpec
    sparsity: float
    analytic_cos: float
    constrained: bool

    def as_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "n": self.n,
            "depth_rank": self.depth_rank,
            "target_S": self.spec.target_sparsity,
            "alpha": self.spec.alpha,
            "seed": self.spec.seed,
            "sparsity": self.sparsity,
            "analytic_cos": self.analytic_cos,
            "constrained": self.constrained,
        }


@dataclass
class Allocation:
    layers: list[LayerAllocation]
    target_sparsity: float
    overall_sparsity: float
    rest_sparsity: float | None
    max_cap: float
    warnings: list[str] = field(default_factory=list)


def _layer_sparsity(layer: LayerProfile, alpha: float) -> float:
    s = sparsity_given_threshold(alpha, layer.params.mu, layer.params.sigma)
    l = layer.left_ratio or 0.0
    return l + (1.0 - l) * s


def _layer_threshold(layer: LayerProfile, S: float, tol: float) -> float:
    if layer.left_ratio:
        return bimodal_threshold(S, layer.left_ratio, layer.params, tol=tol)
    return threshold_for_sparsity(S, layer.params.mu, layer.params.sigma, tol=tol)


def _layer_cosine(layer: LayerProfile, alpha: float) -> float:
    p = layer.params
    return analytic_cosine(alpha / math.exp(p.mu), p.sigma, p.k)


def _relax_for_cosine(layer: LayerProfile, alpha: float, min_cos: float) -> float:
    """Largest threshold not above ``alpha`` whose analytic cosine reaches ``min_cos``."""
    sigma = layer.params.sigma
    hi = math.log(alpha)
    lo = hi - sigma
    while _layer_cosine(layer, math.exp(lo)) < min_cos:
        hi, lo = lo, lo - sigma
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if _layer_cosine(layer, math.exp(mid)) >= min_cos:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return math.exp(lo)


def heterogeneous_allocate(
    layers: Sequence[LayerProfile],
    S_target: float,
    max_cap: float = DEFAULT_MAX_CAP,
    seed: int = 0,
    tol: float = 1e-10,
) -> Allocation:
    """Per-layer thresholds that hold deep layers above their minimum cosine.

    Layers with ``min_cosine`` start at ``S_target`` and have their threshold
    lowered until the analytic cosine meets the minimum.  The unconstrained
    layers then share one compensating sparsity chosen to keep the
    element-weighted mean at ``S_target``, capped at ``max_cap``.  When the cap
    binds, or every layer is constrained, the shortfall is reported in
    ``warnings`` and emitted as :class:`ShortfallWarning`.
    """
    if not layers:
        raise DomainError("no layers to allocate")
    if not 0.0 < S_target < 1.0:
        raise DomainError(f"target sparsity must lie in (0, 1), got {S_target}")
    if not 0.0 < max_cap <= 1.0:
        raise DomainError(f"max cap must lie in (0, 1], got {max_cap}")

    ordered = sorted(layers, key=lambda l: l.depth_rank)
    total = sum(l.n for l in ordered)
    out: dict[str, LayerAllocation] = {}
    budget_used = 0.0
    rest = [l for l in ordered if l.min_cosine is None]

    for i, layer in enumerate(ordered):
        if layer.min_cosine is None:
            continue
        alpha = _layer_threshold(layer, S_target, tol)
        if _layer_cosine(layer, alpha) < layer.min_cosine:
            alpha = _relax_for_cosine(layer, alpha, layer.min_cosine)
        s = _layer_sparsity(layer, alpha)
        budget_used += s * layer.n
        out[layer.layer_id] = LayerAllocation(
            layer.layer_id, layer.n, layer.depth_rank, PruneSpec(S_target, alpha, seed + i),
            s, _layer_cosine(layer, alpha), True,
        )

    notes: list[str] = []
    s_rest = None
    if rest:
        rest_n = sum(l.n for l in rest)
        demanded = (S_target * total - budget_used) / rest_n
        s_rest = demanded
        applied = min(demanded, max_cap)
        if demanded > max_cap:
            notes.append(
                f"compensating sparsity {demanded:.6f} exceeds cap {max_cap}; unconstrained layers capped"
            )
        for i, layer in enumerate(ordered):
            if layer.min_cosine is not None:
                continue
            alpha = _layer_threshold(layer, applied, tol)
            out[layer.layer_id] = LayerAllocation(
                layer.layer_id, layer.n, layer.depth_rank, PruneSpec(applied, alpha, seed + i),
                _layer_sparsity(layer, alpha), _layer_cosine(layer, alpha), False,
            )

    allocated = [out[l.layer_id] for l in ordered]
    overall = sum(a.sparsity * a.n for a in allocated) / total
    if overall < S_target - 1e-9:
        notes.append(f"shortfall: overall sparsity {overall:.6f} below target {S_target}")
    for note in notes:
        warnings.warn(note, ShortfallWarning, stacklevel=2)
    return Allocation(allocated, S_target, overall, s_rest, max_cap, notes)
