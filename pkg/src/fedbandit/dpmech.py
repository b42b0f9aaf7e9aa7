"""User-level private aggregation (private range, winsorized means) and the
advanced-composition accountant used to split ROBIN's budget over phases.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import BadDimension, NonFiniteInput, OutOfDomain
from .numkit import RngLike


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


@dataclass(frozen=True)
class BudgetSplit:
    eps0: float
    delta0: float
    P: int
    epsilon: float
    delta: float


@dataclass(frozen=True)
class RangeInterval:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo


# ---------------------------------------------------------------------------
# private range and winsorized means


def _bins(r: float, B: float) -> np.ndarray:
    # ceil(B / r) bins of width 2r starting at -B; the last one may overhang B
    n = max(1, math.ceil(B / r - 1e-9))
    return -B + r + 2.0 * r * np.arange(n)


def _range_logweights(xs, eps: float, r: float, B: float):
    xs = np.asarray(xs, dtype=float)
    if r <= 0 or eps <= 0 or B <= 0:
        raise ValueError("r, eps and B must be positive")
    if not np.all(np.isfinite(xs)):
        raise NonFiniteInput("NonFiniteInput: data contains NaN or inf")
    if np.any(np.abs(xs) > B * (1 + 1e-12)):
        raise OutOfDomain(f"OutOfDomain: data must lie in [-{B}, {B}]")
    mids = _bins(r, B)
    # snapping to the nearest midpoint == taking the containing bin (ties go up)
    idx = np.clip(np.floor((xs + B) / (2.0 * r)).astype(int), 0, mids.size - 1)
    counts = np.bincount(idx, minlength=mids.size)
    below = np.concatenate(([0], np.cumsum(counts)[:-1]))
    above = xs.size - below - counts
    cost = np.maximum(below, above)
    return mids, -eps * cost / 2.0


def private_range(xs, eps: float, r: float, B: float, rng: RngLike) -> RangeInterval:
    """Exponential-mechanism choice of a width-4r window covering most of ``xs``."""
    mids, logw = _range_logweights(xs, eps, r, B)
    k = numkit.sample_categorical_logweights(rng, logw)
    m = float(mids[k])
    return RangeInterval(m - 2.0 * r, m + 2.0 * r)


def winsorized_mean_1d(xs, r: float, eps: float, B: float, rng: RngLike, size=None):
    """Private mean of scalars in [-B, B].

    Half the budget picks a clamping window with ``private_range``; the
    clamped mean then gets Laplace noise of scale 8r/(M eps). The window has
    width 4r, so the clamped mean has sensitivity 4r/M and that scale spends
    the other eps/2.

    With ``size`` the whole mechanism is sampled ``size`` times independently
    (the range distribution is computed once), which is what audits need.
    """
    xs = np.asarray(xs, dtype=float)
    M = xs.size
    if M == 0:
        raise ValueError("need at least one value")
    mids, logw = _range_logweights(xs, eps / 2.0, r, B)
    ks = numkit.sample_categorical_logweights(rng, logw, size=size)
    # clamped mean for every candidate window, then index by the sampled one
    lo = mids[:, None] - 2.0 * r
    hi = mids[:, None] + 2.0 * r
    clamped = np.clip(xs[None, :], lo, hi).mean(axis=1)
    noise = numkit.sample_laplace(rng, 8.0 * r / (M * eps), size=size)
    out = clamped[ks] + noise
    return float(out) if size is None else out


def exact_mean_1d(xs, r=None, eps=None, B=None, rng=None, size=None):
    """Non-private mean with the winsorized signature; the audit's negative control."""
    m = float(np.mean(xs))
    return m if size is None else np.full(size, m)


def winsorized_mean_highd(xs, r: float, beta: float, eps: float, delta: float, rng: RngLike) -> np.ndarray:
    """Private mean of M vectors in the unit ball of R^d, d a power of two.

    Rotates with a random-sign Hadamard matrix so every coordinate is
    concentrated, runs ``winsorized_mean_1d`` per coordinate with a shrunken
    radius and per-coordinate budget, and rotates back.
    """
    X = np.atleast_2d(np.asarray(xs, dtype=float))
    M, d = X.shape
    if not numkit.is_power_of_two(d):
        raise BadDimension(f"BadDimension: {d} is not a power of two (pad before calling)")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("NonFiniteInput: data contains NaN or inf")
    if np.any(np.linalg.norm(X, axis=1) > 1.0 + 1e-9):
        raise OutOfDomain("OutOfDomain: inputs must lie in the unit ball")
    if min(r, beta, eps, delta) <= 0:
        raise ValueError("r, beta, eps and delta must be positive")
    signs = numkit.sample_rademacher(rng, d)
    Y = numkit.hadamard_rotate(X, signs)
    eps_coord = eps / math.sqrt(6.0 * d * math.log(1.0 / delta))
    r_coord = 10.0 * r * math.sqrt(math.log(d * M / beta) / d)
    bound = math.sqrt(d)  # B * sqrt(d) with B = 1
    Ybar = np.array([winsorized_mean_1d(Y[:, s], r_coord, eps_coord, bound, rng) for s in range(d)])
    return numkit.hadamard_rotate(Ybar, signs, inverse=True)


def wmhd_error_threshold(r: float, beta: float, eps: float, delta: float, d: int, M: int) -> float:
    """High-probability bound on ||WMHD output - sample mean|| for (r, beta)-concentrated inputs."""
    return (
        80.0 * r * math.log(d / beta) * math.sqrt(6.0 * d * math.log(d * M / beta) * math.log(1.0 / delta)) / (M * eps)
    )


# ---------------------------------------------------------------------------
# accounting


def compose_advanced(eps: float, delta: float, k: int, delta_prime: float) -> PrivacyParams:
    """k-fold composition of an (eps, delta) mechanism via advanced composition."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if eps <= 0 or delta < 0 or delta_prime <= 0:
        raise ValueError("eps and delta_prime must be positive, delta nonnegative")
    eps_total = eps * math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) + k * eps * math.expm1(eps)
    return PrivacyParams(eps_total, k * delta + delta_prime)


def compose_advanced_small_eps(eps: float, k: int, delta_prime: float) -> float | None:
    """Simplified bound eps*sqrt(6k log(1/delta')), valid when eps < 1/sqrt(k) and eps < log 2.

    Returns None when that precondition fails.
    """
    if not (eps < 1.0 / math.sqrt(k) and eps < math.log(2.0)):
        return None
    return eps * math.sqrt(6.0 * k * math.log(1.0 / delta_prime))


def robin_budget(pp: PrivacyParams, P: int) -> BudgetSplit:
    """Per-phase budget so that P private aggregations compose to (eps, delta)."""
    if P < 1:
        raise ValueError("P must be at least 1")
    if pp.delta <= 0:
        raise ValueError("ROBIN's budget split needs delta > 0")
    eps0 = pp.epsilon / math.sqrt(6.0 * P * math.log(2.0 / pp.delta))
    return BudgetSplit(eps0=eps0, delta0=pp.delta / (2.0 * P), P=P, epsilon=pp.epsilon, delta=pp.delta)


@dataclass(frozen=True)
class BudgetCheck:
    ok: bool
    precondition_met: bool
    eps_total: float
    delta_total: float
    eps_exact: float

    def __bool__(self):
        return self.ok


class CompositionPreconditionWarning(UserWarning):
    pass


_REL_TOL = 1e-12


def verify_robin_budget(split: BudgetSplit) -> BudgetCheck:
    """Recompose P copies of (eps0, delta0) with delta' = delta/2 and compare to (eps, delta).

    The simplified composition bound only applies when eps0 < 1/sqrt(P); when
    it does not, the check reports failure with a warning instead of passing.
    """
    dp = split.delta / 2.0
    exact = compose_advanced(split.eps0, split.delta0, split.P, dp)
    bound = compose_advanced_small_eps(split.eps0, split.P, dp)
    if bound is None:
        warnings.warn(
            f"eps0={split.eps0:.4g} violates eps0 < 1/sqrt(P) (P={split.P}); composition bound not applicable",
            CompositionPreconditionWarning,
            stacklevel=2,
        )
        return BudgetCheck(False, False, math.nan, exact.delta, exact.epsilon)
    ok = (
        bound <= split.epsilon * (1 + _REL_TOL)
        and exact.epsilon <= bound * (1 + _REL_TOL)
        and exact.delta <= split.delta * (1 + _REL_TOL)
    )
    return BudgetCheck(ok, True, bound, exact.delta, exact.epsilon)


def robin_budget_spent(split: BudgetSplit, k: int) -> tuple[float, float]:
    """(eps, delta) consumed after k private aggregations, by advanced composition."""
    if k <= 0:
        return 0.0, 0.0
    spent = compose_advanced(split.eps0, split.delta0, k, split.delta / 2.0)
    return spent.epsilon, spent.delta
