"""Monte-Carlo DP audit: binned log-probability ratios on neighboring inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dpmech
from .numkit import RngStream

MECHANISMS = {
    "winsorized_mean_1d": dpmech.winsorized_mean_1d,
    "exact_mean": dpmech.exact_mean_1d,
}


@dataclass
class AuditResult:
    epsilon: float
    max_log_ratio: float
    slack_at_max: float
    worst_margin: float  # max over bins of log-ratio - (eps + z*se); <= 0 means pass
    passed: bool
    counts_a: np.ndarray
    counts_b: np.ndarray
    edges: np.ndarray


def _edges(pooled: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = np.quantile(pooled, [0.005, 0.995])
    if not hi > lo:
        return np.array([-np.inf, lo, np.inf])
    inner = np.linspace(lo, hi, n_bins - 1)
    return np.concatenate(([-np.inf], inner, [np.inf]))


def binned_ratio_test(a, b, eps: float, n_bins: int = 20, z: float = 3.0) -> AuditResult:
    """Compare two output samples bin by bin.

    Bins: two open tails plus ``n_bins - 2`` equal-width bins spanning the
    pooled 0.5%..99.5% quantiles. A bin fails when |log(p_a / p_b)| exceeds
    ``eps`` by more than ``z`` delta-method standard errors of the log
    ratio; a bin populated on one side only has an infinite ratio.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    edges = _edges(np.concatenate([a, b]), n_bins)
    ca = np.bincount(np.searchsorted(edges, a, side="right") - 1, minlength=len(edges) - 1)
    cb = np.bincount(np.searchsorted(edges, b, side="right") - 1, minlength=len(edges) - 1)
    max_lr, slack_at_max, worst = 0.0, 0.0, -math.inf
    for na, nb in zip(ca, cb):
        if na == 0 and nb == 0:
            continue
        if na == 0 or nb == 0:
            max_lr, slack_at_max, worst = math.inf, 0.0, math.inf
            continue
        pa, pb = na / a.size, nb / b.size
        lr = abs(math.log(pa / pb))
        se = math.sqrt((1 - pa) / na + (1 - pb) / nb)
        margin = lr - (eps + z * se)
        if lr > max_lr:
            max_lr, slack_at_max = lr, z * se
        worst = max(worst, margin)
    return AuditResult(eps, max_lr, slack_at_max, worst, worst <= 0.0, ca, cb, edges)


def neighboring_datasets(M: int, B: float) -> tuple[np.ndarray, np.ndarray]:
    """Two size-M datasets that differ only in the last entry, at -B versus +B."""
    base = np.zeros(M)
    lo, hi = base.copy(), base.copy()
    lo[-1], hi[-1] = -B, B
    return lo, hi


def run_dp_audit(
    mech: str,
    eps: float,
    samples: int,
    *,
    M: int = 8,
    r: float = 0.25,
    B: float = 1.0,
    n_bins: int = 20,
    seed: int = 0,
) -> AuditResult:
    if mech not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mech!r}; choose from {sorted(MECHANISMS)}")
    fn = MECHANISMS[mech]
    lo, hi = neighboring_datasets(M, B)
    root = RngStream(seed).child("dp-audit", mech)
    a = fn(lo, r, eps, B, root.child("a"), size=samples)
    b = fn(hi, r, eps, B, root.child("b"), size=samples)
    return binned_ratio_test(a, b, eps, n_bins=n_bins)
