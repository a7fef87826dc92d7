"""Closed-form M/D/1 latencies for simple and pipelined placements."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Tuple


class UnstableQueueError(ValueError):
    """Utilization is at or above 1; the queue grows without bound."""


@dataclass(frozen=True)
class MD1Params:
    lambda0: float
    D: float

    @property
    def utilization(self) -> float:
        return self.lambda0 * self.D


def _check(rho: float) -> None:
    if rho >= 1:
        raise UnstableQueueError(f"utilization {rho:.6g} >= 1")
    if rho < 0:
        raise ValueError(f"negative utilization {rho:.6g}")


def md1_queue_length(p: MD1Params) -> float:
    rho = p.utilization
    _check(rho)
    return rho / (2 * (1 - rho))


def md1_latency(p: MD1Params) -> float:
    return p.D + md1_queue_length(p) * p.D


def w_simple(lam: float, D: float, p: float = 0.5) -> float:
    """Mean latency of two dedicated devices receiving fractions p, 1-p of rate lam."""
    a, b = p * lam * D, (1 - p) * lam * D
    _check(a)
    _check(b)
    return (D + p * p * lam * D * D / (2 * (1 - a))
            + (1 - p) ** 2 * lam * D * D / (2 * (1 - b)))


def w_pipeline(lam: float, D_s: float, D_m: float) -> float:
    """Mean latency of one pipeline fed the merged stream of rate lam."""
    rho = lam * D_m
    _check(rho)
    return D_s + lam * D_m * D_m / (2 * (1 - rho))


def _bisect_max(ok, lo: float, hi: float, tol: float) -> float:
    """Largest x in [lo, hi) with ok(x), assuming ok is monotone (true then false)."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def max_overhead(utilization: float, tol: float = 1e-6) -> Tuple[float, float]:
    """Largest alpha and beta keeping the pipelined placement no slower than two devices.

    Latencies are in units of the single-device latency (D = 1), so the
    result depends only on total utilization lam * D.
    """
    if not 0 < utilization < 1:
        raise ValueError(f"utilization {utilization!r} must lie in (0, 1)")
    lam, D = float(utilization), 1.0
    target = w_simple(lam, D, 0.5)
    # stability of the pipeline needs lam * factor * D / 2 < 1
    cap = 2.0 / (lam * D)

    def alpha_ok(a):
        return w_pipeline(lam, a * D, a * D / 2) <= target

    def beta_ok(b):
        return w_pipeline(lam, D, b * D / 2) <= target

    alpha = _bisect_max(alpha_ok, 1.0, cap, tol)
    beta = _bisect_max(beta_ok, 1.0, cap, tol)
    return alpha, beta


def max_overhead_frontier(utilizations: Iterable[float], tol: float = 1e-6) -> List[Tuple[float, float, float]]:
    """Rows of (utilization, alpha_max, beta_max)."""
    return [(float(u), *max_overhead(u, tol)) for u in utilizations]
