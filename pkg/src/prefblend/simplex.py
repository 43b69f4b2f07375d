"""Geometry and sampling of the B-capped simplex.

The capped simplex {alpha in [0,1]^n : sum(alpha) <= B} occupies a vanishing
fraction of the hypercube as n grows, so feasible points are produced by a
stick-breaking recurrence rather than rejection: walk the coordinates in a
given order, assigning alpha_i = min(x_i * R, 1) and shrinking the residual
R (initially B) by the amount just assigned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import MergeCoefficients


def capped_simplex_volume(n: int, bound: float) -> float:
    """Fraction of the unit hypercube inside the capped simplex.

    Evaluates (1/n!) * sum_{k=0}^{floor(B)} (-1)^k C(n,k) (B-k)^n.
    Integer bounds take an exact big-integer path; otherwise the alternating
    sum runs in log space with compensated summation so that factorials never
    overflow (intended range n <= 64).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not bound > 0.0:
        raise ValueError("bound must be > 0")

    k_max = min(int(math.floor(bound)), n)
    if float(bound).is_integer():
        b = int(bound)
        total = sum(
            (-1) ** k * math.comb(n, k) * (b - k) ** n for k in range(k_max + 1)
        )
        return float(Fraction(total, math.factorial(n)))

    # Log-space path: scale signed terms by the largest magnitude, then
    # compensated-sum the residual expansion.
    log_terms = []
    signs = []
    for k in range(k_max + 1):
        base = bound - k
        if base <= 0.0:
            continue
        log_t = (
            -math.lgamma(k + 1)
            - math.lgamma(n - k + 1)
            + n * math.log(base)
        )
        log_terms.append(log_t)
        signs.append(-1.0 if k % 2 else 1.0)
    m = max(log_terms)
    acc = math.fsum(s * math.exp(t - m) for s, t in zip(signs, log_terms))
    vol = math.exp(m) * acc
    return float(min(max(vol, 0.0), 1.0))


@dataclass(frozen=True)
class StickBreakInput:
    """Latent hypercube point, coordinate ordering, and cap for one mapping."""

    x: np.ndarray
    ordering: np.ndarray
    bound: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        ordering = np.asarray(self.ordering, dtype=np.intp)
        if x.ndim != 1 or ordering.shape != x.shape:
            raise ValueError("x and ordering must be 1-D with equal length")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("x must lie in [0,1]^n")
        if not np.array_equal(np.sort(ordering), np.arange(x.size)):
            raise ValueError("ordering must be a permutation of 0..n-1")
        if not self.bound > 0.0:
            raise ValueError("bound must be > 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "ordering", ordering)


def stick_break(inp: StickBreakInput) -> MergeCoefficients:
    """Map a hypercube point onto the capped simplex along the given ordering."""
    x, ordering = inp.x, inp.ordering
    alpha = np.zeros_like(x)
    residual = inp.bound
    for idx in ordering:
        a = min(x[idx] * residual, 1.0)
        alpha[idx] = a
        residual -= a
    return MergeCoefficients(alpha)


def stick_break_jacobian(inp: StickBreakInput) -> np.ndarray:
    """d(alpha)/d(x) of the stick-breaking map, (n, n), original coordinates.

    On the clamped branch of min(., 1) the one-sided derivative 0 is used,
    matching the clamp-then-round convention of acquisition optimization.
    Entries for latent coordinates later in the ordering are exactly zero.
    """
    x, ordering = inp.x, inp.ordering
    n = x.size
    jac = np.zeros((n, n))
    d_residual = np.zeros(n)  # d(residual)/d(x_j), updated along the walk
    residual = inp.bound
    for idx in ordering:
        s = x[idx] * residual
        if s >= 1.0:
            residual -= 1.0
            continue  # clamped: zero row, residual derivative unchanged
        jac[idx, :] = x[idx] * d_residual
        jac[idx, idx] += residual
        d_residual -= jac[idx, :]
        residual -= s
    return jac


def stick_break_batch(
    x: np.ndarray, orderings: np.ndarray, bound: float
) -> np.ndarray:
    """Vectorized stick_break over rows; x and orderings are (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    orderings = np.asarray(orderings, dtype=np.intp)
    m, n = x.shape
    x_walk = np.take_along_axis(x, orderings, axis=1)
    a_walk = np.empty_like(x_walk)
    residual = np.full(m, float(bound))
    for p in range(n):
        a = np.minimum(x_walk[:, p] * residual, 1.0)
        a_walk[:, p] = a
        residual -= a
    alpha = np.empty_like(a_walk)
    np.put_along_axis(alpha, orderings, a_walk, axis=1)
    return alpha


def random_orderings(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permuted(np.tile(np.arange(n), (count, 1)), axis=1)


def sample_initial(
    n: int,
    bound: float,
    tau: float,
    count: int,
    rng: np.random.Generator,
) -> list[MergeCoefficients]:
    """Draw initial samples: stick-breaking with a fresh uniform latent point
    and a fresh random coordinate ordering per sample (mitigates the known
    ordering bias of the recurrence), then zero entries below tau.

    Sparsification does not renormalize, so every sample stays feasible.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    x = rng.random((count, n))
    orderings = random_orderings(count, n, rng)
    alpha = stick_break_batch(x, orderings, bound)
    alpha[alpha < tau] = 0.0
    return [MergeCoefficients(row) for row in alpha]
