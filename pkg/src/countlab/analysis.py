"""Closed-form bounds and small numerical oracles used to audit the constructions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from countlab.embeddings import EmbeddingSet


@dataclass(frozen=True)
class BoundCheck:
    quantity: float
    bound: float
    direction: str  # ">=" or "<="
    satisfied: bool

    @classmethod
    def compare(cls, quantity: float, bound: float, direction: str) -> "BoundCheck":
        if direction == ">=":
            ok = quantity >= bound
        elif direction == "<=":
            ok = quantity <= bound
        else:
            raise ValueError(f"direction must be '>=' or '<=', got {direction!r}")
        return cls(float(quantity), float(bound), direction, bool(ok))


@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous piecewise-linear function through ``(xs[i], ys[i])``."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise ValueError("need at least two breakpoints with matching values")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def lo(self) -> float:
        return self.xs[0]

    @property
    def hi(self) -> float:
        return self.xs[-1]

    @property
    def pieces(self) -> int:
        return len(self.xs) - 1

    def __call__(self, x):
        return np.interp(x, self.xs, self.ys)

    def max_abs_error(self, f: Callable, samples: int = 20001) -> float:
        x = np.linspace(self.lo, self.hi, samples)
        x = np.union1d(x, self.xs)
        return float(np.max(np.abs(self(x) - f(x))))


# --------------------------------------------------------------------------
# Welch / coherence


def welch_lower_bound(m: int, d: int) -> float:
    """Smallest possible max |<v_i, v_j>| over m unit vectors in R^d."""
    if d < 1 or m <= d:
        raise ValueError(f"Welch bound is vacuous unless m > d >= 1 (got m={m}, d={d})")
    return math.sqrt((m - d) / (d * (m - 1)))


def max_pairwise_inner(emb: EmbeddingSet) -> tuple[float, tuple[int, int]]:
    """Exhaustive search for the pair (0-based) with the largest |inner product|."""
    if emb.m < 2:
        raise ValueError("need at least two vectors")
    g = np.abs(emb.gram())
    np.fill_diagonal(g, -1.0)
    flat = int(np.argmax(g))
    i, j = divmod(flat, emb.m)
    a = float(g[i, j])
    if emb.m > emb.d:
        assert a >= welch_lower_bound(emb.m, emb.d) - 1e-12, "Welch bound violated"
    return a, (min(i, j), max(i, j))


def random_rademacher_embeddings(m: int, d: int, seed: int) -> EmbeddingSet:
    """Coordinates i.i.d. uniform on {+1/sqrt(d), -1/sqrt(d)}."""
    if m < 1 or d < 1:
        raise ValueError("m and d must be positive")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(m, d)) * 2 - 1
    return EmbeddingSet(signs / math.sqrt(d), "rademacher")


def hoeffding_bound(d: int, t: float) -> float:
    """Tail bound on the inner product of two random sign vectors in R^d."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return 2.0 * math.exp(-d * t * t / 2.0)


def empirical_inner_tail(d: int, t: float, draws: int, seed: int) -> float:
    """Monte-Carlo estimate of Pr(<v, w> >= t) for independent sign vectors."""
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 20000
    for start in range(0, draws, chunk):
        k = min(chunk, draws - start)
        v = rng.integers(0, 2, size=(k, d), dtype=np.int8) * 2 - 1
        w = rng.integers(0, 2, size=(k, d), dtype=np.int8) * 2 - 1
        inner = (v.astype(np.int32) * w).sum(axis=1) / d
        hits += int(np.count_nonzero(inner >= t - 1e-12))
    return hits / draws


# --------------------------------------------------------------------------
# piecewise-linear approximation of 1/x


def chord_gap(a: float, b: float) -> float:
    """Max of (chord of 1/x over [a, b]) - 1/x, attained at x = sqrt(ab)."""
    return (math.sqrt(b) - math.sqrt(a)) ** 2 / (a * b)


def greedy_inverse_approximation(n: int, eps: float, tol: float = 1e-12) -> PiecewiseLinear:
    """Fewest chords of 1/x on [1/n, 1] that each stay within ``eps``.

    Sweeps left to right; each piece is stretched to the farthest right
    endpoint whose chord gap is at most ``eps`` (found by bisection).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n < 1:
        raise ValueError("n must be positive")
    if n == 1:
        return PiecewiseLinear((1.0, 2.0), (1.0, 0.5))
    xs = [1.0 / n]
    a = xs[0]
    while chord_gap(a, 1.0) > eps:
        lo, hi = a, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if chord_gap(a, mid) <= eps:
                lo = mid
            else:
                hi = mid
        a = lo
        xs.append(a)
    xs.append(1.0)
    return PiecewiseLinear(tuple(xs), tuple(1.0 / x for x in xs))


def min_pieces_inverse(n: int, eps: float) -> int:
    """Piece count of :func:`greedy_inverse_approximation`; 1 when n == 1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n == 1:
        return 1
    return greedy_inverse_approximation(n, eps).pieces


def lemma1_lower_bound(n: int) -> int:
    """Number of disjoint windows (1/k, 1/(k-3)) stepping down from k = n."""
    if n < 4:
        return 1
    return (n - 1) // 3


def one_hidden_layer_pieces(w1, b1, w2, b2, lo: float, hi: float) -> PiecewiseLinear:
    """Exact piecewise-linear form of a scalar-in, scalar-out ReLU net on [lo, hi]."""
    w1 = np.asarray(w1, dtype=np.float64).ravel()
    b1 = np.asarray(b1, dtype=np.float64).ravel()
    w2 = np.asarray(w2, dtype=np.float64).ravel()
    b2 = float(np.asarray(b2).ravel()[0])
    active = w1 != 0
    kinks = -b1[active] / w1[active]
    xs = np.unique(np.concatenate([[lo, hi], kinks[(kinks > lo) & (kinks < hi)]]))

    def f(x):
        return np.maximum(np.outer(x, w1) + b1, 0.0) @ w2 + b2

    ys = f(xs)
    # merge collinear neighbours so ``pieces`` counts genuine slope changes
    keep = [0]
    for i in range(1, len(xs) - 1):
        s_left = (ys[i] - ys[keep[-1]]) / (xs[i] - xs[keep[-1]])
        s_right = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
        if not math.isclose(s_left, s_right, rel_tol=1e-9, abs_tol=1e-9):
            keep.append(i)
    keep.append(len(xs) - 1)
    return PiecewiseLinear(tuple(xs[keep]), tuple(ys[keep]))


# --------------------------------------------------------------------------
# attention temperature


def required_temperature(n: int, J: float) -> float:
    """Integer temperature T with c' * exp(T (J - 1)) < 1/2 for every c' < n."""
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 <= J < 1:
        raise ValueError(f"J must lie in [0, 1), got {J}")
    return float(math.ceil(math.log(2 * n) / (1.0 - J)))
