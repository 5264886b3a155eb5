import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab.analysis import (
    BoundCheck,
    PiecewiseLinear,
    chord_gap,
    empirical_inner_tail,
    greedy_inverse_approximation,
    hoeffding_bound,
    lemma1_lower_bound,
    max_pairwise_inner,
    min_pieces_inverse,
    one_hidden_layer_pieces,
    random_rademacher_embeddings,
    required_temperature,
    welch_lower_bound,
)
from countlab.constructions import build_inverter_mlp
from countlab.embeddings import EmbeddingSet, gaussian, one_hot, orthonormal
from countlab.nn import mlp_forward


# Welch


def test_welch_values():
    assert welch_lower_bound(8, 4) == pytest.approx(1 / math.sqrt(7))
    assert welch_lower_bound(4, 3) == pytest.approx(1 / 3)
    for d in (2, 5, 40):
        assert welch_lower_bound(2 * d, d) == pytest.approx(1 / math.sqrt(2 * d - 1))
    with pytest.raises(ValueError):
        welch_lower_bound(4, 4)


def test_max_pairwise_inner_trivial_cases():
    assert max_pairwise_inner(one_hot(4, 6))[0] == 0.0
    antipodal = EmbeddingSet(np.array([[0.6, 0.8], [-0.6, -0.8]]), "gaussian")
    assert max_pairwise_inner(antipodal) == (pytest.approx(1.0), (0, 1))


def test_max_pairwise_inner_double_loop():
    emb = random_rademacher_embeddings(32, 16, seed=11)
    V = emb.vectors.tolist()
    best, pair = 0.0, None
    for i in range(32):
        for j in range(i + 1, 32):
            v = abs(sum(a * b for a, b in zip(V[i], V[j])))
            if v > best:
                best, pair = v, (i, j)
    A, got = max_pairwise_inner(emb)
    assert A == pytest.approx(best, abs=1e-12)
    assert abs(float(emb.vectors[got[0]] @ emb.vectors[got[1]])) == pytest.approx(best, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(1, 10), st.integers(0, 10**6))
def test_welch_never_violated(d, extra, seed):
    emb = gaussian(d + extra, d, seed)
    A, _ = max_pairwise_inner(emb)
    assert A >= welch_lower_bound(d + extra, d) - 1e-12


# Rademacher / Hoeffding


def test_rademacher_vectors():
    a = random_rademacher_embeddings(20, 9, seed=3)
    b = random_rademacher_embeddings(20, 9, seed=3)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    assert set(np.round(a.vectors.ravel() * 3, 12)) <= {-1.0, 1.0}
    np.testing.assert_allclose(np.linalg.norm(a.vectors, axis=1), 1.0, rtol=0, atol=1e-15)


def test_rademacher_concentration_two_seeds():
    m, d = 1000, 128
    for seed in (0, 1):
        A, _ = max_pairwise_inner(random_rademacher_embeddings(m, d, seed))
        assert A <= 5 * math.sqrt(math.log(m) / d)


def test_hoeffding_values():
    assert hoeffding_bound(10, 0.0) == 2.0
    assert hoeffding_bound(100, 0.3) == pytest.approx(2 * math.exp(-4.5))
    assert hoeffding_bound(100, 0.3) == pytest.approx(0.02222, abs=1e-5)
    with pytest.raises(ValueError):
        hoeffding_bound(4, -0.1)


def test_empirical_tail_below_hoeffding_and_exact():
    d, t = 64, 0.4
    tail = empirical_inner_tail(d, t, 100_000, seed=0)
    assert tail <= hoeffding_bound(d, t)
    # exact binomial tail: <v, w> * d = 2K - d with K ~ Bin(d, 1/2)
    kmin = math.ceil((t * d + d) / 2)
    exact = sum(math.comb(d, k) for k in range(kmin, d + 1)) / 2**d
    assert abs(tail - exact) < 5 * math.sqrt(exact / 100_000) + 1e-4


# orthonormal embeddings


def test_orthonormal_embeddings():
    emb = orthonormal(5, 8, seed=1)
    np.testing.assert_allclose(emb.gram(), np.eye(5), atol=1e-12)
    with pytest.raises(ValueError):
        EmbeddingSet(np.array([[1.0, 1.0]]), "gaussian")
    with pytest.raises(ValueError):
        one_hot(5, 3)


# chords of 1/x


@pytest.mark.parametrize("a,b", [(0.1, 0.3), (0.5, 1.0), (0.01, 0.02), (0.2, 0.9)])
def test_chord_gap_matches_dense_grid(a, b):
    x = np.linspace(a, b, 200_001)
    chord = 1 / a + (1 / b - 1 / a) * (x - a) / (b - a)
    assert chord_gap(a, b) == pytest.approx(np.max(chord - 1 / x), rel=1e-6)


def _pieces_oracle(n, eps, grid=4001):
    """Smallest k for which k chords with breakpoints equally spaced in 1/sqrt(x)
    stay within eps, measured on a dense grid per piece."""

    def ok(k):
        us = np.linspace(math.sqrt(n), 1.0, k + 1)
        xs = 1 / us**2
        for a, b in zip(xs, xs[1:]):
            x = np.linspace(a, b, grid)
            chord = 1 / a + (1 / b - 1 / a) * (x - a) / (b - a)
            if np.max(chord - 1 / x) > eps * (1 + 1e-9):
                return False
        return True

    lo, hi = 1, 1
    while not ok(hi):
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if ok(mid) else (mid + 1, hi)
    return lo


@pytest.mark.parametrize("n,eps", [(2, 0.5), (16, 0.5), (50, 0.5), (64, 0.5), (100, 0.1), (256, 0.5), (300, 0.05)])
def test_min_pieces_against_oracle(n, eps):
    assert min_pieces_inverse(n, eps) == _pieces_oracle(n, eps)


def test_greedy_pieces_within_eps():
    for n, eps in [(16, 0.5), (100, 0.2), (512, 0.5)]:
        g = greedy_inverse_approximation(n, eps)
        assert g.lo == pytest.approx(1 / n) and g.hi == 1.0
        assert g.max_abs_error(lambda x: 1 / x, samples=100_001) <= eps + 1e-9


def test_min_pieces_examples():
    assert min_pieces_inverse(2, 0.5) == 1
    assert min_pieces_inverse(1, 0.5) == 1
    with pytest.raises(ValueError):
        min_pieces_inverse(8, 0.0)


def test_min_pieces_grows_like_sqrt_n():
    # equal steps of sqrt(eps) in 1/sqrt(x) give ceil((sqrt(n) - 1) / sqrt(eps)) pieces
    for n in (16, 64, 256, 500):
        assert min_pieces_inverse(n, 0.5) == math.ceil((math.sqrt(n) - 1) / math.sqrt(0.5))


def test_lemma1_lower_bound_values():
    assert lemma1_lower_bound(10) == 3
    assert lemma1_lower_bound(4) == 1
    assert lemma1_lower_bound(2) == 1
    assert [lemma1_lower_bound(n) for n in (16, 64, 256)] == [5, 21, 85]


def test_inverter_piece_count():
    # the 4n-ReLU inverter is one piecewise-linear function with at most 4n + 1 pieces
    n = 12
    (w1, b1), (w2, b2) = build_inverter_mlp(n)
    pw = one_hidden_layer_pieces(w1, b1, w2, b2, 1 / (n + 1), 1.5)
    assert pw.pieces <= 4 * n + 1
    x = np.linspace(1 / (n + 1), 1.5, 5001)
    np.testing.assert_allclose(pw(x), mlp_forward(build_inverter_mlp(n), x[:, None])[:, 0], atol=1e-9)


def test_piecewise_linear_validation():
    with pytest.raises(ValueError):
        PiecewiseLinear((0.0, 0.0), (1.0, 2.0))
    f = PiecewiseLinear((0.0, 1.0, 3.0), (0.0, 2.0, 0.0))
    assert f.pieces == 2 and f(2.0) == 1.0


# temperature


def test_required_temperature_values():
    assert required_temperature(1, 0.0) == 1
    assert required_temperature(100, 0.5) == 11
    with pytest.raises(ValueError):
        required_temperature(5, 1.0)
    with pytest.raises(ValueError):
        required_temperature(5, -0.1)


@given(st.integers(1, 10**6), st.floats(0, 0.99))
def test_required_temperature_guarantee_and_monotone(n, J):
    T = required_temperature(n, J)
    assert n * math.exp(T * (J - 1)) <= 0.5 + 1e-12
    assert required_temperature(n + 1, J) >= T
    assert required_temperature(n, min(J + 0.005, 0.995)) >= T


def test_bound_check():
    assert BoundCheck.compare(3, 2, ">=").satisfied
    assert not BoundCheck.compare(3, 2, "<=").satisfied
    with pytest.raises(ValueError):
        BoundCheck.compare(1, 1, "==")
