import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab.analysis import random_rademacher_embeddings, welch_lower_bound
from countlab.constructions import (
    adversarial_welch_input,
    build_inverter_mlp,
    build_max_mlp,
    build_mfe_histogram,
    build_mfe_two_layer,
    build_qc_countattend,
    build_qc_histogram,
    countattend_scratch,
    decode_inverse_count,
    hist_eval,
)
from countlab.embeddings import EmbeddingSet, one_hot
from countlab.nn import forward_many, mlp_forward, model_forward


def qc_oracle(seq):
    return Counter(int(t) for t in seq)[int(seq[-1])]


def mfe_oracle(seq):
    return max(Counter(int(t) for t in seq).values())


def all_seqs(m, n):
    return np.array(list(itertools.product(range(1, m + 1), repeat=n)))


# histogram QC


def test_qc_histogram_intro_example():
    a, b, c, d = 1, 2, 3, 4
    seq = [a, a, b, b, a, c, c, d, a]
    assert round(model_forward(build_qc_histogram(4, 9).model, seq)) == 4


def test_qc_histogram_single_token():
    assert round(model_forward(build_qc_histogram(2, 1).model, [1])) == 1


@pytest.mark.parametrize("m,n", [(3, 4), (2, 4), (3, 5)])
def test_qc_histogram_exhaustive(m, n):
    seqs = all_seqs(m, n)
    y = forward_many(build_qc_histogram(m, n).model, seqs)
    oracle = np.array([qc_oracle(s) for s in seqs])
    assert np.max(np.abs(y - oracle)) < 0.5


def test_qc_histogram_report_and_gate():
    rep = build_qc_histogram(5, 7)
    assert rep.mlp_width == 5 == rep.model.mlp_width(0)
    assert rep.model.config.model_dim == 10
    with pytest.raises(ValueError):
        build_qc_histogram(3, 4, B=4)


def test_qc_histogram_is_fixed_n():
    # certified at n, fed a duplicated length-2n input: the n-length answer comes back
    model = build_qc_histogram(3, 4).model
    seq = np.array([1, 2, 1, 1])
    assert model_forward(model, np.tile(seq, 2)) == pytest.approx(model_forward(model, seq), abs=1e-12)
    assert round(model_forward(model, np.tile(seq, 2))) == 3 != qc_oracle(np.tile(seq, 2))


# inverter


def test_inverter_width_and_examples():
    for n in (1, 7, 20):
        assert build_inverter_mlp(n)[0][0].shape[1] == 4 * n
    assert mlp_forward(build_inverter_mlp(7), np.array([1 / 7]))[0] == pytest.approx(7)
    assert mlp_forward(build_inverter_mlp(1), np.array([1.0]))[0] == pytest.approx(1)
    inv = build_inverter_mlp(20)
    ks = np.arange(1, 21)
    np.testing.assert_allclose(mlp_forward(inv, (1 / ks)[:, None])[:, 0], ks, atol=1e-9)


def test_inverter_plateaus():
    n = 9
    eps = 1 / (4 * n * (n + 1))
    inv = build_inverter_mlp(n, eps)
    for k in range(1, n + 1):
        xs = np.linspace(1 / (k + 0.5) + eps, 1 / (k - 0.5) - eps, 101)
        np.testing.assert_allclose(mlp_forward(inv, xs[:, None])[:, 0], k, atol=1e-9)


def test_inverter_rejects_wide_bumps():
    with pytest.raises(ValueError):
        build_inverter_mlp(5, eps=0.05)
    with pytest.raises(ValueError):
        build_inverter_mlp(5, eps=0.0)


# CountAttend


def test_countattend_all_identical():
    n = 9
    rep = build_qc_countattend(3, 3, n)
    seq = [2] * n
    assert countattend_scratch(rep, [seq])[0] == pytest.approx(1 / n, abs=1e-12)
    assert round(model_forward(rep.model, seq)) == n


def test_countattend_structure():
    rep = build_qc_countattend(5, 5, 30)
    cfg = rep.model.config
    assert cfg.model_dim == 7 and cfg.n_layers == 1 and cfg.n_heads == 1
    assert rep.mlp_width == 120
    assert rep.temperature == math.ceil(math.log(60))
    kq = rep.model.params["l0.wk"][0] @ rep.model.params["l0.wq"][0].T
    np.testing.assert_array_equal(kq[:5, :5], rep.temperature * np.eye(5))


def test_countattend_rademacher_small():
    emb = random_rademacher_embeddings(6, 4, seed=1)
    rep = build_qc_countattend(6, 4, 50, emb)
    assert rep.temperature >= math.log(100) / (1 - rep.max_cross_inner)
    rng = np.random.default_rng(0)
    seqs = rng.integers(1, 7, size=(500, 50))
    y = forward_many(rep.model, seqs)
    np.testing.assert_array_equal(np.round(y), [qc_oracle(s) for s in seqs])


def test_countattend_scratch_within_half_gap():
    # with the required temperature, 1/(c + 1/2) < scratch <= 1/c
    emb = random_rademacher_embeddings(12, 8, seed=3)
    n = 40
    rep = build_qc_countattend(12, 8, n, emb)
    rng = np.random.default_rng(1)
    seqs = rng.integers(1, 13, size=(300, n))
    w = countattend_scratch(rep, seqs)
    c = np.array([qc_oracle(s) for s in seqs])
    assert np.all(w <= 1 / c + 1e-12)
    assert np.all(w > 1 / (c + 0.5))


def test_countattend_rejects_parallel_embeddings():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        build_qc_countattend(3, 2, 5, EmbeddingSet(v, "orthonormal"))
    with pytest.raises(ValueError):
        build_qc_countattend(3, 3, 0)


# Welch adversary


def test_hist_eval_one_hot_is_exact():
    rng = np.random.default_rng(2)
    emb = one_hot(5)
    for _ in range(20):
        seq = rng.integers(1, 6, size=11)
        assert hist_eval(emb, seq) == qc_oracle(seq)


def test_hist_eval_proof_arithmetic():
    A = 0.3
    v = np.array([[1.0, 0.0], [A, math.sqrt(1 - A * A)]])
    emb = EmbeddingSet(v, "gaussian")
    n, c = 10, 4
    seq = [1] * (n - c) + [2] * c
    assert hist_eval(emb, seq) == pytest.approx(c + (n - c) * A)


def test_hist_eval_matches_direct_dot_products():
    emb = random_rademacher_embeddings(16, 8, seed=5)
    seq = np.random.default_rng(5).integers(1, 17, size=25)
    direct = sum(float(np.dot(emb.vectors[seq[-1] - 1], emb.vectors[t - 1])) for t in seq)
    assert hist_eval(emb, seq) == pytest.approx(direct, abs=1e-12)


@pytest.mark.parametrize("d", [4, 8, 16, 64])
def test_welch_adversary(d):
    emb = random_rademacher_embeddings(2 * d, d, seed=d)
    seq, bound = adversarial_welch_input(emb, d)
    err = abs(hist_eval(emb, seq) - qc_oracle(seq))
    assert err >= bound - 1e-12
    assert bound >= (d / 2) * welch_lower_bound(2 * d, d) - 1e-12
    assert err >= 0.25 * math.sqrt(d)


def test_welch_adversary_independent_pair_search():
    emb = random_rademacher_embeddings(32, 16, seed=0)
    V = emb.vectors
    A = max(abs(float(V[i] @ V[j])) for i in range(32) for j in range(32) if i != j)
    seq, bound = adversarial_welch_input(emb, 16)
    assert bound == pytest.approx(8 * A)
    assert abs(hist_eval(emb, seq) - qc_oracle(seq)) >= 8 * A - 1e-12


def test_welch_adversary_preconditions():
    with pytest.raises(ValueError):
        adversarial_welch_input(one_hot(4), 4)
    with pytest.raises(ValueError):
        adversarial_welch_input(random_rademacher_embeddings(16, 8, 0), 7)


# MFE


def test_max_mlp_examples():
    assert mlp_forward(build_max_mlp(1), np.array([5.0]))[0] == 5
    assert mlp_forward(build_max_mlp(2), np.array([3.0, 7.0]))[0] == 7


@pytest.mark.parametrize("m", range(2, 18))
def test_max_mlp_matches_scan(m):
    x = np.random.default_rng(m).uniform(0, 10, size=(1000, m))
    out = mlp_forward(build_max_mlp(m), x)[:, 0]
    scan = np.array([max(row) for row in x.tolist()])
    np.testing.assert_allclose(out, scan, rtol=0, atol=1e-12)
    assert len(build_max_mlp(m)) - 1 == math.ceil(math.log2(m))


def test_mfe_histogram_examples():
    model = build_mfe_histogram(3, 5).model
    assert round(model_forward(model, [1, 1, 2, 2, 3])) == 2
    assert round(model_forward(model, [3] * 5)) == 5


def test_mfe_histogram_exhaustive():
    seqs = all_seqs(3, 5)
    y = forward_many(build_mfe_histogram(3, 5).model, seqs)
    assert np.max(np.abs(y - [mfe_oracle(s) for s in seqs])) < 0.5


def test_mfe_two_layer_examples():
    rep = build_mfe_two_layer(3, 3, 5)
    w = model_forward(rep.model, [1, 1, 2, 2, 3])
    assert decode_inverse_count(w, 5) == 2
    n = 7
    rep = build_mfe_two_layer(3, 3, n)
    w = model_forward(rep.model, [2] * n)
    assert w == pytest.approx(1 / n, abs=1e-6)
    assert decode_inverse_count(w, n) == n


def test_mfe_two_layer_random():
    rep = build_mfe_two_layer(4, 4, 12)
    seqs = np.random.default_rng(7).integers(1, 5, size=(200, 12))
    got = decode_inverse_count(forward_many(rep.model, seqs), 12)
    np.testing.assert_array_equal(got, [mfe_oracle(s) for s in seqs])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=5, max_size=5))
def test_mfe_two_layer_property(seq):
    rep = build_mfe_two_layer(3, 3, 5)
    assert decode_inverse_count(model_forward(rep.model, seq), 5) == mfe_oracle(seq)


def test_decode_inverse_count_clips():
    np.testing.assert_array_equal(decode_inverse_count([1.0, 0.26, 0.0, 5.0], 3), [1, 3, 3, 1])
