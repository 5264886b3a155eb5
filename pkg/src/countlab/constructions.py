"""Transformers with hand-set weights for Query Count and Most Frequent Element.

All builders return a :class:`ConstructionReport` holding an ordinary
:class:`~countlab.nn.TransformerModel`; nothing here bypasses the regular
forward pass. Layer norm is off in every construction.

Coordinate layouts (0-based):

* histogram builders, ``D = 2m``: ``[0, m)`` holds the attention output
  (normalised histogram), ``[m, 2m)`` holds the token one-hot carried by the
  residual stream. The MLP writes its answer into coordinate ``m`` and the
  readout sums the one-hot block, with a bias of -1 cancelling the token's
  own one-hot.
* CountAttend, ``D = d + 2``: ``[0, d)`` token embedding, ``d`` a positional
  flag that is 1 only at the last position, ``d + 1`` scratch. The
  attention moves the flag into scratch, so scratch holds the weight the
  last position gives itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from countlab.analysis import max_pairwise_inner, required_temperature
from countlab.embeddings import EmbeddingSet, one_hot
from countlab.nn import TransformerConfig, TransformerModel

MLP = list[tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ConstructionReport:
    model: TransformerModel
    certified_n: int
    mlp_width: int
    temperature: float = 0.0
    max_cross_inner: float = 0.0
    mlp_parameters: int = 0

    def __post_init__(self):
        actual = sum(self.model.mlp_width(i) for i in range(self.model.config.n_layers))
        if actual != self.mlp_width:
            raise ValueError(f"reported MLP width {self.mlp_width} != model width {actual}")


def _mlp_params(layer: int, mlp: MLP) -> dict:
    out = {}
    for k, (w, b) in enumerate(mlp):
        out[f"l{layer}.mlp.{k}.w"] = w
        out[f"l{layer}.mlp.{k}.b"] = b
    return out


def _count_mlp_params(mlp: MLP) -> int:
    return int(sum(w.size + b.size for w, b in mlp))


# --------------------------------------------------------------------------
# Query Count: histogram


def build_qc_histogram(m: int, n: int, B: float | None = None) -> ConstructionReport:
    """One layer, one head, D = 2m; exact for every sequence of length ``n``.

    The head has Q = 0, so it averages the one-hots into the normalised
    histogram. Gate ``i`` of the extraction MLP is
    ``relu(n * hist[i] - B * (1 - onehot[i]))``, which equals the count of
    token ``i`` when the query is ``i`` and 0 otherwise.
    """
    if n < 1 or m < 2:
        raise ValueError("need m >= 2 and n >= 1")
    B = 2.0 * n * n if B is None else float(B)
    if B <= n:
        raise ValueError(f"gate constant B must exceed n={n}")
    D = 2 * m
    cfg = TransformerConfig(
        n_layers=1, n_heads=1, head_dim=D, model_dim=D, vocab_size=m, context_len=n
    )
    tok = np.zeros((m, D))
    tok[:, m:] = np.eye(m)
    wv = np.zeros((1, D, D))
    wv[0, m:, :m] = np.eye(m)

    w1 = np.zeros((D, m))
    w1[:m, :] = n * np.eye(m)
    w1[m:, :] = B * np.eye(m)
    b1 = np.full(m, -B)
    w2 = np.zeros((m, D))
    w2[:, m] = 1.0
    mlp = [(w1, b1), (w2, np.zeros(D))]

    readout = np.zeros(D)
    readout[m:] = 1.0
    params = {
        "tok_emb": tok,
        "l0.wq": np.zeros((1, D, D)),
        "l0.wk": np.zeros((1, D, D)),
        "l0.wv": wv,
        **_mlp_params(0, mlp),
        "readout.w": readout,
        "readout.b": np.array(-1.0),
    }
    model = TransformerModel(cfg, params)
    return ConstructionReport(model, n, m, mlp_parameters=_count_mlp_params(mlp))


# --------------------------------------------------------------------------
# Query Count: CountAttend


def delta_bump(a: float, b: float, height: float, eps: float) -> MLP:
    """Four ReLUs: 0 left of a, ``height`` on [a + eps, b], 0 right of b + eps."""
    w1 = np.ones((1, 4))
    b1 = -np.array([a, a + eps, b, b + eps])
    w2 = (height / eps) * np.array([[1.0], [-1.0], [-1.0], [1.0]])
    return [(w1, b1), (w2, np.zeros(1))]


def build_inverter_mlp(n: int, eps: float | None = None) -> MLP:
    """Scalar MLP mapping x near 1/k to k, for k = 1..n; hidden width 4n.

    Bump ``k`` covers ``[1/(k+1/2), 1/(k-1/2)]``. Neighbouring bumps share an
    edge, so between plateaus the output interpolates linearly and is
    continuous.
    """
    if n < 1:
        raise ValueError("n must be positive")
    eps = 1.0 / (4 * n * (n + 1)) if eps is None else float(eps)
    # narrowest bump is k = n; its plateau must survive both ramps
    narrowest = 1.0 / (n - 0.5) - 1.0 / (n + 0.5)
    if not 0 < eps < narrowest / 2:
        raise ValueError(f"bump width eps={eps} must lie in (0, {narrowest / 2})")
    w1, b1, w2 = [], [], []
    for k in range(1, n + 1):
        (bw1, bb1), (bw2, _) = delta_bump(1.0 / (k + 0.5), 1.0 / (k - 0.5), float(k), eps)
        w1.append(bw1)
        b1.append(bb1)
        w2.append(bw2)
    return [(np.hstack(w1), np.concatenate(b1)), (np.vstack(w2), np.zeros(1))]


def _check_countattend_inputs(emb: EmbeddingSet, m: int, d: int, n: int) -> float:
    if n < 1:
        raise ValueError("n must be positive")
    if emb.m != m or emb.d != d:
        raise ValueError(f"embedding set is {emb.m}x{emb.d}, expected {m}x{d}")
    J = emb.max_cross_inner()
    if J >= 1 - 1e-6:
        raise ValueError(f"two tokens share an embedding direction (J={J:.6f}); temperature diverges")
    return J


def build_qc_countattend(m: int, d: int, n: int, embeddings: EmbeddingSet | None = None) -> ConstructionReport:
    """One layer, one head, D = d + 2, with an O(n) inversion MLP."""
    emb = one_hot(m, d) if embeddings is None else embeddings
    J = _check_countattend_inputs(emb, m, d, n)
    T = required_temperature(n, max(J, 0.0))
    D = d + 2
    flag, scratch = d, d + 1
    cfg = TransformerConfig(
        n_layers=1, n_heads=1, head_dim=D, model_dim=D, vocab_size=m, context_len=n,
        use_positional=True,
    )
    tok = np.zeros((m, D))
    tok[:, :d] = emb.vectors
    pos = np.zeros((n, D))
    pos[n - 1, flag] = 1.0
    wq = np.zeros((1, D, D))
    wq[0, :d, :d] = T * np.eye(d)
    wk = np.zeros((1, D, D))
    wk[0, :d, :d] = np.eye(d)
    wv = np.zeros((1, D, D))
    wv[0, flag, scratch] = 1.0

    (iw1, ib1), (iw2, ib2) = build_inverter_mlp(n)
    w1 = np.zeros((D, iw1.shape[1]))
    w1[scratch] = iw1[0]
    w2 = np.zeros((iw2.shape[0], D))
    w2[:, flag] = iw2[:, 0]
    mlp = [(w1, ib1), (w2, np.zeros(D))]

    readout = np.zeros(D)
    readout[flag] = 1.0
    params = {
        "tok_emb": tok,
        "pos_emb": pos,
        "l0.wq": wq,
        "l0.wk": wk,
        "l0.wv": wv,
        **_mlp_params(0, mlp),
        "readout.w": readout,
        "readout.b": np.array(-1.0),
    }
    model = TransformerModel(cfg, params)
    return ConstructionReport(
        model, n, 4 * n, temperature=T, max_cross_inner=J, mlp_parameters=_count_mlp_params(mlp)
    )


def countattend_scratch(report: ConstructionReport, seqs) -> np.ndarray:
    """Attention-output scratch value (≈ 1/count) for each sequence."""
    from countlab.nn import run_layers

    trace: dict = {}
    run_layers(report.model, np.asarray(seqs), trace)
    d = report.model.config.model_dim - 2
    return trace["after_attention"][0][:, -1, d + 1]


# --------------------------------------------------------------------------
# Query Count: the histogram readout for arbitrary embeddings


def hist_eval(emb: EmbeddingSet, seq) -> float:
    """``v_query . sum_j count_j v_j`` with raw (unnormalised) counts."""
    t = np.asarray(seq)
    if t.min() < 1 or t.max() > emb.m:
        raise ValueError("token outside embedding set")
    counts = np.bincount(t - 1, minlength=emb.m)
    return float(emb.vectors[t[-1] - 1] @ (counts @ emb.vectors))


def adversarial_welch_input(emb: EmbeddingSet, n: int) -> tuple[np.ndarray, float]:
    """Input on which the histogram readout is off by at least ``(n/2) * A``.

    ``A`` is the largest |inner product| among the embeddings. The sequence
    is ``n/2`` copies of one token of the worst pair followed by ``n/2``
    copies of the other.
    """
    if emb.m < 2 * emb.d:
        raise ValueError(f"need m >= 2d for the Welch argument (m={emb.m}, d={emb.d})")
    if n < 2 or n % 2:
        raise ValueError("n must be a positive even number")
    A, (i, j) = max_pairwise_inner(emb)
    seq = np.array([i + 1] * (n // 2) + [j + 1] * (n // 2))
    return seq, (n / 2) * A


# --------------------------------------------------------------------------
# Most Frequent Element


def build_max_mlp(m: int) -> MLP:
    """Tournament of pairwise maxima, exact on non-negative inputs.

    Uses ``max(a, b) = a + relu(b - a)``; non-negative values pass a ReLU
    untouched, so each round is one hidden layer of width <= m and there
    are ``ceil(log2 m)`` rounds.
    """
    if m < 1:
        raise ValueError("m must be positive")
    if m == 1:
        return [(np.ones((1, 1)), np.zeros(1))]
    layers: MLP = []
    combine = np.eye(m)  # maps the previous hidden layer to the current values
    width = m
    while width > 1:
        pre = np.zeros((width, width))  # values -> hidden units
        post = np.zeros((width, (width + 1) // 2))  # hidden units -> next values
        for p in range(width // 2):
            a, b = 2 * p, 2 * p + 1
            pre[a, a] = 1.0
            pre[a, b] = -1.0
            pre[b, b] = 1.0
            post[a, p] = 1.0
            post[b, p] = 1.0
        if width % 2:
            pre[width - 1, width - 1] = 1.0
            post[width - 1, width // 2] = 1.0
        layers.append((combine @ pre, np.zeros(width)))
        combine = post
        width = (width + 1) // 2
    layers.append((combine, np.zeros(1)))
    return layers


def build_mfe_histogram(m: int, n: int) -> ConstructionReport:
    """One layer, one head: histogram attention followed by a max MLP."""
    if n < 1 or m < 2:
        raise ValueError("need m >= 2 and n >= 1")
    D = 2 * m
    cfg = TransformerConfig(
        n_layers=1, n_heads=1, head_dim=D, model_dim=D, vocab_size=m, context_len=n
    )
    tok = np.zeros((m, D))
    tok[:, m:] = np.eye(m)
    wv = np.zeros((1, D, D))
    wv[0, m:, :m] = np.eye(m)

    inner = build_max_mlp(m)
    first_w, first_b = inner[0]
    w_in = np.zeros((D, first_w.shape[1]))
    w_in[:m] = n * first_w  # rescale the normalised histogram to raw counts
    last_w, _ = inner[-1]
    w_out = np.zeros((last_w.shape[0], D))
    w_out[:, m] = last_w[:, 0]
    if len(inner) == 1:
        mlp = [(w_in @ w_out, np.zeros(D))]
    else:
        mlp = [(w_in, first_b), *inner[1:-1], (w_out, np.zeros(D))]

    readout = np.zeros(D)
    readout[m:] = 1.0
    params = {
        "tok_emb": tok,
        "l0.wq": np.zeros((1, D, D)),
        "l0.wk": np.zeros((1, D, D)),
        "l0.wv": wv,
        **_mlp_params(0, mlp),
        "readout.w": readout,
        "readout.b": np.array(-1.0),
    }
    model = TransformerModel(cfg, params)
    width = sum(w.shape[1] for w, _ in mlp[:-1])
    return ConstructionReport(model, n, width, mlp_parameters=_count_mlp_params(mlp))


def mfe_layer2_temperature(n: int) -> float:
    """Sharpness for the second layer of :func:`build_mfe_two_layer`.

    Neighbouring values of 1/count differ by at least 1/(2 n^2); with this
    temperature the stray mass on non-maximal positions moves the decoded
    count by well under 0.01.
    """
    return float(math.ceil(2 * n * n * math.log(100 * n**3)))


def build_mfe_two_layer(m: int, d: int, n: int, embeddings: EmbeddingSet | None = None) -> ConstructionReport:
    """Two attention layers; the output is ≈ 1/max_count (see :func:`decode_inverse_count`).

    Layout, D = d + 2n + 2: token block ``[0, d)``, positional one-hot
    ``[d, d+n)``, layer-1 attention pattern ``[d+n, d+2n)``, ``w`` scratch
    at ``d+2n`` and the answer at ``d+2n+1``.

    Layer 1 (bidirectional) lets every position attend sharply to its own
    token, copying the positional one-hots, so position ``i`` holds its own
    attention row. Its MLP picks out the diagonal entry: ``w_i`` ≈
    1/count(x_i). Layer 2's last position attends with logits ``-T2 * w_j``,
    which concentrates on the most frequent tokens, and copies ``w`` out.
    """
    emb = one_hot(m, d) if embeddings is None else embeddings
    J = _check_countattend_inputs(emb, m, d, n)
    T1 = required_temperature(n, max(J, 0.0))
    T2 = mfe_layer2_temperature(n)
    pos0, att0 = d, d + n
    w_idx, out_idx = d + 2 * n, d + 2 * n + 1
    D = d + 2 * n + 2
    cfg = TransformerConfig(
        n_layers=2, n_heads=1, head_dim=D, model_dim=D, vocab_size=m, context_len=n,
        use_positional=True, bidirectional_layers=(0,),
    )
    tok = np.zeros((m, D))
    tok[:, :d] = emb.vectors
    pos = np.zeros((n, D))
    pos[:, pos0 : pos0 + n] = np.eye(n)

    wq1 = np.zeros((1, D, D))
    wq1[0, :d, :d] = T1 * np.eye(d)
    wk1 = np.zeros((1, D, D))
    wk1[0, :d, :d] = np.eye(d)
    wv1 = np.zeros((1, D, D))
    wv1[0, pos0 : pos0 + n, att0 : att0 + n] = np.eye(n)

    # unit k = relu(att[k] + pos[k] - 1): passes att[k] at the own position, 0 elsewhere
    w1 = np.zeros((D, n))
    w1[att0 : att0 + n] = np.eye(n)
    w1[pos0 : pos0 + n] = np.eye(n)
    b1 = -np.ones(n)
    w2 = np.zeros((n, D))
    w2[:, w_idx] = 1.0
    mlp = [(w1, b1), (w2, np.zeros(D))]

    wq2 = np.zeros((1, D, D))
    wq2[0, pos0 + n - 1, 0] = -T2
    wk2 = np.zeros((1, D, D))
    wk2[0, w_idx, 0] = 1.0
    wv2 = np.zeros((1, D, D))
    wv2[0, w_idx, out_idx] = 1.0

    readout = np.zeros(D)
    readout[out_idx] = 1.0
    params = {
        "tok_emb": tok,
        "pos_emb": pos,
        "l0.wq": wq1, "l0.wk": wk1, "l0.wv": wv1,
        **_mlp_params(0, mlp),
        "l1.wq": wq2, "l1.wk": wk2, "l1.wv": wv2,
        "readout.w": readout,
        "readout.b": np.array(0.0),
    }
    model = TransformerModel(cfg, params)
    return ConstructionReport(
        model, n, n, temperature=T1, max_cross_inner=J, mlp_parameters=_count_mlp_params(mlp)
    )


def decode_inverse_count(w, n: int) -> np.ndarray:
    """Map w ≈ 1/k to the integer k in 1..n nearest to 1/w."""
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        k = np.floor(1.0 / w + 0.5)
    return np.clip(np.nan_to_num(k, posinf=n), 1, n).astype(np.int64)


# --------------------------------------------------------------------------
# brute-force labels


def count_query(seq) -> int:
    t = np.asarray(seq)
    return int(np.count_nonzero(t == t[-1]))


def most_frequent_count(seq) -> int:
    return int(np.bincount(np.asarray(seq)).max())
