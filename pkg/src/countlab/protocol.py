"""Set disjointness solved by simulating a one-layer MFE transformer across two parties.

Alice holds the first half of the context, Bob the second half. Every
number that crosses the channel is rounded to a p-bit fixed-point register
first, and the transcript records exactly how many bits were sent. The
five steps are:

1. Alice -> Bob: per-head partial softmax denominators   (p * h bits)
2. Bob -> Alice: per-head full denominators              (p * h bits)
3. Alice -> Bob: per-head partial attention outputs      (d * p * h bits)
4. Bob completes the attention outputs locally and applies a fixed
   decoder (any MLP is allowed in the reduction)
5. Bob -> Alice: the answer bit                          (1 bit)
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from countlab.embeddings import EmbeddingSet, one_hot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DisjointnessInstance:
    a: tuple[int, ...]
    b: tuple[int, ...]

    def __post_init__(self):
        a, b = tuple(int(x) for x in self.a), tuple(int(x) for x in self.b)
        if len(a) != len(b) or not a:
            raise ValueError("a and b must be non-empty and of equal length")
        if any(x not in (0, 1) for x in a + b):
            raise ValueError("entries must be bits")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_bits(self) -> int:
        return len(self.a)


@dataclass(frozen=True)
class HeadWeights:
    """One attention head acting on d-dimensional token embeddings."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def score(self, x: np.ndarray, query: np.ndarray) -> np.ndarray:
        return (x @ self.wk) @ (query @ self.wq)


@dataclass(frozen=True)
class Message:
    sender: str
    kind: str
    bits: int
    values: tuple[float, ...]


@dataclass(frozen=True)
class ProtocolTranscript:
    messages: tuple[Message, ...]
    output: int
    saturated: bool = False
    decoded: tuple[float, ...] = field(default=(), compare=False)

    @property
    def total_bits(self) -> int:
        return sum(msg.bits for msg in self.messages)

    @property
    def valid(self) -> bool:
        return not self.saturated

    def to_dict(self) -> dict:
        return {
            "messages": [
                {"sender": m.sender, "kind": m.kind, "bits": m.bits, "values": list(m.values)}
                for m in self.messages
            ],
            "total_bits": self.total_bits,
            "output": self.output,
            "valid": self.valid,
        }


# --------------------------------------------------------------------------
# fixed-point registers


def quantize(x: float, p: int, bound: float = 1.0) -> float:
    """Round to the sign + (p-1)-bit grid with step ``bound / 2**(p-1)``.

    Magnitudes beyond the largest code are clipped; use :func:`saturates`
    to detect values outside ``[-bound, bound]``.
    """
    if p < 2:
        raise ValueError("need at least 2 bits")
    if not math.isfinite(x):
        raise ValueError("cannot quantize a non-finite value")
    if bound <= 0:
        raise ValueError("bound must be positive")
    levels = 2 ** (p - 1)
    step = bound / levels
    code = max(-(levels - 1), min(levels - 1, round(x / step)))
    return code * step


def saturates(x: float, bound: float) -> bool:
    return abs(x) > bound


def _send(values: Sequence[float], p: int, bound: float) -> tuple[list[float], bool]:
    out = [quantize(float(v), p, bound) for v in values]
    return out, any(saturates(float(v), bound) for v in values)


def _send_denominators(values: Sequence[float], p: int, bound: float) -> tuple[list[float], bool]:
    # a positive sum that rounds to zero is sent as the smallest grid value and flagged
    out, sat = _send(values, p, bound)
    step = bound / 2 ** (p - 1)
    underflow = any(q <= 0 for q in out)
    return [max(q, step) for q in out], sat or underflow


# --------------------------------------------------------------------------
# reduction


def vocab_size_for(n_bits: int) -> int:
    return 3 * n_bits + 1


def encode_inputs(inst: DisjointnessInstance, vocab_size: int | None = None):
    """Token ids (1-based) for both halves plus the shared query token.

    Bit ``j`` of ``a`` becomes ``s_j`` if set and ``y_j`` otherwise; bit
    ``j`` of ``b`` becomes ``s_j`` or ``z_j``. Ids: ``s_j = j``,
    ``y_j = n + j``, ``z_j = 2n + j``, query ``= 3n + 1``.
    """
    n = inst.n_bits
    need = vocab_size_for(n)
    if vocab_size is not None and vocab_size < need:
        raise ValueError(f"vocabulary of {vocab_size} tokens cannot encode {n} bits (needs {need})")
    j = np.arange(1, n + 1)
    alice = np.where(np.array(inst.a) == 1, j, n + j)
    bob = np.where(np.array(inst.b) == 1, j, 2 * n + j)
    return alice, bob, 3 * n + 1


def shrink_to_vocab(inst: DisjointnessInstance, vocab_size: int) -> DisjointnessInstance:
    """Cut the instance to ``vocab_size // 6`` bits when the vocabulary is too small."""
    if vocab_size >= vocab_size_for(inst.n_bits):
        return inst
    keep = max(1, vocab_size // 6)
    log.warning("vocabulary %d too small for %d bits; using the first %d", vocab_size, inst.n_bits, keep)
    return DisjointnessInstance(inst.a[:keep], inst.b[:keep])


def disjointness_oracle(inst: DisjointnessInstance) -> int:
    return int(max(x * y for x, y in zip(inst.a, inst.b)))


def histogram_mfe_head(d: int) -> HeadWeights:
    """Q = 0, K = V = I: uniform attention, output is the normalised histogram."""
    return HeadWeights(np.zeros((d, d)), np.eye(d), np.eye(d))


def threshold_decoder(context_len: int) -> Callable[[np.ndarray], int]:
    """Bob's MLP for the histogram head: most-frequent count >= 1.5 means intersecting."""

    def decode(t: np.ndarray) -> int:
        return int(context_len * float(np.max(t)) >= 1.5)

    return decode


def run_protocol(inst: DisjointnessInstance, heads: Sequence[HeadWeights] | None = None,
                 embeddings: EmbeddingSet | None = None, p: int = 32,
                 decoder: Callable[[np.ndarray], int] | None = None) -> ProtocolTranscript:
    """Run the five-step protocol; see the module docstring."""
    n = inst.n_bits
    emb = one_hot(vocab_size_for(n)) if embeddings is None else embeddings
    heads = [histogram_mfe_head(emb.d)] if heads is None else list(heads)
    alice_tok, bob_tok, query_tok = encode_inputs(inst, emb.m)
    decoder = threshold_decoder(2 * n) if decoder is None else decoder

    E = emb.vectors
    xa, xb, x0 = E[alice_tok - 1], E[bob_tok - 1], E[query_tok - 1]
    # registers are sized from public information (weights and embeddings)
    t_max = max(float(np.max(np.abs(h.score(E, x0)))) for h in heads)
    denom_bound = 2 * n * math.exp(t_max)
    value_bound = float(n)

    ea = [np.exp(h.score(xa, x0)) for h in heads]
    eb = [np.exp(h.score(xb, x0)) for h in heads]

    messages = []
    s_a, sat1 = _send_denominators([e.sum() for e in ea], p, denom_bound)
    messages.append(Message("alice", "partial_denominators", p * len(heads), tuple(s_a)))

    s, sat2 = _send_denominators([sa + e.sum() for sa, e in zip(s_a, eb)], p, denom_bound)
    messages.append(Message("bob", "denominators", p * len(heads), tuple(s)))

    partial = [(e @ (xa @ h.wv)) / sj for e, h, sj in zip(ea, heads, s)]
    flat_a, sat3 = _send(np.concatenate(partial), p, value_bound)
    d_out = heads[0].wv.shape[1]
    messages.append(
        Message("alice", "partial_attention", p * len(flat_a), tuple(flat_a))
    )

    t_a = np.asarray(flat_a).reshape(len(heads), d_out)
    t = np.concatenate(
        [t_a[j] + (eb[j] @ (xb @ h.wv)) / s[j] for j, h in enumerate(heads)]
    )
    out = decoder(t)
    messages.append(Message("bob", "answer", 1, (float(out),)))
    return ProtocolTranscript(tuple(messages), out, sat1 or sat2 or sat3, tuple(t.tolist()))


def expected_bits(d: int, p: int, h: int) -> int:
    return (d + 2) * p * h + 1


def all_instances(n_bits: int):
    for a in itertools.product((0, 1), repeat=n_bits):
        for b in itertools.product((0, 1), repeat=n_bits):
            yield DisjointnessInstance(a, b)


def random_instances(n_bits: int, count: int, seed: int) -> list[DisjointnessInstance]:
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(count, 2, n_bits))
    return [DisjointnessInstance(tuple(x[0]), tuple(x[1])) for x in bits]


def agreement_rate(instances: Sequence[DisjointnessInstance], p: int) -> float:
    hits = sum(run_protocol(inst, p=p).output == disjointness_oracle(inst) for inst in instances)
    return hits / len(instances)


def precision_sweep(n_bits: int, p_values: Sequence[int]) -> list[tuple[int, float]]:
    """Agreement with the oracle over every instance, for each bit budget."""
    instances = list(all_instances(n_bits))
    return [(p, agreement_rate(instances, p)) for p in p_values]
