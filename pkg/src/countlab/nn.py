"""Dense transformer kernel with explicit weights.

Vectors are rows. A weight matrix of shape ``(in, out)`` maps ``x`` to
``x @ W``. Every attention head owns query, key and value maps of shape
``(D, d)``; head ``j`` writes coordinates ``[j*d, (j+1)*d)`` of the
attention output (plain concatenation). With a single head ``d == D`` and
the value map is a full ``D x D`` block.

Parameters live in a flat ``dict[str, ndarray]`` keyed by name:

``tok_emb``            (m, D)
``pos_emb``            (n, D)      only when ``use_positional``
``l{i}.wq``/``l{i}.wk``/``l{i}.wv`` (h, D, d)
``l{i}.ln1.g`` ...     (D,)        only when ``use_layer_norm``
``l{i}.mlp.{k}.w``     (in, out)   any number of linear maps, ReLU between
``l{i}.mlp.{k}.b``     (out,)
``lnf.g``/``lnf.b``    (D,)        only when ``use_layer_norm``
``readout.w``          (D,)
``readout.b``          ()
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    model_dim: int
    vocab_size: int
    context_len: int
    use_layer_norm: bool = False
    use_positional: bool = False
    # layers listed here attend in both directions
    bidirectional_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        for name in ("n_heads", "head_dim", "model_dim", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim != self.head_dim * self.n_heads:
            raise ValueError(
                f"model_dim {self.model_dim} != head_dim {self.head_dim} x n_heads {self.n_heads}"
            )
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        object.__setattr__(self, "bidirectional_layers", tuple(sorted(set(self.bidirectional_layers))))
        for i in self.bidirectional_layers:
            if not 0 <= i < self.n_layers:
                raise ValueError(f"bidirectional layer {i} out of range")

    def is_causal(self, layer: int) -> bool:
        return layer not in self.bidirectional_layers

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "model_dim": self.model_dim,
            "vocab_size": self.vocab_size,
            "context_len": self.context_len,
            "use_layer_norm": self.use_layer_norm,
            "use_positional": self.use_positional,
            "bidirectional_layers": list(self.bidirectional_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        d = dict(d)
        d["bidirectional_layers"] = tuple(d.get("bidirectional_layers", ()))
        return cls(**d)


def mlp_depth(params: dict, layer: int) -> int:
    k = 0
    while f"l{layer}.mlp.{k}.w" in params:
        k += 1
    return k


@dataclass(frozen=True)
class TransformerModel:
    """A config plus a flat parameter dict. Arrays are made read-only."""

    config: TransformerConfig
    params: dict = field(repr=False)

    def __post_init__(self):
        params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        for v in params.values():
            v.setflags(write=False)
        object.__setattr__(self, "params", params)
        _check_params(self.config, params)

    @property
    def token_embeddings(self) -> np.ndarray:
        return self.params["tok_emb"]

    @property
    def positional_embeddings(self) -> np.ndarray:
        cfg = self.config
        if cfg.use_positional:
            return self.params["pos_emb"]
        return np.zeros((cfg.context_len, cfg.model_dim))

    def mlp(self, layer: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.params[f"l{layer}.mlp.{k}.w"], self.params[f"l{layer}.mlp.{k}.b"])
            for k in range(mlp_depth(self.params, layer))
        ]

    def mlp_width(self, layer: int) -> int:
        """Total number of hidden ReLU units in one layer's MLP."""
        return sum(w.shape[1] for w, _ in self.mlp(layer)[:-1])

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def replace(self, **updates: np.ndarray) -> "TransformerModel":
        params = dict(self.params)
        params.update(updates)
        return TransformerModel(self.config, params)


def expected_shapes(cfg: TransformerConfig) -> dict[str, tuple]:
    D, h, d = cfg.model_dim, cfg.n_heads, cfg.head_dim
    shapes: dict[str, tuple] = {"tok_emb": (cfg.vocab_size, D)}
    if cfg.use_positional:
        shapes["pos_emb"] = (cfg.context_len, D)
    for i in range(cfg.n_layers):
        shapes[f"l{i}.wq"] = (h, D, d)
        shapes[f"l{i}.wk"] = (h, D, d)
        shapes[f"l{i}.wv"] = (h, D, d)
        if cfg.use_layer_norm:
            for ln in ("ln1", "ln2"):
                shapes[f"l{i}.{ln}.g"] = (D,)
                shapes[f"l{i}.{ln}.b"] = (D,)
    if cfg.use_layer_norm:
        shapes["lnf.g"] = (D,)
        shapes["lnf.b"] = (D,)
    shapes["readout.w"] = (D,)
    shapes["readout.b"] = ()
    return shapes


def _check_params(cfg: TransformerConfig, params: dict) -> None:
    shapes = expected_shapes(cfg)
    for name, shape in shapes.items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
    mlp_names = set()
    for i in range(cfg.n_layers):
        width = cfg.model_dim
        depth = mlp_depth(params, i)
        for k in range(depth):
            w, b = params[f"l{i}.mlp.{k}.w"], params[f"l{i}.mlp.{k}.b"]
            if w.ndim != 2 or w.shape[0] != width or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} MLP map {k} has inconsistent shape {w.shape}/{b.shape}")
            width = w.shape[1]
            mlp_names.update({f"l{i}.mlp.{k}.w", f"l{i}.mlp.{k}.b"})
        if depth and width != cfg.model_dim:
            raise ValueError(f"layer {i} MLP must end in model_dim, got {width}")
    extra = set(params) - set(shapes) - mlp_names
    if extra:
        raise ValueError(f"unexpected parameters: {sorted(extra)}")
    for name, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter {name} has non-finite entries")


# --------------------------------------------------------------------------
# primitives


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax. Rejects non-finite logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@lru_cache(maxsize=32)
def _causal_bias(nq: int, nk: int, dtype: str) -> np.ndarray:
    bias = np.zeros((nq, nk), dtype=dtype)
    bias[np.triu(np.ones((nq, nk), dtype=bool), k=nk - nq + 1)] = -np.inf
    bias.setflags(write=False)
    return bias


def masked_softmax_(scores: np.ndarray, causal: bool) -> np.ndarray:
    """In-place softmax over the last axis, with an optional causal mask.

    ``scores`` has shape ``(..., nq, nk)``; query row ``r`` sits at absolute
    position ``nk - nq + r``.
    """
    nq, nk = scores.shape[-2:]
    if causal and nq > 1:
        scores += _causal_bias(nq, nk, scores.dtype.str)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def merge_heads(o: np.ndarray) -> np.ndarray:
    """``(B, h, n, d)`` head outputs to ``(B, n, h*d)``."""
    B, h, n, d = o.shape
    return o.transpose(0, 2, 1, 3).reshape(B, n, h * d)


def split_heads(x: np.ndarray, h: int) -> np.ndarray:
    B, n, D = x.shape
    return x.reshape(B, n, h, D // h).transpose(0, 2, 1, 3)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def relu(x):
    return np.maximum(x, 0.0)


def mlp_forward(weights: Sequence[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Apply linear maps with ReLU between them (none after the last).

    With two maps this is ``relu(x @ W1 + b1) @ W2 + b2``. An empty stack
    maps everything to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if not weights:
        return np.zeros_like(x)
    for k, (w, b) in enumerate(weights):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"MLP map {k} expects width {w.shape[0]}, got {x.shape[-1]}")
        x = x @ w + b
        if k < len(weights) - 1:
            x = relu(x)
    return x


def attention_head_forward(wq, wk, wv, embedded, position: int, causal: bool = True) -> np.ndarray:
    """Output of a single head at one position (0-based).

    Returns ``sum_i softmax_i((x_i wk) . (x_pos wq)) * (x_i wv)`` over
    ``i <= position`` (or over every position when ``causal`` is false).
    """
    x = np.asarray(embedded, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != wq.shape[0] or wk.shape != wq.shape or wv.shape[0] != x.shape[1]:
        raise ValueError("attention weight and input dimensions do not match")
    if not 0 <= position < len(x):
        raise ValueError(f"position {position} outside sequence of length {len(x)}")
    keys = x[: position + 1] if causal else x
    q = x[position] @ wq
    w = softmax((keys @ wk) @ q)
    return w @ (keys @ wv)


# --------------------------------------------------------------------------
# model


def _tokens_array(model: TransformerModel, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] == 0:
        raise ValueError("token sequences must be non-empty")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise ValueError("tokens must be integers")
        t = t.astype(np.int64)
    m = model.config.vocab_size
    if t.min() < 1 or t.max() > m:
        raise ValueError(f"token outside vocabulary 1..{m}")
    cfg = model.config
    if cfg.use_positional and t.shape[1] > cfg.context_len:
        raise ValueError(f"sequence length {t.shape[1]} exceeds context_len {cfg.context_len}")
    return t


def embed(model: TransformerModel, tokens: np.ndarray) -> np.ndarray:
    x = model.params["tok_emb"][tokens - 1]
    if model.config.use_positional:
        x = x + model.params["pos_emb"][: tokens.shape[1]]
    return x


def run_layers(model: TransformerModel, tokens, trace: dict | None = None) -> np.ndarray:
    """Residual stream after every layer, shape ``(B, n, D)``.

    The last layer is evaluated only at the final position (nothing else
    reaches the readout), so the returned array has ``n == 1`` whenever
    ``n_layers > 0``. ``trace`` collects per-layer attention probabilities
    and residual streams when given.
    """
    cfg = model.config
    p = model.params
    t = _tokens_array(model, tokens)
    x = embed(model, t)
    for i in range(cfg.n_layers):
        last = i == cfg.n_layers - 1
        a = layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"]) if cfg.use_layer_norm else x
        aq = a[:, -1:, :] if last else a
        q = np.einsum("bnD,hDd->bhnd", aq, p[f"l{i}.wq"])
        k = np.einsum("bnD,hDd->bhnd", a, p[f"l{i}.wk"])
        v = np.einsum("bnD,hDd->bhnd", a, p[f"l{i}.wv"])
        probs = masked_softmax_(q @ k.transpose(0, 1, 3, 2), cfg.is_causal(i))
        attn = merge_heads(probs @ v)
        h = (x[:, -1:, :] if last else x) + attn
        z = layer_norm(h, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"]) if cfg.use_layer_norm else h
        x = h + mlp_forward(model.mlp(i), z)
        if trace is not None:
            trace.setdefault("attention", []).append(probs)
            trace.setdefault("after_attention", []).append(h)
            trace.setdefault("residual", []).append(x)
    return x


def forward_batch(model: TransformerModel, tokens, trace: dict | None = None) -> np.ndarray:
    """Scalar readout at the last position for a batch ``(B, n)`` of 1-based tokens."""
    x = run_layers(model, tokens, trace)[:, -1, :]
    p = model.params
    if model.config.use_layer_norm:
        x = layer_norm(x, p["lnf.g"], p["lnf.b"])
    return x @ p["readout.w"] + p["readout.b"]


def model_forward(model: TransformerModel, seq) -> float:
    return float(forward_batch(model, np.asarray(seq)[None, :])[0])


def forward_many(model: TransformerModel, seqs: np.ndarray, chunk: int = 512) -> np.ndarray:
    seqs = np.asarray(seqs)
    out = [forward_batch(model, seqs[i : i + chunk]) for i in range(0, len(seqs), chunk)]
    return np.concatenate(out) if out else np.zeros(0)
