"""Hand-derived reverse-mode gradients for the squared-error readout loss.

Works on the flat parameter dicts of :mod:`countlab.nn` in any float dtype
(training runs in float32, gradient checks in float64). The forward pass
here mirrors :func:`countlab.nn.forward_batch` but keeps every
intermediate the backward pass needs.
"""

from __future__ import annotations

import numpy as np

from countlab.nn import (
    LN_EPS,
    TransformerConfig,
    TransformerModel,
    masked_softmax_,
    merge_heads,
    mlp_depth,
    split_heads,
)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, batch_seed: int | None = None):
        super().__init__(message if batch_seed is None else f"{message} (batch seed {batch_seed})")
        self.batch_seed = batch_seed


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) * inv
    return dx, dg, db


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def forward_with_cache(cfg: TransformerConfig, params: dict, tokens: np.ndarray):
    """Predictions ``(B,)`` plus the cache consumed by :func:`backward`."""
    p = params
    n = tokens.shape[1]
    x = p["tok_emb"][tokens - 1]
    if cfg.use_positional:
        x = x + p["pos_emb"][:n]
    layers = []
    for i in range(cfg.n_layers):
        last = i == cfg.n_layers - 1
        c: dict = {"last": last}
        if cfg.use_layer_norm:
            a, c["ln1"] = _ln_forward(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        else:
            a = x
        aq = a[:, -1:, :] if last else a
        q = aq[:, None] @ p[f"l{i}.wq"][None]
        k = a[:, None] @ p[f"l{i}.wk"][None]
        v = a[:, None] @ p[f"l{i}.wv"][None]
        probs = masked_softmax_(q @ k.transpose(0, 1, 3, 2), cfg.is_causal(i))
        o = probs @ v
        attn = merge_heads(o)
        h = (x[:, -1:, :] if last else x) + attn
        if cfg.use_layer_norm:
            z, c["ln2"] = _ln_forward(h, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        else:
            z = h
        depth = mlp_depth(p, i)
        acts = [z]
        out = np.zeros_like(h)
        for kk in range(depth):
            pre = acts[-1] @ p[f"l{i}.mlp.{kk}.w"] + p[f"l{i}.mlp.{kk}.b"]
            if kk < depth - 1:
                acts.append(np.maximum(pre, 0))
            else:
                out = pre
        x = h + out
        c.update(a=a, aq=aq, q=q, k=k, v=v, o=o, probs=probs, acts=acts)
        layers.append(c)
    xf = x[:, -1, :]
    fcache = None
    if cfg.use_layer_norm:
        xf, fcache = _ln_forward(xf, p["lnf.g"], p["lnf.b"])
    y = xf @ p["readout.w"] + p["readout.b"]
    return y, {"layers": layers, "xf": xf, "lnf": fcache, "n": n, "x_shape": x.shape}


def backward(cfg: TransformerConfig, params: dict, tokens: np.ndarray, cache: dict, dy: np.ndarray) -> dict:
    """Gradients of ``sum(dy * y)`` with respect to every parameter."""
    p = params
    g: dict = {}
    xf = cache["xf"]
    g["readout.w"] = xf.T @ dy
    g["readout.b"] = np.asarray(dy.sum(), dtype=dy.dtype)
    dxf = dy[:, None] * p["readout.w"]
    if cfg.use_layer_norm:
        dxf, g["lnf.g"], g["lnf.b"] = _ln_backward(dxf, p["lnf.g"], cache["lnf"])
    B, n_last, D = cache["x_shape"]
    dx = np.zeros((B, n_last, D), dtype=dy.dtype)
    dx[:, -1, :] = dxf

    for i in reversed(range(cfg.n_layers)):
        c = cache["layers"][i]
        last = c["last"]
        # x = h + mlp(z)
        dh = dx.copy()
        acts = c["acts"]
        depth = len(acts)
        if mlp_depth(p, i):
            dpre = dx
            for kk in reversed(range(depth)):
                w = p[f"l{i}.mlp.{kk}.w"]
                g[f"l{i}.mlp.{kk}.w"] = _flat(acts[kk]).T @ _flat(dpre)
                g[f"l{i}.mlp.{kk}.b"] = _flat(dpre).sum(axis=0)
                dact = dpre @ w.T
                if kk > 0:
                    dpre = dact * (acts[kk] > 0)
            dz = dact
            if cfg.use_layer_norm:
                dz, g[f"l{i}.ln2.g"], g[f"l{i}.ln2.b"] = _ln_backward(dz, p[f"l{i}.ln2.g"], c["ln2"])
            dh = dh + dz
        elif cfg.use_layer_norm:
            g[f"l{i}.ln2.g"] = np.zeros(D, dtype=dy.dtype)
            g[f"l{i}.ln2.b"] = np.zeros(D, dtype=dy.dtype)

        # h = x_q + sum_heads probs @ v
        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        a, aq = c["a"], c["aq"]
        dattn = split_heads(dh, cfg.n_heads)
        dv = probs.transpose(0, 1, 3, 2) @ dattn
        # softmax backward; sum_j dprobs_ij probs_ij equals dattn_i . o_i
        ds = dattn @ v.transpose(0, 1, 3, 2)
        ds -= (dattn * c["o"]).sum(axis=-1, keepdims=True)
        ds *= probs
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        g[f"l{i}.wq"] = np.einsum("bnD,bhnd->hDd", aq, dq, optimize=True)
        g[f"l{i}.wk"] = np.einsum("bnD,bhnd->hDd", a, dk, optimize=True)
        g[f"l{i}.wv"] = np.einsum("bnD,bhnd->hDd", a, dv, optimize=True)
        da = (dk @ p[f"l{i}.wk"].transpose(0, 2, 1)[None]).sum(axis=1)
        da += (dv @ p[f"l{i}.wv"].transpose(0, 2, 1)[None]).sum(axis=1)
        daq = (dq @ p[f"l{i}.wq"].transpose(0, 2, 1)[None]).sum(axis=1)
        if last:
            da[:, -1:, :] += daq
        else:
            da += daq
        if cfg.use_layer_norm:
            dx_prev, g[f"l{i}.ln1.g"], g[f"l{i}.ln1.b"] = _ln_backward(da, p[f"l{i}.ln1.g"], c["ln1"])
        else:
            dx_prev = da
        if last:
            dx_prev[:, -1:, :] += dh
        else:
            dx_prev += dh
        dx = dx_prev

    n = cache["n"]
    dtok = np.zeros_like(p["tok_emb"])
    if dx.shape[1] == n:
        np.add.at(dtok, tokens - 1, dx)
        if cfg.use_positional:
            dpos = np.zeros_like(p["pos_emb"])
            dpos[:n] = dx.sum(axis=0)
            g["pos_emb"] = dpos
    else:  # no layers: only the last position reaches the readout
        np.add.at(dtok, tokens[:, -1] - 1, dx[:, -1, :])
        if cfg.use_positional:
            dpos = np.zeros_like(p["pos_emb"])
            dpos[n - 1] = dx[:, -1, :].sum(axis=0)
            g["pos_emb"] = dpos
    g["tok_emb"] = dtok
    return g


def loss_and_grads_params(cfg: TransformerConfig, params: dict, tokens, labels, batch_seed: int | None = None):
    tokens = np.asarray(tokens)
    labels = np.asarray(labels, dtype=params["readout.w"].dtype)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise ValueError("batch must be a non-empty (B, n) token array")
    y, cache = forward_with_cache(cfg, params, tokens)
    err = y - labels
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NonFiniteLoss("non-finite loss", batch_seed)
    dy = (2.0 / len(labels)) * err
    return loss, backward(cfg, params, tokens, cache, dy.astype(y.dtype))


def loss_and_grads(model: TransformerModel, batch) -> tuple[float, dict]:
    """Mean squared error of the scalar readout and its gradient.

    ``batch`` is ``(tokens, labels)`` with ``tokens`` of shape ``(B, n)``.
    """
    tokens, labels = batch
    return loss_and_grads_params(model.config, model.params, tokens, labels)
