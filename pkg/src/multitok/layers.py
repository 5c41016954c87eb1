"""Numpy forward/backward primitives for the desk-scale transformer.

Everything runs in float64. Each forward returns (output, cache); the
matching backward consumes the cache and returns input gradients plus a
dict of parameter gradients keyed by local names.
"""

from __future__ import annotations

import numpy as np
from scipy import special

LN_EPS = 1e-5


def layer_norm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = gain * xhat + bias
    return out, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    dgain = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gain
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, {"g": dgain, "b": dbias}


def gelu_forward(x):
    out = 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))
    return out, x


def gelu_backward(dout, x):
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return dout * (cdf + x * pdf)


def _split_heads(x, n_head):
    B, L, D = x.shape
    return x.reshape(B, L, n_head, D // n_head).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def attention_forward(x, p, n_head):
    """Causal multi-head self-attention. p needs wqkv, bqkv, wo, bo."""
    B, L, D = x.shape
    dh = D // n_head
    qkv = x @ p["wqkv"] + p["bqkv"]
    q = _split_heads(qkv[..., :D], n_head)
    k = _split_heads(qkv[..., D : 2 * D], n_head)
    v = _split_heads(qkv[..., 2 * D :], n_head)
    att = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    causal = np.tril(np.ones((L, L), dtype=bool))
    att = np.where(causal, att, -np.inf)
    att -= att.max(axis=-1, keepdims=True)
    probs = np.exp(att)
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    merged = _merge_heads(ctx)
    out = merged @ p["wo"] + p["bo"]
    cache = (x, q, k, v, probs, merged, p, n_head)
    return out, cache


def attention_backward(dout, cache):
    x, q, k, v, probs, merged, p, n_head = cache
    B, L, D = x.shape
    dh = D // n_head

    dwo = merged.reshape(-1, D).T @ dout.reshape(-1, D)
    dbo = dout.sum(axis=(0, 1))
    dmerged = dout @ p["wo"].T
    dctx = _split_heads(dmerged, n_head)

    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    # softmax backward; masked cells have probs == 0 so they stay silent
    datt = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    datt /= np.sqrt(dh)
    dq = datt @ k
    dk = datt.transpose(0, 1, 3, 2) @ q

    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    dwqkv = x.reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
    dbqkv = dqkv.sum(axis=(0, 1))
    dx = dqkv @ p["wqkv"].T
    grads = {"wqkv": dwqkv, "bqkv": dbqkv, "wo": dwo, "bo": dbo}
    return dx, grads


def mlp_forward(x, p):
    h = x @ p["w1"] + p["b1"]
    a, gelu_cache = gelu_forward(h)
    out = a @ p["w2"] + p["b2"]
    return out, (x, a, gelu_cache, p)


def mlp_backward(dout, cache):
    x, a, gelu_cache, p = cache
    D = x.shape[-1]
    Dh = a.shape[-1]
    dw2 = a.reshape(-1, Dh).T @ dout.reshape(-1, D)
    db2 = dout.sum(axis=(0, 1))
    da = dout @ p["w2"].T
    dh = gelu_backward(da, gelu_cache)
    dw1 = x.reshape(-1, D).T @ dh.reshape(-1, Dh)
    db1 = dh.sum(axis=(0, 1))
    dx = dh @ p["w1"].T
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def block_forward(x, params, prefix, n_head):
    """Pre-norm decoder block: x + attn(ln1(x)), then x + mlp(ln2(x))."""
    ln1, c_ln1 = layer_norm_forward(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    attn_p = {k: params[f"{prefix}.attn.{k}"] for k in ("wqkv", "bqkv", "wo", "bo")}
    a, c_attn = attention_forward(ln1, attn_p, n_head)
    x1 = x + a
    ln2, c_ln2 = layer_norm_forward(x1, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    mlp_p = {k: params[f"{prefix}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")}
    m, c_mlp = mlp_forward(ln2, mlp_p)
    out = x1 + m
    return out, (c_ln1, c_attn, c_ln2, c_mlp, prefix)


def block_backward(dout, cache):
    c_ln1, c_attn, c_ln2, c_mlp, prefix = cache
    grads = {}
    dmlp_in, g_mlp = mlp_backward(dout, c_mlp)
    dx1_ln2, g_ln2 = layer_norm_backward(dmlp_in, c_ln2)
    dx1 = dout + dx1_ln2
    dattn_in, g_attn = attention_backward(dx1, c_attn)
    dx_ln1, g_ln1 = layer_norm_backward(dattn_in, c_ln1)
    dx = dx1 + dx_ln1
    for k, v in g_ln1.items():
        grads[f"{prefix}.ln1.{k}"] = v
    for k, v in g_attn.items():
        grads[f"{prefix}.attn.{k}"] = v
    for k, v in g_ln2.items():
        grads[f"{prefix}.ln2.{k}"] = v
    for k, v in g_mlp.items():
        grads[f"{prefix}.mlp.{k}"] = v
    return dx, grads


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
