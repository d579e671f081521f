"""Neural-network primitives built on :mod:`hsgt.engine.tensor`."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from hsgt.engine.tensor import Tensor, _result, _wrap
from hsgt.errors import InputError, NumericError

# Upper bound on the number of elements in transient gathered blocks.
_CHUNK_ELEMENTS = 1 << 22
# Pair lists denser than 1/_DENSE_SWITCH of the full grid use blocked matmuls.
_DENSE_SWITCH = 32


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: identity when ``rate == 0`` or outside training."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise InputError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis with ``mask == True`` entries forced to zero.

    Masked positions behave as logits of -inf. Every row needs at least one
    unmasked entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    keep = ~mask
    if not np.all(keep.any(axis=-1)):
        raise NumericError("masked_softmax: a row has every entry masked")
    x = np.where(keep, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x) * keep
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (logits,), backward, "masked_softmax")


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.zeros(logits.shape, dtype=bool))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise InputError("layer_norm: eps must be positive")
    gamma, beta = _wrap(gamma), _wrap(beta)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise InputError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(loss, (logits,), backward, "cross_entropy")


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id; empty segments are an error."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(x.data.dtype)
    if np.any(counts == 0):
        raise InputError("segment_mean: a segment has no rows")
    total = np.zeros((num_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(total, segment_ids, x.data)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = total / counts.reshape(shape)

    def backward(g):
        return ((g / counts.reshape(shape))[segment_ids],)

    return _result(out, (x,), backward, "segment_mean")


def _pair_dot(a: np.ndarray, b: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``sum(a[rows] * b[cols], axis=-1)`` computed in bounded-memory chunks.

    ``rows`` must be sorted. Dense pair lists go through blocked matrix
    products (BLAS) and pick the listed entries; sparse ones gather rows.
    """
    out = np.empty(rows.shape[0], dtype=a.dtype)
    na, nb = a.shape[0], b.shape[0]
    if rows.shape[0] * _DENSE_SWITCH >= na * nb:
        bt = np.ascontiguousarray(b.T)
        step = max(1, _CHUNK_ELEMENTS // max(1, nb))
        bounds = np.searchsorted(rows, np.arange(0, na + step, step))
        flat = rows * nb + cols
        for i, lo in enumerate(range(0, na, step)):
            s, e = bounds[i], bounds[i + 1]
            if s < e:
                block = a[lo:lo + step] @ bt
                np.take(block, flat[s:e] - lo * nb, out=out[s:e])
        return out
    step = max(1, _CHUNK_ELEMENTS // max(1, a.shape[1]))
    for lo in range(0, rows.shape[0], step):
        hi = lo + step
        out[lo:hi] = np.einsum("ij,ij->i", a[rows[lo:hi]], b[cols[lo:hi]])
    return out


def pair_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    rows,
    cols,
    num_heads: int,
    bias: Tensor | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Multi-head scaled dot-product attention restricted to listed (query, key) pairs.

    Equivalent to dense attention whose logits are ``-inf`` outside the pair
    list, but only the listed entries are ever materialized.

    Args:
        q: Queries, shape ``[nq, d]``.
        k, v: Keys and values, shape ``[nk, d]``.
        rows, cols: Pair list sorted by ``rows``; every query needs one pair.
        num_heads: Number of heads; ``d`` must be divisible by it.
        bias: Optional additive logit bias of shape ``[num_heads, len(rows)]``.

    Returns:
        Tensor of shape ``[nq, d]`` with heads concatenated along columns.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape != (nk, d) or v.shape != (nk, d):
        raise InputError(f"pair_attention: shapes q{q.shape} k{k.shape} v{v.shape}")
    if d % num_heads:
        raise InputError(f"pair_attention: width {d} not divisible by {num_heads} heads")
    if rows.shape != cols.shape or rows.ndim != 1:
        raise InputError("pair_attention: rows/cols must be equal-length vectors")
    if rows.size and (np.any(np.diff(rows) < 0) or rows[-1] >= nq or cols.min() < 0 or cols.max() >= nk):
        raise InputError("pair_attention: pair list unsorted or out of range")
    counts = np.bincount(rows, minlength=nq)
    if np.any(counts == 0):
        raise NumericError("pair_attention: a query has no unmasked key")
    nnz = rows.shape[0]
    if bias is not None and bias.shape != (num_heads, nnz):
        raise InputError(f"pair_attention: bias shape {bias.shape}, expected {(num_heads, nnz)}")

    dh = d // num_heads
    factor = 1.0 / np.sqrt(dh)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    starts = indptr[:-1]
    use_dropout = train and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise InputError("pair_attention: dropout in training mode needs an rng")

    heads_q = [q.data[:, h * dh:(h + 1) * dh] for h in range(num_heads)]
    heads_k = [k.data[:, h * dh:(h + 1) * dh] for h in range(num_heads)]
    heads_v = [v.data[:, h * dh:(h + 1) * dh] for h in range(num_heads)]

    weights = np.empty((num_heads, nnz), dtype=q.data.dtype)
    keep = np.empty((num_heads, nnz), dtype=q.data.dtype) if use_dropout else None
    out = np.empty((nq, d), dtype=q.data.dtype)
    for h in range(num_heads):
        logits = _pair_dot(heads_q[h], heads_k[h], rows, cols) * factor
        if bias is not None:
            logits = logits + bias.data[h]
        peak = np.maximum.reduceat(logits, starts)
        e = np.exp(logits - peak[rows])
        w = e / np.add.reduceat(e, starts)[rows]
        weights[h] = w
        if use_dropout:
            keep[h] = (rng.random(nnz) >= dropout_rate) / (1.0 - dropout_rate)
            w = w * keep[h]
        attn = sp.csr_matrix((w, cols, indptr), shape=(nq, nk))
        out[:, h * dh:(h + 1) * dh] = attn @ heads_v[h]

    def backward(g):
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)
        gbias = np.empty((num_heads, nnz), dtype=q.data.dtype) if bias is not None else None
        for h in range(num_heads):
            cols_h = slice(h * dh, (h + 1) * dh)
            g_h = g[:, cols_h]
            w = weights[h]
            w_used = w * keep[h] if use_dropout else w
            attn = sp.csr_matrix((w_used, cols, indptr), shape=(nq, nk))
            gv[:, cols_h] = attn.T @ g_h
            dw = _pair_dot(g_h, heads_v[h], rows, cols)
            if use_dropout:
                dw = dw * keep[h]
            dlogit = w * (dw - np.add.reduceat(w * dw, starts)[rows])
            if gbias is not None:
                gbias[h] = dlogit
            score = sp.csr_matrix((dlogit * factor, cols, indptr), shape=(nq, nk))
            gq[:, cols_h] = score @ heads_k[h]
            gk[:, cols_h] = score.T @ heads_q[h]
        grads = (gq, gk, gv)
        return grads + ((gbias,) if bias is not None else ())

    parents = (q, k, v) + ((bias,) if bias is not None else ())
    return _result(out, parents, backward, "pair_attention")
