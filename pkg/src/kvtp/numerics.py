"""Dense float64 kernels shared by the predictor, allocator and pruners.

Matrices and vectors are plain ``numpy`` arrays of dtype float64. Every public
function validates shapes and finiteness up front and raises ``ValueError`` on
bad input rather than returning NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def cosine_similarity(u, v) -> float:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_rows(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``rows`` against ``v``."""
    norms = np.linalg.norm(rows, axis=1)
    nv = np.linalg.norm(v)
    if nv == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return rows @ v / (norms * nv)


def cosine_rows_backward(rows: np.ndarray, v: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``rows`` of ``sum(grad * cosine_rows(rows, v))``."""
    norms = np.linalg.norm(rows, axis=1)
    nv = np.linalg.norm(v)
    cos = rows @ v / (norms * nv)
    # d cos / d x = v / (|x||v|) - cos * x / |x|^2
    return grad[:, None] * (v[None, :] / (norms[:, None] * nv) - cos[:, None] * rows / norms[:, None] ** 2)


def softmax(x, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax ``exp(x / T) / sum(exp(x / T))`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = as_vector(x, "x")
    z = x / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero-norm row")
    return m / norms


def normalize_rows_backward(m: np.ndarray, grad: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    k = m / norms
    return (grad - k * np.sum(k * grad, axis=1, keepdims=True)) / norms


def _check_attention_shapes(queries, keys, values):
    if keys.shape[0] < 1:
        raise ValueError("attention needs at least one key row")
    if keys.shape[0] != values.shape[0]:
        raise ValueError(f"keys have {keys.shape[0]} rows but values have {values.shape[0]}")
    if queries.shape[1] != keys.shape[1] or queries.shape[1] != values.shape[1]:
        raise ValueError(
            f"width mismatch: query {queries.shape[1]}, keys {keys.shape[1]}, values {values.shape[1]}"
        )


@dataclass
class AttentionCache:
    """Intermediates of :func:`attention` kept for the backward pass."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    temperature: float
    scale: float
    logits: np.ndarray  # unmasked q k^T / (T sqrt(d))
    weights: np.ndarray
    mask: np.ndarray | None


def attention(queries, keys, values, temperature: float, dim_scale: float, mask=None):
    """Batched single-head cross-attention.

    Each query row attends over the key rows with logits
    ``q . k / (temperature * sqrt(dim_scale))``. ``mask`` is an optional boolean
    matrix (queries x keys); ``False`` entries are excluded from the softmax.
    Every query row must keep at least one key.

    Returns ``(output, cache)``.
    """
    if not temperature > 0 or not dim_scale > 0:
        raise ValueError("temperature and dim_scale must be positive")
    queries = as_matrix(queries, "queries")
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    _check_attention_shapes(queries, keys, values)
    scale = temperature * np.sqrt(dim_scale)
    logits = queries @ keys.T / scale
    z = logits
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {logits.shape}")
        if not np.all(mask.any(axis=1)):
            raise ValueError("every query must attend to at least one key")
        z = np.where(mask, logits, -np.inf)
    weights = _softmax_rows(z)
    out = weights @ values
    return out, AttentionCache(queries, keys, values, float(temperature), float(scale), logits, weights, mask)


def attention_backward(cache: AttentionCache, grad_out):
    """Gradients of ``sum(grad_out * output)`` w.r.t. queries, keys, values, temperature."""
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != (cache.queries.shape[0], cache.values.shape[1]):
        raise ValueError(f"upstream gradient has shape {grad_out.shape}")
    w = cache.weights
    grad_values = w.T @ grad_out
    grad_w = grad_out @ cache.values.T
    grad_logits = w * (grad_w - np.sum(w * grad_w, axis=1, keepdims=True))
    # masked entries have w == 0, so grad_logits is 0 there as well
    grad_queries = grad_logits @ cache.keys / cache.scale
    grad_keys = grad_logits.T @ cache.queries / cache.scale
    grad_temperature = -float(np.sum(grad_logits * cache.logits)) / cache.temperature
    return grad_queries, grad_keys, grad_values, grad_temperature


def cross_attention(query, keys, values, temperature: float, dim_scale: float) -> np.ndarray:
    """``softmax(query . keys^T / (temperature * sqrt(dim_scale))) @ values`` for one query."""
    q = as_vector(query, "query")
    out, _ = attention(q[None, :], keys, values, temperature, dim_scale)
    return out[0]


@dataclass
class CrossAttentionGrads:
    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    temperature: float


def cross_attention_backward(query, keys, values, temperature: float, dim_scale: float, grad_out) -> CrossAttentionGrads:
    q = as_vector(query, "query")
    g = as_vector(grad_out, "grad_out")
    _, cache = attention(q[None, :], keys, values, temperature, dim_scale)
    gq, gk, gv, gt = attention_backward(cache, g[None, :])
    return CrossAttentionGrads(gq[0], gk, gv, gt)


def log_sigmoid(z) -> np.ndarray:
    # log sigma(z) = -softplus(-z)
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
