"""Single-layer, single-sequence multi-head attention kernels.

Every kernel exists in a prompt (prefill) form that takes all tokens at once
and a generate form that takes one new token and a cache. Outputs carry
instrumented op counts split into projection and attention (MHA) work,
plus the number of weight and cache values read, so the closed-form
per-token costs can be checked against what the kernel actually did.

Token vectors are rows. ``heads`` is passed explicitly because the weight
matrices alone do not determine the head split.

Caches used by the reduced variants store bias-free projections
(``x @ W_K`` or ``x @ W_V``); biases are re-applied where they enter the
computation. Vanilla caches store keys and values exactly as attention
consumes them (bias added, RoPE applied).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import OpCounter, as_matrix, matmul, softmax_row
from .model import LayerWeights, TransformedWeights


class RopeNotSupportedError(ValueError):
    pass


class _Rows:
    """Append-only row store with amortised growth."""

    def __init__(self, width: int, capacity: int = 16):
        self.width = width
        self._buf = np.empty((capacity, width))
        self.n = 0

    def append(self, rows: np.ndarray) -> None:
        rows = as_matrix(rows)
        if rows.shape[1] != self.width:
            raise ValueError(f"cache row width {rows.shape[1]} != {self.width}")
        need = self.n + rows.shape[0]
        if need > self._buf.shape[0]:
            grown = np.empty((max(need, 2 * self._buf.shape[0]), self.width))
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n:need] = rows
        self.n = need

    @property
    def data(self) -> np.ndarray:
        return self._buf[: self.n]


class _Cache:
    _stores: tuple[str, ...] = ()

    def __len__(self) -> int:
        return getattr(self, self._stores[0]).n

    @property
    def activations(self) -> int:
        return sum(getattr(self, s).n * getattr(self, s).width for s in self._stores)

    def nbytes(self, bytes_per_value: int = 8) -> int:
        return self.activations * bytes_per_value


class KVCache(_Cache):
    _stores = ("_k", "_v")

    def __init__(self, width: int):
        self._k = _Rows(width)
        self._v = _Rows(width)

    def append(self, k, v) -> None:
        k, v = as_matrix(k), as_matrix(v)
        if k.shape != v.shape:
            raise ValueError(f"K rows {k.shape} and V rows {v.shape} differ")
        self._k.append(k)
        self._v.append(v)

    @property
    def k(self) -> np.ndarray:
        return self._k.data

    @property
    def v(self) -> np.ndarray:
        return self._v.data


class KCache(_Cache):
    """Keys only. ``mode`` is ``raw`` (bias-free, un-rotated ``x @ W_K``) or
    ``encoded`` (key bias added and RoPE applied at write time)."""

    _stores = ("_k",)

    def __init__(self, width: int, mode: str = "raw"):
        if mode not in ("raw", "encoded"):
            raise ValueError(f"unknown K-cache mode {mode!r}")
        self.mode = mode
        self._k = _Rows(width)

    def append(self, k) -> None:
        self._k.append(k)

    @property
    def k(self) -> np.ndarray:
        return self._k.data


class XCache(_Cache):
    """Pre-projection activations, width d."""

    _stores = ("_x",)

    def __init__(self, width: int):
        self._x = _Rows(width)

    def append(self, x) -> None:
        self._x.append(x)

    @property
    def x(self) -> np.ndarray:
        return self._x.data


class VCache(_Cache):
    """Bias-free values ``x @ W_V`` only."""

    _stores = ("_v",)

    def __init__(self, width: int):
        self._v = _Rows(width)

    def append(self, v) -> None:
        self._v.append(v)

    @property
    def v(self) -> np.ndarray:
        return self._v.data


@dataclass
class AttnOutput:
    y: np.ndarray
    probs: np.ndarray
    proj: OpCounter = field(default_factory=OpCounter)
    mha: OpCounter = field(default_factory=OpCounter)
    weight_reads: int = 0
    cache_reads: int = 0
    key_rotations: int = 0
    decoded: int = 0
    skipped: int = 0
    fused_term: OpCounter | None = None

    @property
    def ops(self) -> int:
        return self.proj.ops + self.mha.ops


def _bias(v: np.ndarray, b) -> np.ndarray:
    return v if b is None else v + b


def _head_slices(e: int, heads: int) -> list[slice]:
    if heads < 1 or e % heads:
        raise ValueError(f"width {e} not divisible into {heads} heads")
    d_k = e // heads
    return [slice(i * d_k, (i + 1) * d_k) for i in range(heads)]


def _check_input(x, d: int) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != d:
        raise ValueError(f"input width {x.shape[1]} != model width {d}")
    if x.shape[0] < 1:
        raise ValueError("need at least one token")
    return x


def _probs(q: np.ndarray, keys: np.ndarray, heads: int, causal: bool, offset: int,
           mha: OpCounter) -> np.ndarray:
    """Softmax probabilities per head, shape ``(heads, n_q, n_k)``.

    Query row ``j`` sits at position ``offset + j``; with ``causal`` it may
    only see keys at positions ``<= offset + j``.
    """
    n_q, e = q.shape
    n_k = keys.shape[0]
    slices = _head_slices(e, heads)
    scale = 1.0 / np.sqrt(e // heads)
    scores = np.empty((heads, n_q, n_k))
    for i, sl in enumerate(slices):
        scores[i] = matmul(q[:, sl], keys[:, sl].T, mha)
    if causal:
        future = np.arange(n_k)[None, :] > (offset + np.arange(n_q))[:, None]
        scores[:, future] = -np.inf
    return softmax_row(scores, scale)


def _weighted_sum(p: np.ndarray, values: np.ndarray, heads: int, mha: OpCounter) -> np.ndarray:
    """Concatenated ``p_i @ V_i`` over heads."""
    out = np.empty((p.shape[1], values.shape[1]))
    for i, sl in enumerate(_head_slices(values.shape[1], heads)):
        out[:, sl] = matmul(p[i], values[:, sl], mha)
    return out


def _merge(out: AttnOutput, counter: OpCounter | None) -> AttnOutput:
    if counter is not None:
        counter.merge(out.proj)
        counter.merge(out.mha)
    return out


def _rotate(rope, rows: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return rows if rope is None else rope.encode(rows, positions)


# vanilla -----------------------------------------------------------------

def vanilla_prompt(x, weights: LayerWeights, heads: int, causal: bool = True, rope=None,
                   counter: OpCounter | None = None) -> tuple[AttnOutput, KVCache]:
    """Standard MHA over all ``n`` tokens; fills a KV-cache with every row."""
    x = _check_input(x, weights.d)
    proj, mha = OpCounter(), OpCounter()
    pos = np.arange(x.shape[0])
    q = _rotate(rope, _bias(matmul(x, weights.wq, proj), weights.bq), pos)
    k = _rotate(rope, _bias(matmul(x, weights.wk, proj), weights.bk), pos)
    v = _bias(matmul(x, weights.wv, proj), weights.bv)
    p = _probs(q, k, heads, causal, 0, mha)
    y = _bias(matmul(_weighted_sum(p, v, heads, mha), weights.wo, proj), weights.bo)
    cache = KVCache(weights.e)
    cache.append(k, v)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha)
    return _merge(out, counter), cache


def vanilla_generate_step(x_n, weights: LayerWeights, heads: int, cache: KVCache, rope=None,
                          counter: OpCounter | None = None) -> AttnOutput:
    """One decode step: append the new K and V rows, attend over all ``n``."""
    x_n = _check_input(x_n, weights.d)
    proj, mha = OpCounter(), OpCounter()
    pos = np.array([len(cache)])
    q = _rotate(rope, _bias(matmul(x_n, weights.wq, proj), weights.bq), pos)
    k = _rotate(rope, _bias(matmul(x_n, weights.wk, proj), weights.bk), pos)
    v = _bias(matmul(x_n, weights.wv, proj), weights.bv)
    cache.append(k, v)
    p = _probs(q, cache.k, heads, False, 0, mha)[:, 0, :]
    heads_out = _weighted_sum(p[:, None, :], cache.v, heads, mha)
    y = _bias(matmul(heads_out, weights.wo, proj), weights.bo)
    out = AttnOutput(
        y=y, probs=p, proj=proj, mha=mha,
        weight_reads=4 * weights.d * weights.e,
        cache_reads=cache.activations,
    )
    return _merge(out, counter)


# K-cache (values from keys) ------------------------------------------------

def _require_kv(t: TransformedWeights) -> None:
    if not isinstance(t, TransformedWeights) or t.wkv is None:
        raise ValueError("this kernel needs transformed weights carrying W_KV")


def _slim_weight_reads(t: TransformedWeights) -> int:
    return t.wq.size + t.wk.size + t.wkv.size + t.wo.size


def slim_prompt(x, t: TransformedWeights, heads: int, causal: bool = True, rope=None,
                cache_mode: str = "raw", counter: OpCounter | None = None) -> tuple[AttnOutput, KCache]:
    """Prefill storing keys only; values are recomputed as ``K @ W_KV``.

    With ``cache_mode='encoded'`` the cache holds keys with bias and RoPE
    already applied, as needed by the sparse RoPE decode path.
    """
    _require_kv(t)
    x = _check_input(x, t.d)
    proj, mha = OpCounter(), OpCounter()
    pos = np.arange(x.shape[0])
    q = _rotate(rope, _bias(matmul(x, t.wq, proj), t.bq), pos)
    k_raw = matmul(x, t.wk, proj)
    k_att = _rotate(rope, _bias(k_raw, t.bk), pos)
    v = _bias(matmul(k_raw, t.wkv, proj), t.bv)
    p = _probs(q, k_att, heads, causal, 0, mha)
    y = _bias(matmul(_weighted_sum(p, v, heads, mha), t.wo, proj), t.bo)
    cache = KCache(t.e, cache_mode)
    cache.append(k_att if cache_mode == "encoded" else k_raw)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha, key_rotations=0 if rope is None else len(pos))
    return _merge(out, counter), cache


def _slim_step_common(x_n, t: TransformedWeights, cache: KCache, proj: OpCounter):
    _require_kv(t)
    if cache.mode != "raw":
        raise ValueError("this kernel reads a raw K-cache; use the RoPE option kernels for encoded caches")
    x_n = _check_input(x_n, t.d)
    q = _bias(matmul(x_n, t.wq, proj), t.bq)
    cache.append(matmul(x_n, t.wk, proj))
    return q, cache.k


def slim_generate_unoptimized(x_n, t: TransformedWeights, heads: int, cache: KCache,
                              counter: OpCounter | None = None) -> AttnOutput:
    """Decode step that first materialises ``V = K @ W_KV`` for all ``n`` rows."""
    proj, mha = OpCounter(), OpCounter()
    q, k = _slim_step_common(x_n, t, cache, proj)
    v = _bias(matmul(k, t.wkv, proj), t.bv)
    p = _probs(q, _bias(k, t.bk), heads, False, 0, mha)[:, 0, :]
    heads_out = _weighted_sum(p[:, None, :], v, heads, mha)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha,
                     weight_reads=_slim_weight_reads(t), cache_reads=cache.activations)
    return _merge(out, counter)


def project_values_from_keys(p: np.ndarray, k_raw: np.ndarray, t: TransformedWeights, heads: int,
                             mha: OpCounter, proj: OpCounter) -> np.ndarray:
    """Per head ``(p_i @ K) @ W_KV,i``: weight the full key rows, then project.

    ``p`` has shape ``(heads, n)``; returns the concatenated heads ``(1, e)``.
    """
    e = t.wkv.shape[1]
    out = np.empty((1, e))
    for i, sl in enumerate(_head_slices(e, heads)):
        mixed = matmul(p[i], k_raw, mha)
        out[:, sl] = matmul(mixed, t.wkv[:, sl], proj)
    return _bias(out, t.bv)


def slim_generate_optimized(x_n, t: TransformedWeights, heads: int, cache: KCache,
                            counter: OpCounter | None = None) -> AttnOutput:
    """Decode step using ``(softmax @ K) @ W_KV,i`` per head."""
    proj, mha = OpCounter(), OpCounter()
    q, k = _slim_step_common(x_n, t, cache, proj)
    p = _probs(q, _bias(k, t.bk), heads, False, 0, mha)[:, 0, :]
    heads_out = project_values_from_keys(p, k, t, heads, mha, proj)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha,
                     weight_reads=_slim_weight_reads(t), cache_reads=cache.activations)
    return _merge(out, counter)


def slim_generate_fused(x_n, t: TransformedWeights, heads: int, cache: KCache) -> AttnOutput:
    """Same result as :func:`slim_generate_optimized`, all heads in one product.

    The per-head probability rows are stacked into an ``(h, n)`` matrix and
    multiplied with the shared K-cache as a single matrix-matrix product.
    """
    proj, mha = OpCounter(), OpCounter()
    q, k = _slim_step_common(x_n, t, cache, proj)
    e = t.e
    d_k = e // heads
    kb = _bias(k, t.bk)
    scores = np.einsum("hk,nhk->hn", q.reshape(heads, d_k), kb.reshape(-1, heads, d_k))
    p = softmax_row(scores, 1.0 / np.sqrt(d_k))
    mixed = matmul(p, k, mha)
    w = t.wkv.reshape(t.wkv.shape[0], heads, d_k)
    heads_out = _bias(np.einsum("he,ehk->hk", mixed, w).reshape(1, e), t.bv)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    return AttnOutput(y=y, probs=p, proj=proj, mha=mha)


# X-cache -------------------------------------------------------------------

def attend_via_inputs(q: np.ndarray, xs: np.ndarray, wk: np.ndarray, wv: np.ndarray, bv,
                      heads: int, causal: bool, offset: int, proj: OpCounter, mha: OpCounter,
                      fused: OpCounter | None = None):
    """Attention over cached inputs ``xs`` without projecting them.

    Scores use ``(q_i @ W_K,i^T) @ xs^T`` and values ``(p_i @ xs) @ W_V,i``.
    A key bias only shifts every score of a query by the same amount, so it
    is omitted. Returns ``(heads_out, probs)``.
    """
    n_q = q.shape[0]
    n_k = xs.shape[0]
    e = wk.shape[1]
    slices = _head_slices(e, heads)
    scale = 1.0 / np.sqrt(e // heads)
    scores = np.empty((heads, n_q, n_k))
    for i, sl in enumerate(slices):
        u = matmul(q[:, sl], wk[:, sl].T, fused if fused is not None else proj)
        scores[i] = matmul(u, xs.T, mha)
    if causal:
        future = np.arange(n_k)[None, :] > (offset + np.arange(n_q))[:, None]
        scores[:, future] = -np.inf
    p = softmax_row(scores, scale)
    out = np.empty((n_q, wv.shape[1]))
    for i, sl in enumerate(slices):
        mixed = matmul(p[i], xs, mha)
        out[:, sl] = matmul(mixed, wv[:, sl], proj)
    return _bias(out, bv), p


def _no_rope(rope, what: str) -> None:
    if rope is not None:
        raise RopeNotSupportedError(
            f"{what} cannot be used with RoPE: the rotation sits between projection and dot product"
        )


def xcache_prompt(x, weights: LayerWeights, heads: int, causal: bool = True, rope=None,
                  counter: OpCounter | None = None) -> tuple[AttnOutput, XCache]:
    _no_rope(rope, "the X-cache")
    x = _check_input(x, weights.d)
    proj, mha, fused = OpCounter(), OpCounter(), OpCounter()
    q = _bias(matmul(x, weights.wq, fused), weights.bq)
    heads_out, p = attend_via_inputs(q, x, weights.wk, weights.wv, weights.bv, heads, causal, 0,
                                     proj, mha, fused)
    y = _bias(matmul(heads_out, weights.wo, proj), weights.bo)
    proj.merge(fused)
    cache = XCache(weights.d)
    cache.append(x)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha, fused_term=fused)
    return _merge(out, counter), cache


def xcache_generate_step(x_n, weights: LayerWeights, heads: int, cache: XCache, rope=None,
                         counter: OpCounter | None = None) -> AttnOutput:
    """Decode step caching ``x`` itself; works for wide (e > d) projections.

    ``fused_term`` counts the per-token ``(x_n W_Q,i + b) W_K,i^T`` work,
    about ``4 d e`` ops summed over heads.
    """
    _no_rope(rope, "the X-cache")
    x_n = _check_input(x_n, weights.d)
    proj, mha, fused = OpCounter(), OpCounter(), OpCounter()
    cache.append(x_n)
    q = _bias(matmul(x_n, weights.wq, fused), weights.bq)
    heads_out, p = attend_via_inputs(q, cache.x, weights.wk, weights.wv, weights.bv, heads,
                                     False, 0, proj, mha, fused)
    y = _bias(matmul(heads_out, weights.wo, proj), weights.bo)
    proj.merge(fused)
    out = AttnOutput(y=y, probs=p[:, 0, :], proj=proj, mha=mha, fused_term=fused,
                     weight_reads=4 * weights.d * weights.e, cache_reads=cache.activations)
    return _merge(out, counter)


# V-cache (keys from values) -------------------------------------------------

def _require_vk(t: TransformedWeights) -> None:
    if not isinstance(t, TransformedWeights) or t.wvk is None:
        raise ValueError("this kernel needs transformed weights carrying W_VK")


def _attend_from_values(q, v_raw, t: TransformedWeights, heads, causal, offset, mha, proj):
    """Scores ``(q_i @ W_VK,i^T) @ V^T`` so keys never get materialised."""
    n_q, n_k = q.shape[0], v_raw.shape[0]
    slices = _head_slices(t.e, heads)
    scale = 1.0 / np.sqrt(t.e // heads)
    scores = np.empty((heads, n_q, n_k))
    for i, sl in enumerate(slices):
        u = matmul(q[:, sl], t.wvk[:, sl].T, proj)
        scores[i] = matmul(u, v_raw.T, mha)
    if causal:
        future = np.arange(n_k)[None, :] > (offset + np.arange(n_q))[:, None]
        scores[:, future] = -np.inf
    p = softmax_row(scores, scale)
    return _bias(_weighted_sum(p, v_raw, heads, mha), t.bv), p


def vcache_prompt(x, t: TransformedWeights, heads: int, causal: bool = True, rope=None,
                  counter: OpCounter | None = None) -> tuple[AttnOutput, VCache]:
    _no_rope(rope, "the V-cache scheme")
    _require_vk(t)
    x = _check_input(x, t.d)
    proj, mha = OpCounter(), OpCounter()
    q = _bias(matmul(x, t.wq, proj), t.bq)
    v_raw = matmul(x, t.wv, proj)
    heads_out, p = _attend_from_values(q, v_raw, t, heads, causal, 0, mha, proj)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    cache = VCache(t.e)
    cache.append(v_raw)
    return _merge(AttnOutput(y=y, probs=p, proj=proj, mha=mha), counter), cache


def vcache_generate_step(x_n, t: TransformedWeights, heads: int, cache: VCache, rope=None,
                         counter: OpCounter | None = None) -> AttnOutput:
    """Decode step storing only values; keys are recovered through ``W_VK``."""
    _no_rope(rope, "the V-cache scheme")
    _require_vk(t)
    x_n = _check_input(x_n, t.d)
    proj, mha = OpCounter(), OpCounter()
    q = _bias(matmul(x_n, t.wq, proj), t.bq)
    cache.append(matmul(x_n, t.wv, proj))
    heads_out, p = _attend_from_values(q, cache.v, t, heads, False, 0, mha, proj)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    out = AttnOutput(y=y, probs=p[:, 0, :], proj=proj, mha=mha,
                     weight_reads=t.wq.size + t.wv.size + t.wvk.size + t.wo.size,
                     cache_reads=cache.activations)
    return _merge(out, counter)


# softmax sparsity -------------------------------------------------------------

def sparse_weighted_sum(probs, rows, threshold: float = 0.0,
                        counter: OpCounter | None = None) -> tuple[np.ndarray, int]:
    """``probs @ rows`` skipping rows whose probability is zero or below ``threshold``.

    Survivors are not renormalised, so a positive threshold biases the
    result toward zero by the skipped probability mass.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    p = np.asarray(probs, dtype=np.float64).ravel()
    rows = as_matrix(rows)
    if rows.shape[0] != p.size:
        raise ValueError(f"{p.size} probabilities for {rows.shape[0]} rows")
    keep = (p > 0.0) & (p >= threshold)
    skipped = int(p.size - keep.sum())
    if not keep.any():
        return np.zeros((1, rows.shape[1])), skipped
    return matmul(p[keep], rows[keep], counter), skipped
