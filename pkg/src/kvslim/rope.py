"""Rotary positional embedding and its use with a keys-only cache.

Adjacent pairs ``(x[2j], x[2j+1])`` inside each head are rotated by
``m * theta_j`` with ``theta_j = base ** (-2j / d_k)``::

    y1 =  x1 cos + x2 sin
    y2 = -x1 sin + x2 cos

Decoding rotates back by the same angle and reuses the same cos/sin table.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    AttnOutput,
    KCache,
    _bias,
    _check_input,
    _head_slices,
    _merge,
    _probs,
    _require_kv,
    _slim_weight_reads,
    project_values_from_keys,
)
from .linalg import OpCounter, matmul
from .model import TransformedWeights


def rope_thetas(d_k: int, base: float = 10000.0) -> np.ndarray:
    if d_k < 2 or d_k % 2:
        raise ValueError(f"RoPE needs an even head dimension, got d_k={d_k}")
    return base ** (-2.0 * np.arange(d_k // 2) / d_k)


def _apply(v: np.ndarray, cos: np.ndarray, sin: np.ndarray, sign: float) -> np.ndarray:
    # v: (..., e), cos/sin broadcast against (..., heads, d_k/2)
    half = cos.shape[-1]
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] % (2 * half):
        raise ValueError(f"vector width {v.shape[-1]} is not a multiple of d_k={2 * half}")
    pairs = v.reshape(*v.shape[:-1], -1, half, 2)
    x1, x2 = pairs[..., 0], pairs[..., 1]
    c = cos[..., None, :]
    s = sign * sin[..., None, :]
    out = np.empty_like(pairs)
    out[..., 0] = x1 * c + x2 * s
    out[..., 1] = -x1 * s + x2 * c
    return out.reshape(v.shape)


def rope_encode(v, position: int, thetas: np.ndarray) -> np.ndarray:
    """Rotate every head of the ``e``-vector ``v`` to ``position``."""
    angle = position * np.asarray(thetas)
    return _apply(v, np.cos(angle), np.sin(angle), 1.0)


def rope_decode(y, position: int, thetas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rope_encode` at the same position."""
    angle = position * np.asarray(thetas)
    return _apply(y, np.cos(angle), np.sin(angle), -1.0)


class RopeTable:
    """Precomputed cos/sin for positions ``0 .. max_positions-1``.

    ``encode``/``decode`` take rows of shape ``(n, e)`` and one position per
    row. The table is read-only once built.
    """

    def __init__(self, d_k: int, max_positions: int = 4096, base: float = 10000.0):
        self.d_k = d_k
        self.thetas = rope_thetas(d_k, base)
        angles = np.arange(max_positions)[:, None] * self.thetas[None, :]
        self.cos = np.cos(angles)
        self.sin = np.sin(angles)
        self.cos.flags.writeable = False
        self.sin.flags.writeable = False

    @property
    def max_positions(self) -> int:
        return self.cos.shape[0]

    def _lookup(self, positions) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size and (pos.min() < 0 or pos.max() >= self.max_positions):
            raise IndexError(f"position outside RoPE table of {self.max_positions}")
        return self.cos[pos], self.sin[pos]

    def encode(self, rows, positions) -> np.ndarray:
        c, s = self._lookup(positions)
        return _apply(rows, c, s, 1.0)

    def decode(self, rows, positions) -> np.ndarray:
        c, s = self._lookup(positions)
        return _apply(rows, c, s, -1.0)


def _cache_check(t: TransformedWeights, cache: KCache, mode: str, rope: RopeTable, heads: int) -> None:
    _require_kv(t)
    if cache.mode != mode:
        raise ValueError(f"this kernel needs a {mode} K-cache, got {cache.mode}")
    if rope.d_k != t.e // heads:
        raise ValueError(f"RoPE table built for d_k={rope.d_k}, layer has d_k={t.e // heads}")


def slim_generate_rope_option1(x_n, t: TransformedWeights, heads: int, cache: KCache, rope: RopeTable,
                               counter: OpCounter | None = None) -> AttnOutput:
    """Decode step with raw keys in cache; RoPE is applied after reading.

    Every cached key is rotated again on each step (``key_rotations == n``);
    the raw rows feed the value reconstruction directly.
    """
    _cache_check(t, cache, "raw", rope, heads)
    x_n = _check_input(x_n, t.d)
    proj, mha = OpCounter(), OpCounter()
    pos = len(cache)
    q = rope.encode(_bias(matmul(x_n, t.wq, proj), t.bq), [pos])
    cache.append(matmul(x_n, t.wk, proj))
    k = cache.k
    n = k.shape[0]
    k_rot = rope.encode(_bias(k, t.bk), np.arange(n))
    p = _probs(q, k_rot, heads, False, 0, mha)[:, 0, :]
    heads_out = project_values_from_keys(p, k, t, heads, mha, proj)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha, key_rotations=n,
                     weight_reads=_slim_weight_reads(t), cache_reads=cache.activations)
    return _merge(out, counter)


def slim_generate_rope_option2(x_n, t: TransformedWeights, heads: int, cache: KCache, rope: RopeTable,
                               threshold: float = 0.0, counter: OpCounter | None = None) -> AttnOutput:
    """Decode step with RoPE'd keys in cache; only needed rows are un-rotated.

    Scores use the stored keys as they are. A row is decoded when at least
    one head gives it probability ``>= threshold`` (and above zero); rows
    below the threshold in a head are skipped in that head's weighted sum.
    """
    _cache_check(t, cache, "encoded", rope, heads)
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    x_n = _check_input(x_n, t.d)
    proj, mha = OpCounter(), OpCounter()
    pos = len(cache)
    q = rope.encode(_bias(matmul(x_n, t.wq, proj), t.bq), [pos])
    cache.append(rope.encode(_bias(matmul(x_n, t.wk, proj), t.bk), [pos]))
    k_enc = cache.k
    n = k_enc.shape[0]
    p = _probs(q, k_enc, heads, False, 0, mha)[:, 0, :]

    keep = (p > 0.0) & (p >= threshold)           # (heads, n)
    rows = np.flatnonzero(keep.any(axis=0))
    k_raw = rope.decode(k_enc[rows], rows)
    if t.bk is not None:
        k_raw = k_raw - t.bk

    e = t.wkv.shape[1]
    heads_out = np.zeros((1, e))
    for i, sl in enumerate(_head_slices(e, heads)):
        sel = keep[i, rows]
        if sel.any():
            mixed = matmul(p[i, rows[sel]], k_raw[sel], mha)
            heads_out[:, sl] = matmul(mixed, t.wkv[:, sl], proj)
    heads_out = _bias(heads_out, t.bv)
    y = _bias(matmul(heads_out, t.wo, proj), t.bo)
    out = AttnOutput(y=y, probs=p, proj=proj, mha=mha, decoded=len(rows),
                     skipped=int(n - len(rows)), key_rotations=1,
                     weight_reads=_slim_weight_reads(t), cache_reads=cache.activations)
    return _merge(out, counter)
