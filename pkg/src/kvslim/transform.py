"""Offline weight transforms that let a K-cache (or V-cache) replace the KV-cache."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import allclose, as_matrix, condition_estimate, invert_square, right_inverse
from .model import LayerWeights, TransformedWeights

RTOL = 1e-5
ATOL = 1e-8
CONDITION_WARN = 1e8


def compute_wkv(w_k: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """``inv(W_K) @ W_V`` so that ``V = K @ W_KV``."""
    w_k = as_matrix(w_k)
    if w_k.shape[0] != w_k.shape[1]:
        raise ValueError(f"compute_wkv needs a square W_K, got {w_k.shape}; use compute_wkv_rect")
    return invert_square(w_k) @ as_matrix(w_v)


def compute_wkv_rect(w_k: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """``right_inverse(W_K) @ W_V`` for a wide ``d x e`` W_K; result is ``e x e``."""
    return right_inverse(w_k) @ as_matrix(w_v)


def compute_wvk(w_v: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    """``inv(W_V) @ W_K`` so that ``K = V @ W_VK``."""
    w_v = as_matrix(w_v)
    if w_v.shape[0] != w_v.shape[1]:
        raise ValueError(f"compute_wvk needs a square W_V, got {w_v.shape}")
    return invert_square(w_v) @ as_matrix(w_k)


def fold_value_bias(b_v, w_o, c_o=None) -> np.ndarray:
    """Merged output bias ``b_v @ W_O + c_o``.

    Valid because attention probabilities sum to one, so a constant value
    bias passes through the weighted sum unchanged.
    """
    b_v = np.asarray(b_v, dtype=np.float64)
    w_o = as_matrix(w_o)
    if b_v.shape != (w_o.shape[0],):
        raise ValueError(f"value bias {b_v.shape} does not match W_O {w_o.shape}")
    out = b_v @ w_o
    if c_o is not None:
        c_o = np.asarray(c_o, dtype=np.float64)
        if c_o.shape != out.shape:
            raise ValueError(f"output bias {c_o.shape} does not match W_O {w_o.shape}")
        out = out + c_o
    return out


def drop_key_bias(weights: LayerWeights, rope=None) -> LayerWeights:
    """Remove the key bias; softmax is invariant to the per-query offset it adds.

    Refuses when a rotary embedding sits between projection and dot product,
    since the rotation makes the offset position dependent.
    """
    if rope is not None:
        raise ValueError("cannot drop the key bias when RoPE is applied to keys")
    return replace(weights, bk=None)


def fold_biases(weights: LayerWeights) -> LayerWeights:
    """Return weights with the value bias merged into the output bias."""
    if weights.bv is None:
        return weights
    return replace(weights, bv=None, bo=fold_value_bias(weights.bv, weights.wo, weights.bo))


def transform_layer(weights: LayerWeights, mode: str = "kv", fold_bias: bool = False) -> TransformedWeights:
    """Build the reduced-cache form of one layer.

    ``mode`` is ``kv`` (square W_K, values from keys), ``rect-kv`` (wide W_K
    through its right inverse) or ``vk`` (square W_V, keys from values).
    """
    bv, bo = weights.bv, weights.bo
    if fold_bias and bv is not None:
        bo = fold_value_bias(bv, weights.wo, bo)
        bv = None
    common = dict(wq=weights.wq, wo=weights.wo, bq=weights.bq, bk=weights.bk, bv=bv, bo=bo,
                  bias_folded=fold_bias)
    d, e = weights.wk.shape
    flags: dict = {}
    if mode == "kv":
        inv = invert_square(weights.wk)
        flags["condition"] = condition_estimate(weights.wk, inv)
        return TransformedWeights(wk=weights.wk, wkv=inv @ weights.wv, flags=flags, **common)
    if mode == "rect-kv":
        gram = weights.wk @ weights.wk.T
        flags["condition"] = condition_estimate(gram)
        flags["aspect_ratio"] = e / d
        return TransformedWeights(wk=weights.wk, wkv=compute_wkv_rect(weights.wk, weights.wv),
                                  flags=flags, **common)
    if mode == "vk":
        inv = invert_square(weights.wv)
        flags["condition"] = condition_estimate(weights.wv, inv)
        return TransformedWeights(wv=weights.wv, wvk=inv @ weights.wk, flags=flags, **common)
    raise ValueError(f"unknown transform mode {mode!r}")


def transform_model(layers: list[LayerWeights], mode: str = "kv", fold_bias: bool = False) -> list[TransformedWeights]:
    return [transform_layer(w, mode, fold_bias) for w in layers]


@dataclass
class ReconstructionReport:
    passed: list[bool] = field(default_factory=list)
    max_error: list[float] = field(default_factory=list)
    ill_conditioned: list[int] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(self.passed)

    def lines(self) -> list[str]:
        return [f"{i} : {ok}" for i, ok in enumerate(self.passed)]


def verify_value_reconstruction(
    weights: list[LayerWeights],
    transformed: list[TransformedWeights],
    rtol: float = RTOL,
    atol: float = ATOL,
) -> ReconstructionReport:
    """Check per layer that the stored product reproduces the dropped matrix.

    kv / rect-kv: ``W_K @ W_KV ~ W_V``; vk: ``W_V @ W_VK ~ W_K``.
    """
    if len(weights) != len(transformed):
        raise ValueError(f"layer count mismatch: {len(weights)} vs {len(transformed)}")
    report = ReconstructionReport()
    for i, (w, t) in enumerate(zip(weights, transformed)):
        if t.wvk is None:
            got, want = w.wk @ t.wkv, w.wv
        else:
            got, want = w.wv @ t.wvk, w.wk
        report.passed.append(allclose(got, want, rtol, atol))
        report.max_error.append(float(np.max(np.abs(got - want))))
        if t.flags.get("condition", 0.0) > CONDITION_WARN:
            report.ill_conditioned.append(i)
    return report


def compression_factor(h_kv: int, d_k: int, d_v: int, d_model: int) -> float:
    """Cache width over model width, ``h_kv * (d_k + d_v) / d_model``."""
    for v in (h_kv, d_k, d_v, d_model):
        if v < 1:
            raise ValueError("compression_factor arguments must be >= 1")
    return h_kv * (d_k + d_v) / d_model
