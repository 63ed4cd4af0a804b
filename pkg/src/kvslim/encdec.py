"""Toy encoder-decoder stack with interchangeable cross-attention cache policies.

Each layer is ``x + attention(x)`` followed by ``x + relu(x W1 + b1) W2 + b2``
with no normalisation. Decoder layers add a cross-attention block over the
encoder output ``E`` between self-attention and the FFN.

Policies (all produce the same decoder outputs):

* ``BASELINE``: self KV-cache, cross KV-cache precomputed from ``E``.
* ``OPTION1``: self K-cache, cross K-cache; values via ``W_KV``.
* ``OPTION2``: self K-cache; cross attention recomputed from the shared ``E``.
* ``HYBRID``: layer 0 keeps a cross K-cache ``K1 = E W_K1``; every other
  layer attends over ``K1`` with ``W_K1^-1`` folded into its W_K and W_V.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    KCache,
    KVCache,
    RopeNotSupportedError,
    _bias,
    _probs,
    _weighted_sum,
    attend_via_inputs,
    project_values_from_keys,
    slim_generate_optimized,
    vanilla_generate_step,
    vanilla_prompt,
)
from .linalg import OpCounter, as_matrix, invert_square, make_rng, matmul
from .model import LayerWeights
from .rope import slim_generate_rope_option1
from .transform import transform_layer


class CachePolicy(enum.Enum):
    BASELINE = "baseline"
    OPTION1 = "option1"
    OPTION2 = "option2"
    HYBRID = "hybrid"


@dataclass(frozen=True, eq=False)
class FFNWeights:
    w1: np.ndarray
    w2: np.ndarray
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(_bias(x @ self.w1, self.b1), 0.0)
        return _bias(hidden @ self.w2, self.b2)

    @property
    def size(self) -> int:
        return self.w1.size + self.w2.size


@dataclass(frozen=True, eq=False)
class EncoderLayer:
    attn: LayerWeights
    ffn: FFNWeights


@dataclass(frozen=True, eq=False)
class DecoderLayer:
    self_attn: LayerWeights
    cross_attn: LayerWeights
    ffn: FFNWeights


@dataclass(frozen=True, eq=False)
class EncDecModel:
    d: int
    h: int
    d_ffn: int
    encoder: list[EncoderLayer]
    decoder: list[DecoderLayer]

    @property
    def layers(self) -> int:
        return len(self.decoder)


def _attn_weights(rng, d: int, bias: bool) -> LayerWeights:
    std = 1.0 / np.sqrt(d)
    mats = [rng.standard_normal((d, d)) * std for _ in range(4)]
    biases = {}
    if bias:
        biases = {name: rng.standard_normal(d) * std for name in ("bq", "bk", "bv", "bo")}
    return LayerWeights(*mats, **biases)


def _ffn_weights(rng, d: int, d_ffn: int, bias: bool) -> FFNWeights:
    w1 = rng.standard_normal((d, d_ffn)) / np.sqrt(d)
    w2 = rng.standard_normal((d_ffn, d)) / np.sqrt(d_ffn)
    if not bias:
        return FFNWeights(w1, w2)
    return FFNWeights(w1, w2, rng.standard_normal(d_ffn) / np.sqrt(d), rng.standard_normal(d) / np.sqrt(d_ffn))


def generate_encdec_model(d: int, h: int, layers: int, d_ffn: int, seed: int,
                          bias: bool = False, encoder_layers: int | None = None) -> EncDecModel:
    """Random square-projection encoder-decoder; deterministic per seed."""
    if d % h:
        raise ValueError(f"d={d} not divisible by h={h}")
    enc = []
    for i in range(layers if encoder_layers is None else encoder_layers):
        rng = make_rng(seed, 0, i)
        enc.append(EncoderLayer(_attn_weights(rng, d, bias), _ffn_weights(rng, d, d_ffn, bias)))
    dec = []
    for i in range(layers):
        rng = make_rng(seed, 1, i)
        dec.append(DecoderLayer(_attn_weights(rng, d, bias), _attn_weights(rng, d, bias),
                                _ffn_weights(rng, d, d_ffn, bias)))
    return EncDecModel(d=d, h=h, d_ffn=d_ffn, encoder=enc, decoder=dec)


@dataclass(frozen=True, eq=False)
class ECache:
    """Encoder output ``E`` (p x d), shared read-only by every decoder layer."""

    e: np.ndarray

    def __post_init__(self):
        self.e.flags.writeable = False

    @property
    def p(self) -> int:
        return self.e.shape[0]


def run_encoder(tokens, model: EncDecModel) -> ECache:
    """Prompt phase: non-causal encoder over all ``p`` input rows."""
    x = as_matrix(tokens).copy()
    if x.shape[0] < 1 or x.shape[1] != model.d:
        raise ValueError(f"encoder input must be p x {model.d}, got {x.shape}")
    for layer in model.encoder:
        out, _ = vanilla_prompt(x, layer.attn, model.h, causal=False)
        x = x + out.y
        x = x + layer.ffn(x)
    return ECache(x)


def cross_cache_activations(p: int, d: int, layers: int) -> int:
    return 2 * p * d * layers


def cross_phase_baseline(ecache: ECache, model: EncDecModel) -> list[KVCache]:
    """Precompute cross-attention K and V for every decoder layer."""
    caches = []
    for layer in model.decoder:
        w = layer.cross_attn
        cache = KVCache(w.e)
        cache.append(_bias(ecache.e @ w.wk, w.bk), _bias(ecache.e @ w.wv, w.bv))
        caches.append(cache)
    return caches


@dataclass
class LayerTraffic:
    self_cache: int = 0
    cross_cache: int = 0
    self_params: int = 0
    cross_params: int = 0
    ffn_params: int = 0
    cross_matrices: list[str] = field(default_factory=list)

    @property
    def params(self) -> int:
        return self.self_params + self.cross_params + self.ffn_params


@dataclass
class DecodeState:
    policy: CachePolicy
    model: EncDecModel
    ecache: ECache
    rope: object = None
    self_caches: list = field(default_factory=list)
    self_weights: list = field(default_factory=list)
    cross_caches: list = field(default_factory=list)
    cross_weights: list = field(default_factory=list)
    shared_keys: np.ndarray | None = None
    steps: int = 0
    last_traffic: list[LayerTraffic] = field(default_factory=list)

    def cache_activations(self) -> dict[str, int]:
        """Stored activations: per-layer self and cross caches, and the shared
        on-chip matrix (E, or K1 for the hybrid) listed separately."""
        self_act = sum(c.activations for c in self.self_caches)
        cross_act = sum(c.activations for c in self.cross_caches)
        shared = 0
        if self.policy is CachePolicy.OPTION2:
            shared = self.ecache.e.size
        elif self.policy is CachePolicy.HYBRID:
            shared = self.shared_keys.size
        return {"self": self_act, "cross": cross_act, "shared": shared}

    def cache_bytes(self, bytes_per_value: int = 1) -> dict[str, int]:
        return {k: v * bytes_per_value for k, v in self.cache_activations().items()}


def init_state(policy: CachePolicy, model: EncDecModel, ecache: ECache, rope=None) -> DecodeState:
    """Set up caches and derived weights for a decode session (the cross phase)."""
    policy = CachePolicy(policy)
    if rope is not None and policy in (CachePolicy.OPTION2, CachePolicy.HYBRID):
        raise RopeNotSupportedError(f"{policy.value} recomputes cross projections and cannot use RoPE")
    state = DecodeState(policy=policy, model=model, ecache=ecache, rope=rope)
    for layer in model.decoder:
        if policy is CachePolicy.BASELINE:
            state.self_caches.append(KVCache(model.d))
            state.self_weights.append(layer.self_attn)
        else:
            state.self_caches.append(KCache(model.d))
            state.self_weights.append(transform_layer(layer.self_attn, "kv"))

    E = ecache.e
    if policy is CachePolicy.BASELINE:
        state.cross_caches = cross_phase_baseline(ecache, model)
        state.cross_weights = [layer.cross_attn for layer in model.decoder]
    elif policy is CachePolicy.OPTION1:
        for layer in model.decoder:
            cache = KCache(model.d)
            cache.append(E @ layer.cross_attn.wk)
            state.cross_caches.append(cache)
            state.cross_weights.append(transform_layer(layer.cross_attn, "kv"))
    elif policy is CachePolicy.OPTION2:
        state.cross_weights = [layer.cross_attn for layer in model.decoder]
    else:
        first = model.decoder[0].cross_attn
        state.shared_keys = E @ first.wk
        state.shared_keys.flags.writeable = False
        inv = invert_square(first.wk)
        state.cross_weights.append(transform_layer(first, "kv"))
        for layer in model.decoder[1:]:
            w = layer.cross_attn
            state.cross_weights.append(LayerWeights(
                wq=w.wq, wk=inv @ w.wk, wv=inv @ w.wv, wo=w.wo, bq=w.bq, bk=w.bk, bv=w.bv, bo=w.bo,
            ))
    return state


def _cross_attend(state: DecodeState, j: int, y: np.ndarray, traffic: LayerTraffic) -> np.ndarray:
    h = state.model.h
    w = state.cross_weights[j]
    proj, mha = OpCounter(), OpCounter()
    q = _bias(matmul(y, w.wq, proj), w.bq)
    policy = state.policy
    if policy is CachePolicy.BASELINE:
        cache = state.cross_caches[j]
        p = _probs(q, cache.k, h, False, 0, mha)
        heads = _weighted_sum(p, cache.v, h, mha)
        traffic.cross_cache = cache.activations
        traffic.cross_matrices = ["Wq", "Wo"]
    elif policy is CachePolicy.OPTION1 or (policy is CachePolicy.HYBRID and j == 0):
        k = state.cross_caches[j].k if policy is CachePolicy.OPTION1 else state.shared_keys
        p = _probs(q, _bias(k, w.bk), h, False, 0, mha)[:, 0, :]
        heads = project_values_from_keys(p, k, w, h, mha, proj)
        traffic.cross_cache = state.cross_caches[j].activations if policy is CachePolicy.OPTION1 else 0
        traffic.cross_matrices = ["Wq", "Wkv", "Wo"]
    else:
        xs = state.ecache.e if policy is CachePolicy.OPTION2 else state.shared_keys
        heads, _ = attend_via_inputs(q, xs, w.wk, w.wv, w.bv, h, False, 0, proj, mha)
        traffic.cross_matrices = ["Wq", "Wk", "Wv", "Wo"]
    traffic.cross_params = sum(getattr(w, name.lower()).size for name in traffic.cross_matrices)
    return _bias(matmul(heads, w.wo, proj), w.bo)


def decode_step(policy: CachePolicy, y_t, model: EncDecModel, state: DecodeState) -> np.ndarray:
    """Run one generated token through every decoder layer; returns ``1 x d``."""
    if CachePolicy(policy) is not state.policy:
        raise ValueError(f"state was initialised for {state.policy.value}, not {CachePolicy(policy).value}")
    if model is not state.model:
        raise ValueError("decode state belongs to a different model")
    y = as_matrix(y_t)
    if y.shape != (1, model.d):
        raise ValueError(f"decoder input must be 1 x {model.d}, got {y.shape}")
    traffic = []
    for j, layer in enumerate(model.decoder):
        t = LayerTraffic()
        w = state.self_weights[j]
        cache = state.self_caches[j]
        if state.policy is CachePolicy.BASELINE:
            out = vanilla_generate_step(y, w, model.h, cache, rope=state.rope)
        elif state.rope is not None:
            out = slim_generate_rope_option1(y, w, model.h, cache, state.rope)
        else:
            out = slim_generate_optimized(y, w, model.h, cache)
        t.self_cache = out.cache_reads
        t.self_params = out.weight_reads
        y = y + out.y
        y = y + _cross_attend(state, j, y, t)
        y = y + layer.ffn(y)
        t.ffn_params = layer.ffn.size
        traffic.append(t)
    state.steps += 1
    state.last_traffic = traffic
    return y


@dataclass
class TrafficReport:
    policy: CachePolicy
    cache_reads: int
    param_reads: int
    batch: int
    cross_matrices_per_layer: list[list[str]]

    @property
    def per_token(self) -> float:
        """Values read per generated token with parameters amortised over the batch."""
        return self.cache_reads + self.param_reads / self.batch


def traffic_report(state: DecodeState, batch: int = 1, vocab: int = 0) -> TrafficReport:
    """Reads of the most recent decode step.

    ``vocab`` adds the ``d * vocab`` embedding parameters the toy stack does
    not model. Bias vectors are not counted. The shared E (or K1) matrix is
    assumed resident on chip and contributes no reads.
    """
    if state.steps == 0:
        raise ValueError("traffic_report needs at least one decode step")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    cache = sum(t.self_cache + t.cross_cache for t in state.last_traffic)
    params = sum(t.params for t in state.last_traffic) + state.model.d * vocab
    return TrafficReport(state.policy, cache, params, batch,
                         [list(t.cross_matrices) for t in state.last_traffic])
