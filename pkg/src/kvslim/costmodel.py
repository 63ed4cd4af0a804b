"""Closed-form cache sizes, per-token costs, chip intensities and speedups.

Byte figures assume one byte per parameter and per activation (FP8), so
counts and bytes coincide wherever a "byte" report is produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

WHISPER_P = 1500
WHISPER_DECODE_CTX = 448
WHISPER_VOCAB = 51865


def round_half_up(x: float, digits: int = 0) -> float:
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    tops_int8: float
    bandwidth_gbs: float

    def __post_init__(self):
        if self.tops_int8 <= 0 or self.bandwidth_gbs <= 0:
            raise ValueError(f"{self.name}: TOPS and bandwidth must be positive")


@dataclass(frozen=True)
class CostRow:
    ops: int
    reads: int

    @property
    def intensity(self) -> float:
        return self.ops / self.reads


@dataclass(frozen=True)
class CacheModel:
    name: str
    params: str
    d: int
    layers: int
    context: int
    context_label: str
    cache_width: int | None = None


CHIPS = [
    HardwareSpec("Apple A18", 35, 60),
    HardwareSpec("Apple M4 Max", 38, 410),
    HardwareSpec("Google TPU v4", 275, 1200),
    HardwareSpec("Google TPU v5p", 918, 2765),
    HardwareSpec("NVIDIA H200", 1980, 4800),
    HardwareSpec("NVIDIA B200", 4500, 8000),
]

# MHA models with their maximum context. CodeGemma-7B projects to e = 4096 > d,
# so its cache width is e rather than d.
CACHE_MODELS = [
    CacheModel("CodeLlama-7B", "7B", 4096, 32, 16384, "16k"),
    CacheModel("CodeLlama-13B", "13B", 5120, 40, 16384, "16k"),
    CacheModel("CodeGemma-7B", "8.5B", 3072, 28, 8192, "8k", cache_width=4096),
    CacheModel("Aya-23-35B", "35B", 8192, 40, 8192, "8k"),
    CacheModel("SmolLM2-1.7B", "1.7B", 2048, 24, 8192, "8k"),
    CacheModel("SmolVLM", "2.3B", 2048, 24, 16384, "16k"),
    CacheModel("Evo-1-131k", "6.5B", 4096, 32, 131072, "128k"),
    CacheModel("Phi-3-mini-128k", "3.8B", 3072, 32, 131072, "128k"),
    CacheModel("BitNet_b1_58-3B", "3.3B", 3200, 26, 2048, "2k"),
    CacheModel("DCLM-7B", "6.9B", 4096, 32, 2048, "2k"),
    CacheModel("OLMo-1B", "1.3B", 2048, 16, 4096, "4k"),
    CacheModel("OLMo-2-1124-13B", "13.7B", 5120, 40, 4096, "4k"),
    CacheModel("Chronos-Bolt-tiny", "9M", 256, 4, 512, "0.5k"),
    CacheModel("Chronos-Bolt-base", "205M", 768, 12, 512, "0.5k"),
    CacheModel("Qwen2-Audio-7B", "8.4B", 4096, 32, 8192, "8k"),
    CacheModel("LLaVA-NeXT-Video", "7.1B", 4096, 32, 4096, "4k"),
    CacheModel("LLaVA-Vicuna-13B", "13.4B", 5120, 40, 4096, "4k"),
    CacheModel("Vicuna-7B-16k", "7B", 4096, 32, 16384, "16k"),
    CacheModel("Vicuna-13B-16k", "13B", 5120, 40, 16384, "16k"),
    CacheModel("Flan-T5-base", "248M", 768, 12, 512, "0.5k"),
    CacheModel("Flan-T5-XXL", "11.3B", 4096, 24, 512, "0.5k"),
    CacheModel("Whisper-tiny", "38M", 384, 4, 1948, "1500/448"),
    CacheModel("Whisper-large-v3", "1.5B", 1280, 32, 1948, "1500/448"),
    CacheModel("GPT-2 XL", "1.6B", 1600, 48, 1024, "1k"),
]

WHISPER_CONFIGS = {
    "tiny": (4, 384, 1536),
    "base": (6, 512, 2048),
    "small": (12, 768, 3072),
    "medium": (24, 1024, 4096),
    "large": (32, 1280, 5120),
}


def kv_cache_activations(d: int, layers: int, context_len: int) -> int:
    """KV-cache size ``2 * d * layers * context_len`` in activations."""
    if d < 0 or layers < 0 or context_len < 0:
        raise ValueError("cache dimensions must be non-negative")
    return 2 * d * layers * context_len


def generate_step_cost(variant: str, d: int, h: int, n: int) -> tuple[CostRow, CostRow]:
    """(projection, MHA) cost per token per layer for square weights, batch 1.

    ``variant`` is ``vanilla``, ``unoptimized`` (V materialised from the
    K-cache) or ``optimized`` (softmax applied to K first).
    """
    if variant == "vanilla":
        return CostRow(8 * d * d, 4 * d * d), CostRow(4 * n * d, 2 * n * d)
    if variant == "unoptimized":
        return CostRow((2 * n + 6) * d * d, 4 * d * d), CostRow(4 * n * d, n * d)
    if variant == "optimized":
        return CostRow(8 * d * d, 4 * d * d), CostRow(2 * n * d * (h + 1), n * d)
    raise ValueError(f"unknown variant {variant!r}")


def batched_vanilla_intensity(d: int, n: int, batch: int) -> tuple[float, float]:
    """(projection, attention) intensity for ``batch`` sequences decoding together.

    Weights are read once for the whole batch; every sequence reads its own
    KV-cache, so attention intensity does not improve with batch size.
    """
    proj, mha = generate_step_cost("vanilla", d, 1, n)
    return (batch * proj.ops) / proj.reads, (batch * mha.ops) / (batch * mha.reads)


def chip_intensity(spec: HardwareSpec) -> float:
    """OPs per byte: ``TOPS * 1e12 / (GB/s * 1e9)``."""
    return spec.tops_int8 * 1e12 / (spec.bandwidth_gbs * 1e9)


def chip_intensity_display(spec: HardwareSpec) -> int:
    return int(round_half_up(chip_intensity(spec)))


def is_memory_bound(program_intensity: float, spec: HardwareSpec) -> bool:
    """Strictly below the chip's intensity means bandwidth limits throughput."""
    return program_intensity < chip_intensity(spec)


def memory_bound_speedup(params: float, cache_before: float, cache_after: float, batch: int = 1) -> float:
    """Speedup when per-token time is proportional to bytes read.

    Parameters are read once per step and shared by ``batch`` sequences, each
    of which reads its own cache: ``(params/B + before) / (params/B + after)``.
    Multiplying through by B gives the batch-total form, e.g.
    ``(16*25 + 3.8) / (16*12.5 + 3.8)``; both give the same ratio.
    """
    if params < 0 or cache_before < 0 or cache_after < 0 or batch < 1:
        raise ValueError("sizes must be non-negative and batch >= 1")
    per = params / batch
    return (per + cache_before) / (per + cache_after)


def encdec_cache(layers: int, d: int, p: int = WHISPER_P, n_self: int = WHISPER_DECODE_CTX) -> dict[str, float]:
    """Cache activations of an encoder-decoder under each policy.

    Option 2 keeps only the halved self cache; E is assumed resident on chip
    and reported separately.
    """
    cross = 2 * p * d * layers
    self_kv = 2 * n_self * d * layers
    baseline = cross + self_kv
    return {
        "e_cache": p * d,
        "cross_kv": cross,
        "self_kv": self_kv,
        "baseline": baseline,
        "option1": baseline / 2,
        "option2": self_kv / 2,
        "hybrid": self_kv / 2,
    }


def encdec_params(layers: int, d: int, d_ffn: int, vocab: int = WHISPER_VOCAB) -> dict[str, int]:
    """Parameters read per generated token (generate phase, biases ignored)."""
    base = d * vocab + layers * (6 * d * d + 2 * d * d_ffn)
    return {
        "baseline": base,
        "option1": base + d * d * layers,
        "option2": base + 2 * d * d * layers,
        "hybrid": base + d * d + 2 * d * d * (layers - 1),
    }


def encdec_reads(policy: str, layers: int, d: int, d_ffn: int, p: int = WHISPER_P,
                 n_self: int = WHISPER_DECODE_CTX, vocab: int = WHISPER_VOCAB, batch: int = 1) -> float:
    """Per-token memory reads: policy cache plus parameters amortised over the batch."""
    return encdec_cache(layers, d, p, n_self)[policy] + encdec_params(layers, d, d_ffn, vocab)[policy] / batch


@dataclass(frozen=True)
class WhisperRow:
    metric: str
    value: float
    unit: str
    digits: int
    note: str

    @property
    def display(self) -> float:
        return round_half_up(self.value, self.digits)


def whisper_table(layers: int, d: int, d_ffn: int, p: int = WHISPER_P, n_dec: int = WHISPER_DECODE_CTX,
                  vocab: int = WHISPER_VOCAB, batch: int = 1) -> list[WhisperRow]:
    """Cache, parameter, read and speedup rows for one Whisper-shaped model.

    Counts are in millions; speedups are ratios against the baseline.
    """
    if min(layers, d, d_ffn, p, n_dec, batch) < 1 or vocab < 0:
        raise ValueError("whisper_table needs positive dimensions")
    c = encdec_cache(layers, d, p, n_dec)
    prm = encdec_params(layers, d, d_ffn, vocab)
    reads = {k: c[k] + prm[k] / batch for k in ("baseline", "option1", "option2")}
    M = 1e6
    speed_digits = 2 if batch == 1 else 1
    amort = "baseline params" if batch == 1 else f"1/{batch} params"
    return [
        WhisperRow("e_cache", c["e_cache"] / M, "M", 1, f"{p}*d"),
        WhisperRow("cross_kv_cache", c["cross_kv"] / M, "M", 1, f"2*{p}*d*l"),
        WhisperRow("self_kv_cache", c["self_kv"] / M, "M", 1, f"2*{n_dec}*d*l"),
        WhisperRow("baseline_cache", c["baseline"] / M, "M", 1, "cross KV + self KV"),
        WhisperRow("option1_cache", c["option1"] / M, "M", 1, "half of baseline"),
        WhisperRow("option2_cache", c["option2"] / M, "M", 1, "no cross KV + half of self KV"),
        WhisperRow("option2_savings", c["baseline"] / c["option2"], "x", 1, "cache savings vs. baseline"),
        WhisperRow("baseline_params", prm["baseline"] / M, "M", 1, "d*vocab + l*(6d^2 + 2d*d_ffn)"),
        WhisperRow("option1_params", prm["option1"] / M, "M", 1, "baseline + cross K (d^2*l)"),
        WhisperRow("option2_params", prm["option2"] / M, "M", 1, "baseline + cross KV (2d^2*l)"),
        WhisperRow("reads_baseline", reads["baseline"] / M, "M", 1, f"baseline cache + {amort}"),
        WhisperRow("reads_option1", reads["option1"] / M, "M", 1, f"option 1 cache + {amort}"),
        WhisperRow("reads_option2", reads["option2"] / M, "M", 1, f"option 2 cache + {amort}"),
        WhisperRow("speedup_option1", reads["baseline"] / reads["option1"], "x", speed_digits, "speedup vs. baseline"),
        WhisperRow("speedup_option2", reads["baseline"] / reads["option2"], "x", speed_digits, "speedup vs. baseline"),
    ]
