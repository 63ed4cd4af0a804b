"""Model configuration, per-layer weights and the on-disk tensor format.

A saved model is a directory holding ``manifest.json`` and ``weights.bin``.
The manifest carries the config, dtype, endianness, a tensor table of
``{name, shape, offset, nbytes}``, the CRC32 of the blob and the PRNG seed
for synthetic models. The blob is raw little-endian IEEE-754 data with
every tensor starting on an 8-byte boundary.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .linalg import SingularMatrixError, lu_factor, make_rng

MANIFEST = "manifest.json"
BLOB = "weights.bin"
FORMAT_VERSION = 1
MAX_RESAMPLES = 8

_DTYPES = {"f64": "<f8", "f32": "<f4"}


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class ShapeError(ModelFormatError):
    pass


class DTypeError(ModelFormatError):
    pass


class TruncatedBlobError(ModelFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int
    h: int
    d_k: int
    layers: int
    max_context: int = 4096
    d_ffn: int | None = None
    vocab: int | None = None

    def __post_init__(self):
        for name in ("d", "h", "d_k", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def e(self) -> int:
        return self.h * self.d_k

    @property
    def aspect_ratio(self) -> float:
        return self.e / self.d

    @property
    def square(self) -> bool:
        return self.e == self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """Attention projections of one layer; ``x @ wq`` etc. with rows as tokens."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def e(self) -> int:
        return self.wq.shape[1]

    def validate(self, config: ModelConfig | None = None) -> None:
        d, e = self.wq.shape
        if config is not None and (d, e) != (config.d, config.e):
            raise ShapeError(f"W_Q is {self.wq.shape}, config wants {(config.d, config.e)}")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != (d, e):
                raise ShapeError(f"{name} is {getattr(self, name).shape}, expected {(d, e)}")
        if self.wo.shape != (e, d):
            raise ShapeError(f"wo is {self.wo.shape}, expected {(e, d)}")
        for name, n in (("bq", e), ("bk", e), ("bv", e), ("bo", d)):
            b = getattr(self, name)
            if b is not None and b.shape != (n,):
                raise ShapeError(f"{name} has shape {b.shape}, expected {(n,)}")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"Wq": self.wq, "Wk": self.wk, "Wv": self.wv, "Wo": self.wo}
        out.update(_bias_tensors(self))
        return out


@dataclass(frozen=True, eq=False)
class TransformedWeights:
    """A layer prepared for reduced-cache inference.

    Exactly one of ``wkv`` (values from keys, K-cache) or ``wvk`` (keys from
    values, V-cache) is set. In kv mode ``wk`` is kept and ``wv`` dropped;
    in vk mode the reverse. ``bo`` is the output bias, already merged with
    the value bias when ``bias_folded`` is true, in which case ``bv`` is None.
    """

    wq: np.ndarray
    wo: np.ndarray
    wk: np.ndarray | None = None
    wv: np.ndarray | None = None
    wkv: np.ndarray | None = None
    wvk: np.ndarray | None = None
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None
    bias_folded: bool = False
    flags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if (self.wkv is None) == (self.wvk is None):
            raise ValueError("exactly one of wkv / wvk must be present")
        if self.wkv is not None and self.wk is None:
            raise ValueError("kv mode needs wk")
        if self.wvk is not None and self.wv is None:
            raise ValueError("vk mode needs wv")

    @property
    def mode(self) -> str:
        if self.wvk is not None:
            return "vk"
        return "kv" if self.wkv.shape[0] == self.wq.shape[0] else "rect-kv"

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def e(self) -> int:
        return self.wq.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"Wq": self.wq}
        if self.wvk is None:
            out["Wk"] = self.wk
            out["Wkv"] = self.wkv
        else:
            out["Wv"] = self.wv
            out["Wvk"] = self.wvk
        out["Wo"] = self.wo
        out.update(_bias_tensors(self))
        return out


def _bias_tensors(w) -> dict[str, np.ndarray]:
    return {
        name: b
        for name, b in (("bq", w.bq), ("bk", w.bk), ("bv", w.bv), ("bo", w.bo))
        if b is not None
    }


def _gaussian(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


def generate_synthetic_model(config: ModelConfig, seed: int, bias: bool = False) -> list[LayerWeights]:
    """Random layers with N(0, 1/d) entries, deterministic for a given seed.

    Each ``W_K`` is checked with a pivoted LU (on ``W_K W_K^T`` when the
    projection is wide) and resampled from a fresh sub-seed if singular.
    """
    d, e = config.d, config.e
    std = 1.0 / np.sqrt(d)
    layers = []
    for i in range(config.layers):
        rng = make_rng(seed, i)
        wq = _gaussian(rng, (d, e), std)
        wv = _gaussian(rng, (d, e), std)
        wo = _gaussian(rng, (e, d), std)
        biases = {}
        if bias:
            biases = {
                "bq": _gaussian(rng, e, std),
                "bk": _gaussian(rng, e, std),
                "bv": _gaussian(rng, e, std),
                "bo": _gaussian(rng, d, std),
            }
        wk = _sample_invertible_wk(seed, i, d, e, std)
        layers.append(LayerWeights(wq=wq, wk=wk, wv=wv, wo=wo, **biases))
    return layers


def _sample_invertible_wk(seed: int, layer: int, d: int, e: int, std: float) -> np.ndarray:
    last = None
    for attempt in range(MAX_RESAMPLES + 1):
        wk = _gaussian(make_rng(seed, layer, 1, attempt), (d, e), std)
        try:
            lu_factor(wk if e == d else wk @ wk.T)
            return wk
        except SingularMatrixError as err:
            last = err
    raise SingularMatrixError(
        f"layer {layer}: W_K singular after {MAX_RESAMPLES} resamples", last.pivot_ratio
    )


def save_model(
    weights: list,
    config: ModelConfig,
    path,
    dtype: str = "f64",
    seed: int | None = None,
    extra: dict | None = None,
) -> dict:
    """Write ``manifest.json`` + ``weights.bin`` under ``path``; return the manifest."""
    if not weights:
        raise ValueError("refusing to save a model with no layers")
    if dtype not in _DTYPES:
        raise DTypeError(f"unknown dtype {dtype!r}")
    path = Path(path)
    slim = isinstance(weights[0], TransformedWeights)
    table = []
    chunks = []
    offset = 0
    for i, layer in enumerate(weights):
        if isinstance(layer, TransformedWeights) != slim:
            raise ValueError("cannot mix plain and transformed layers in one model")
        for name, arr in layer.tensors().items():
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            pad = (-len(raw)) % 8
            table.append({
                "name": f"layer{i}.{name}",
                "shape": list(np.shape(arr)),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw + b"\0" * pad)
            offset += len(raw) + pad
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "dtype": dtype,
        "endianness": "little",
        "slim": slim,
        "seed": seed,
        "blob": BLOB,
        "blob_nbytes": len(blob),
        "crc32": zlib.crc32(blob),
        "tensors": table,
    }
    if slim:
        manifest["transform"] = {
            "mode": weights[0].mode,
            "bias_folded": weights[0].bias_folded,
        }
    if extra:
        manifest.update(extra)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / BLOB).write_bytes(blob)
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as err:
        raise OSError(f"cannot write model to {path}: {err}") from err
    return manifest


def read_manifest(path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text(encoding="utf-8"))


def load_model(path) -> tuple[ModelConfig, list]:
    """Read a model directory, validating checksum, dtype and shapes.

    Payloads are promoted to float64 in memory.
    """
    path = Path(path)
    manifest = read_manifest(path)
    dtype = manifest.get("dtype")
    if dtype not in _DTYPES:
        raise DTypeError(f"unknown dtype {dtype!r} in {path / MANIFEST}")
    if manifest.get("endianness", "little") != "little":
        raise DTypeError(f"unsupported endianness {manifest['endianness']!r}")
    blob = (path / manifest.get("blob", BLOB)).read_bytes()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        want = int(np.prod(shape)) * itemsize
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != want:
            raise ShapeError(f"{entry['name']}: shape {shape} needs {want} bytes, table says {nbytes}")
        if start + nbytes > len(blob):
            raise TruncatedBlobError(
                f"{entry['name']}: bytes {start}..{start + nbytes} past end of {len(blob)}-byte blob"
            )
        arr = np.frombuffer(blob, dtype=_DTYPES[dtype], count=want // itemsize, offset=start)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)

    if "crc32" in manifest and zlib.crc32(blob) != manifest["crc32"]:
        raise ChecksumError(f"CRC32 mismatch for {path / manifest.get('blob', BLOB)}")

    config = ModelConfig.from_dict(manifest["config"])
    layers = []
    for i in range(config.layers):
        t = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith(f"layer{i}.")}
        layers.append(_layer_from_tensors(t, manifest, i))
    for layer in layers:
        if isinstance(layer, LayerWeights):
            layer.validate(config)
        elif layer.wq.shape != (config.d, config.e):
            raise ShapeError(f"W_Q is {layer.wq.shape}, config wants {(config.d, config.e)}")
    return config, layers


def _layer_from_tensors(t: dict, manifest: dict, i: int):
    def get(name, required=True):
        if name not in t:
            if required:
                raise ShapeError(f"layer{i}.{name} missing from manifest")
            return None
        return t[name]

    biases = {b: get(b, required=False) for b in ("bq", "bk", "bv", "bo")}
    if not manifest.get("slim"):
        return LayerWeights(wq=get("Wq"), wk=get("Wk"), wv=get("Wv"), wo=get("Wo"), **biases)
    info = manifest.get("transform", {})
    return TransformedWeights(
        wq=get("Wq"),
        wo=get("Wo"),
        wk=get("Wk", required=False),
        wv=get("Wv", required=False),
        wkv=get("Wkv", required=False),
        wvk=get("Wvk", required=False),
        bias_folded=bool(info.get("bias_folded", False)),
        **biases,
    )

