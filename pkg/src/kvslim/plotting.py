"""Figures written next to the cost reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import costmodel as cm  # noqa: E402

# fixed metadata keeps repeated renders identical
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_chips(path, heads=(16, 32, 64)) -> Path:
    """Chip intensity bars against the peak intensity ``2h+2`` of the optimized kernel."""
    names = [c.name for c in cm.CHIPS]
    vals = [cm.chip_intensity(c) for c in cm.CHIPS]
    fig, ax = plt.subplots(figsize=(7, 3.6))
    ax.bar(range(len(names)), vals, color="0.6")
    for h, style in zip(heads, (":", "--", "-")):
        ax.axhline(2 * h + 2, color="C3", linestyle=style, label=f"K-cache attention, h={h}")
    ax.set_xticks(range(len(names)), names, rotation=25, ha="right")
    ax.set_ylabel("OPs per byte")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_whisper(path, batch: int = 1) -> Path:
    """Per-token memory reads of each cache policy for the five Whisper sizes."""
    names = list(cm.WHISPER_CONFIGS)
    policies = ("baseline", "option1", "option2")
    reads = np.array([
        [cm.encdec_reads(p, *cm.WHISPER_CONFIGS[n], batch=batch) / 1e6 for p in policies]
        for n in names
    ])
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for i, p in enumerate(policies):
        ax.bar(x + (i - 1) * 0.27, reads[:, i], width=0.27, label=p)
    ax.set_xticks(x, names)
    ax.set_yscale("log")
    ax.set_ylabel("memory reads per token (M)")
    ax.set_title(f"batch size {batch}")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_cache_sizes(path) -> Path:
    """KV-cache size of the built-in model list, full and with keys only."""
    models = cm.CACHE_MODELS
    full = np.array([cm.kv_cache_activations(m.cache_width or m.d, m.layers, m.context) for m in models])
    order = np.argsort(full)
    fig, ax = plt.subplots(figsize=(7, 5.5))
    y = np.arange(len(models))
    ax.barh(y, full[order], color="0.6", label="KV-cache")
    ax.barh(y, full[order] / 2, color="C0", label="K-cache only")
    ax.set_yticks(y, [models[i].name for i in order], fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("activations at maximum context")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def render_preset_figures(preset: str, directory, batch: int = 1) -> list[Path]:
    directory = Path(directory)
    if preset == "chips":
        return [plot_chips(directory / "chips_intensity.png")]
    if preset == "whisper":
        return [plot_whisper(directory / f"whisper_reads_batch{batch}.png", batch)]
    if preset == "tables":
        return [plot_cache_sizes(directory / "kv_cache_sizes.png")]
    raise ValueError(f"unknown preset {preset!r}")
