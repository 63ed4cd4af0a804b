"""Cost-report presets rendered as CSV or aligned markdown.

Every row is ``(model, metric, value, note)`` in that column order. Values
are pre-formatted strings so repeated runs emit identical bytes.
"""

from __future__ import annotations

import csv
import io
from typing import NamedTuple

from . import costmodel as cm

COLUMNS = ("model", "metric", "value", "note")


class Row(NamedTuple):
    model: str
    metric: str
    value: str
    note: str


def human_count(n: float) -> str:
    for scale, suffix in ((1e9, "B"), (1e6, "M"), (1e3, "k")):
        if n >= scale:
            return f"{cm.round_half_up(n / scale, 1):.1f}{suffix}"
    return f"{n:g}"


def chips_rows() -> list[Row]:
    return [
        Row(spec.name, "intensity_ops_per_byte", str(cm.chip_intensity_display(spec)),
            f"{spec.tops_int8:g} TOPS int8 / {spec.bandwidth_gbs:g} GB/s")
        for spec in cm.CHIPS
    ]


def whisper_rows(batch: int = 1) -> list[Row]:
    rows = []
    for name, (layers, d, d_ffn) in cm.WHISPER_CONFIGS.items():
        for r in cm.whisper_table(layers, d, d_ffn, batch=batch):
            note = f"{r.note} [{r.unit}]"
            rows.append(Row(f"whisper-{name}", r.metric, f"{r.display:.{r.digits}f}", note))
    return rows


def table1_rows() -> list[Row]:
    rows = []
    for m in cm.CACHE_MODELS:
        width = m.cache_width or m.d
        n = cm.kv_cache_activations(width, m.layers, m.context)
        label = "e" if m.cache_width else "d"
        rows.append(Row(m.name, "kv_cache_activations", str(n),
                        f"2*{label}*layers*ctx = 2*{width}*{m.layers}*{m.context_label} = {human_count(n)}"))
    return rows


def table2_rows(d: int, h: int, n: int) -> list[Row]:
    rows = []
    for variant in ("vanilla", "unoptimized", "optimized"):
        proj, mha = cm.generate_step_cost(variant, d, h, n)
        for part, c in (("projection", proj), ("mha", mha)):
            rows.append(Row(variant, f"{part}_ops", str(c.ops), f"d={d} h={h} n={n}"))
            rows.append(Row(variant, f"{part}_reads", str(c.reads), f"d={d} h={h} n={n}"))
            rows.append(Row(variant, f"{part}_intensity", f"{c.intensity:.4f}", "ops per value read"))
    return rows


def tables_rows(config: dict | None = None) -> list[Row]:
    """Cache sizes for the built-in model list, or for one ``config``.

    A config needs ``d``, ``layers`` and ``ctx``; adding ``h`` and ``n``
    also emits the per-token generate-step cost rows.
    """
    if not config:
        return table1_rows()
    try:
        d, layers, ctx = int(config["d"]), int(config["layers"]), int(config["ctx"])
    except KeyError as err:
        raise ValueError(f"tables config is missing {err.args[0]!r}") from None
    n_act = cm.kv_cache_activations(d, layers, ctx)
    name = str(config.get("name", "custom"))
    rows = [Row(name, "kv_cache_activations", str(n_act),
                f"2*d*layers*ctx = 2*{d}*{layers}*{ctx} = {human_count(n_act)}")]
    if "h" in config and "n" in config:
        rows += table2_rows(d, int(config["h"]), int(config["n"]))
    return rows


PRESETS = ("whisper", "tables", "chips")


def preset_rows(preset: str, batch: int = 1, config: dict | None = None) -> list[Row]:
    if preset == "whisper":
        return whisper_rows(batch)
    if preset == "tables":
        return tables_rows(config)
    if preset == "chips":
        return chips_rows()
    raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


def to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def to_markdown(rows: list[Row]) -> str:
    table = [COLUMNS] + [tuple(r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(COLUMNS))]
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    lines = [fmt(COLUMNS), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(r) for r in table[1:]]
    return "\n".join(lines) + "\n"


def render(rows: list[Row], fmt: str = "csv") -> str:
    if fmt == "csv":
        return to_csv(rows)
    if fmt == "md":
        return to_markdown(rows)
    raise ValueError(f"unknown format {fmt!r}")
