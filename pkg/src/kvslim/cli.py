"""``kvslim`` command line: synth, transform, verify, equivalence, cost-report.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import attention as att
from .linalg import SingularMatrixError, make_rng, max_abs_diff
from .model import (
    LayerWeights,
    ModelConfig,
    ModelFormatError,
    TransformedWeights,
    generate_synthetic_model,
    load_model,
    save_model,
)
from .reports import PRESETS, preset_rows, render
from .rope import RopeTable, slim_generate_rope_option1, slim_generate_rope_option2
from .transform import CONDITION_WARN, transform_layer, verify_value_reconstruction

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

VARIANTS = ("vanilla", "slim-unopt", "slim-opt", "slim-fused", "vcache", "xcache", "slim-rope2")
ROPE_VARIANTS = ("vanilla", "slim-opt", "slim-rope2")
_NO_ROPE = {
    "xcache": "the X-cache folds W_K into the query, which RoPE's per-position rotation forbids",
    "vcache": "the V-cache recovers keys through W_VK, which RoPE's per-position rotation forbids",
    "slim-unopt": "the unoptimized K-cache kernel has no RoPE path; use slim-opt or slim-rope2",
    "slim-fused": "the fused K-cache kernel has no RoPE path; use slim-opt or slim-rope2",
}


class UsageError(Exception):
    pass


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _load(path) -> tuple[ModelConfig, list]:
    try:
        return load_model(path)
    except FileNotFoundError as err:
        raise UsageError(f"cannot load model from {path}: {err.strerror or err}") from None


# synth -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        config = ModelConfig(d=args.d, h=args.heads, d_k=args.dk, layers=args.layers,
                             max_context=args.max_context)
    except ValueError as err:
        raise UsageError(str(err)) from None
    layers = generate_synthetic_model(config, args.seed, bias=args.bias)
    manifest = save_model(layers, config, args.out, dtype=args.dtype, seed=args.seed)
    _say(f"wrote {args.out}: d={config.d} h={config.h} d_k={config.d_k} e={config.e} "
         f"layers={config.layers} bias={args.bias} dtype={args.dtype}")
    _say(f"tensors={len(manifest['tensors'])} bytes={manifest['blob_nbytes']} crc32={manifest['crc32']:08x}")
    return EXIT_OK


# transform -------------------------------------------------------------------

def cmd_transform(args) -> int:
    config, layers = _load(args.model)
    if layers and isinstance(layers[0], TransformedWeights):
        raise UsageError(f"{args.model} is already transformed")
    if args.mode in ("kv", "vk") and not config.square:
        raise UsageError(f"mode {args.mode} needs square projections (d={config.d}, e={config.e}); "
                         "use --mode rect-kv")
    if args.mode == "rect-kv" and config.e < config.d:
        raise UsageError(f"rect-kv needs e >= d (d={config.d}, e={config.e})")
    out = []
    for i, w in enumerate(layers):
        try:
            t = transform_layer(w, args.mode, fold_bias=args.fold_bias)
        except SingularMatrixError as err:
            _say(f"error: layer {i} is singular ({err})")
            return EXIT_FAIL
        cond = t.flags["condition"]
        if cond > CONDITION_WARN:
            _say(f"warning: layer {i} condition estimate {cond:.3e} exceeds {CONDITION_WARN:.0e}")
        out.append(t)
    notes = {"condition": [float(t.flags["condition"]) for t in out]}
    if args.mode == "rect-kv":
        r = config.e / config.d
        notes["aspect_ratio"] = r
        notes["size_penalty"] = f"W_KV is {config.e}x{config.e}, {r:g} times the size of W_V"
    manifest = save_model(out, config, args.out, dtype=args.dtype, extra={"notes": notes})
    _say(f"wrote {args.out}: mode={args.mode} layers={len(out)} fold_bias={args.fold_bias} "
         f"crc32={manifest['crc32']:08x}")
    if args.mode == "rect-kv":
        _say(f"note: {notes['size_penalty']}")
    return EXIT_OK


# verify ----------------------------------------------------------------------

def verify_layers(original: list, transformed: list) -> tuple[int, list[str]]:
    if len(original) != len(transformed):
        raise UsageError(f"layer count mismatch: {len(original)} vs {len(transformed)}")
    report = verify_value_reconstruction(original, transformed)
    lines = report.lines()
    for i in report.ill_conditioned:
        lines.append(f"warning: layer {i} is ill-conditioned")
    for i, ok in enumerate(report.passed):
        if not ok:
            lines.append(f"layer {i} failed: max error {report.max_error[i]:.3e}")
    return (EXIT_OK if report.all_passed else EXIT_FAIL), lines


def cmd_verify(args) -> int:
    _, original = _load(args.model)
    _, transformed = _load(args.transformed)
    if original and isinstance(original[0], TransformedWeights):
        raise UsageError("--model must be the untransformed model")
    if transformed and not isinstance(transformed[0], TransformedWeights):
        raise UsageError("--transformed must be a transformed model")
    code, lines = verify_layers(original, transformed)
    for line in lines:
        _say(line)
    return code


# equivalence -----------------------------------------------------------------

def parse_variants(spec: str, rope: bool, square: bool) -> list[str]:
    if spec == "all":
        if rope:
            return list(ROPE_VARIANTS)
        chosen = [v for v in VARIANTS if v != "slim-rope2"]
        return chosen if square else [v for v in chosen if v != "vcache"]
    chosen = [v.strip() for v in spec.split(",") if v.strip()]
    if not chosen:
        raise UsageError("no variants given")
    for v in chosen:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if rope and v in _NO_ROPE:
            raise UsageError(f"--rope cannot be combined with {v}: {_NO_ROPE[v]}")
        if not rope and v == "slim-rope2":
            raise UsageError("slim-rope2 needs --rope")
        if v == "vcache" and not square:
            raise UsageError("vcache needs square projections")
    return list(dict.fromkeys(chosen))


def _run_variant(name: str, x: np.ndarray, w: LayerWeights, heads: int, n_prompt: int,
                 rope: RopeTable | None, tkv, tvk) -> np.ndarray:
    prompt, steps = x[:n_prompt], x[n_prompt:]
    if name == "vanilla":
        out, cache = att.vanilla_prompt(prompt, w, heads, rope=rope)
        step = lambda r: att.vanilla_generate_step(r, w, heads, cache, rope=rope)
    elif name == "xcache":
        out, cache = att.xcache_prompt(prompt, w, heads)
        step = lambda r: att.xcache_generate_step(r, w, heads, cache)
    elif name == "vcache":
        out, cache = att.vcache_prompt(prompt, tvk, heads)
        step = lambda r: att.vcache_generate_step(r, tvk, heads, cache)
    elif name == "slim-rope2":
        out, cache = att.slim_prompt(prompt, tkv, heads, rope=rope, cache_mode="encoded")
        step = lambda r: slim_generate_rope_option2(r, tkv, heads, cache, rope)
    else:
        out, cache = att.slim_prompt(prompt, tkv, heads, rope=rope)
        if rope is not None:
            step = lambda r: slim_generate_rope_option1(r, tkv, heads, cache, rope)
        else:
            kernel = {"slim-unopt": att.slim_generate_unoptimized,
                      "slim-opt": att.slim_generate_optimized}.get(name)
            if kernel is None:
                step = lambda r: att.slim_generate_fused(r, tkv, heads, cache)
            else:
                step = lambda r, k=kernel: k(r, tkv, heads, cache)
    rows = [out.y] + [step(steps[i:i + 1]).y for i in range(steps.shape[0])]
    return np.vstack(rows)


def run_equivalence(config: ModelConfig, layers: list[LayerWeights], variants: list[str], tokens: int,
                    seed: int, rope: bool = False) -> dict[tuple[str, str], float]:
    """Max-abs output difference for every pair of variants, worst over layers.

    Each layer gets its own seeded input sequence; the first half of the
    tokens is the prompt and the rest is decoded one token at a time.
    """
    table = RopeTable(config.d_k, max_positions=tokens) if rope else None
    n_prompt = max(1, tokens // 2)
    worst = {pair: 0.0 for pair in combinations(variants, 2)}
    for li, w in enumerate(layers):
        x = make_rng(seed, li).standard_normal((tokens, config.d))
        needs_kv = any(v.startswith("slim") for v in variants)
        tkv = transform_layer(w, "kv" if config.square else "rect-kv") if needs_kv else None
        tvk = transform_layer(w, "vk") if "vcache" in variants else None
        outs = {v: _run_variant(v, x, w, config.h, n_prompt, table, tkv, tvk) for v in variants}
        for a, b in worst:
            worst[(a, b)] = max(worst[(a, b)], max_abs_diff(outs[a], outs[b]))
    return worst


def cmd_equivalence(args) -> int:
    config, layers = _load(args.model)
    if layers and isinstance(layers[0], TransformedWeights):
        raise UsageError("equivalence runs on the untransformed model; pass the synth output")
    if args.tokens < 1:
        raise UsageError("--tokens must be >= 1")
    if args.rope and config.d_k % 2:
        raise UsageError(f"--rope needs an even head dimension, model has d_k={config.d_k}")
    variants = parse_variants(args.variants, args.rope, config.square)
    if len(variants) < 2:
        raise UsageError("need at least two variants to compare")
    diffs = run_equivalence(config, layers, variants, args.tokens, args.seed, args.rope)
    width = max(len(f"{a} vs {b}") for a, b in diffs)
    ok = True
    for (a, b), err in diffs.items():
        good = err <= args.tolerance
        ok &= good
        _say(f"{(a + ' vs ' + b).ljust(width)}  max_abs_diff={err:.3e}  {'ok' if good else 'FAIL'}")
    _say(f"{'pass' if ok else 'fail'}: tolerance {args.tolerance:g}, {len(layers)} layers, "
         f"{args.tokens} tokens{', rope' if args.rope else ''}")
    return EXIT_OK if ok else EXIT_FAIL


# cost-report -----------------------------------------------------------------

def parse_config(text: str | None) -> dict | None:
    """``key=value[,key=value...]`` inline, or a file of such lines, or a JSON file."""
    if text is None:
        return None
    path = Path(text)
    if path.is_file():
        body = path.read_text(encoding="utf-8").strip()
        if body.startswith("{"):
            return json.loads(body)
        text = ",".join(line.split("#", 1)[0].strip() for line in body.splitlines())
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad config entry {part!r}; expected key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        out[key] = value
    return out


def cmd_cost_report(args) -> int:
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    config = parse_config(args.config)
    preset = args.preset or ("tables" if config else None)
    if preset is None:
        raise UsageError("give --preset or --config")
    try:
        rows = preset_rows(preset, batch=args.batch, config=config)
    except ValueError as err:
        raise UsageError(str(err)) from None
    text = render(rows, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    if args.figures:
        from .plotting import render_preset_figures

        for p in render_preset_figures(preset, args.figures, args.batch):
            print(f"figure: {p}", file=sys.stderr)
    return EXIT_OK


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvslim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic MHA model")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--dk", type=int, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--bias", action="store_true")
    p.add_argument("--max-context", type=int, default=4096)
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transform", help="precompute W_KV (or W_VK) offline")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("kv", "vk", "rect-kv"), default="kv")
    p.add_argument("--fold-bias", action="store_true", help="fold the value bias into the output bias")
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("verify", help="check per layer that the dropped matrix is reconstructed")
    p.add_argument("--model", required=True)
    p.add_argument("--transformed", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("equivalence", help="compare attention variants on seeded inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--variants", default="all", help=f"'all' or a comma list of {', '.join(VARIANTS)}")
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rope", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("cost-report", help="emit cost tables as CSV or markdown")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--config", help="key=value[,key=value] or a file holding them")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--format", choices=("csv", "md"), default="csv")
    p.add_argument("--out")
    p.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    p.set_defaults(func=cmd_cost_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"kvslim {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, OSError, ValueError) as err:
        print(f"kvslim {args.command}: error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
