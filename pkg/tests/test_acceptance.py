"""Acceptance suite: one test per criterion, with the stated tolerances and time budgets.

A summary line per criterion is printed at the end of the pytest run.
"""

import csv
import io
import time

import numpy as np
import pytest

from kvslim import attention as att
from kvslim import costmodel as cm
from kvslim.cli import main
from kvslim.encdec import CachePolicy, decode_step, generate_encdec_model, init_state, run_encoder, traffic_report
from kvslim.linalg import OpCounter, make_rng, max_abs_diff, right_inverse
from kvslim.model import ModelConfig, generate_synthetic_model
from kvslim.rope import RopeTable, rope_decode, rope_encode, rope_thetas
from kvslim.rope import slim_generate_rope_option1, slim_generate_rope_option2
from kvslim.transform import fold_biases, transform_layer, transform_model, verify_value_reconstruction
from reference import CHIP_INTENSITY, WHISPER_BATCH, WHISPER_COMMON, WHISPER_SIZES

criterion = pytest.mark.criterion


def _sequence(prompt_fn, step_fn, x, n_prompt):
    out, cache = prompt_fn(x[:n_prompt])
    rows = [out.y] + [step_fn(x[i:i + 1], cache).y for i in range(n_prompt, x.shape[0])]
    return np.vstack(rows)


@criterion(1, "exactness: 200+ random models, all K/V-cache variants and RoPE options within 1e-9, < 30 s")
def test_exactness_suite():
    t0 = time.perf_counter()
    worst = 0.0
    models = 0
    for seed in range(216):
        rng = make_rng(1000, seed)
        d = int(rng.choice([16, 32, 64]))
        h = int(rng.choice([1, 2, 4, 8]))
        n = int(rng.integers(2, 65))
        n_prompt = int(rng.integers(1, n))
        bias = bool(seed % 2)
        w = generate_synthetic_model(ModelConfig(d=d, h=h, d_k=d // h, layers=1), seed, bias=bias)[0]
        t, tv = transform_layer(w, "kv"), transform_layer(w, "vk")
        x = rng.standard_normal((n, d))

        ref = _sequence(lambda p: att.vanilla_prompt(p, w, h),
                        lambda r, c: att.vanilla_generate_step(r, w, h, c), x, n_prompt)
        outs = [
            _sequence(lambda p: att.slim_prompt(p, t, h),
                      lambda r, c: att.slim_generate_unoptimized(r, t, h, c), x, n_prompt),
            _sequence(lambda p: att.slim_prompt(p, t, h),
                      lambda r, c: att.slim_generate_optimized(r, t, h, c), x, n_prompt),
            _sequence(lambda p: att.vcache_prompt(p, tv, h),
                      lambda r, c: att.vcache_generate_step(r, tv, h, c), x, n_prompt),
        ]
        for o in outs:
            worst = max(worst, max_abs_diff(o, ref))

        rope = RopeTable(d // h, max_positions=n)
        ref_r = _sequence(lambda p: att.vanilla_prompt(p, w, h, rope=rope),
                          lambda r, c: att.vanilla_generate_step(r, w, h, c, rope=rope), x, n_prompt)
        o1 = _sequence(lambda p: att.slim_prompt(p, t, h, rope=rope),
                       lambda r, c: slim_generate_rope_option1(r, t, h, c, rope), x, n_prompt)
        o2 = _sequence(lambda p: att.slim_prompt(p, t, h, rope=rope, cache_mode="encoded"),
                       lambda r, c: slim_generate_rope_option2(r, t, h, c, rope), x, n_prompt)
        worst = max(worst, max_abs_diff(o1, ref_r), max_abs_diff(o2, ref_r))
        models += 1
    elapsed = time.perf_counter() - t0
    print(f"\n  {models} models, worst max-abs {worst:.2e}, {elapsed:.1f} s")
    assert models >= 200
    assert worst < 1e-9
    assert elapsed < 30.0


@criterion(2, "reconstruction: allclose(W_K W_KV, W_V) on every layer of a 24-layer model, < 5 s")
def test_reconstruction_24_layers():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=256, h=8, d_k=32, layers=24)
    layers = generate_synthetic_model(cfg, seed=2024)
    rep = verify_value_reconstruction(layers, transform_model(layers, "kv"), rtol=1e-5, atol=1e-8)
    elapsed = time.perf_counter() - t0
    print("\n  " + "  ".join(rep.lines()) + f"\n  {elapsed:.2f} s")
    assert len(rep.passed) == 24 and rep.all_passed
    assert elapsed < 5.0


@criterion(3, "right inverse within 1e-9 for e/d in {1,2,4,16}; X-cache step equals full recompute")
@pytest.mark.parametrize("r", [1, 2, 4, 16])
def test_right_inverse_and_xcache(r):
    d = 16
    wk = make_rng(3, r).standard_normal((d, d * r)) / np.sqrt(d)
    assert max_abs_diff(wk @ right_inverse(wk), np.eye(d)) < 1e-9

    h = 4
    w = generate_synthetic_model(ModelConfig(d=d, h=h, d_k=d * r // h, layers=1), r, bias=True)[0]
    x = make_rng(4, r).standard_normal((10, d))
    full, _ = att.vanilla_prompt(x, w, h)
    _, cache = att.xcache_prompt(x[:9], w, h)
    step = att.xcache_generate_step(x[9], w, h, cache)
    assert max_abs_diff(step.y, full.y[-1:]) < 1e-9


COMBOS = [(d, h, n) for d, h, n in [
    (16, 1, 1), (16, 2, 5), (16, 4, 17), (16, 8, 64), (32, 1, 3),
    (32, 2, 8), (32, 4, 31), (32, 8, 2), (64, 1, 40), (64, 2, 12),
    (64, 4, 64), (64, 8, 7), (48, 3, 9), (48, 6, 25), (24, 2, 50),
    (24, 4, 1), (40, 5, 19), (80, 4, 33), (96, 8, 11), (128, 16, 21),
]]


@criterion(4, "complexity: counted OPs match 8d^2, (2n+6)d^2, 4nd, 2nd(h+1) for 20 (d,h,n); exact intensities")
@pytest.mark.parametrize("d,h,n", COMBOS)
def test_table2_counts(d, h, n):
    w = generate_synthetic_model(ModelConfig(d=d, h=h, d_k=d // h, layers=1), d + h + n)[0]
    t = transform_layer(w, "kv")
    # prefill n-1 tokens so the decode step attends over exactly n cached rows
    x = make_rng(d, h, n).standard_normal((n, d))
    kv = att.vanilla_prompt(x[:-1], w, h)[1] if n > 1 else att.KVCache(d)
    kc1 = att.slim_prompt(x[:-1], t, h)[1] if n > 1 else att.KCache(d)
    kc2 = att.slim_prompt(x[:-1], t, h)[1] if n > 1 else att.KCache(d)
    van = att.vanilla_generate_step(x[-1], w, h, kv)
    uno = att.slim_generate_unoptimized(x[-1], t, h, kc1)
    opt = att.slim_generate_optimized(x[-1], t, h, kc2)

    expected = {
        "vanilla": (van, 8 * d * d, 4 * n * d),
        "unoptimized": (uno, (2 * n + 6) * d * d, 4 * n * d),
        "optimized": (opt, 8 * d * d, 2 * n * d * (h + 1)),
    }
    for name, (out, proj_f, mha_f) in expected.items():
        # counters use m*p*(2n-1) per matmul; the closed form uses 2mnp.
        # the gap is exactly one op per dot product.
        assert out.proj.ops + out.proj.dots == proj_f, name
        assert out.mha.ops + out.mha.dots == mha_f, name
        proj, mha = cm.generate_step_cost(name, d, h, n)
        assert (proj.ops, mha.ops) == (proj_f, mha_f)

    # reads: weights 4d^2 everywhere; cache 2nd (KV) or nd (K only)
    assert van.weight_reads == uno.weight_reads == opt.weight_reads == 4 * d * d
    assert van.cache_reads == 2 * n * d and uno.cache_reads == opt.cache_reads == n * d
    assert (8 * d * d) / van.weight_reads == 2
    assert (4 * n * d) / van.cache_reads == 2
    assert ((2 * n + 6) * d * d) / uno.weight_reads == (n + 3) / 2
    assert (4 * n * d) / uno.cache_reads == 4
    assert (2 * n * d * (h + 1)) / opt.cache_reads == 2 * h + 2


@criterion(5, "chip intensities 583, 93, 229, 332, 413, 563")
def test_table3():
    got = {c.name: cm.chip_intensity_display(c) for c in cm.CHIPS}
    print("\n  " + ", ".join(f"{k}={v}" for k, v in got.items()))
    assert got == CHIP_INTENSITY


@criterion(6, "cache sizes 4.3B, 25.8B, 34.4B, 6M within 0.05 of displayed units")
@pytest.mark.parametrize("d,layers,ctx,unit,shown", [
    (4096, 32, 16384, 1e9, 4.3),          # CodeLlama-7B
    (3072, 32, 131072, 1e9, 25.8),        # Phi-3-mini-128k
    (4096, 32, 131072, 1e9, 34.4),        # Evo-1-131k
    (384, 4, 1500 + 448, 1e6, 6.0),       # Whisper-tiny, encoder 1500 + decoder 448
])
def test_table1_spot_checks(d, layers, ctx, unit, shown):
    assert abs(cm.kv_cache_activations(d, layers, ctx) / unit - shown) <= 0.05


@criterion(7, "Whisper table: every cell, five sizes, batch 1 and 64, within 0.05, < 1 s")
def test_whisper_table():
    t0 = time.perf_counter()
    checked = 0
    for batch in (1, 64):
        want_all = {**WHISPER_COMMON, **WHISPER_BATCH[batch]}
        for idx, size in enumerate(WHISPER_SIZES):
            rows = {r.metric: r for r in cm.whisper_table(*cm.WHISPER_CONFIGS[size], batch=batch)}
            for metric, values in want_all.items():
                assert abs(rows[metric].value - values[idx]) <= 0.05 + 1e-12, (size, batch, metric)
                assert rows[metric].display == values[idx], (size, batch, metric)
                checked += 1
    elapsed = time.perf_counter() - t0
    print(f"\n  {checked} cells, {elapsed * 1000:.1f} ms")
    assert checked == 2 * 5 * 15
    assert elapsed < 1.0


@criterion(8, "Phi-3 speedups: 1.8x at batch 1, 2.0x at batch 16")
def test_phi3_speedups():
    params = 3.8e9
    kv = cm.kv_cache_activations(3072, 32, 131072)
    s1 = cm.memory_bound_speedup(params, kv, kv / 2, batch=1)
    s16 = cm.memory_bound_speedup(params, kv, kv / 2, batch=16)
    print(f"\n  batch 1: {s1:.3f}x, batch 16: {s16:.3f}x")
    assert abs(s1 - 1.8) <= 0.05
    assert abs(s16 - 2.0) <= 0.05


@criterion(9, "encoder-decoder: four policies agree within 1e-9; option-2 cross cache 0 B; hybrid reads one cross matrix")
def test_encdec_policies():
    t0 = time.perf_counter()
    worst = 0.0
    for seed, (d, h, layers, p) in enumerate([(32, 4, 1, 24), (32, 2, 2, 40), (48, 4, 3, 30), (64, 8, 4, 50)]):
        model = generate_encdec_model(d=d, h=h, layers=layers, d_ffn=2 * d, seed=seed, bias=seed % 2 == 1)
        rng = make_rng(77, seed)
        ecache = run_encoder(rng.standard_normal((p, d)), model)
        ys = rng.standard_normal((16, d))
        outs = {}
        for pol in CachePolicy:
            st = init_state(pol, model, ecache)
            outs[pol] = np.vstack([decode_step(pol, y, model, st) for y in ys])
            if pol is CachePolicy.OPTION2:
                assert st.cache_bytes()["cross"] == 0
            if pol is CachePolicy.HYBRID:
                mats = traffic_report(st).cross_matrices_per_layer
                assert [m for m in mats[0] if m not in ("Wq", "Wo")] == ["Wkv"]
                assert all(len(m) == 4 for m in mats[1:])
        for pol, y in outs.items():
            worst = max(worst, max_abs_diff(y, outs[CachePolicy.BASELINE]))
    elapsed = time.perf_counter() - t0
    print(f"\n  worst max-abs {worst:.2e}, {elapsed:.2f} s")
    assert worst < 1e-9
    assert elapsed < 20.0


@criterion(10, "RoPE round trip < 1e-12; folded biases < 1e-10; sparse sum exact at 0, op ratio 5 +/- 10% at S=0.8")
def test_rope_bias_sparsity_invariants():
    th = rope_thetas(64)
    rng = make_rng(10)
    for pos in (0, 1, 100, 4095):
        v = rng.standard_normal(256)
        assert max_abs_diff(rope_decode(rope_encode(v, pos, th), pos, th), v) < 1e-12

    w = generate_synthetic_model(ModelConfig(d=32, h=4, d_k=8, layers=1), 10, bias=True)[0]
    x = rng.standard_normal((20, 32))
    ref, _ = att.vanilla_prompt(x, w, 4)
    folded, _ = att.vanilla_prompt(x, fold_biases(w), 4)
    t = transform_layer(w, "kv", fold_bias=True)
    slim, _ = att.slim_prompt(x, t, 4)
    assert max_abs_diff(folded.y, ref.y) < 1e-10
    assert max_abs_diff(slim.y, ref.y) < 1e-10

    probs = rng.dirichlet(np.ones(50))
    rows = rng.standard_normal((50, 16))
    dense, skipped = att.sparse_weighted_sum(probs, rows, threshold=0.0)
    assert skipped == 0 and max_abs_diff(dense, (probs @ rows)[None, :]) < 1e-14

    n = 1000
    sparse_p = np.zeros(n)
    sparse_p[rng.permutation(n)[:200]] = rng.dirichlet(np.ones(200))   # S = 0.8
    rows = rng.standard_normal((n, 64))
    c_dense, c_sparse = OpCounter(), OpCounter()
    att.sparse_weighted_sum(np.full(n, 1 / n), rows, counter=c_dense)
    _, skipped = att.sparse_weighted_sum(sparse_p, rows, threshold=0.0, counter=c_sparse)
    ratio = c_dense.ops / c_sparse.ops
    print(f"\n  S = {skipped / n:.2f}, accumulation op ratio {ratio:.3f}")
    assert skipped == 800
    assert abs(ratio - 5) <= 0.5


def _run_cli(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


@criterion(11, "CLI: synth -> transform -> verify -> equivalence exits 0; cost-report CSVs byte-stable")
def test_cli_end_to_end(tmp_path, capsys):
    m, t = str(tmp_path / "m"), str(tmp_path / "t")
    assert _run_cli(["synth", "--d", "64", "--heads", "4", "--dk", "16", "--layers", "2", "--seed", "7",
                     "--out", m], capsys)[0] == 0
    assert _run_cli(["transform", "--model", m, "--mode", "kv", "--out", t], capsys)[0] == 0
    code, out = _run_cli(["verify", "--model", m, "--transformed", t], capsys)
    assert code == 0 and out.splitlines() == ["0 : True", "1 : True"]
    code, out = _run_cli(["equivalence", "--model", m, "--variants", "all", "--tokens", "32"], capsys)
    assert code == 0, out

    for argv in (["--preset", "chips"], ["--preset", "whisper", "--batch", "1"],
                 ["--preset", "whisper", "--batch", "64"]):
        first = _run_cli(["cost-report", *argv], capsys)
        second = _run_cli(["cost-report", *argv, "--out", str(tmp_path / "r.csv")], capsys)
        assert first[0] == second[0] == 0
        assert first[1].encode() == (tmp_path / "r.csv").read_bytes()
    rows = list(csv.reader(io.StringIO(_run_cli(["cost-report", "--preset", "chips"], capsys)[1])))
    assert [int(r[2]) for r in rows[1:]] == list(CHIP_INTENSITY.values())
