import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvslim import attention as att
from kvslim.linalg import make_rng, max_abs_diff
from kvslim.model import ModelConfig, generate_synthetic_model
from kvslim.rope import (
    RopeTable,
    rope_decode,
    rope_encode,
    rope_thetas,
    slim_generate_rope_option1,
    slim_generate_rope_option2,
)
from kvslim.transform import transform_layer


def test_thetas():
    th = rope_thetas(4)
    assert np.allclose(th, [1.0, 0.01])
    with pytest.raises(ValueError):
        rope_thetas(15)


def test_position_zero_is_identity():
    v = np.arange(8.0)
    assert np.array_equal(rope_encode(v, 0, rope_thetas(8)), v)


def test_pair_convention():
    # first pair rotates with theta_0 = 1: y1 = x1 cos + x2 sin, y2 = -x1 sin + x2 cos
    th = rope_thetas(2)
    y = rope_encode(np.array([1.0, 0.0]), 1, th)
    assert np.allclose(y, [np.cos(1.0), -np.sin(1.0)])
    y = rope_encode(np.array([0.0, 1.0]), 1, th)
    assert np.allclose(y, [np.sin(1.0), np.cos(1.0)])


def test_encode_applies_per_head():
    th = rope_thetas(4)
    v = make_rng(0).standard_normal(12)
    y = rope_encode(v, 5, th)
    for h in range(3):
        assert np.allclose(y[4 * h:4 * h + 4], rope_encode(v[4 * h:4 * h + 4], 5, th))


def test_norm_preserved():
    v = make_rng(1).standard_normal(16)
    assert np.isclose(np.linalg.norm(rope_encode(v, 123, rope_thetas(16))), np.linalg.norm(v))


def test_relative_position_property():
    # <enc(q, m), enc(k, n)> depends only on m - n
    th = rope_thetas(8)
    q, k = make_rng(2).standard_normal((2, 8))
    a = rope_encode(q, 10, th) @ rope_encode(k, 7, th)
    b = rope_encode(q, 103, th) @ rope_encode(k, 100, th)
    assert np.isclose(a, b)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([2, 4, 8, 64]), st.integers(0, 4095), st.integers(0, 9999))
def test_round_trip(d_k, pos, seed):
    v = make_rng(seed).standard_normal(2 * d_k)
    th = rope_thetas(d_k)
    assert max_abs_diff(rope_decode(rope_encode(v, pos, th), pos, th), v) < 1e-12


def test_table_matches_direct_and_is_read_only():
    table = RopeTable(8, 64)
    rows = make_rng(3).standard_normal((5, 16))
    pos = np.array([0, 3, 9, 20, 63])
    enc = table.encode(rows, pos)
    for i, p in enumerate(pos):
        assert np.allclose(enc[i], rope_encode(rows[i], p, table.thetas))
    assert max_abs_diff(table.decode(enc, pos), rows) < 1e-12
    with pytest.raises(ValueError):
        table.cos[0, 0] = 2.0


def test_table_bounds():
    table = RopeTable(8, 16)
    with pytest.raises(IndexError):
        table.encode(np.ones((1, 8)), [16])


def _rope_setup(d=32, h=4, n=14, seed=0, bias=False):
    w = generate_synthetic_model(ModelConfig(d=d, h=h, d_k=d // h, layers=1), seed, bias=bias)[0]
    x = make_rng(seed, 5).standard_normal((n, d))
    return w, transform_layer(w, "kv"), x, RopeTable(d // h, 64)


def _vanilla_rows(w, x, h, rope, n_prompt):
    out, cache = att.vanilla_prompt(x[:n_prompt], w, h, rope=rope)
    return np.vstack([out.y] + [att.vanilla_generate_step(x[i], w, h, cache, rope=rope).y
                                for i in range(n_prompt, len(x))])


@pytest.mark.parametrize("bias", [False, True])
def test_both_rope_options_match_vanilla(bias):
    w, t, x, rope = _rope_setup(bias=bias)
    ref = _vanilla_rows(w, x, 4, rope, 4)
    out, raw = att.slim_prompt(x[:4], t, 4, rope=rope)
    o1 = [out.y] + [slim_generate_rope_option1(x[i], t, 4, raw, rope).y for i in range(4, len(x))]
    out, enc = att.slim_prompt(x[:4], t, 4, rope=rope, cache_mode="encoded")
    o2 = [out.y] + [slim_generate_rope_option2(x[i], t, 4, enc, rope).y for i in range(4, len(x))]
    assert max_abs_diff(np.vstack(o1), ref) < 1e-9
    assert max_abs_diff(np.vstack(o2), ref) < 1e-9


def test_option1_rotates_every_key_each_step():
    w, t, x, rope = _rope_setup()
    _, raw = att.slim_prompt(x[:9], t, 4, rope=rope)
    out = slim_generate_rope_option1(x[9], t, 4, raw, rope)
    assert out.key_rotations == 10


def test_option2_decodes_only_needed_rows():
    w, t, x, rope = _rope_setup()
    _, enc = att.slim_prompt(x[:9], t, 4, rope=rope, cache_mode="encoded")
    dense = slim_generate_rope_option2(x[9], t, 4, enc, rope)
    assert dense.decoded == 10 and dense.skipped == 0
    _, enc = att.slim_prompt(x[:9], t, 4, rope=rope, cache_mode="encoded")
    sparse = slim_generate_rope_option2(x[9], t, 4, enc, rope, threshold=0.2)
    keep = (sparse.probs >= 0.2).any(axis=0)
    assert sparse.decoded == keep.sum() and sparse.skipped == 10 - keep.sum()
    assert sparse.decoded < 10


def test_cache_mode_mismatch_rejected():
    w, t, x, rope = _rope_setup()
    _, raw = att.slim_prompt(x[:4], t, 4, rope=rope)
    with pytest.raises(ValueError):
        slim_generate_rope_option2(x[4], t, 4, raw, rope)
    _, enc = att.slim_prompt(x[:4], t, 4, rope=rope, cache_mode="encoded")
    with pytest.raises(ValueError):
        slim_generate_rope_option1(x[4], t, 4, enc, rope)


def test_table_head_dim_checked():
    w, t, x, _ = _rope_setup()
    _, raw = att.slim_prompt(x[:4], t, 4)
    with pytest.raises(ValueError):
        slim_generate_rope_option1(x[4], t, 4, raw, RopeTable(4, 64))
