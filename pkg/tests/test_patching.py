from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stp.patching import MaskingMap, masked_count, normalize_targets, patchify, \
    sample_masking_map, sincos_posembed_2d, stack_maps, unpatchify


def decimal_round(ratio: str, n: int) -> int:
    return int((Decimal(ratio) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@pytest.mark.parametrize("ratio", ["0.5", "0.75", "0.9", "0.95"])
@pytest.mark.parametrize("n", [64, 196])
def test_masked_count_matches_exact_decimal_rounding(ratio, n):
    assert masked_count(n, float(ratio)) == decimal_round(ratio, n)


def test_masked_count_anchor_values():
    assert masked_count(196, 0.75) == 147
    assert masked_count(196, 0.95) == 186
    assert masked_count(64, 0.0) == 0
    assert masked_count(64, 1.0) == 64


def test_patch_layout_small_example():
    # 1 channel 4x4 image, p=2: token 1 is the top-right 2x2 block in row-major order
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    tok = patchify(img, 2).tokens
    np.testing.assert_array_equal(tok[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tok[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tok[3], [10, 11, 14, 15])


def test_patch_channel_order_is_innermost():
    img = np.stack([np.zeros((2, 2)), np.ones((2, 2))]).astype(np.float32)
    np.testing.assert_array_equal(patchify(img, 2).tokens[0], [0, 1, 0, 1, 0, 1, 0, 1])


def test_patchify_rejects_indivisible_sizes():
    with pytest.raises(ValueError, match=r"H=30.*W=32.*p=4"):
        patchify(np.zeros((3, 30, 32)), 4)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]),
       st.integers(0, 2 ** 31))
def test_unpatchify_inverts_patchify(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).normal(size=(2, c, gh * p, gw * p))
    pt = patchify(img, p)
    assert pt.tokens.shape == (2, gh * gw, p * p * c)
    np.testing.assert_array_equal(unpatchify(pt), img)


@given(st.integers(0, 2 ** 31), st.floats(0.01, 100))
def test_normalized_targets_are_standardized(seed, scale):
    t = np.random.default_rng(seed).normal(size=(5, 48)) * scale
    out = normalize_targets(t)
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)
    var = t.var(-1)
    np.testing.assert_allclose(out.var(-1), var / (var + 1e-6), rtol=1e-9)


def test_constant_patch_normalizes_to_zero():
    np.testing.assert_allclose(normalize_targets(np.full((1, 12), 0.7)), 0.0, atol=1e-9)


def test_sincos_layout_against_hand_formula():
    gh, gw, dim = 3, 5, 16
    pe = sincos_posembed_2d(gh, gw, dim)
    assert pe.shape == (15, 16)
    q = dim // 4
    omega = 1.0 / 10000 ** (np.arange(q) / q)
    r, c = 2, 3
    row = pe[r * gw + c]
    np.testing.assert_allclose(row[:q], np.sin(r * omega))
    np.testing.assert_allclose(row[q:2 * q], np.cos(r * omega))
    np.testing.assert_allclose(row[2 * q:3 * q], np.sin(c * omega))
    np.testing.assert_allclose(row[3 * q:], np.cos(c * omega))
    # origin: sines vanish, cosines are one
    np.testing.assert_array_equal(pe[0], np.tile(np.r_[np.zeros(q), np.ones(q)], 2))


def test_sincos_requires_dim_multiple_of_four():
    with pytest.raises(ValueError):
        sincos_posembed_2d(2, 2, 6)


@given(st.integers(1, 200), st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
def test_masking_map_partitions_tokens(n, ratio, seed):
    m = sample_masking_map(n, ratio, np.random.default_rng(seed))
    assert len(m.masked) == masked_count(n, ratio)
    joined = np.sort(np.concatenate([m.masked, m.visible]))
    np.testing.assert_array_equal(joined, np.arange(n))
    assert np.all(np.diff(m.masked) > 0) and np.all(np.diff(m.visible) > 0)


def test_masking_is_seeded_and_uniform():
    a = sample_masking_map(64, 0.75, np.random.default_rng(3))
    b = sample_masking_map(64, 0.75, np.random.default_rng(3))
    np.testing.assert_array_equal(a.masked, b.masked)
    rng = np.random.default_rng(0)
    hits = np.zeros(16)
    for _ in range(4000):
        hits[sample_masking_map(16, 0.25, rng).masked] += 1
    # each token is masked with probability 1/4
    np.testing.assert_allclose(hits / 4000, 0.25, atol=0.03)


def test_masking_ratio_bounds():
    with pytest.raises(ValueError):
        sample_masking_map(10, 1.5, np.random.default_rng(0))
    full = MaskingMap.empty(10)
    assert len(full.visible) == 10 and len(full.masked) == 0


def test_stack_maps_shapes():
    rng = np.random.default_rng(0)
    vis, msk = stack_maps([sample_masking_map(64, 0.9, rng) for _ in range(3)])
    assert vis.shape == (3, 6) and msk.shape == (3, 58)
