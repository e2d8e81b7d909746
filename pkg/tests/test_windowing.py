import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swindr import tensor as T
from swindr.tensor import ShapeError, Tensor
from swindr.windowing import (
    MASK_NEG,
    WindowGrid,
    cyclic_shift,
    flops_msa,
    flops_report,
    flops_wmsa,
    global_attention,
    shift_attention_mask,
    shifted_window_attention,
    window_attention,
    window_partition,
    window_reverse,
)

from .oracles import forbidden_pairs_by_enumeration, region_restricted_attention


def numbered(H, W, C=1, B=1):
    return Tensor(np.arange(B * H * W * C, dtype=np.float64).reshape(B, H, W, C))


def attn_params(C, rng, bias=True):
    p = {f"W{k}": rng.normal(size=(C, C)) / np.sqrt(C) for k in "qkvo"}
    if bias:
        p.update({f"b{k}": rng.normal(size=C) * 0.1 for k in "qkvo"})
    return p


def as_tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


class TestPartition:
    def test_four_by_four_enumeration(self):
        w = window_partition(numbered(4, 4), 2).data[..., 0]
        np.testing.assert_array_equal(w, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])

    def test_single_window_is_row_major(self):
        w = window_partition(numbered(3, 3), 3).data[..., 0]
        np.testing.assert_array_equal(w, [np.arange(9)])

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            window_partition(numbered(5, 4), 2)

    def test_reverse_of_enumeration(self):
        w = Tensor(np.array([[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]], float)[..., None])
        np.testing.assert_array_equal(window_reverse(w, 2, 4, 4).data, numbered(4, 4).data)

    def test_reverse_single_window(self):
        x = numbered(3, 3, C=2)
        np.testing.assert_array_equal(window_reverse(window_partition(x, 3), 3, 3, 3).data, x.data)

    def test_reverse_inconsistent_count(self):
        with pytest.raises(ShapeError):
            window_reverse(Tensor(np.zeros((3, 4, 1))), 2, 4, 4)

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    def test_round_trip(self, B, a, b, M, C):
        x = Tensor(np.random.default_rng(a * 100 + b).normal(size=(B, a * M, b * M, C)))
        y = window_reverse(window_partition(x, M), M, a * M, b * M)
        np.testing.assert_array_equal(y.data, x.data)

    def test_partition_backward_is_inverse(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 6, 2)), requires_grad=True)
        g_out = np.random.default_rng(1).normal(size=(6, 4, 2))
        with T.Tape() as tape:
            loss = T.sum(T.mul(window_partition(x, 2), Tensor(g_out)))
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_array_equal(g, window_reverse(Tensor(g_out), 2, 4, 6).data)


class TestCyclicShift:
    def test_two_by_two_example(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, ..., None])
        np.testing.assert_array_equal(cyclic_shift(x, -1, -1).data[0, ..., 0], [[4, 3], [2, 1]])

    def test_zero_and_full_period_are_identity(self):
        x = numbered(3, 5)
        np.testing.assert_array_equal(cyclic_shift(x, 0, 0).data, x.data)
        np.testing.assert_array_equal(cyclic_shift(x, 3, 5).data, x.data)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(-20, 20), st.integers(-20, 20))
    def test_definition_inverse_and_multiset(self, H, W, dy, dx):
        x = numbered(H, W)
        y = cyclic_shift(x, dy, dx).data
        for i in range(H):
            for j in range(W):
                assert y[0, i, j, 0] == x.data[0, (i - dy) % H, (j - dx) % W, 0]
        np.testing.assert_array_equal(cyclic_shift(Tensor(y), -dy, -dx).data, x.data)
        np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.data.ravel()))


def forbidden_counts(mask):
    return [int((m == MASK_NEG).sum()) for m in mask]


class TestShiftMask:
    def test_zero_shift_all_zero(self):
        mask = shift_attention_mask(WindowGrid(8, 8, 4, 0))
        assert mask.shape == (4, 16, 16) and not mask.any()

    def test_four_by_four_shift_one(self):
        mask = shift_attention_mask(WindowGrid(4, 4, 2, 1))
        counts = forbidden_counts(mask)
        assert counts == forbidden_pairs_by_enumeration(4, 4, 2, 1)
        # window 0 is interior to the shifted layout; the others touch the wrap
        assert counts[0] == 0 and all(c > 0 for c in counts[1:])

    @pytest.mark.parametrize("M,s", [(2, 1), (3, 1), (3, 2), (4, 2), (4, 3)])
    def test_single_window_matches_enumeration(self, M, s):
        assert forbidden_counts(shift_attention_mask(WindowGrid(M, M, M, s))) == \
            forbidden_pairs_by_enumeration(M, M, M, s)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.data())
    def test_random_grids_match_enumeration(self, a, b, M, data):
        s = data.draw(st.integers(0, M - 1))
        mask = shift_attention_mask(WindowGrid(a * M, b * M, M, s))
        assert forbidden_counts(mask) == forbidden_pairs_by_enumeration(a * M, b * M, M, s)

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.data())
    def test_symmetric_and_binary(self, H, W, M, data):
        s = data.draw(st.integers(0, M - 1))
        mask = shift_attention_mask(WindowGrid(H, W, M, s))
        assert set(np.unique(mask)) <= {0.0, MASK_NEG}
        if (H % M, W % M) == (0, 0):
            np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))

    def test_invalid_shift(self):
        with pytest.raises(ValueError):
            WindowGrid(4, 4, 2, 2)


class TestWindowAttention:
    def test_single_token_windows(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 1, 4))
        p = attn_params(4, rng, bias=False)
        out, w = window_attention(Tensor(x), as_tensors(p), heads=2, return_weights=True)
        np.testing.assert_allclose(w.data, 1.0)
        np.testing.assert_allclose(out.data, x @ p["Wv"] @ p["Wo"], rtol=1e-12)

    def test_diagonal_mask_attends_to_self(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 6))
        p = attn_params(6, rng)
        mask = np.where(np.eye(4, dtype=bool), 0.0, MASK_NEG)[None].repeat(2, axis=0)
        out, w = window_attention(Tensor(x), as_tensors(p), heads=3, mask=mask, return_weights=True)
        direct = (x @ p["Wv"] + p["bv"]) @ p["Wo"] + p["bo"]
        np.testing.assert_allclose(out.data, direct, rtol=1e-12, atol=1e-12)
        assert w.data[:, :, ~np.eye(4, dtype=bool)].max() < 1e-30

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        _, w = window_attention(Tensor(rng.normal(size=(3, 9, 8))), as_tensors(attn_params(8, rng)), 2,
                                return_weights=True)
        assert np.abs(w.data.sum(-1) - 1).max() < 1e-6

    def test_heads_must_divide(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ShapeError):
            window_attention(Tensor(rng.normal(size=(1, 4, 6))), as_tensors(attn_params(6, rng)), heads=4)

    def test_mask_shape_checked(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ShapeError):
            window_attention(Tensor(rng.normal(size=(2, 4, 6))), as_tensors(attn_params(6, rng)), 2,
                             mask=np.zeros((2, 3, 3)))


class TestGlobalAttention:
    @pytest.mark.parametrize("B,H,W,heads,chunk", [(1, 4, 4, 2, 1024), (2, 3, 5, 1, 4), (1, 6, 6, 3, 7)])
    def test_matches_one_window_over_the_map(self, B, H, W, heads, chunk):
        rng = np.random.default_rng(H * W)
        x = rng.normal(size=(B, H, W, 6))
        p = as_tensors(attn_params(6, rng))
        whole = window_attention(Tensor(x.reshape(B, H * W, 6)), p, heads).data.reshape(B, H, W, 6)
        np.testing.assert_allclose(global_attention(Tensor(x), p, heads, chunk).data, whole, rtol=1e-12, atol=1e-13)

    def test_matches_window_attention_when_M_covers_map(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        p = as_tensors(attn_params(4, rng, bias=False))
        np.testing.assert_allclose(global_attention(x, p, 2).data,
                                   shifted_window_attention(x, p, 2, 4, 0).data, rtol=1e-12, atol=1e-13)


class TestShiftedWindowEquivalence:
    @pytest.mark.parametrize("H,W,M,s", [(4, 4, 2, 1), (8, 8, 4, 2), (6, 9, 3, 1), (8, 4, 4, 3), (5, 7, 3, 1),
                                         (4, 4, 4, 2)])
    def test_matches_region_restricted_reference(self, H, W, M, s):
        rng = np.random.default_rng(H * 31 + W * 7 + M + s)
        C, heads = 4, 2
        x = rng.normal(size=(H, W, C))
        p = attn_params(C, rng)
        got = shifted_window_attention(Tensor(x[None]), as_tensors(p), heads, M, s).data[0]
        ref = region_restricted_attention(x, p, heads, M, s)
        assert np.abs(got - ref).max() < 1e-10

    def test_unshifted_matches_reference(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 6, 4))
        p = attn_params(4, rng)
        got = shifted_window_attention(Tensor(x[None]), as_tensors(p), 2, 3, 0).data[0]
        assert np.abs(got - region_restricted_attention(x, p, 2, 3, 0)).max() < 1e-10

    def test_batch_members_independent(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 4, 4, 4))
        p = as_tensors(attn_params(4, rng))
        full = shifted_window_attention(Tensor(x), p, 2, 2, 1).data
        for b in range(3):
            one = shifted_window_attention(Tensor(x[b : b + 1]), p, 2, 2, 1).data
            np.testing.assert_allclose(full[b : b + 1], one, rtol=1e-13, atol=1e-13)


class TestFlops:
    def test_msa_reference_value(self):
        assert 4 * 56 * 56 * 96**2 == 115_605_504
        assert 2 * (56 * 56) ** 2 * 96 == 1_888_223_232
        assert flops_msa(56, 56, 96) == 2_003_828_736

    def test_wmsa_reference_value(self):
        assert 2 * 7**2 * 56 * 56 * 96 == 29_503_488
        assert flops_wmsa(56, 56, 96, 7) == 145_108_992

    def test_unit_cases(self):
        assert flops_msa(1, 1, 1) == 6
        assert flops_wmsa(1, 1, 1, 1) == 6

    def test_single_window_coincides(self):
        assert flops_wmsa(8, 8, 32, 8) == flops_msa(8, 8, 32)

    def test_quadratic_term_quadruples(self):
        C = 32
        quad = lambda hw: flops_msa(hw, 1, C) - 4 * hw * C * C  # noqa: E731
        assert quad(200) == 4 * quad(100)

    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 128), st.integers(1, 8))
    def test_wmsa_linear_in_hw(self, h, w, C, M):
        if M * M > h * w:
            return
        one, two = flops_wmsa(h, w, C, M), flops_wmsa(2 * h, w, C, M)
        assert two - one == one  # no hw-independent term
        assert one <= flops_msa(h, w, C)

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, -1, 1), (1, 1, 0), (1.5, 1, 1)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            flops_msa(*args)
        with pytest.raises(ValueError):
            flops_wmsa(*args, 1)

    def test_window_larger_than_map(self):
        with pytest.raises(ValueError):
            flops_wmsa(2, 2, 8, 3)

    def test_report(self):
        r = flops_report(56, 56, 96, 7)
        assert (r.msa_flops, r.wmsa_flops, r.h, r.M) == (2_003_828_736, 145_108_992, 56, 7)
