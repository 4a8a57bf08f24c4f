"""Layer tests: residual identity contracts, grouped independence, attention
against a naive per-position oracle, Adam hand calculations."""

import math

import numpy as np
import pytest

import qrcodec.tensor as T
from qrcodec.layers import (
    Adam, Conv2d, GroupedResBlocks, LayerNorm, MultiHeadAttention, ResBlock,
)
from qrcodec.tensor import ShapeError, Tape, Tensor, grad_check

RNG = np.random.default_rng(99)


class TestResBlock:
    def test_zero_weights_is_identity(self):
        blk = ResBlock(4, np.random.default_rng(0), "rb")
        for p in blk.parameters():
            p.data[...] = 0.0
        x = Tensor(RNG.normal(size=(2, 4, 5, 5)))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_matches_straight_line_reference(self):
        blk = ResBlock(3, np.random.default_rng(5), "rb")
        x = RNG.normal(size=(1, 3, 4, 4))
        got = blk(Tensor(x)).data
        h = T.conv2d(Tensor(x), blk.conv1.w, blk.conv1.b, padding=1).data
        h = np.where(h >= 0, h, 0.01 * h)
        h = T.conv2d(Tensor(h), blk.conv2.w, blk.conv2.b, padding=1).data
        np.testing.assert_allclose(got, x + h, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        blk = ResBlock(4, np.random.default_rng(0), "rb")
        with pytest.raises(ShapeError):
            blk(Tensor(np.zeros((1, 5, 4, 4))))

    def test_gradients(self):
        blk = ResBlock(3, np.random.default_rng(1), "rb")
        x = Tensor(RNG.normal(size=(1, 3, 3, 3)))
        err = grad_check(lambda *ps: T.mean(T.square(blk(x))),
                         blk.parameters())
        assert err <= 1e-4


class TestGroupedResBlocks:
    def test_channel_count_enforced(self):
        g = GroupedResBlocks(2, 3, np.random.default_rng(0), "g")
        with pytest.raises(ShapeError):
            g(Tensor(np.zeros((1, 7, 2, 2))))

    def test_groups_are_independent(self):
        g = GroupedResBlocks(2, 3, np.random.default_rng(2), "g")
        x = RNG.normal(size=(1, 6, 4, 4))
        base = g(Tensor(x)).data
        x2 = x.copy()
        x2[:, 3:] += 1.0  # perturb only group 2
        out2 = g(Tensor(x2)).data
        np.testing.assert_array_equal(out2[:, :3], base[:, :3])
        assert np.any(out2[:, 3:] != base[:, 3:])

    def test_equals_per_group_resblocks(self):
        g = GroupedResBlocks(3, 2, np.random.default_rng(3), "g")
        x = RNG.normal(size=(2, 6, 3, 3))
        got = g(Tensor(x)).data
        for i, blk in enumerate(g.blocks):
            part = blk(Tensor(x[:, 2 * i:2 * i + 2])).data
            np.testing.assert_array_equal(got[:, 2 * i:2 * i + 2], part)


def naive_attention(x, mha):
    """Independent per-position attention computation with plain loops."""
    n, c, h, w = x.shape
    s, hd = h * w, mha.head_dim
    gain = mha.norm.gain.data.reshape(c)
    bias = mha.norm.bias.data.reshape(c)
    out = np.zeros_like(x)
    for b in range(n):
        seq = np.zeros((s, c))
        for i in range(h):
            for j in range(w):
                v = x[b, :, i, j]
                mu, var = v.mean(), v.var()
                seq[i * w + j] = (v - mu) / np.sqrt(var + 1e-5) * gain + bias
        q, k, vv = seq @ mha.wq.data, seq @ mha.wk.data, seq @ mha.wv.data
        ctx = np.zeros((s, mha.heads * hd))
        for head in range(mha.heads):
            sl = slice(head * hd, (head + 1) * hd)
            for qi in range(s):
                scores = np.array([q[qi, sl] @ k[kj, sl] for kj in range(s)])
                scores /= math.sqrt(hd)
                e = np.exp(scores - scores.max())
                wgt = e / e.sum()
                ctx[qi, sl] = sum(wgt[kj] * vv[kj, sl] for kj in range(s))
        proj = ctx @ mha.wo.data
        for i in range(h):
            for j in range(w):
                out[b, :, i, j] = proj[i * w + j]
    return out


class TestMultiHeadAttention:
    def test_single_position_weight_is_one(self):
        mha = MultiHeadAttention(8, 2, 4, np.random.default_rng(4), "a")
        x = Tensor(RNG.normal(size=(1, 8, 1, 1)))
        out, attn = mha.forward(x)
        np.testing.assert_array_equal(attn.data, np.ones((2, 1, 1)))
        assert out.shape == x.shape

    def test_identical_positions_split_weight_evenly(self):
        mha = MultiHeadAttention(6, 2, 3, np.random.default_rng(6), "a")
        col = RNG.normal(size=(1, 6, 1, 1))
        x = Tensor(np.tile(col, (1, 1, 1, 2)))
        _, attn = mha.forward(x)
        np.testing.assert_allclose(attn.data, 0.5, atol=1e-12)

    def test_rows_sum_to_one(self):
        mha = MultiHeadAttention(8, 2, 4, np.random.default_rng(7), "a")
        _, attn = mha.forward(Tensor(RNG.normal(size=(2, 8, 3, 4))))
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_matches_naive_oracle(self):
        mha = MultiHeadAttention(32, 2, 16, np.random.default_rng(8), "a")
        x = RNG.normal(size=(1, 32, 3, 3))
        got = mha(Tensor(x)).data
        np.testing.assert_allclose(got, naive_attention(x, mha), atol=1e-10)

    def test_output_shape_preserved_nonsquare(self):
        mha = MultiHeadAttention(8, 2, 4, np.random.default_rng(9), "a")
        x = Tensor(RNG.normal(size=(3, 8, 2, 5)))
        assert mha(x).shape == (3, 8, 2, 5)

    def test_bad_config_rejected(self):
        with pytest.raises(ShapeError):
            MultiHeadAttention(8, 0, 4, np.random.default_rng(0), "a")

    def test_gradients(self):
        mha = MultiHeadAttention(4, 2, 2, np.random.default_rng(10), "a")
        x = Tensor(RNG.normal(size=(1, 4, 2, 2)))
        err = grad_check(lambda *ps: T.mean(T.square(mha(x))),
                         mha.parameters(), max_entries=12)
        assert err <= 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = T.parameter(np.array([1.0, -2.0]), "p")
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_calculation(self):
        p = T.parameter(np.array([0.0]), "p")
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        # bias-corrected first step moves by lr/(1 + eps)
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-8)

    def test_identical_grads_identical_updates(self):
        a = T.parameter(np.array([0.3]), "a")
        b = T.parameter(np.array([0.3]), "b")
        opt = Adam([a, b], lr=0.05)
        a.grad = np.array([0.7])
        b.grad = np.array([0.7])
        opt.step()
        np.testing.assert_array_equal(a.data, b.data)

    def test_nonfinite_gradient_aborts_with_name(self):
        p = T.parameter(np.array([0.0]), "enc.w")
        opt = Adam([p], lr=0.1)
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="enc.w"):
            opt.step()

    def test_state_roundtrip_resumes_identically(self):
        rng = np.random.default_rng(11)
        grads = rng.normal(size=(6, 3))

        def run(n_steps, p, opt):
            for i in range(n_steps):
                p.grad = grads[i].copy()
                opt.step()

        p1 = T.parameter(np.ones(3), "p")
        o1 = Adam([p1], lr=0.01)
        run(6, p1, o1)

        p2 = T.parameter(np.ones(3), "p")
        o2 = Adam([p2], lr=0.01)
        run(3, p2, o2)
        state, data = o2.state_dict(), p2.data.copy()
        p3 = T.parameter(data, "p")
        o3 = Adam([p3], lr=0.01)
        o3.load_state_dict(state)
        for i in range(3, 6):
            p3.grad = grads[i].copy()
            o3.step()
        np.testing.assert_array_equal(p3.data, p1.data)

    def test_moments_decay_toward_zero_on_zero_grads(self):
        p = T.parameter(np.array([1.0]), "p")
        opt = Adam([p], lr=0.0)
        p.grad = np.array([1.0])
        opt.step()
        m1 = abs(opt.m[0][0])
        p.grad = np.array([0.0])
        opt.step()
        assert abs(opt.m[0][0]) < m1


class TestConvLayers:
    def test_zero_init_conv_outputs_zero(self):
        conv = Conv2d(3, 5, 1, np.random.default_rng(0), "c", zero_init=True)
        y = conv(Tensor(RNG.normal(size=(2, 3, 4, 4))))
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))

    def test_weight_init_within_fan_in_bound(self):
        conv = Conv2d(4, 8, 3, np.random.default_rng(1), "c")
        bound = 1.0 / math.sqrt(4 * 9)
        assert np.all(np.abs(conv.w.data) <= bound)
        np.testing.assert_array_equal(conv.b.data, np.zeros(8))

    def test_layer_norm_affine_applies(self):
        ln = LayerNorm(4, "ln")
        ln.gain.data[...] = 2.0
        ln.bias.data[...] = 1.0
        x = Tensor(RNG.normal(size=(1, 4, 2, 2)))
        got = ln(x).data
        ref = T.layer_norm(x).data * 2.0 + 1.0
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_parameters_in_declaration_order(self):
        blk = ResBlock(2, np.random.default_rng(0), "rb")
        names = [p.name for p in blk.parameters()]
        assert names == ["rb.conv1.w", "rb.conv1.b", "rb.conv2.w", "rb.conv2.b"]
