import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a3fpn.engine import ConvParams, Tensor, conv2d, gelu
from a3fpn.errors import ConfigurationError, UsageError
from a3fpn.fusion import (
    ContextWeightParams,
    ContextWeights,
    RepBlockParams,
    RepConvParams,
    fuse,
    fuse_rep_block,
    fuse_rep_conv,
    generate_context_weights,
    rep_block_forward,
    rep_conv_forward,
)
from a3fpn.gradcheck import op_gradient_check
from oracles import conv_loops


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def conv(rng, cout, cin, k, scale=0.3, **kw):
    return ConvParams(T(rng.standard_normal((cout, cin, k, k)) * scale), T(rng.standard_normal(cout) * 0.1), **kw)


def rep_conv(rng, c):
    return RepConvParams(conv(rng, c, c, 3, padding=1), conv(rng, c, c, 1))


class TestRepConv:
    def test_train_form_oracle(self, rng):
        h = rng.standard_normal((1, 3, 5, 5))
        p = rep_conv(rng, 3)
        want = conv_loops(h, p.conv3.weight.data, p.conv3.bias.data, pad=1)
        want += conv_loops(h, p.conv1.weight.data, p.conv1.bias.data) + h
        np.testing.assert_allclose(rep_conv_forward(T(h), p).data, gelu(T(want)).data, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(3, 7), st.integers(0, 2**31 - 1))
    def test_fused_equals_train_form(self, c, size, seed):
        rng = np.random.default_rng(seed)
        h = T(rng.standard_normal((2, c, size, size)))
        p = rep_conv(rng, c)
        np.testing.assert_allclose(rep_conv_forward(h, fuse_rep_conv(p)).data, rep_conv_forward(h, p).data,
                                   atol=1e-12)

    def test_fold_is_idempotent(self, rng):
        folded = fuse_rep_conv(rep_conv(rng, 2))
        assert fuse_rep_conv(folded) is folded

    def test_fold_needs_square(self, rng):
        p = RepConvParams(conv(rng, 3, 2, 3, padding=1), conv(rng, 3, 2, 1))
        with pytest.raises(ConfigurationError):
            fuse_rep_conv(p)
        with pytest.raises(ConfigurationError):
            rep_conv_forward(T(np.zeros((1, 2, 3, 3))), p)

    def test_block_residual_and_fold(self, rng):
        x = T(rng.standard_normal((1, 4, 5, 5)))
        p = RepBlockParams(conv(rng, 6, 4, 1), rep_conv(rng, 6), conv(rng, 4, 6, 1))
        inner = conv2d(rep_conv_forward(gelu(conv2d(x, p.expand)), p.rep), p.reduce)
        np.testing.assert_allclose(rep_block_forward(x, p).data, x.data + inner.data, atol=1e-14)
        np.testing.assert_allclose(rep_block_forward(x, fuse_rep_block(p)).data, rep_block_forward(x, p).data,
                                   atol=1e-12)

    def test_block_gradients(self, rng):
        p = RepBlockParams(conv(rng, 4, 2, 1), rep_conv(rng, 4), conv(rng, 2, 4, 1))
        x = rng.standard_normal((1, 2, 4, 4))

        def f(x, w3):
            rep = RepConvParams(ConvParams(w3, p.rep.conv3.bias, padding=1), p.rep.conv1)
            return rep_block_forward(x, RepBlockParams(p.expand, rep, p.reduce))

        assert max(op_gradient_check(f, [x, p.rep.conv3.weight.data])) < 1e-6


def cwg_params(rng, c, count, cc=2, hidden=4, blocks=1, scale=0.3):
    cat = count * cc
    return ContextWeightParams(
        tuple(conv(rng, cc, c, 1, scale) for _ in range(count)),
        tuple(RepBlockParams(conv(rng, hidden, cat, 1, scale), rep_conv(rng, hidden), conv(rng, cat, hidden, 1, scale))
              for _ in range(blocks)),
        conv(rng, count, cat, 1, scale),
        conv(rng, count, cat, 1, scale),
    )


class TestContextWeights:
    def test_open_unit_interval(self, rng):
        levels = [T(rng.standard_normal((2, 4, 6, 6))) for _ in range(3)]
        w = generate_context_weights(levels, cwg_params(rng, 4, 3))
        assert w.maps.shape == (2, 3, 6, 6)
        assert np.all((w.maps.data > 0) & (w.maps.data < 1))

    def test_zero_logits_give_half(self, rng):
        p = cwg_params(rng, 4, 2)
        zero = ConvParams(T(np.zeros_like(p.upper.weight.data)), T(np.zeros(2)))
        p = ContextWeightParams(p.squeeze, p.blocks, zero, zero)
        levels = [T(rng.standard_normal((1, 4, 3, 3))) for _ in range(2)]
        np.testing.assert_array_equal(generate_context_weights(levels, p).maps.data, 0.5)

    def test_manual_composition(self, rng):
        levels = [rng.standard_normal((1, 3, 4, 4)) for _ in range(2)]
        p = cwg_params(rng, 3, 2, blocks=2)
        cat = np.concatenate([gelu(T(conv_loops(x, s.weight.data, s.bias.data))).data
                              for x, s in zip(levels, p.squeeze)], axis=1)
        lower = T(cat)
        for blk in p.blocks:
            lower = rep_block_forward(lower, blk)
        logits = conv_loops(lower.data, p.lower_proj.weight.data, p.lower_proj.bias.data)
        logits += conv_loops(cat, p.upper.weight.data, p.upper.bias.data)
        got = generate_context_weights([T(x) for x in levels], p).maps.data
        np.testing.assert_allclose(got, 1 / (1 + np.exp(-logits)), atol=1e-12)

    def test_level_count_checked(self, rng):
        with pytest.raises(ConfigurationError):
            generate_context_weights([T(np.zeros((1, 4, 3, 3)))] * 3, cwg_params(rng, 4, 2))


class TestFuse:
    def test_per_pixel_oracle(self, rng):
        xs = [rng.standard_normal((2, 3, 4, 5)) for _ in range(3)]
        w = rng.uniform(0, 1, size=(2, 3, 4, 5))
        got = fuse([T(x) for x in xs], ContextWeights(T(w))).data
        for n in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(5):
                        want = sum(w[n, k, i, j] * xs[k][n, c, i, j] for k in range(3))
                        assert got[n, c, i, j] == pytest.approx(want, abs=1e-12)

    def test_gradients(self, rng):
        xs = [rng.standard_normal((1, 2, 3, 3)) for _ in range(2)]
        w = rng.uniform(0, 1, size=(1, 2, 3, 3))
        assert max(op_gradient_check(lambda a, b, m: fuse([a, b], ContextWeights(m)), xs + [w])) < 1e-6

    def test_shape_checks(self):
        w = ContextWeights(T(np.ones((1, 2, 3, 3))))
        with pytest.raises(UsageError):
            fuse([T(np.zeros((1, 2, 3, 3)))], w)
        with pytest.raises(UsageError):
            fuse([T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 3, 3, 3)))], w)
