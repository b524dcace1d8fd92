import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a3fpn.engine import (
    GELU_A,
    GELU_C,
    ConvParams,
    Tape,
    Tensor,
    add,
    bilinear_resize,
    bilinear_sample,
    branch_probe,
    clamp_above,
    clamp_below,
    concat_channels,
    conv2d,
    deform_conv2d,
    depthwise_conv2d,
    finalize_offsets,
    flip_channels,
    from_bytes,
    gelu,
    grad,
    group_norm,
    hadamard,
    layer_norm,
    load_a3t,
    nearest_resize,
    normalize_sum,
    reshape,
    save_a3t,
    scale,
    sigmoid,
    slice_channels,
    split_channels,
    sum_all,
    to_bytes,
)
from a3fpn.errors import ComputationError, ConfigurationError, UsageError
from a3fpn.gradcheck import jvp_check, op_gradient_check, relative_error
from oracles import bilinear_at, conv_loops, deform_loops, resize_loops, two_pass_norm

GRAD_TOL = 1e-6


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ------------------------------------------------------------------ tensor


class TestTensor:
    def test_rank_limits(self):
        with pytest.raises(ConfigurationError):
            Tensor(np.float32(1.0))
        with pytest.raises(ConfigurationError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))
        with pytest.raises(ConfigurationError):
            Tensor(np.zeros((2, 0)))

    def test_dtype_default_and_float64(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_data_is_read_only(self):
        t = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_source_array_not_aliased(self):
        a = np.zeros(3, dtype=np.float32)
        t = Tensor(a)
        a[0] = 5.0
        assert t.data[0] == 0.0


class TestTape:
    def test_backward_is_single_use(self):
        x = T(np.ones((1, 2, 2, 2)))
        with Tape() as tape:
            tape.watch(x)
            y = sum_all(gelu(x))
        tape.backward(y)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_recording_after_backward_rejected(self):
        x = T(np.ones(3))
        with Tape() as tape:
            tape.watch(x)
            y = sum_all(x)
            tape.backward(y)
            with pytest.raises(UsageError):
                scale(x, 2.0)

    def test_ops_in_execution_order(self):
        x = T(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            tape.watch(x)
            sum_all(sigmoid(gelu(x)))
        assert tape.ops == ["gelu", "sigmoid", "sum"]

    def test_reused_tensor_accumulates(self):
        x = T([1.0, 2.0, 3.0])
        _, (g,) = grad(lambda a: sum_all(hadamard(a, a)), x)
        np.testing.assert_allclose(g, 2 * x.data)

    def test_untracked_tensor_gets_zero_gradient(self):
        x, y = T([1.0, 2.0]), T([3.0, 4.0])
        with Tape() as tape:
            tape.watch(x)
            out = sum_all(hadamard(x, y))
        g = tape.backward(out)
        np.testing.assert_array_equal(g[y], 0.0)
        np.testing.assert_array_equal(g[x], y.data)

    def test_no_tape_no_recording(self):
        x = T([1.0])
        assert sum_all(x).data[0] == 1.0

    def test_tapes_are_thread_local(self):
        seen = []
        x = T([1.0, 2.0])
        with Tape() as tape:
            tape.watch(x)

            def other():
                sum_all(x)
                seen.append(True)

            th = threading.Thread(target=other)
            th.start()
            th.join()
        assert seen and len(tape) == 0

    def test_seed_shape_checked(self):
        x = T([1.0, 2.0])
        with Tape() as tape:
            tape.watch(x)
            y = scale(x, 3.0)
        with pytest.raises(UsageError):
            tape.backward(y, np.ones(3))


# ------------------------------------------------------------- convolution


CONV_CASES = [
    dict(c=3, cout=4, k=3, stride=1, pad=1, groups=1),
    dict(c=4, cout=6, k=3, stride=2, pad=1, groups=2),
    dict(c=2, cout=2, k=5, stride=4, pad=2, groups=1),
    dict(c=4, cout=4, k=3, stride=1, pad=1, groups=4),
    dict(c=3, cout=5, k=1, stride=1, pad=0, groups=1),
]


class TestConv:
    @pytest.mark.parametrize("case", CONV_CASES)
    def test_matches_loop_oracle(self, rng, case):
        x = rng.standard_normal((2, case["c"], 9, 8))
        w = rng.standard_normal((case["cout"], case["c"] // case["groups"], case["k"], case["k"]))
        b = rng.standard_normal(case["cout"])
        p = ConvParams(T(w), T(b), case["stride"], case["pad"], case["groups"])
        got = conv2d(T(x), p).data
        want = conv_loops(x, w, b, case["stride"], case["pad"], case["groups"])
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("case", CONV_CASES[:3])
    def test_gradients(self, rng, case):
        x = rng.standard_normal((2, case["c"], 6, 5))
        w = rng.standard_normal((case["cout"], case["c"] // case["groups"], case["k"], case["k"]))
        b = rng.standard_normal(case["cout"])

        def f(x, w, b):
            return conv2d(x, ConvParams(w, b, case["stride"], case["pad"], case["groups"]))

        assert max(op_gradient_check(f, [x, w, b])) < GRAD_TOL
        assert jvp_check(f, [x, w, b], eps=1e-5) < GRAD_TOL

    def test_linear_in_input(self, rng):
        p = ConvParams(T(rng.standard_normal((3, 2, 3, 3))), None, padding=1)
        a, b = rng.standard_normal((2, 1, 2, 5, 5))
        lhs = conv2d(T(2.0 * a - 3.0 * b), p).data
        rhs = 2.0 * conv2d(T(a), p).data - 3.0 * conv2d(T(b), p).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_channel_mismatch(self, rng):
        p = ConvParams(T(rng.standard_normal((3, 2, 1, 1))))
        with pytest.raises(ConfigurationError):
            conv2d(T(np.zeros((1, 3, 4, 4))), p)

    def test_kernel_larger_than_input(self):
        p = ConvParams(T(np.zeros((1, 1, 5, 5))))
        with pytest.raises(ConfigurationError):
            conv2d(T(np.zeros((1, 1, 3, 3))), p)

    def test_depthwise_requires_groups_equal_channels(self):
        p = ConvParams(T(np.zeros((4, 1, 3, 3))), groups=2)
        with pytest.raises(ConfigurationError):
            depthwise_conv2d(T(np.zeros((1, 4, 5, 5))), p)

    def test_bad_params(self):
        with pytest.raises(ConfigurationError):
            ConvParams(T(np.zeros((3, 1, 3))))
        with pytest.raises(ConfigurationError):
            ConvParams(T(np.zeros((3, 1, 3, 3))), groups=2)
        with pytest.raises(ConfigurationError):
            ConvParams(T(np.zeros((2, 1, 3, 3))), T(np.zeros(3)))


# ----------------------------------------------------------- interpolation


class TestResize:
    @pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((2, 3), (8, 12)), ((5, 5), (7, 9))])
    def test_bilinear_matches_formula(self, rng, src, dst):
        x = rng.standard_normal((1, 2) + src)
        np.testing.assert_allclose(bilinear_resize(T(x), *dst).data, resize_loops(x, *dst), atol=1e-12)

    def test_nearest_replicates(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        got = nearest_resize(T(x), 4, 4).data[0, 0]
        np.testing.assert_array_equal(got, np.kron(x[0, 0], np.ones((2, 2))))

    def test_constant_preserved(self):
        x = np.full((1, 1, 3, 3), 2.5)
        np.testing.assert_allclose(bilinear_resize(T(x), 12, 12).data, 2.5)

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        assert max(op_gradient_check(lambda a: bilinear_resize(a, 6, 8), [x])) < GRAD_TOL
        assert max(op_gradient_check(lambda a: nearest_resize(a, 6, 8), [x])) < GRAD_TOL

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            bilinear_resize(T(np.zeros((1, 1, 2, 2))), 4, 4, mode="bicubic")


class TestBilinearSample:
    def test_matches_formula(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        coords = rng.uniform(-1.5, 6.5, size=(2, 4, 3, 2))
        got = bilinear_sample(T(x), T(coords)).data
        for i in range(2):
            for c in range(3):
                for a in range(4):
                    for b in range(3):
                        want = bilinear_at(x[i, c], *coords[i, a, b])
                        assert got[i, c, a, b] == pytest.approx(want, abs=1e-12)

    def test_integer_points_read_exactly(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        yy, xx = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
        coords = np.stack([yy, xx], axis=-1)[None]
        np.testing.assert_array_equal(bilinear_sample(T(x), T(coords)).data, x)

    def test_far_outside_is_zero(self):
        x = np.ones((1, 1, 3, 3))
        coords = np.array([[[[-5.0, 1.0], [1.0, 9.0]]]])
        np.testing.assert_array_equal(bilinear_sample(T(x), T(coords)).data, 0.0)

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        coords = rng.uniform(-0.8, 3.8, size=(1, 3, 3, 2))
        assert max(op_gradient_check(bilinear_sample, [x, coords], eps=1e-5)) < GRAD_TOL

    def test_non_finite_coordinate(self):
        coords = np.array([[[[np.nan, 0.0]]]])
        with pytest.raises(ComputationError):
            bilinear_sample(T(np.ones((1, 1, 2, 2))), T(coords))

    def test_probe_records_cells(self):
        coords = np.array([[[[0.5, 1.5]]]])
        with branch_probe() as log:
            bilinear_sample(T(np.ones((1, 1, 3, 3))), T(coords))
        assert log[0][0] == "bilinear_sample"
        np.testing.assert_array_equal(log[0][1], [[[0], [1]]])


class TestDeformConv:
    @pytest.mark.parametrize("groups,k", [(1, 3), (2, 3), (2, 1)])
    def test_matches_loop_oracle(self, rng, groups, k):
        c, cout = 4, 4
        x = rng.standard_normal((1, c, 5, 5))
        off = rng.normal(0, 1.2, size=(1, groups * k * k * 3, 5, 5))
        w = rng.standard_normal((cout, c // groups, k, k))
        b = rng.standard_normal(cout)
        got = deform_conv2d(T(x), T(off), T(w), T(b), groups).data
        np.testing.assert_allclose(got, deform_loops(x, off, w, b, groups), atol=1e-10)

    def test_zero_offsets_unit_mask_is_conv(self, rng):
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((6, 2, 3, 3))
        off = np.zeros((2, 2 * 9, 3, 6, 6))
        off[:, :, 2] = 1.0
        got = deform_conv2d(T(x), T(off.reshape(2, -1, 6, 6)), T(w), None, 2).data
        want = conv2d(T(x), ConvParams(T(w), padding=1, groups=2)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_offset_channel_layout(self):
        # one kernel point (centre, K=1) shifted one pixel right reads the right neighbour
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        off = np.zeros((1, 3, 3, 3))
        off[0, 0] = 1.0  # dx
        off[0, 2] = 1.0  # dm
        out = deform_conv2d(T(x), T(off), T(np.ones((1, 1, 1, 1))), None, 1).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 2, 0], [4, 5, 0], [7, 8, 0]])

    def test_gradients(self, rng):
        x = rng.standard_normal((1, 4, 4, 4))
        off = rng.normal(0, 0.7, size=(1, 2 * 9 * 3, 4, 4))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        errs = op_gradient_check(lambda a, o, ww, bb: deform_conv2d(a, o, ww, bb, 2), [x, off, w, b], eps=1e-6)
        assert max(errs) < GRAD_TOL

    def test_shape_checks(self):
        with pytest.raises(ConfigurationError):
            deform_conv2d(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 26, 3, 3))), T(np.zeros((2, 2, 3, 3))), None, 1)
        with pytest.raises(ConfigurationError):
            deform_conv2d(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 48, 3, 3))), T(np.zeros((2, 1, 4, 4))), None, 2)


# ----------------------------------------------------------- normalisation


class TestNorms:
    def test_group_norm_two_pass(self, rng):
        x = rng.standard_normal((2, 6, 3, 4)) * 5 + 2
        alpha, beta = rng.standard_normal(6), rng.standard_normal(6)
        got = group_norm(T(x), 3, T(alpha), T(beta)).data
        for n in range(2):
            for g in range(3):
                ref = two_pass_norm(x[n, 2 * g : 2 * g + 2]).reshape(2, 3, 4)
                ref = ref * alpha[2 * g : 2 * g + 2, None, None] + beta[2 * g : 2 * g + 2, None, None]
                np.testing.assert_allclose(got[n, 2 * g : 2 * g + 2], ref, atol=1e-12)

    def test_layer_norm_two_pass(self, rng):
        x = rng.standard_normal((2, 5, 3, 3)) * 3 - 1
        wv, bv = rng.standard_normal(5), rng.standard_normal(5)
        got = layer_norm(T(x), T(wv), T(bv)).data
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    ref = two_pass_norm(x[n, :, i, j]) * wv + bv
                    np.testing.assert_allclose(got[n, :, i, j], ref, atol=1e-12)

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 4, 3, 3))
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert max(op_gradient_check(lambda x, a, b: group_norm(x, 2, a, b), [x, a, b])) < GRAD_TOL
        assert max(op_gradient_check(layer_norm, [x, a, b])) < GRAD_TOL
        assert jvp_check(lambda x, a, b: group_norm(x, 2, a, b), [x, a, b], eps=1e-5) < GRAD_TOL

    def test_group_divisibility(self):
        with pytest.raises(ConfigurationError):
            group_norm(T(np.zeros((1, 6, 2, 2))), 4, T(np.ones(6)), T(np.zeros(6)))

    def test_constant_input_is_finite(self):
        out = layer_norm(T(np.ones((1, 3, 2, 2))), T(np.ones(3)), T(np.zeros(3))).data
        np.testing.assert_array_equal(out, 0.0)


# --------------------------------------------------------------- pointwise


class TestPointwise:
    def test_gelu_tanh_form(self):
        v = np.linspace(-6, 6, 101)
        want = 0.5 * v * (1 + np.tanh(GELU_C * (v + GELU_A * v**3)))
        np.testing.assert_allclose(gelu(T(v)).data, want, atol=1e-15)
        assert gelu(T([0.0])).data[0] == 0.0

    def test_sigmoid(self):
        v = np.linspace(-30, 30, 61)
        np.testing.assert_allclose(sigmoid(T(v)).data, 1 / (1 + np.exp(-v)), atol=1e-15)
        assert sigmoid(T([0.0])).data[0] == 0.5

    @pytest.mark.parametrize(
        "fn,shapes",
        [
            (gelu, [(2, 3)]),
            (sigmoid, [(2, 3)]),
            (add, [(1, 2, 3, 3), (1, 1, 3, 3)]),
            (hadamard, [(1, 2, 3, 3), (1, 1, 3, 3)]),
            (hadamard, [(1, 3, 2, 2), (1, 3, 1, 1)]),
            (lambda a: scale(a, -1.5), [(4,)]),
            (lambda a: reshape(a, (2, 3)), [(6,)]),
            (flip_channels, [(1, 4, 2, 2)]),
            (lambda a: slice_channels(a, 1, 3), [(1, 4, 2, 2)]),
            (lambda a, b: concat_channels([a, b]), [(1, 2, 2, 2), (1, 3, 2, 2)]),
            (lambda a: finalize_offsets(a, 2.0), [(1, 6, 2, 2)]),
            (lambda a: finalize_offsets(a, 0.5, True), [(1, 6, 2, 2)]),
        ],
    )
    def test_gradients(self, rng, fn, shapes):
        inputs = [rng.standard_normal(s) for s in shapes]
        assert max(op_gradient_check(fn, inputs)) < GRAD_TOL

    def test_normalize_sum_gradient(self, rng):
        a = rng.uniform(0.5, 2.0, size=5)
        assert max(op_gradient_check(normalize_sum, [a])) < GRAD_TOL
        np.testing.assert_allclose(normalize_sum(T(a)).data.sum(), 1.0)

    def test_clamps_are_strict(self):
        x = T([0.2, 0.5, 0.8])
        np.testing.assert_array_equal(clamp_above(x, 0.5).data, [0.2, 0.5, 1.0])
        np.testing.assert_array_equal(clamp_below(x, 0.5).data, [0.0, 0.5, 0.8])

    def test_clamped_entries_have_no_gradient(self):
        x = T([0.2, 0.5, 0.8])
        _, (g,) = grad(lambda a: sum_all(clamp_above(a, 0.5)), x)
        np.testing.assert_array_equal(g, [1.0, 1.0, 0.0])
        _, (g,) = grad(lambda a: sum_all(clamp_below(a, 0.5)), x)
        np.testing.assert_array_equal(g, [0.0, 1.0, 1.0])

    def test_split_partitions(self, rng):
        x = T(rng.standard_normal((1, 5, 2, 2)))
        parts = split_channels(x, [2, 3])
        np.testing.assert_array_equal(concat_channels(parts).data, x.data)
        with pytest.raises(ConfigurationError):
            split_channels(x, [2, 2])

    def test_finalize_offsets_slots(self):
        raw = np.arange(6.0).reshape(1, 6, 1, 1)
        out = finalize_offsets(T(raw), 2.0).data.ravel()
        np.testing.assert_array_equal(out, [0, 2, 2, 6, 8, 5])

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            add(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 3, 3, 3))))


def test_corrupted_gradient_detected(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    assert max(op_gradient_check(gelu, [x], corrupt=True)) > 1e-2


def test_relative_error_conventions():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


# -------------------------------------------------------------------- A3T


class TestA3T:
    def test_layout(self):
        raw = to_bytes(Tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32)))
        assert raw[:4] == b"A3TF"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert raw[16:] == np.array([1, 2, 3], dtype="<f4").tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
    def test_round_trip_bitwise(self, shape, seed):
        a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        back = from_bytes(to_bytes(Tensor(a)))
        assert back.shape == a.shape
        assert back.data.tobytes() == a.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((1, 2, 3, 4)).astype(np.float32)
        save_a3t(tmp_path / "t.a3t", Tensor(a))
        assert load_a3t(tmp_path / "t.a3t").data.tobytes() == a.tobytes()

    def test_rejects_bad_streams(self, tmp_path):
        good = to_bytes(Tensor(np.ones((2, 2), dtype=np.float32)))
        for bad in (b"XXXX" + good[4:], good[:-1], good[:4] + (5).to_bytes(4, "little") + good[8:]):
            with pytest.raises(UsageError):
                from_bytes(bad)
        (tmp_path / "t.a3t").write_bytes(good + b"\0")
        with pytest.raises(UsageError):
            load_a3t(tmp_path / "t.a3t")


# ------------------------------------------------------------ determinism


def test_conv_bitwise_across_thread_counts(rng, monkeypatch):
    x = T(rng.standard_normal((6, 3, 7, 7)))
    p = ConvParams(T(rng.standard_normal((4, 3, 3, 3))), T(rng.standard_normal(4)), padding=1)
    monkeypatch.setenv("A3FPN_THREADS", "1")
    one = conv2d(x, p).data
    monkeypatch.setenv("A3FPN_THREADS", "4")
    four = conv2d(x, p).data
    assert one.tobytes() == four.tobytes()
    single = conv2d(T(x.data[3:4]), p).data
    assert single.tobytes() == one[3:4].tobytes()
