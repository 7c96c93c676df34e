import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from repfield3d.tensor import (
    GELU_A,
    GELU_C,
    FormatError,
    NonFiniteError,
    elementwise,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_stats,
    load_rt3d,
    make_rng,
    rt3d_dumps,
    rt3d_loads,
    save_rt3d,
    seeded_normal,
    sigmoid,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestElementwise:
    def test_mul(self):
        np.testing.assert_array_equal(elementwise("mul", [1, 2, 3], [4, 5, 6]), [4, 10, 18])

    def test_add_zero_is_identity(self, rng):
        t = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(elementwise("add", t, np.zeros_like(t)), t)

    def test_scale(self):
        np.testing.assert_array_equal(elementwise("scale", [0.5, -0.5], 2.0), [1.0, -1.0])

    def test_sub(self):
        np.testing.assert_array_equal(elementwise("sub", [3.0, 1.0], [1.0, 1.0]), [2.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            elementwise("add", np.ones(3), np.ones(4))

    def test_non_finite_result(self):
        with pytest.raises(NonFiniteError):
            elementwise("mul", [1e300], [1e300])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("pow", [1.0], [2.0])


class TestLayerNorm:
    def test_two_values(self):
        x = np.array([[[1.0, 3.0]]])
        out = layer_norm(x, np.ones(1), np.zeros(1), axes=(2,), eps=1e-300)
        np.testing.assert_allclose(out, [[[-1.0, 1.0]]], atol=1e-12)

    def test_constant_group_is_zero(self):
        x = np.full((1, 2, 3, 3, 3), 4.2)
        out = layer_norm(x, np.ones(2), np.zeros(2))
        assert np.all(out == 0.0)

    def test_zero_gain_gives_bias(self, rng):
        x = rng.standard_normal((1, 2, 3, 3, 3))
        out = layer_norm(x, np.zeros(2), np.array([0.25, -1.5]))
        assert np.all(out[0, 0] == 0.25) and np.all(out[0, 1] == -1.5)

    def test_empty_axes_rejected(self, rng):
        with pytest.raises(ValueError):
            layer_norm(rng.standard_normal((1, 2, 3)), np.ones(2), np.zeros(2), axes=())

    def test_nonpositive_eps_rejected(self, rng):
        with pytest.raises(ValueError):
            layer_norm(rng.standard_normal((1, 2, 3)), np.ones(2), np.zeros(2), eps=0.0)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (1, 2, 3, 4, 2), elements=finite))
    def test_normalized_moments(self, x):
        spread = x.max(axis=(2, 3, 4)) - x.min(axis=(2, 3, 4))
        if np.any(spread < 1e-2):
            return
        xhat, _ = layer_norm_stats(x, (2, 3, 4), 1e-12)
        assert np.all(np.abs(xhat.mean(axis=(2, 3, 4))) < 1e-12)
        assert np.all(np.abs(xhat.var(axis=(2, 3, 4)) - 1.0) < 1e-6)


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(np.array(0.0)) == 0.5

    def test_gelu_zero(self):
        assert gelu(np.array(0.0)) == 0.0

    def test_sigmoid_saturates_quietly(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            out = sigmoid(np.array([-1000.0, 1000.0]))
        assert out[0] < 1e-300 and out[1] == 1.0

    def test_gelu_constants(self):
        assert GELU_C == pytest.approx(np.sqrt(2 / np.pi), abs=1e-15)
        x = np.array([1.0])
        expect = 0.5 * x * (1 + np.tanh(GELU_C * (x + GELU_A * x**3)))
        np.testing.assert_array_equal(gelu(x), expect)

    def test_gelu_grad_matches_difference(self):
        x = np.linspace(-4, 4, 41)
        h = 1e-6
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(x), fd, atol=1e-8)

    @given(hnp.arrays(np.float64, 16, elements=st.floats(-700, 700)))
    def test_sigmoid_symmetry(self, x):
        assert np.all(np.abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-15)

    @given(hnp.arrays(np.float64, 16, elements=st.floats(-30, 30)))
    def test_sigmoid_open_interval(self, x):
        s = sigmoid(x)
        assert np.all((s > 0) & (s < 1))


class TestRng:
    def test_same_seed_bitwise(self):
        a = seeded_normal(7, (3, 4))
        b = seeded_normal(make_rng(7), (3, 4))
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(seeded_normal(1, (8,)), seeded_normal(2, (8,)))

    def test_mean_of_many_draws(self):
        assert abs(seeded_normal(0, (10**6,)).mean()) < 0.01

    def test_streams_are_independent(self):
        assert not np.array_equal(make_rng(5, 1).standard_normal(4), make_rng(5, 2).standard_normal(4))

    def test_known_first_draw_is_stable(self):
        # pinned so a silent generator change is caught
        first = make_rng(0).standard_normal(3)
        assert first.tolist() == [-0.2059740286292238, -0.12884495093462758, -0.28978987549091256]


class TestRT3D:
    def test_header_layout(self):
        buf = rt3d_dumps(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert buf[:4] == b"RT3D" and buf[4] == 1 and buf[5] == 0
        assert int.from_bytes(buf[6:10], "little") == 2
        assert int.from_bytes(buf[10:18], "little") == 2
        assert int.from_bytes(buf[18:26], "little") == 3
        assert len(buf) == 26 + 6 * 8

    def test_roundtrip_file(self, tmp_path, rng):
        x = rng.standard_normal((2, 1, 3, 3, 3))
        save_rt3d(tmp_path / "k.rt3d", x)
        y = load_rt3d(tmp_path / "k.rt3d")
        assert y.shape == x.shape and y.tobytes() == x.tobytes()

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=5, max_side=4), elements=finite))
    def test_roundtrip_bitwise(self, x):
        y = rt3d_loads(rt3d_dumps(x))
        assert y.shape == x.shape and y.tobytes() == x.tobytes()

    def test_rank_zero(self):
        y = rt3d_loads(rt3d_dumps(np.asarray(0.5)))
        assert y.shape == () and y == 0.5

    def test_bad_magic(self):
        buf = bytearray(rt3d_dumps(np.ones(2)))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError):
            rt3d_loads(bytes(buf))

    def test_truncated_payload(self):
        with pytest.raises(FormatError):
            rt3d_loads(rt3d_dumps(np.ones(4))[:-3])

    def test_unknown_version(self):
        buf = bytearray(rt3d_dumps(np.ones(2)))
        buf[4] = 2
        with pytest.raises(FormatError):
            rt3d_loads(io.BytesIO(bytes(buf)).read())
