import numpy as np
import pytest

from posepipe.tensor import (
    ConvSpec,
    PoolSpec,
    Tensor,
    bilinear_pool,
    conv3d,
    conv_output_extent,
    fuse_concat,
    load_tensor_text,
    pool3d,
    resize_bilinear,
    save_tensor_text,
)

from oracles import bilinear_pool_ref, conv3d_ref, pool3d_ref, resize_bilinear_ref


def ident_kernel():
    return Tensor((1, 1, 1, 1, 1), [1.0])


def conv_spec(kernel, bias=None, stride=(1, 1, 1), padding=(0, 0, 0), activation="none"):
    k = Tensor.from_array(kernel)
    b = Tensor.from_array(bias if bias is not None else np.zeros(k.shape[0]))
    return ConvSpec(kernel=k, bias=b, stride=stride, padding=padding, activation=activation)


class TestTensorInvariants:
    def test_shape_data_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Tensor((2, 3), [1.0, 2.0])

    def test_zero_dim_rejected(self):
        with pytest.raises(ValueError):
            Tensor((2, 0, 3), [])

    def test_immutable(self):
        t = Tensor.from_array(np.ones((2, 2)))
        with pytest.raises(ValueError):
            t.array[0, 0] = 5.0

    def test_row_major_roundtrip(self):
        arr = np.arange(24.0).reshape(2, 3, 4)
        t = Tensor.from_array(arr)
        assert np.array_equal(t.data, np.arange(24.0))
        assert np.array_equal(t.array, arr)


class TestConv3d:
    def test_all_ones_kernel_sums_input(self):
        # 1x2x2x2 input holding 1..8, all-ones 2x2x2 kernel -> 36.
        x = Tensor.from_array(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
        spec = conv_spec(np.ones((1, 1, 2, 2, 2)))
        out = conv3d(x, spec)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0] == 36.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor.from_array(rng.normal(size=(1, 3, 4, 5)))
        out = conv3d(x, conv_spec(np.ones((1, 1, 1, 1, 1))))
        assert np.array_equal(out.array, x.array)

    def test_relu_clamps_negative_bias(self):
        x = Tensor.from_array(np.zeros((2, 2, 3, 3)))
        spec = conv_spec(
            np.random.default_rng(1).normal(size=(3, 2, 1, 2, 2)),
            bias=[-1.0, -1.0, -1.0],
            activation="relu",
        )
        out = conv3d(x, spec)
        assert np.all(out.array == 0.0)

    def test_channel_mismatch_rejected(self):
        x = Tensor.from_array(np.zeros((3, 2, 2, 2)))
        with pytest.raises(ValueError, match="channels"):
            conv3d(x, conv_spec(np.ones((1, 2, 1, 1, 1))))

    def test_kernel_larger_than_padded_input_rejected(self):
        x = Tensor.from_array(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="larger"):
            conv3d(x, conv_spec(np.ones((1, 1, 1, 4, 4))))

    def test_linearity(self):
        rng = np.random.default_rng(7)
        spec = conv_spec(rng.normal(size=(2, 3, 2, 2, 2)), padding=(1, 0, 1))
        xa = rng.normal(size=(3, 3, 4, 4))
        xb = rng.normal(size=(3, 3, 4, 4))
        a, b = 1.7, -0.3
        lhs = conv3d(Tensor.from_array(a * xa + b * xb), spec).array
        rhs = a * conv3d(Tensor.from_array(xa), spec).array + b * conv3d(
            Tensor.from_array(xb), spec
        ).array
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_matches_reference_on_random_cases(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            in_c = int(rng.integers(1, 4))
            shape = (
                in_c,
                int(rng.integers(1, 6)),
                int(rng.integers(1, 9)),
                int(rng.integers(1, 9)),
            )
            x = rng.normal(size=shape)
            kt = int(rng.integers(1, min(3, shape[1]) + 1))
            kh = int(rng.integers(1, min(3, shape[2]) + 1))
            kw = int(rng.integers(1, min(3, shape[3]) + 1))
            out_c = int(rng.integers(1, 4))
            kern = rng.normal(size=(out_c, in_c, kt, kh, kw))
            bias = rng.normal(size=out_c)
            stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
            padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
            act = ["none", "relu", "sigmoid"][int(rng.integers(0, 3))]
            got = conv3d(
                Tensor.from_array(x),
                conv_spec(kern, bias, stride, padding, act),
            ).array
            want = conv3d_ref(x, kern, bias, stride, padding, act)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_shape_law_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            shape = (
                int(rng.integers(1, 4)),
                int(rng.integers(1, 8)),
                int(rng.integers(1, 12)),
                int(rng.integers(1, 12)),
            )
            padding = tuple(int(rng.integers(0, 3)) for _ in range(3))
            kdims = tuple(
                int(rng.integers(1, shape[i + 1] + 2 * padding[i] + 1))
                for i in range(3)
            )
            stride = tuple(int(rng.integers(1, 4)) for _ in range(3))
            kern = np.zeros((2, shape[0]) + kdims)
            out = conv3d(
                Tensor.from_array(rng.normal(size=shape)),
                conv_spec(kern, stride=stride, padding=padding),
            )
            expected = tuple(
                conv_output_extent(shape[i + 1], kdims[i], stride[i], padding[i])
                for i in range(3)
            )
            assert out.shape == (2,) + expected


class TestPool3d:
    def test_max_of_constants(self):
        x = Tensor.from_array(np.full((2, 3, 4, 4), 2.5))
        out = pool3d(x, PoolSpec("max", (2, 2, 2), (1, 1, 1)))
        assert np.all(out.array == 2.5)

    def test_avg_window(self):
        x = Tensor.from_array(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = pool3d(x, PoolSpec("avg", (1, 2, 2), (1, 1, 1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0] == 2.5

    def test_max_window(self):
        x = Tensor.from_array(np.array([1.0, 9.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = pool3d(x, PoolSpec("max", (1, 2, 2), (1, 1, 1)))
        assert out.data[0] == 9.0

    def test_window_too_large_rejected(self):
        x = Tensor.from_array(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="window"):
            pool3d(x, PoolSpec("max", (2, 2, 2), (1, 1, 1)))

    def test_matches_reference_on_random_cases(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            shape = (
                int(rng.integers(1, 4)),
                int(rng.integers(1, 7)),
                int(rng.integers(1, 10)),
                int(rng.integers(1, 10)),
            )
            x = rng.normal(size=shape)
            window = tuple(int(rng.integers(1, shape[i + 1] + 1)) for i in range(3))
            stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
            mode = "max" if rng.integers(0, 2) else "avg"
            got = pool3d(Tensor.from_array(x), PoolSpec(mode, window, stride)).array
            want = pool3d_ref(x, mode, window, stride)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


class TestResizeBilinear:
    def test_identity_resize(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 5, 7))
        out = resize_bilinear(Tensor.from_array(x), 5, 7)
        assert np.array_equal(out.array, x)

    def test_constant_input(self):
        x = Tensor.from_array(np.full((3, 4, 4), 1.25))
        out = resize_bilinear(x, 9, 2)
        assert np.all(out.array == 1.25)

    def test_midpoint_column(self):
        x = Tensor.from_array(np.array([0.0, 1.0, 0.0, 1.0]).reshape(1, 2, 2))
        out = resize_bilinear(x, 2, 3)
        want = resize_bilinear_ref(x.array, 2, 3)
        np.testing.assert_allclose(out.array, want, rtol=0, atol=0)
        assert np.all(out.array[0, :, 1] == 0.5)

    def test_matches_reference_on_random_cases(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            shape = (
                int(rng.integers(1, 4)),
                int(rng.integers(1, 9)),
                int(rng.integers(1, 9)),
            )
            x = rng.normal(size=shape)
            oh = int(rng.integers(1, 12))
            ow = int(rng.integers(1, 12))
            got = resize_bilinear(Tensor.from_array(x), oh, ow).array
            want = resize_bilinear_ref(x, oh, ow)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_output_bounded_by_channel_extrema(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            shape = (
                int(rng.integers(1, 3)),
                int(rng.integers(1, 8)),
                int(rng.integers(1, 8)),
            )
            x = rng.normal(size=shape)
            oh = int(rng.integers(1, 16))
            ow = int(rng.integers(1, 16))
            out = resize_bilinear(Tensor.from_array(x), oh, ow).array
            for c in range(shape[0]):
                assert out[c].min() >= x[c].min()
                assert out[c].max() <= x[c].max()


class TestFuseConcat:
    def test_identity_fuse(self):
        x = Tensor.from_array(np.random.default_rng(2).normal(size=(3, 4, 5)))
        out = fuse_concat([x], 4, 5)
        assert np.array_equal(out.array, x.array)

    def test_order_preserved(self):
        a = Tensor.from_array(np.full((1, 2, 2), 1.0))
        b = Tensor.from_array(np.full((1, 2, 2), 2.0))
        out = fuse_concat([a, b], 2, 2)
        assert out.shape == (2, 2, 2)
        assert np.all(out.array[0] == 1.0)
        assert np.all(out.array[1] == 2.0)

    def test_channel_arithmetic(self):
        rng = np.random.default_rng(4)
        maps = [
            Tensor.from_array(rng.normal(size=(c, 3, 3)))
            for c in (2, 3, 5)
        ]
        out = fuse_concat(maps, 6, 6)
        assert out.shape == (10, 6, 6)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            fuse_concat([], 2, 2)

    def test_4d_maps_share_time(self):
        rng = np.random.default_rng(6)
        a = Tensor.from_array(rng.normal(size=(2, 3, 4, 4)))
        b = Tensor.from_array(rng.normal(size=(1, 3, 2, 2)))
        out = fuse_concat([a, b], 4, 4)
        assert out.shape == (3, 3, 4, 4)
        c = Tensor.from_array(rng.normal(size=(1, 2, 2, 2)))
        with pytest.raises(ValueError, match="time"):
            fuse_concat([a, c], 4, 4)


class TestBilinearPool:
    def test_zero_feature_annihilates(self):
        f = Tensor.from_array(np.zeros((2, 3, 3)))
        a = Tensor.from_array(np.random.default_rng(1).normal(size=(4, 3, 3)))
        out = bilinear_pool(f, a)
        assert out.shape == (2, 4)
        assert np.all(out.array == 0.0)

    def test_single_location_normalized(self):
        f = Tensor.from_array(np.array([[[2.0]]]))
        out = bilinear_pool(f, f)
        # Outer-product sum 4.0, signed sqrt 2.0, L2 norm -> 1.0.
        assert out.array[0, 0] == 1.0

    def test_transpose_symmetry_prenorm(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(3, 4, 5))
        a = rng.normal(size=(2, 4, 5))
        fwd = bilinear_pool_ref(f, a)
        bwd = bilinear_pool_ref(a, f)
        assert np.array_equal(fwd, bwd.T)
        # Package output equals post-processed reference.
        m = np.sign(fwd) * np.sqrt(np.abs(fwd))
        m = m / np.linalg.norm(m)
        got = bilinear_pool(Tensor.from_array(f), Tensor.from_array(a)).array
        np.testing.assert_allclose(got, m, rtol=1e-12, atol=1e-15)

    def test_spatial_mismatch_rejected(self):
        f = Tensor.from_array(np.zeros((1, 2, 2)))
        a = Tensor.from_array(np.zeros((1, 3, 2)))
        with pytest.raises(ValueError, match="spatial"):
            bilinear_pool(f, a)


class TestFixtureFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(21)
        t = Tensor.from_array(rng.normal(size=(2, 3, 4)) * 1e6)
        path = tmp_path / "t.txt"
        save_tensor_text(t, path)
        back = load_tensor_text(path)
        assert back.shape == t.shape
        assert np.array_equal(back.array, t.array)

    def test_header_format(self, tmp_path):
        path = tmp_path / "t.txt"
        save_tensor_text(Tensor((1, 2), [3.5, -1.0]), path)
        text = path.read_text(encoding="utf-8")
        assert text.splitlines()[0] == "shape: 1 2"

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="shape"):
            load_tensor_text(path)
