"""Dense-network substrate: forward/backward, Adam, norms, normal pdf/cdf, checkpoints."""

import struct

import mpmath
import numpy as np
import pytest

from mombo.errors import DimensionError, TrainingError
from mombo.nncore import (
    CHECKPOINT_MAGIC,
    AdamState,
    MlpParams,
    adam_step,
    backward,
    forward,
    induced_l1_norm,
    init_mlp,
    load_checkpoint,
    rng_stream,
    save_checkpoint,
    soft_update,
    std_normal_cdf,
    std_normal_pdf,
)


def _identity_net(n_layers, dim=2):
    return MlpParams([np.eye(dim) for _ in range(n_layers)], [np.zeros(dim) for _ in range(n_layers)])


def _loop_forward(params, x):
    """Scalar-loop re-evaluation of the layer arithmetic."""
    h = list(x)
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for i in range(w.shape[0]):
            acc = b[i]
            for j in range(w.shape[1]):
                acc += w[i, j] * h[j]
            out.append(max(acc, 0.0) if li < params.n_layers - 1 else acc)
        h = out
    return np.array(h)


def _random_net(rng, max_width=8, max_layers=3):
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(n_layers + 1)]
    net = init_mlp(sizes, rng)
    for b in net.biases:
        b[:] = rng.normal(0.0, 0.5, b.shape)
    return net


def _fd_check(net, x, upstream, h=1e-5, rtol=1e-5, atol=1e-8):
    grads = backward(net, x, upstream)
    f = lambda: float(np.sum(upstream * forward(net, x)))  # noqa: E731
    for arr, g in zip(net.arrays(), grads.arrays()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - g[idx]) <= max(atol, rtol * abs(num)), (idx, num, g[idx])
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (np.sum(upstream * forward(net, xp)) - np.sum(upstream * forward(net, xm))) / (2 * h)
        assert abs(num - grads.input[idx]) <= max(atol, rtol * abs(num))


class TestForward:
    def test_identity_single_layer(self):
        np.testing.assert_array_equal(forward(_identity_net(1), np.array([1.0, -2.0])), [1.0, -2.0])

    def test_hidden_relu_clamps(self):
        np.testing.assert_array_equal(forward(_identity_net(2), np.array([1.0, -2.0])), [1.0, 0.0])

    def test_matches_scalar_loop(self):
        rng = rng_stream(1, 0)
        net = init_mlp([3, 5, 4], rng)
        for b in net.biases:
            b[:] = rng.normal(size=b.shape)
        x = rng.normal(size=3)
        np.testing.assert_allclose(forward(net, x), _loop_forward(net, x), rtol=0, atol=1e-12)

    def test_batch_rows_match_single(self):
        rng = rng_stream(2, 0)
        net = _random_net(rng)
        xs = rng.normal(size=(6, net.in_dim))
        np.testing.assert_allclose(forward(net, xs), np.stack([forward(net, x) for x in xs]), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward(_identity_net(1), np.zeros(3))

    def test_bad_chaining(self):
        with pytest.raises(DimensionError):
            MlpParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])

    def test_hidden_activation_is_1_lipschitz(self):
        rng = rng_stream(3, 0)
        a, b = rng.normal(size=1000), rng.normal(size=1000)
        assert np.all(np.abs(np.maximum(a, 0) - np.maximum(b, 0)) <= np.abs(a - b))


class TestBackward:
    def test_linear_outer_product(self):
        w = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        net = MlpParams([w], [np.zeros(2)])
        x = np.array([0.5, -1.0, 2.0])
        g = backward(net, x, np.array([1.0, 0.0]))
        np.testing.assert_array_equal(g.weights[0], np.outer([1.0, 0.0], x))
        np.testing.assert_array_equal(g.biases[0], [1.0, 0.0])

    def test_dead_unit_blocks_gradient(self):
        net = MlpParams([np.array([[1.0], [-1.0]]), np.array([[1.0, 1.0]])], [np.zeros(2), np.zeros(1)])
        g = backward(net, np.array([2.0]), np.array([1.0]))
        # unit 2 has pre-activation -2: nothing flows through it
        assert g.weights[0][1, 0] == 0.0
        assert g.biases[0][1] == 0.0
        assert g.weights[1][0, 1] == 0.0

    def test_finite_differences_random_nets(self):
        rng = rng_stream(4, 0)
        for _ in range(100):
            net = _random_net(rng)
            x = rng.normal(size=net.in_dim)
            _fd_check(net, x, rng.normal(size=net.out_dim))

    def test_batched_gradient_sums_rows(self):
        rng = rng_stream(5, 0)
        net = _random_net(rng)
        xs = rng.normal(size=(4, net.in_dim))
        ups = rng.normal(size=(4, net.out_dim))
        total = backward(net, xs, ups)
        parts = [backward(net, x, u) for x, u in zip(xs, ups)]
        acc = parts[0]
        for p in parts[1:]:
            acc = acc + p
        for a, b in zip(total.arrays(), acc.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(total.input, np.stack([p.input for p in parts]), atol=1e-12)

    def test_upstream_shape_mismatch(self):
        with pytest.raises(DimensionError):
            backward(_identity_net(1), np.zeros(2), np.zeros(3))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        net = _identity_net(2)
        before = net.copy()
        state = AdamState.for_params(net, lr=0.1)
        adam_step(state, [np.zeros_like(a) for a in net.arrays()], net)
        assert state.step == 1
        for a, b in zip(net.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_one_step_by_hand(self):
        # m = 0.1 g, v = 0.001 g^2; corrected m/c1 = g, v/c2 = g^2 -> step -lr g/(|g| + eps)
        p = [np.array([1.0, -2.0, 0.5])]
        g = np.array([0.3, -4.0, 1e-9])
        state = AdamState([np.zeros(3)], [np.zeros(3)], lr=0.01)
        adam_step(state, [g], p)
        expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12, atol=1e-15)

    def test_constant_gradient_descends(self):
        p = [np.array([0.0, 0.0])]
        state = AdamState([np.zeros(2)], [np.zeros(2)], lr=0.01)
        for _ in range(50):
            adam_step(state, [np.array([2.0, -0.5])], p)
        assert p[0][0] < 0 < p[0][1]

    def test_non_finite_gradient_names_layer(self):
        net = _identity_net(3)
        state = AdamState.for_params(net)
        grads = [np.zeros_like(a) for a in net.arrays()]
        grads[1][0, 0] = np.nan
        with pytest.raises(TrainingError, match="layer 1"):
            adam_step(state, grads, net)

    def test_soft_update(self):
        t, s = _identity_net(1), MlpParams([np.full((2, 2), 3.0)], [np.ones(2)])
        soft_update(t, s, 0.5)
        np.testing.assert_allclose(t.weights[0], [[2.0, 1.5], [1.5, 2.0]])
        np.testing.assert_allclose(t.biases[0], [0.5, 0.5])


class TestInducedNorm:
    def test_examples(self):
        assert induced_l1_norm(np.array([[1.0, -2.0], [3.0, 4.0]])) == 6.0
        assert induced_l1_norm(np.eye(5)) == 1.0

    def test_empty(self):
        with pytest.raises(DimensionError):
            induced_l1_norm(np.zeros((0, 3)))

    def test_bounds_vector_growth(self):
        rng = rng_stream(6, 0)
        a = rng.normal(size=(4, 7))
        norm = induced_l1_norm(a)
        x = rng.normal(size=(1000, 7))
        assert np.all(np.abs(x @ a.T).sum(axis=1) <= norm * np.abs(x).sum(axis=1) * (1 + 1e-12))

    def test_submultiplicative(self):
        rng = rng_stream(7, 0)
        for _ in range(200):
            a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
            assert induced_l1_norm(a @ b) <= induced_l1_norm(a) * induced_l1_norm(b) * (1 + 1e-12)


class TestNormal:
    def test_pdf_at_zero(self):
        assert std_normal_pdf(0.0) == pytest.approx(0.3989422804, abs=1e-10)

    def test_cdf_values(self):
        assert std_normal_cdf(0.0) == 0.5
        assert std_normal_cdf(1.96) == pytest.approx(0.9750021, abs=1e-7)

    def test_cdf_against_quadrature(self):
        mpmath.mp.dps = 30
        for x in np.linspace(-8.0, 8.0, 41):
            ref = mpmath.quad(lambda t: mpmath.exp(-t * t / 2), [-mpmath.inf, x]) / mpmath.sqrt(2 * mpmath.pi)
            assert abs(std_normal_cdf(x) - float(ref)) <= 1e-12

    def test_saturation(self):
        np.testing.assert_array_equal(std_normal_cdf(np.array([-1e6, -39.0, 39.0, 1e6])), [0.0, 0.0, 1.0, 1.0])
        assert std_normal_pdf(40.0) == 0.0

    def test_no_subnormals_near_clamp(self):
        x = np.linspace(-38.0, 38.0, 2001)
        for v in (std_normal_cdf(x), std_normal_pdf(x)):
            tiny = (v != 0) & (np.abs(v) < np.finfo(float).tiny)
            assert not tiny.any()


class TestRngStream:
    def test_same_stream_same_draws(self):
        np.testing.assert_array_equal(rng_stream(3, 9).normal(size=5), rng_stream(3, 9).normal(size=5))

    def test_streams_differ(self):
        assert not np.array_equal(rng_stream(3, 9).normal(size=5), rng_stream(3, 10).normal(size=5))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = rng_stream(8, 0)
        nets = [init_mlp([3, 4, 2], rng), init_mlp([2, 1], rng)]
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, nets)
        back = load_checkpoint(path)
        assert len(back) == 2
        for a, b in zip(nets, back):
            for x, y in zip(a.arrays(), b.arrays()):
                np.testing.assert_array_equal(x, y)

    def test_header_layout(self, tmp_path):
        net = MlpParams([np.array([[1.0, 2.0]])], [np.array([3.0])])
        path = tmp_path / "one.ckpt"
        save_checkpoint(path, net)
        raw = path.read_bytes()
        assert raw.startswith(CHECKPOINT_MAGIC)
        off = len(CHECKPOINT_MAGIC)
        assert struct.unpack("<II", raw[off : off + 8]) == (1, 1)
        assert struct.unpack("<II", raw[off + 8 : off + 16]) == (1, 2)
        assert struct.unpack("<3d", raw[off + 16 :]) == (1.0, 2.0, 3.0)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOT-A-NET")
        with pytest.raises(ValueError):
            load_checkpoint(path)
