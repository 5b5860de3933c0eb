import numpy as np
import pytest

from atlasmatch.tensornet import (
    AdamState,
    ArchitectureMismatch,
    Checkpoint,
    Conv2d,
    CorruptPayload,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2,
    NetworkSpec,
    NoForwardState,
    NonFiniteActivation,
    Relu,
    ShapeMismatch,
    UnsupportedInputSize,
    VersionMismatch,
    adam_step,
    backward,
    default_embed_net,
    default_regression_net,
    forward,
    init_params,
    init_regression_params,
    load_checkpoint,
    save_checkpoint,
)


def f64_params(spec, rng):
    return [p.astype(np.float64) for p in init_params(spec, rng)]


def fd_param_grads(spec, params, x, gy, delta=1e-3):
    """Central finite differences of loss = sum(output * gy) over every parameter."""
    grads = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + delta
            hi = float((forward(spec, params, x, keep_state=False)[0] * gy).sum())
            flat[j] = orig - delta
            lo = float((forward(spec, params, x, keep_state=False)[0] * gy).sum())
            flat[j] = orig
            gf[j] = (hi - lo) / (2 * delta)
        grads.append(g)
    return grads


def assert_close_rel(analytic, fd, rtol=1e-3, atol=1e-6):
    denom = np.maximum(np.abs(analytic), np.abs(fd))
    err = np.abs(analytic - fd)
    assert np.all(err <= rtol * denom + atol), \
        f"max rel err {np.max(err / (denom + 1e-30))}"


class TestForward:
    def test_hand_convolution_1x1(self):
        spec = NetworkSpec((Conv2d(1, kernel=1),), in_channels=1, input_size=2)
        params = [np.full((1, 1, 1, 1), 2.0), np.zeros(1)]
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, _ = forward(spec, params, x)
        np.testing.assert_array_equal(y[0, 0], [[2.0, 4.0], [6.0, 8.0]])

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(0)
        spec = NetworkSpec((Conv2d(4), Relu(), MaxPool2(), Flatten(), Dense(3)),
                           in_channels=1, input_size=8)
        params = init_params(spec, rng)  # biases are zero
        y, _ = forward(spec, params, np.zeros((2, 1, 8, 8), dtype=np.float32))
        np.testing.assert_array_equal(y, np.zeros((2, 3), dtype=np.float32))

    def test_maxpool_hand_case(self):
        spec = NetworkSpec((MaxPool2(),), in_channels=1, input_size=2)
        y, _ = forward(spec, [], np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4.0

    def test_shape_mismatch(self):
        spec = default_embed_net(64)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            forward(spec, params, np.zeros((1, 1, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            forward(spec, params[:-1], np.zeros((1, 1, 64, 64), dtype=np.float32))

    def test_nonfinite_raises_with_layer_name(self):
        spec = NetworkSpec((Conv2d(1), Flatten(), Dense(2)), in_channels=1, input_size=2)
        params = init_params(spec, np.random.default_rng(0))
        params[0] = params[0] * np.inf
        with np.errstate(invalid="ignore"), \
                pytest.raises(NonFiniteActivation, match="conv2d"):
            forward(spec, params, np.ones((1, 1, 2, 2), dtype=np.float32))

    def test_determinism(self):
        rng = np.random.default_rng(1)
        spec = default_embed_net(64)
        params = init_params(spec, rng)
        x = rng.random((3, 1, 64, 64)).astype(np.float32)
        y1, _ = forward(spec, params, x)
        y2, _ = forward(spec, params, x)
        np.testing.assert_array_equal(y1, y2)


class TestBackward:
    def test_requires_forward_state(self):
        spec = NetworkSpec((Conv2d(2), Flatten(), Dense(2)), in_channels=1, input_size=4)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(NoForwardState):
            backward(spec, params, None, np.zeros((1, 2)))

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(2)
        spec = NetworkSpec((Conv2d(2), Relu(), MaxPool2(), Flatten(), Dense(3)),
                           in_channels=1, input_size=4)
        params = f64_params(spec, rng)
        x = rng.random((2, 1, 4, 4))
        _, state = forward(spec, params, x)
        grads, gx = backward(spec, params, state, np.zeros((2, 3)))
        for g in grads:
            np.testing.assert_array_equal(g, np.zeros_like(g))
        np.testing.assert_array_equal(gx, np.zeros_like(gx))

    def test_dense_grad_is_outer_product(self):
        rng = np.random.default_rng(3)
        spec = NetworkSpec((Flatten(), Dense(3)), in_channels=1, input_size=2)
        params = f64_params(spec, rng)
        x = rng.random((1, 1, 2, 2))
        _, state = forward(spec, params, x)
        gy = rng.random((1, 3))
        grads, _ = backward(spec, params, state, gy)
        np.testing.assert_allclose(grads[0], np.outer(x.reshape(-1), gy[0]), atol=1e-12)

    @pytest.mark.parametrize("layers,size,channels", [
        ((Conv2d(3),), 6, 1),
        ((Conv2d(2, kernel=5),), 8, 2),
        ((Conv2d(2, stride=2),), 8, 1),
        ((MaxPool2(),), 6, 2),
        ((Relu(),), 5, 1),
        ((Conv2d(2), Flatten(), Dense(4)), 6, 1),
        ((GlobalAvgPool(), Dense(3)), 6, 2),
    ])
    def test_fd_each_layer(self, layers, size, channels):
        rng = np.random.default_rng(hash(layers) % 2**31)
        spec = NetworkSpec(layers, in_channels=channels, input_size=size)
        params = f64_params(spec, rng)
        x = rng.random((2, channels, size, size)) + 0.05
        y, state = forward(spec, params, x)
        gy = rng.random(y.shape)
        grads, gx = backward(spec, params, state, gy)
        fd = fd_param_grads(spec, params, x, gy)
        for a, b in zip(grads, fd):
            assert_close_rel(a, b)

    def test_fd_input_gradient(self):
        rng = np.random.default_rng(5)
        spec = NetworkSpec((Conv2d(2), Relu(), MaxPool2(), Flatten(), Dense(3)),
                           in_channels=1, input_size=4)
        params = f64_params(spec, rng)
        x = rng.random((1, 1, 4, 4))
        y, state = forward(spec, params, x)
        gy = rng.random(y.shape)
        _, gx = backward(spec, params, state, gy)
        fd = np.zeros_like(x)
        delta = 1e-4
        flat, fdf = x.reshape(-1), fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + delta
            hi = float((forward(spec, params, x, keep_state=False)[0] * gy).sum())
            flat[j] = orig - delta
            lo = float((forward(spec, params, x, keep_state=False)[0] * gy).sum())
            flat[j] = orig
            fdf[j] = (hi - lo) / (2 * delta)
        assert_close_rel(gx, fd)


class TestAdam:
    def test_zero_gradient_no_move(self):
        rng = np.random.default_rng(0)
        params = [rng.random((3, 2)).astype(np.float32)]
        state = AdamState.init(params)
        new_params, new_state = adam_step(state, params, [np.zeros((3, 2), np.float32)])
        np.testing.assert_array_equal(new_params[0], params[0])
        assert new_state.step == 1

    def test_constant_gradient_approaches_lr_times_sign(self):
        # scalar reference: long-run |update| -> lr for constant gradient
        lr = 1e-2
        params = [np.array([0.0], dtype=np.float64)]
        state = AdamState(learning_rate=lr, m=[np.zeros(1)], v=[np.zeros(1)])
        g = [np.array([0.37])]
        prev = params[0].copy()
        for _ in range(500):
            params, state = adam_step(state, params, g)
        step_size = abs(params[0][0] - prev[0]) / 500  # average of the tail included
        last = params[0].copy()
        params, state = adam_step(state, params, g)
        final_step = abs(params[0][0] - last[0])
        assert final_step == pytest.approx(lr, rel=1e-3)

    def test_matches_scalar_reference(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        theta, m, v = 0.5, 0.0, 0.0
        params = [np.array([0.5])]
        state = AdamState(learning_rate=lr, m=[np.zeros(1)], v=[np.zeros(1)])
        rng = np.random.default_rng(8)
        for t in range(1, 30):
            g = float(rng.standard_normal())
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            params, state = adam_step(state, params, [np.array([g])])
        assert params[0][0] == pytest.approx(theta, abs=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        params = [rng.random(4), rng.random((2, 2))]
        grads = [rng.random(4), rng.random((2, 2))]
        s1 = AdamState.init(params, 1e-3)
        s2 = AdamState.init(params, 1e-3)
        p1, _ = adam_step(s1, params, grads)
        p2, _ = adam_step(s2, params, grads)
        for a, b in zip(p1, p2):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        params = [np.zeros(3)]
        state = AdamState.init(params)
        with pytest.raises(ShapeMismatch):
            adam_step(state, params, [np.zeros(4)])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = default_embed_net(64, embed_dim=8)
        params = init_params(spec, rng)
        f = tmp_path / "net.amck"
        save_checkpoint(f, spec, params, step=123, seed=7)
        ck = load_checkpoint(f, expected=spec)
        assert ck.step == 123 and ck.seed == 7
        for a, b in zip(ck.params, params):
            np.testing.assert_array_equal(a, b)

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = default_embed_net(64, embed_dim=8)
        f = tmp_path / "net.amck"
        save_checkpoint(f, spec, init_params(spec, rng), step=1, seed=0)
        data = f.read_bytes()
        f.write_bytes(data[:-10])
        with pytest.raises(CorruptPayload):
            load_checkpoint(f)

    def test_architecture_mismatch(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = default_embed_net(64, embed_dim=8)
        f = tmp_path / "net.amck"
        save_checkpoint(f, spec, init_params(spec, rng), step=1, seed=0)
        with pytest.raises(ArchitectureMismatch):
            load_checkpoint(f, expected=default_embed_net(64, embed_dim=16))

    def test_version_mismatch(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = default_embed_net(64, embed_dim=8)
        f = tmp_path / "net.amck"
        save_checkpoint(f, spec, init_params(spec, rng), step=1, seed=0)
        data = bytearray(f.read_bytes())
        data[4] = 99
        f.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            load_checkpoint(f)

    def test_wrong_magic(self, tmp_path):
        f = tmp_path / "bad.amck"
        f.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CorruptPayload):
            load_checkpoint(f)


def walk_param_count(input_size, in_channels, conv_channels, head):
    """Independent parameter-count oracle: shape walking with plain arithmetic."""
    total = 0
    c = in_channels
    for ch in conv_channels:
        total += ch * c * 3 * 3 + ch
        c = ch
    feat = c  # global average pool keeps channel count
    for out in head:
        total += feat * out + out
        feat = out
    return total


class TestStockNets:
    def test_embed_output_shape(self):
        spec = default_embed_net(128, embed_dim=64)
        params = init_params(spec, np.random.default_rng(0))
        y, _ = forward(spec, params, np.zeros((2, 1, 128, 128), dtype=np.float32))
        assert y.shape == (2, 64)

    @pytest.mark.parametrize("size,dim", [(64, 64), (128, 64), (128, 32)])
    def test_embed_param_count_oracle(self, size, dim):
        spec = default_embed_net(size, embed_dim=dim)
        expected = walk_param_count(size, 1, (8, 16, 32, 64), (128, dim))
        assert spec.param_count() == expected

    def test_embed_rejects_odd_sizes(self):
        with pytest.raises(UnsupportedInputSize):
            default_embed_net(100)

    def test_structurally_identical_specs(self):
        assert default_embed_net(128) == default_embed_net(128)

    def test_regression_identity_at_init(self):
        spec = default_regression_net(128)
        params = init_regression_params(spec, np.random.default_rng(0))
        x = np.random.default_rng(1).random((1, 2, 128, 128)).astype(np.float32)
        y, _ = forward(spec, params, x)
        np.testing.assert_array_equal(y[0], [1, 0, 0, 1, 0, 0])

    def test_regression_outputs_six(self):
        spec = default_regression_net(128)
        assert spec.output_dim() == 6

    def test_regression_rejects_small_input(self):
        with pytest.raises(UnsupportedInputSize):
            default_regression_net(64)
