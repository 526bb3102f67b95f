import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapnet_ct.swapnet import (
    SwapNetConfig,
    block_layout,
    check_weights,
    forward,
    forward_non_swap,
    init_weights,
    parameter_count,
    predict,
    zero_weights,
)
from swapnet_ct.tensor import Tensor, backward, scale, sum_squares, tensor

ORDERS = [("x", "y", "z"), ("z", "x", "y"), ("x", "z", "y"), ("y", "z", "x")]


def core_oracle(h, kernels, biases):
    """conv-relu-conv-relu-conv + residual on a (C, P, Q) array, via shifted slices."""

    def conv(a, k, b):
        _, p, q = a.shape
        ap = np.pad(a, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((k.shape[0], p, q)) + b[:, None, None]
        for dy in range(3):
            for dx in range(3):
                out += np.einsum("oc,cpq->opq", k[:, :, dy, dx], ap[:, dy : dy + p, dx : dx + q])
        return out

    t = np.maximum(conv(h, kernels[0], biases[0]), 0)
    t = np.maximum(conv(t, kernels[1], biases[1]), 0)
    return h + conv(t, kernels[2], biases[2])


def network_oracle(cfg, w, v):
    """Index-tracking reference: move the block's axis to the front, run the core, move it back."""
    axis = {"x": 0, "y": 1, "z": 2}
    h = v.astype(np.float64)
    for i, a in enumerate(cfg.block_axes):
        ks = [k.data.astype(np.float64) for k in w.kernels[i]]
        bs = [b.data.astype(np.float64) for b in w.biases[i]]
        h = np.moveaxis(core_oracle(np.moveaxis(h, axis[a], 0), ks, bs), 0, axis[a])
    return h


def small_weights(cfg, seed, s=0.3):
    w = init_weights(cfg, seed, dtype=np.float64)
    for ks in w.kernels:
        for k in ks:
            k.data *= s
    rng = np.random.default_rng(seed + 1)
    for bs in w.biases:
        for b in bs:
            b.data[:] = rng.normal(scale=0.1, size=b.shape)
    return w


def test_parameter_count_full_scale():
    assert parameter_count(SwapNetConfig((448, 448, 448))) == 16_261_056
    assert round(parameter_count(SwapNetConfig((448, 448, 448))) / 1e6, 2) == 16.26


def test_parameter_count_small_cases():
    assert parameter_count(SwapNetConfig((1, 1, 1))) == 90
    assert parameter_count(SwapNetConfig((8, 16, 32))) == 36_456
    assert parameter_count(SwapNetConfig((32, 32, 32))) == 83_232


@settings(max_examples=20, deadline=None)
@given(st.tuples(*[st.integers(1, 9)] * 3), st.sampled_from(ORDERS), st.sampled_from(["swap", "non_swap"]))
def test_parameter_count_equals_scalar_count(ext, order, variant):
    cfg = SwapNetConfig(ext, order, variant)
    assert init_weights(cfg, 0).num_scalars() == parameter_count(cfg)


def test_block_channels_follow_swap_order():
    cfg = SwapNetConfig((4, 5, 6), ("z", "x", "y"))
    assert cfg.channels == (6, 4, 5)
    assert SwapNetConfig((4, 5, 6), ("z", "x", "y"), "non_swap").channels == (6, 6, 6)


def test_config_rejects_bad_order():
    with pytest.raises(ValueError):
        SwapNetConfig((4, 4, 4), ("x", "x", "z"))
    with pytest.raises(ValueError):
        SwapNetConfig((4, 4, 4), variant="other")


def test_block_layouts():
    assert block_layout("x") == (0, 1, 2)
    assert block_layout("y") == (1, 0, 2)
    assert block_layout("z") == (2, 0, 1)


def test_init_deterministic_and_zero_biases():
    cfg = SwapNetConfig((6, 6, 6))
    a, b = init_weights(cfg, 3), init_weights(cfg, 3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert all(not bb.data.any() for bs in a.biases for bb in bs)
    c = init_weights(cfg, 4)
    assert a.kernels[0][0].data.tobytes() != c.kernels[0][0].data.tobytes()


def test_init_kaiming_variance():
    w = init_weights(SwapNetConfig((32, 32, 32)), 0)
    for ks in w.kernels:
        for k in ks:
            assert k.data.var() == pytest.approx(2 / (32 * 9), rel=0.10)


def test_last_gain_zeroes_residual_branches():
    cfg = SwapNetConfig((5, 6, 7))
    w = init_weights(cfg, 0, last_gain=0.0)
    assert all(not ks[2].data.any() for ks in w.kernels)
    v = np.random.default_rng(0).normal(size=(5, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(predict(cfg, w, v), v)


@pytest.mark.parametrize("order", ORDERS)
@pytest.mark.parametrize("variant", ["swap", "non_swap"])
def test_zero_weights_identity(order, variant):
    cfg = SwapNetConfig((4, 5, 6), order, variant)
    v = np.random.default_rng(1).normal(size=(4, 5, 6)).astype(np.float32)
    out = forward(cfg, zero_weights(cfg), Tensor(v)).data
    assert out.tobytes() == v.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.tuples(*[st.integers(1, 7)] * 3), st.sampled_from(ORDERS), st.sampled_from(["swap", "non_swap"]))
def test_shape_preserved(ext, order, variant):
    cfg = SwapNetConfig(ext, order, variant)
    v = np.random.default_rng(2).normal(size=ext).astype(np.float32)
    assert predict(cfg, init_weights(cfg, 0), v).shape == ext


@pytest.mark.parametrize("order", ORDERS)
def test_reorientation_matches_index_tracking_oracle(order):
    cfg = SwapNetConfig((4, 5, 6), order)
    w = small_weights(cfg, 7)
    v = np.random.default_rng(3).normal(size=(4, 5, 6))
    np.testing.assert_allclose(predict(cfg, w, v), network_oracle(cfg, w, v), rtol=1e-6, atol=1e-9)


def test_non_swap_matches_oracle():
    cfg = SwapNetConfig((4, 5, 6), ("y", "z", "x"), "non_swap")
    w = small_weights(cfg, 8)
    v = np.random.default_rng(4).normal(size=(4, 5, 6))
    h = v
    for i in range(3):
        ks = [k.data for k in w.kernels[i]]
        bs = [b.data for b in w.biases[i]]
        h = np.moveaxis(core_oracle(np.moveaxis(h, 1, 0), ks, bs), 0, 1)
    np.testing.assert_allclose(forward_non_swap(cfg, w, Tensor(v)).data, h, rtol=1e-6, atol=1e-9)


def test_non_swap_cubic_parameter_count_matches_swap():
    assert parameter_count(SwapNetConfig((9, 9, 9), variant="non_swap")) == parameter_count(SwapNetConfig((9, 9, 9)))


def test_extent_mismatch_rejected():
    cfg = SwapNetConfig((4, 5, 6))
    with pytest.raises(ValueError, match="extents"):
        forward(cfg, zero_weights(cfg), Tensor(np.zeros((4, 6, 5), np.float32)))


def test_check_weights_rejects_wrong_shapes():
    w = zero_weights(SwapNetConfig((4, 4, 4)))
    with pytest.raises(ValueError, match="block 0"):
        check_weights(SwapNetConfig((5, 4, 4)), w)


def test_full_network_gradient_finite_difference():
    cfg = SwapNetConfig((8, 8, 8), ("z", "x", "y"))
    w = small_weights(cfg, 11)
    rng = np.random.default_rng(5)
    v = rng.normal(size=(8, 8, 8))
    target = rng.normal(size=(8, 8, 8))
    params = w.parameters()

    def loss_tensor():
        out = forward(cfg, w, tensor(v, dtype=np.float64))
        return scale(sum_squares(out - Tensor(target)), 0.5)

    grads = backward(loss_tensor(), params)
    probes = 0
    for pi in rng.choice(len(params), size=12):
        p, g = params[pi], grads[pi]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p.data[idx]
        p.data[idx] = old + 1e-4
        fp = float(loss_tensor().data)
        p.data[idx] = old - 1e-4
        fm = float(loss_tensor().data)
        p.data[idx] = old
        num = (fp - fm) / 2e-4
        assert g[idx] == pytest.approx(num, rel=1e-3, abs=1e-6)
        probes += 1
    assert probes == 12
