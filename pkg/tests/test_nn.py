import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftnet import nn
from ftnet.exceptions import ShapeError
from ftnet.rng import Rng
from oracles import finite_difference, py_forward

SPEC = nn.REFERENCE_SPEC


def params(seed=0, dtype=np.float64, bias_scale=0.1):
    p = nn.init_params(SPEC, rng=seed, dtype=dtype)
    r = Rng(seed).derive(99)
    for b in p.biases:
        b[:] = r.normal(b.shape, scale=bias_scale)
    return p


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.NetworkSpec((3,))
    with pytest.raises(ValueError):
        nn.NetworkSpec((3, 0, 1))
    with pytest.raises(ValueError):
        nn.NetworkSpec((3, 2, 1), hidden_activation="tanh")
    assert SPEC.n_hidden == 20 and SPEC.n_layers == 3
    assert SPEC.hidden_units[0] == (1, 0) and SPEC.hidden_units[-1] == (2, 9)


def test_activation_examples():
    assert nn.activation_apply("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert nn.activation_apply("sigmoid", np.array([0.0])).tolist() == [0.5]
    for c in (-50.0, 0.0, 3.0, 700.0):
        np.testing.assert_allclose(nn.activation_apply("softmax", np.full(3, c)), [1 / 3] * 3, rtol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(z, c):
    z = np.array(z)
    p = nn.activation_apply("softmax", z)
    assert abs(p.sum() - 1.0) < 1e-12
    shifted = nn.activation_apply("softmax", z + c)
    # max-subtraction makes the shift cancel up to the rounding of z + c itself
    np.testing.assert_allclose(shifted, p, rtol=1e-9, atol=1e-15)
    assert np.array_equal(nn.activation_apply("softmax", z - z.max()), p)


def test_forward_hand_example():
    spec = nn.NetworkSpec((1, 1))
    p = nn.Parameters([np.array([[2.0]])], [np.array([1.0])])
    assert nn.forward(spec, p, [3.0]).output.tolist() == [7.0]


def test_masking_whole_layer_leaves_bias():
    p = params(1)
    x = Rng(2).uniform(-1, 1, 10)
    rec = nn.forward(SPEC, p, x, {(1, k) for k in range(10)})
    assert np.array_equal(rec.preactivations[2], p.biases[1])
    assert np.all(rec.activations[1] == 0)


def test_zero_input_matches_straight_line_evaluator():
    p = params(3)
    got = nn.forward(SPEC, p, np.zeros(10)).output
    # bias-only chain written out by hand
    a1 = np.maximum(p.biases[0], 0)
    a2 = np.maximum(p.weights[1] @ a1 + p.biases[1], 0)
    out = p.weights[2] @ a2 + p.biases[2]
    np.testing.assert_allclose(got, out, rtol=1e-14)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_bitwise_matches_loop_oracle(dtype):
    r = Rng(8)
    for seed in range(10):
        p = params(seed, dtype)
        x = r.uniform(-1, 1, 10).astype(dtype)
        failed = {(1, int(r.integers(10))), (2, int(r.integers(10)))} if seed % 2 else set()
        got = nn.forward(SPEC, p, x, failed).output
        ref = py_forward(p.weights, p.biases, x, failed, dtype=dtype)
        assert got.dtype == dtype
        assert got.tobytes() == ref.tobytes()


def test_masked_forward_equals_manual_reevaluation():
    p = params(4)
    X = Rng(5).uniform(-1, 1, (50, 10))
    mask = {(1, 2), (2, 7)}
    got = nn.forward(SPEC, p, X, mask).output
    a1 = np.maximum(X @ p.weights[0].T + p.biases[0], 0)
    a1[:, 2] = 0
    a2 = np.maximum(a1 @ p.weights[1].T + p.biases[1], 0)
    a2[:, 7] = 0
    np.testing.assert_allclose(got, a2 @ p.weights[2].T + p.biases[2], rtol=1e-12, atol=1e-14)


def test_mask_order_irrelevant():
    p = params(6)
    X = Rng(6).uniform(-1, 1, (20, 10))
    a = nn.forward(SPEC, p, X, [(2, 3), (1, 1), (1, 9)]).output
    b = nn.forward(SPEC, p, X, [(1, 9), (2, 3), (1, 1)]).output
    assert np.array_equal(a, b)


def test_failure_validation():
    p = params()
    with pytest.raises(ValueError):
        nn.forward(SPEC, p, np.zeros(10), {(3, 0)})
    with pytest.raises(ValueError):
        nn.forward(SPEC, p, np.zeros(10), {(1, 10)})
    out = nn.forward(SPEC, p, np.zeros(10), {(3, 0)}, allow_output_failures=True).output
    assert out.tolist() == [0.0]
    with pytest.raises(ShapeError):
        nn.forward(SPEC, p, np.zeros(9))


def test_losses():
    assert nn.loss("mse", np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert nn.loss("mse", np.array([0.0]), np.array([2.0])) == 4.0
    k = 4
    ce = nn.loss("cross_entropy", np.full((1, k), 1 / k), np.eye(k)[[2]])
    assert abs(ce - np.log(k)) < 1e-12
    assert np.isfinite(nn.loss("cross_entropy", np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])))
    with pytest.raises(ShapeError):
        nn.loss("mse", np.zeros(2), np.zeros(3))


def test_backward_single_linear_neuron():
    spec = nn.NetworkSpec((1, 1))
    p = nn.Parameters([np.array([[1.0]])], [np.array([0.0])])
    g = nn.backward(spec, p, np.array([[2.0]]), np.array([5.0]))
    assert g.weights[0].tolist() == [[-12.0]]
    assert g.biases[0].tolist() == [-6.0]


def test_backward_zero_at_exact_fit():
    p = params(2)
    X = Rng(1).uniform(-1, 1, (5, 10))
    y = nn.forward(SPEC, p, X).output[:, 0]
    g = nn.backward(SPEC, p, X, y)
    # backward runs its own BLAS forward, so the residual is rounding noise rather than exact zero
    assert max(np.abs(t).max() for _, t in g.tensors()) < 1e-14


def test_relu_subgradient_at_zero():
    spec = nn.NetworkSpec((1, 1, 1))
    p = nn.Parameters([np.array([[1.0]]), np.array([[1.0]])], [np.array([0.0]), np.array([0.0])])
    g = nn.backward(spec, p, np.array([[0.0]]), np.array([1.0]))
    assert g.weights[0].tolist() == [[0.0]] and g.biases[0].tolist() == [0.0]


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    p = params(seed)
    r = Rng(seed).derive(5)
    X, y = r.uniform(-1, 1, (6, 10)), r.normal(6)
    g = nn.backward(SPEC, p, X, y)
    fd = finite_difference(lambda: nn.loss("mse", nn.forward(SPEC, p, X).output[:, 0], y), [*p.weights, *p.biases])
    for a, f in zip([*g.weights, *g.biases], fd):
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        assert rel.max() < 1e-6


def test_sigmoid_and_softmax_gradients():
    spec = nn.NetworkSpec((4, 5, 3), "sigmoid", "softmax")
    p = nn.init_params(spec, "xavier", 3)
    r = Rng(3)
    X = r.uniform(-1, 1, (4, 4))
    T = np.eye(3)[r.integers(3, 4)]
    g = nn.backward(spec, p, X, T, loss_kind="cross_entropy")
    fd = finite_difference(lambda: nn.loss("cross_entropy", nn.forward(spec, p, X).output, T), [*p.weights, *p.biases])
    for a, f in zip([*g.weights, *g.biases], fd):
        np.testing.assert_allclose(a, f, rtol=1e-5, atol=1e-9)


def test_dropout_mask_zeroes_unit_gradients():
    p = params(7)
    X = Rng(7).uniform(-1, 1, (1, 10))
    masks = [np.ones((1, 10)), np.ones((1, 10))]
    masks[0][0, 4] = 0.0
    g = nn.backward(SPEC, p, X, np.array([0.3]), masks)
    assert g.biases[0][4] == 0.0 and not g.weights[0][4].any()
    assert not g.weights[1][:, 4].any()


def test_init_params():
    a = nn.init_params(SPEC, "he", 5)
    b = nn.init_params(SPEC, "he", 5)
    assert a.equal(b)
    assert all(not bias.any() for bias in a.biases)
    big = nn.NetworkSpec((10, 10000))
    w = nn.init_params(big, "he", 1).weights[0]
    assert abs(w.var() - 0.2) < 0.04
    wx = nn.init_params(big, "xavier", 1).weights[0]
    assert abs(wx.var() - 2 / 10010) < 0.2 * 2 / 10010
    with pytest.raises(ValueError):
        nn.init_params(SPEC, "lecun", 0)


def test_save_load_roundtrip(tmp_path):
    p = params(9)
    nn.save_params(tmp_path / "m.npz", SPEC, p)
    spec, q = nn.load_params(tmp_path / "m.npz")
    assert spec == SPEC and q.equal(p)


def test_flat_roundtrip():
    p = params(1)
    assert p.with_flat(p.flat()).equal(p)
    assert p.flat().size == 10 * 10 + 10 + 10 * 10 + 10 + 10 + 1
