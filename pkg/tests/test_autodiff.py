import numpy as np
import pytest

from fcnrlstm import autodiff as ad
from fcnrlstm import ops
from fcnrlstm.autodiff import Parameter, Tape, Var
from fcnrlstm.errors import InvalidArgumentError
from fcnrlstm.gradcheck import SUITES, check_leaves
from fcnrlstm.ops import ConvSpec


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_sigmoid_activation_on_zeros():
    out = ad.forward(ad.Activation("sigmoid"), Var(np.zeros((2, 3))), Tape())
    assert np.all(out.value == 0.5)


def test_dense_identity_passthrough(rng):
    layer = ad.Dense(4, 4, rng=rng, dtype=np.float64)
    layer.params["weight"].value[...] = np.eye(4)
    layer.params["bias"].value[...] = 0
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(layer(Var(x)).value, x)


def test_three_layer_chain_matches_hand_composition(rng):
    conv = ad.Conv2d(2, 3, 3, dilation=2, rng=rng, dtype=np.float64)
    pool = ad.MaxPool2d(2, 2)
    act = ad.Activation("tanh")
    x = rng.standard_normal((2, 2, 8, 8))
    tape = Tape()
    y = act(pool(conv(Var(x), tape), tape), tape)
    w, b = conv.params["weight"].value, conv.params["bias"].value
    ref = np.tanh(ops.max_pool2d(ops.conv2d(x, w, b, ConvSpec.same(3, 2)), 2, 2)[0])
    np.testing.assert_array_equal(y.value, ref)
    assert tape.op_names == ["atrous-conv", "maxpool", "tanh"]


def test_forward_rejects_bad_shape(rng):
    conv = ad.Conv2d(2, 3, 3, rng=rng)
    with pytest.raises(InvalidArgumentError):
        conv(Var(np.zeros((1, 5, 8, 8), dtype=np.float32)), Tape())


def test_backward_errors(rng):
    with pytest.raises(InvalidArgumentError):
        Tape().backward(Var(np.zeros(())))
    p = Parameter(rng.standard_normal((2, 2)))
    tape = Tape()
    out = ad.tanh(p, tape)
    with pytest.raises(InvalidArgumentError):
        tape.backward(out, np.ones((3, 2)))


def test_zero_loss_gradient_gives_zero_accumulators(rng):
    layer = ad.Dense(3, 2, rng=rng, dtype=np.float64)
    tape = Tape()
    out = layer(Var(rng.standard_normal((4, 3))), tape)
    tape.backward(out, np.zeros(out.shape))
    assert all(not p.grad.any() for p in layer.parameters())


def test_single_op_tape_equals_op_backward(rng):
    x, w, b = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    spec = ConvSpec.same(3)
    xv, wv, bv = Parameter(x.copy()), Parameter(w.copy()), Parameter(b.copy())
    tape = Tape()
    out = ad.conv2d(xv, wv, bv, spec, tape)
    g = rng.standard_normal(out.shape)
    tape.backward(out, g)
    gx, gw, gb = ops.conv2d_backward(g, x, w, spec)
    np.testing.assert_array_equal(xv.grad, gx)
    np.testing.assert_array_equal(wv.grad, gw)
    np.testing.assert_array_equal(bv.grad, gb)


def test_diamond_fan_out_sums_paths(rng):
    x = Parameter(rng.standard_normal((3, 4)))
    tape = Tape()
    a = ad.tanh(x, tape)
    left = ad.sigmoid(a, tape)
    right = ad.mul(a, a, tape)
    out = ad.add(left, right, tape)
    tape.backward(out, np.ones(out.shape))
    t = np.tanh(x.value)
    s = 1 / (1 + np.exp(-t))
    per_path = (s * (1 - s)) * (1 - t * t) + 2 * t * (1 - t * t)
    np.testing.assert_allclose(x.grad, per_path, rtol=1e-12)


def test_two_backward_calls_double_accumulators(rng):
    layer = ad.Dense(3, 2, rng=rng, dtype=np.float64)
    x = Var(rng.standard_normal((4, 3)))
    tape = Tape()
    out = layer(x, tape)
    g = rng.standard_normal(out.shape)
    tape.backward(out, g)
    once = [p.grad.copy() for p in layer.parameters()]
    tape.backward(out, g)
    for p, o in zip(layer.parameters(), once):
        np.testing.assert_array_equal(p.grad, 2 * o)
    ad.zero_grads(layer.parameters())
    assert all(not p.grad.any() for p in layer.parameters())


def test_forward_backward_leaves_parameters_unchanged(rng):
    layer = ad.Conv2d(1, 2, 3, rng=rng, dtype=np.float64)
    before = [p.value.copy() for p in layer.parameters()]
    tape = Tape()
    out = layer(Var(rng.standard_normal((1, 1, 5, 5))), tape)
    tape.backward(out, np.ones(out.shape))
    for p, b in zip(layer.parameters(), before):
        np.testing.assert_array_equal(p.value, b)
        assert p.grad.shape == p.value.shape


def test_collect_params_is_deterministic():
    from fcnrlstm.gradcheck import tiny_model
    m = tiny_model()
    a = [n for n, _ in ad.collect_params(m)]
    b = [n for n, _ in ad.collect_params(m)]
    assert a == b and len(a) == len(set(a))
    assert a[0].startswith("conv1a") and a[-2:] == ["fc.weight", "fc.bias"]


def test_no_tape_records_nothing(rng):
    x = Parameter(rng.standard_normal((2, 2)))
    out = ad.sigmoid(x)
    assert out.requires_grad and x.grad is not None and not x.grad.any()


def test_initialisation_ranges(rng):
    conv = ad.Conv2d(4, 8, 3, rng=rng, dtype=np.float64)
    bound = ad.RELU_GAIN / np.sqrt(4 * 9)
    assert np.abs(conv.params["weight"].value).max() <= bound
    assert not conv.params["bias"].value.any()


@pytest.mark.parametrize("kind", [k for k in SUITES if k != "network"])
def test_op_suites_below_tolerance(kind):
    assert SUITES[kind](np.random.default_rng(3)) < 1e-4


def test_check_leaves_detects_a_wrong_rule(rng):
    # a deliberately broken backward must be caught
    x = Var(rng.standard_normal((3, 3)), requires_grad=True)

    def bad(tape):
        return ad._emit(np.sin(x.value), (x,), tape, lambda g, needs: (g * np.sin(x.value),), "bad")

    assert check_leaves(bad, [x], rng) > 1e-2
