import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctcd.errors import ConfigError, NumericError, UsageError
from ctcd.numcore import (
    DenseArray,
    Rng,
    Tape,
    add,
    backward,
    concat,
    conv1d,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    sum_,
    tanh,
)
from ctcd.numcore.gradcheck import check_gradients


# -- rng ----------------------------------------------------------------------


def test_pcg32_reference_stream():
    # first outputs of pcg32_srandom(42, 54) from the PCG reference demo
    rng = Rng(42, 54)
    got = [rng.next_u32() for _ in range(6)]
    assert got == [0xA15C02B7, 0x7B47F409, 0xBA1D3330, 0x83D2F293, 0xBFA4784B, 0xCBED606E]


def test_rng_streams_identical_for_equal_seeds():
    a, b = Rng(1234), Rng(1234)
    assert all(a.next_u32() == b.next_u32() for _ in range(20000))
    assert Rng(1).next_u32() != Rng(2).next_u32()


def test_box_muller_consumes_two_uniforms_per_pair():
    rng, ref = Rng(7), Rng(7)
    z0, z1 = rng.normal(), rng.normal()
    u1, u2 = 1.0 - ref.uniform(), ref.uniform()
    r = math.sqrt(-2 * math.log(u1))
    assert z0 == r * math.cos(2 * math.pi * u2)
    assert z1 == r * math.sin(2 * math.pi * u2)
    assert rng.state == ref.state


def test_normal_moments():
    z = Rng(3).normal_array(20000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_randint_bounds_and_coverage():
    rng = Rng(5)
    draws = [rng.randint(2, 6) for _ in range(2000)]
    assert set(draws) == {2, 3, 4, 5, 6}
    with pytest.raises(ValueError):
        rng.randint(3, 2)


def test_permutation_is_permutation():
    assert sorted(Rng(9).permutation(50)) == list(range(50))


# -- primitive values ------------------------------------------------------------


def test_sigmoid_zero():
    assert sigmoid(DenseArray([0.0])).item() == 0.5


def test_sigmoid_extremes_stay_finite():
    s = sigmoid(DenseArray([-800.0, 800.0])).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_softmax_uniform():
    np.testing.assert_array_equal(softmax(DenseArray([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    x = DenseArray(Rng(1).normal_array((4, 5, 7), 10.0))
    s = softmax(x, axis=-1).data
    assert np.max(np.abs(s.sum(-1) - 1.0)) < 1e-12


def test_conv1d_identity_kernel():
    x = Rng(2).normal_array((2, 5, 3))
    w = np.eye(3)[None]
    np.testing.assert_array_equal(conv1d(DenseArray(x), DenseArray(w)).data, x)


def test_conv1d_matches_direct_sum():
    rng = Rng(4)
    x = rng.normal_array((6, 2))
    w = rng.normal_array((3, 2, 4))
    xp = np.vstack([np.zeros((1, 2)), x, np.zeros((1, 2))])
    expected = np.stack([sum(xp[t + k] @ w[k] for k in range(3)) for t in range(6)])
    np.testing.assert_allclose(conv1d(DenseArray(x), DenseArray(w)).data, expected, atol=1e-14)


def test_log_softmax_equals_x_minus_logsumexp():
    rng = Rng(11)
    for _ in range(20):
        x = rng.normal_array((3, 6), 20.0)
        ls = log_softmax(DenseArray(x)).data
        m = x.max(-1, keepdims=True)
        lse = m + np.log(np.exp(x - m).sum(-1, keepdims=True))
        assert np.max(np.abs(ls - (x - lse))) < 1e-12


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        add(DenseArray(np.ones((2, 3))), DenseArray(np.ones((4, 3))))
    with pytest.raises(ConfigError):
        matmul(DenseArray(np.ones((2, 3))), DenseArray(np.ones((2, 3))))
    with pytest.raises(ConfigError):
        conv1d(DenseArray(np.ones((4, 3))), DenseArray(np.ones((2, 3, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_names_op_and_index():
    with pytest.raises(NumericError, match=r"mul: non-finite output at index \(1,\)"):
        mul(DenseArray([1.0, 1e200]), DenseArray([1.0, 1e200]))


def test_rank_above_three_rejected():
    with pytest.raises(ConfigError):
        DenseArray(np.zeros((1, 1, 1, 1)))


# -- backward ------------------------------------------------------------------


def test_grad_of_sum_is_ones():
    x = DenseArray([1.0, 2.0, 3.0], requires_grad=True)
    backward(sum_(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_mean_of_square_matches_finite_differences():
    x = DenseArray(Rng(8).normal_array(5), requires_grad=True)
    err = check_gradients(lambda: mean(mul(x, x)), [x])
    assert err < 1e-6


def test_detached_input_gets_no_grad():
    x = DenseArray([1.0, 2.0], requires_grad=True)
    c = DenseArray([3.0, 4.0])
    backward(sum_(mul(x, c)))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_non_scalar_root_is_usage_error():
    x = DenseArray([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        backward(mul(x, x))
    with pytest.raises(UsageError):
        backward(sum_(DenseArray([1.0])))


def test_gradients_accumulate_across_calls():
    x = DenseArray([2.0], requires_grad=True)
    backward(mul(x, x))
    backward(mul(x, x))
    np.testing.assert_array_equal(x.grad, [8.0])


def test_tape_records_in_order_and_backward_reverses_it():
    x = DenseArray([0.3, -0.2], requires_grad=True)
    with Tape() as tape:
        y = tanh(x)
        z = mul(y, y)
        root = sum_(z)
    assert [op.name for op in tape.ops] == ["tanh", "mul", "sum"]
    seqs = [op.seq for op in tape.ops]
    assert seqs == sorted(seqs)

    visited = []
    for op in tape.ops:
        inner = op.backward

        def spy(g, _inner=inner, _name=op.name):
            visited.append(_name)
            return _inner(g)

        op.backward = spy
    backward(root)
    assert visited == ["sum", "mul", "tanh"]


def test_shared_subexpression_accumulates():
    x = DenseArray([1.5], requires_grad=True)
    y = mul(x, 3.0)
    backward(add(y, y))
    np.testing.assert_array_equal(x.grad, [6.0])


# -- gradient checks per primitive (50 random shapes/seeds) ---------------------

_UNARY = {
    "relu": lambda a: relu(a),
    "sigmoid": lambda a: sigmoid(a),
    "tanh": lambda a: tanh(a),
    "softmax": lambda a: softmax(a, axis=-1),
    "log_softmax": lambda a: log_softmax(a, axis=-1),
    "logsumexp": lambda a: logsumexp(a, axis=-1),
    "mean_axis": lambda a: mean(a, axis=0),
    "sum_axis": lambda a: sum_(a, axis=-1, keepdims=True),
    "scale": lambda a: scale(a, -2.5),
    "slice": lambda a: slice_(a, (slice(None, None, -1),)),
    "reshape": lambda a: reshape(a, (-1,)),
}


def _random_shape(rng: Rng) -> tuple[int, ...]:
    return tuple(rng.randint(1, 4) for _ in range(rng.randint(1, 3)))


def _weighted(out: DenseArray, rng: Rng) -> DenseArray:
    # a random projection makes every output element matter
    w = rng.normal_array(out.shape)
    return sum_(mul(out, w))


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_primitive_gradients(name):
    fn = _UNARY[name]
    worst = 0.0
    for seed in range(50):
        rng = Rng(1000 + seed)
        x = rng.normal_array(_random_shape(rng))
        if name == "relu":
            x[np.abs(x) < 1e-3] += 0.01  # keep away from the kink
        xa = DenseArray(x, requires_grad=True)
        wseed = rng.next_u32()
        worst = max(worst, check_gradients(lambda: _weighted(fn(xa), Rng(wseed)), [xa]))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["add", "mul", "matmul", "conv1d", "concat"])
def test_binary_primitive_gradients(name):
    worst = 0.0
    for seed in range(50):
        rng = Rng(2000 + seed)
        b, t, c, d = (rng.randint(1, 3), rng.randint(1, 5), rng.randint(1, 3), rng.randint(1, 3))
        if name in ("add", "mul"):
            a_, b_ = rng.normal_array((b, t, c)), rng.normal_array((t, c) if seed % 2 else (c,))
            fn = add if name == "add" else mul
        elif name == "matmul":
            a_, b_ = rng.normal_array((b, t, c)), rng.normal_array((c, d))
            fn = matmul
        elif name == "conv1d":
            k = 2 * rng.randint(0, 2) + 1
            a_, b_ = rng.normal_array((b, t, c)), rng.normal_array((k, c, d))
            fn = conv1d
        else:
            a_, b_ = rng.normal_array((b, t, c)), rng.normal_array((b, t, d))
            fn = lambda p, q: concat([p, q], axis=-1)  # noqa: E731
        pa, pb = DenseArray(a_, requires_grad=True), DenseArray(b_, requires_grad=True)
        wseed = rng.next_u32()
        worst = max(worst, check_gradients(lambda: _weighted(fn(pa, pb), Rng(wseed)), [pa, pb]))
    assert worst < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_property_rows_normalized(values):
    s = softmax(DenseArray(values)).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s >= 0)
