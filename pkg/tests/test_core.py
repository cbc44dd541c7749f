import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tape.core import AdamState, ParameterStore, Tape, Tensor, adam_step, backward, gradcheck, no_grad, ops
from tape.core.attention import init_attention, multi_head_attention
from tape.core.gradcheck import numerical_grad, relative_error
from tape.errors import ConfigurationError, DimensionError, UsageError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def weighted_sum(out, seed=0):
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, r))


# --- conv2d ---------------------------------------------------------------------------

def test_conv2d_all_ones_hand_convolution():
    out = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out.data[0], expected)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = b[o] + np.sum(xp[:, i:i + 3, j:j + 3] * k[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_conv2d_gradcheck_sum(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng.normal(size=(2, 4, 4))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    errors = gradcheck(lambda: ops.sum(ops.conv2d(x, w, b, padding=1)), [x, w, b])
    assert max(errors) < 1e-4


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((3, 3))), Tensor(np.ones((1, 1, 3, 3))))


# --- linear ---------------------------------------------------------------------------

def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


def test_linear_hand_example():
    out = ops.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.5, 0.0]))
    np.testing.assert_allclose(out.data, [3.5, 2.0])


def test_linear_gradcheck():
    rng = np.random.default_rng(3)
    x, w, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=5))
    assert max(gradcheck(lambda: weighted_sum(ops.linear(x, w, b)), [x, w, b])) < 1e-4


def test_linear_shape_error():
    with pytest.raises(DimensionError):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# --- layernorm ------------------------------------------------------------------------

def test_layernorm_constant_row_is_zero():
    out = ops.layernorm(Tensor(np.full((2, 6), 3.7)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layernorm_standardizes():
    x = np.random.default_rng(4).normal(size=(5, 32))
    out = ops.layernorm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layernorm_default_eps_standardizes_wide_inputs():
    # with the default eps the variance is var / (var + eps); near 1 once var >> eps
    x = 10.0 * np.random.default_rng(5).normal(size=(5, 32))
    out = ops.layernorm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layernorm_gradcheck():
    rng = np.random.default_rng(6)
    x, g, s = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    assert max(gradcheck(lambda: weighted_sum(ops.layernorm(x, g, s)), [x, g, s])) < 1e-4


# --- softmax --------------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-12)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(7).normal(size=(4, 7)) * 5
    np.testing.assert_allclose(ops.softmax(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_large_logits_stay_finite():
    out = ops.softmax(Tensor([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite))
def test_softmax_is_a_distribution(x):
    out = ops.softmax(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ops.log_softmax(Tensor(x)).data, np.log(np.maximum(out, 1e-300)), atol=1e-9)


# --- l2 normalize ---------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(-8, 2), st.integers(0, 10_000))
def test_l2_normalize_gives_unit_rows_at_any_scale(d, log_scale, seed):
    x = np.random.default_rng(seed).normal(size=(4, d)) * 10.0 ** log_scale
    out = ops.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(out, x / np.linalg.norm(x, axis=-1, keepdims=True), rtol=1e-14)


def test_l2_normalize_zero_row_stays_zero():
    x = leaf(np.zeros((2, 3)))
    backward(weighted_sum(ops.l2_normalize(x)))
    assert np.array_equal(ops.l2_normalize(Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))
    assert np.all(np.isfinite(x.grad))


@pytest.mark.parametrize("scale", [1.0, 1e-3])
def test_l2_normalize_gradcheck(scale):
    x = leaf(np.random.default_rng(9).normal(size=(3, 4)) * scale)
    assert max(gradcheck(lambda: weighted_sum(ops.l2_normalize(x)), [x], h=1e-5 * scale)) < 1e-4


# --- attention ------------------------------------------------------------------------

def _attention_store(d, rng):
    store = ParameterStore()
    init_attention(store, "a", d, rng)
    for t in store.values():
        t.data = rng.normal(size=t.shape)
    return store


def test_attention_single_token_is_value_path():
    rng = np.random.default_rng(8)
    store = _attention_store(4, rng)
    p = store.scope("a")
    q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2, p).data
    expected = (v @ p["wv"].data.T + p["bv"].data) @ p["wo"].data.T + p["bo"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_identity_projections_select_rows():
    d, heads = 4, 1
    store = ParameterStore()
    for proj in "qkvo":
        store.add(f"a.w{proj}", np.eye(d))
        store.add(f"a.b{proj}", np.zeros(d))
    keys = np.eye(d)
    values = np.random.default_rng(9).normal(size=(d, d))
    q = keys[[2, 0, 3, 1]]
    soft = multi_head_attention(Tensor(q), Tensor(keys), Tensor(values), heads, store.scope("a")).data
    sharp = multi_head_attention(Tensor(q), Tensor(keys), Tensor(values), heads, store.scope("a"), scale=1e4).data
    target = values[[2, 0, 3, 1]]
    assert np.abs(soft - target).max() > 1e-3  # leakage at the default scale
    np.testing.assert_allclose(sharp, target, atol=1e-12)


def test_attention_gradcheck():
    rng = np.random.default_rng(10)
    store = _attention_store(4, rng)
    q, k, v = (leaf(rng.normal(size=(3, 4))) for _ in range(3))
    p = store.scope("a")
    errors = gradcheck(lambda: weighted_sum(multi_head_attention(q, k, v, 2, p)), [q, k, v, *store.values()])
    assert max(errors) < 1e-4


def test_attention_rejects_indivisible_heads():
    store = _attention_store(4, np.random.default_rng(0))
    x = Tensor(np.ones((2, 4)))
    with pytest.raises(ConfigurationError):
        multi_head_attention(x, x, x, 3, store.scope("a"))


# --- backward / tape ------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, -2.0, 3.0])
    backward(ops.sum(ops.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_composite_l1_conv_gradcheck():
    rng = np.random.default_rng(11)
    x, w, b = leaf(rng.normal(size=(2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    target = rng.normal(size=(3, 5, 5))
    assert max(gradcheck(lambda: ops.l1_loss(ops.conv2d(x, w, b), target), [x, w, b])) < 1e-4


def test_backward_twice_is_usage_error():
    x = leaf([1.0, 2.0])
    loss = ops.sum(ops.square(x))
    backward(loss)
    with pytest.raises(UsageError):
        backward(loss)


def test_backward_needs_scalar_and_grad():
    with pytest.raises(UsageError):
        backward(ops.square(leaf([1.0, 2.0])))
    with pytest.raises(UsageError):
        backward(ops.sum(Tensor([1.0, 2.0])))


def test_tape_is_topological_and_visits_each_node_once():
    x = leaf([0.5, -1.5])
    y = ops.mul(x, x)
    z = ops.add(y, y)  # y is shared by both operands
    loss = ops.sum(ops.relu(z))
    tape = Tape.record(loss)
    ids = [id(n) for n in tape]
    assert len(ids) == len(set(ids))
    position = {i: k for k, i in enumerate(ids)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    backward(ops.sum(x))
    backward(ops.sum(ops.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_backward_fills_unreached_params_with_zeros():
    x, unused = leaf([1.0]), leaf([5.0, 6.0])
    backward(ops.sum(x), [x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_broadcast_gradients_reduce_to_operand_shape():
    a, b = leaf(np.ones((3, 4))), leaf(np.arange(4.0))
    assert max(gradcheck(lambda: weighted_sum(ops.mul(ops.add(a, b), b)), [a, b])) < 1e-4
    assert b.grad.shape == (4,)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_forward_is_deterministic_and_finite(x):
    f = lambda: ops.layernorm(ops.linear(Tensor(x), Tensor(np.ones((3, x.shape[1]))), None),  # noqa: E731
                              Tensor(np.ones(3)), Tensor(np.zeros(3)))
    a, b = f().data, f().data
    assert np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_grad_shape_matches_data(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, size=2))
    x = leaf(rng.normal(size=shape))
    backward(ops.sum(ops.softmax(ops.mul(x, x))))
    assert x.grad.shape == x.data.shape


# --- gradcheck utilities --------------------------------------------------------------

def test_numerical_grad_matches_polynomial_derivative():
    x = Tensor([0.3, -1.2, 2.0])
    num = numerical_grad(lambda: ops.sum(ops.mul(ops.square(x), x)), x)
    np.testing.assert_allclose(num, 3 * x.data ** 2, rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-6
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_gradcheck_detects_a_wrong_backward():
    from tape.core.tensor import make_result

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")

    x = leaf([1.0, 2.0])
    assert max(gradcheck(lambda: ops.sum(bad_square(x)), [x])) > 0.1


def test_gradcheck_handles_relu_kink():
    # x sits 1e-6 from the kink, inside the finite-difference step
    x = leaf([1e-6, -0.5, 2.0])
    assert max(gradcheck(lambda: ops.sum(ops.relu(x)), [x])) < 1e-4


# --- Adam -----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    store = ParameterStore()
    p = store.add("p", [1.0, -2.0])
    p.grad = np.zeros(2)
    state = AdamState(lr=0.1)
    adam_step(store, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_lr_times_sign():
    store = ParameterStore()
    p = store.add("p", [0.0, 0.0, 0.0])
    g = np.array([0.5, -3.0, 1e-3])
    p.grad = g.copy()
    lr = 0.01
    adam_step(store, AdamState(lr=lr))
    # bias-corrected m/sqrt(v) is g/|g| at t=1 apart from eps
    expected = -lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(p.data, -lr * np.sign(g), rtol=1e-4)


def test_adam_minimizes_quadratic():
    store = ParameterStore()
    p = store.add("p", [0.0])
    state = AdamState(lr=0.1)
    for _ in range(200):
        backward(ops.sum(ops.square(ops.sub(p, 3.0))))
        adam_step(store, state)
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_missing_gradient_is_usage_error():
    store = ParameterStore()
    store.add("p", [1.0])
    with pytest.raises(UsageError):
        adam_step(store, AdamState())


def test_adam_zeroes_gradients_after_step():
    store = ParameterStore()
    p = store.add("p", [1.0])
    p.grad = np.array([2.0])
    adam_step(store, AdamState())
    np.testing.assert_array_equal(p.grad, [0.0])


# --- parameter store ------------------------------------------------------------------

def test_parameter_store_scope_merge_and_copy():
    store = ParameterStore()
    store.add("enc.w", np.ones(2))
    store.add("enc.b", np.zeros(2))
    store.add("dec.w", np.ones(3))
    view = store.scope("enc")
    assert sorted(view) == ["b", "w"]
    merged = ParameterStore.merge(a=store)
    assert merged["a/enc.w"] is store["enc.w"]
    clone = store.copy()
    clone["enc.w"].data[0] = 9.0
    assert store["enc.w"].data[0] == 1.0
    assert store.num_parameters() == 7
