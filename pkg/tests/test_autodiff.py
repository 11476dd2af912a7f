import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moiie import autodiff as ad
from moiie.layers import FFN, Linear


def t64(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    y = ad.softmax(t64([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(y.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_two_values_matches_closed_form():
    e2, e1 = math.exp(2.0), math.exp(1.0)
    y = ad.softmax(t64([2.0, 1.0]))
    np.testing.assert_allclose(y.data, [e2 / (e2 + e1), e1 / (e2 + e1)], rtol=1e-14)
    np.testing.assert_allclose(y.data, [0.73106, 0.26894], atol=5e-6)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalisation(x, c):
    y = ad.softmax(t64(x), axis=-1).data
    y_shift = ad.softmax(t64(x + c), axis=-1).data
    np.testing.assert_allclose(y, y_shift, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y > 0).all() and (y <= 1).all()


def test_softmax_errors():
    with pytest.raises(ValueError):
        ad.softmax(ad.Tensor(np.zeros((2, 0))), axis=-1)
    with pytest.raises(ad.NonFiniteError):
        ad.softmax(t64([1.0, np.inf]))


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_is_log_vocab():
    loss = ad.cross_entropy(t64(np.zeros((3, 16))), np.array([0, 5, 15]))
    assert loss.item() == pytest.approx(-math.log(1 / 16), abs=1e-12)
    assert loss.item() == pytest.approx(2.7726, abs=1e-4)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 8))
    logits[0, 3] = 30.0
    assert ad.cross_entropy(t64(logits), np.array([3])).item() < 1e-9


def test_cross_entropy_mask_ignores_position():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 6))
    targets = np.array([1, 2, 3, 4])
    mask = np.array([True, False, True, True])
    base = ad.cross_entropy(t64(logits), targets, mask).item()
    logits[1] = rng.normal(size=6) * 100
    assert ad.cross_entropy(t64(logits), targets, mask).item() == base


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        ad.cross_entropy(t64(np.zeros((2, 4))), np.array([0, 1]), np.array([False, False]))
    with pytest.raises(IndexError):
        ad.cross_entropy(t64(np.zeros((2, 4))), np.array([0, 4]))


# ---------------------------------------------------------------- backward


def test_backward_quadratic():
    x = t64(3.0, grad=True)
    with ad.Tape():
        y = x * x
    ad.backward(y)
    assert x.grad == pytest.approx(6.0)


def test_softmax_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(1)
    logits = t64(rng.normal(size=(5, 7)), grad=True)
    targets = np.array([0, 6, 2, 2, 3])
    mask = np.array([True, True, False, True, True])
    with ad.Tape():
        loss = ad.cross_entropy(logits, targets, mask)
    ad.backward(loss)
    z = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    expected = p - np.eye(7)[targets]
    expected[~mask] = 0
    expected /= mask.sum()
    np.testing.assert_allclose(logits.grad, expected, atol=1e-14)


def test_unreachable_parameter_gets_zero_grad():
    a, b = t64([1.0, 2.0], grad=True), t64([5.0, 5.0], grad=True)
    b.grad = np.ones(2)
    with ad.Tape():
        loss = ad.sum(a * a)
    ad.backward(loss, [a, b])
    np.testing.assert_array_equal(b.grad, 0.0)
    np.testing.assert_allclose(a.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    a = t64([1.0, 2.0], grad=True)
    with ad.Tape():
        y = a * a
    with pytest.raises(ValueError):
        ad.backward(y)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(2)
    w = t64(rng.normal(size=(3, 4)), grad=True)
    x = t64(rng.normal(size=(5, 3)))

    def losses():
        h = ad.gelu(ad.matmul(x, w))
        return ad.sum(h * h), ad.mean(ad.softmax(h, -1) * h)

    grads = []
    for pick in (0, 1):
        with ad.Tape():
            loss = losses()[pick]
        ad.backward(loss, [w])
        grads.append(w.grad.copy())
    with ad.Tape():
        l1, l2 = losses()
        loss = l1 + l2
    ad.backward(loss, [w])
    np.testing.assert_allclose(w.grad, grads[0] + grads[1], rtol=0, atol=1e-12)


def test_tape_is_topologically_ordered_and_replayed_once():
    a = t64([1.0, -2.0], grad=True)
    with ad.Tape() as tape:
        b = ad.gelu(a)
        c = b * a
        loss = ad.sum(c + b)
    position = {id(node): i for i, node in enumerate(tape.nodes)}
    for node in tape.nodes:
        for inp in node._inputs:
            if id(inp) in position:
                assert position[id(inp)] < position[id(node)]
    calls = []
    for node in tape.nodes:
        inner = node._vjp
        node._vjp = lambda g, inner=inner: calls.append(1) or inner(g)
    ad.backward(loss)
    assert len(calls) == len(tape.nodes)


def test_non_finite_results_are_errors():
    with pytest.raises(ad.NonFiniteError):
        ad.scale(t64([1e308]), 10.0)


def test_shape_checks_refuse_implicit_broadcast():
    with pytest.raises(ValueError):
        ad.add(t64(np.ones((2, 3))), t64(np.ones(3)))
    with pytest.raises(ValueError):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_no_recording_outside_a_tape():
    a = t64([1.0], grad=True)
    y = a * a
    assert y._vjp is None and not y.requires_grad


# ---------------------------------------------------------------- gradient checks per primitive

RNG = np.random.default_rng(3)


def _check(loss_fn, params, probes=40):
    return ad.grad_check(loss_fn, params, probes=probes, seed=7)


def _weights(shape):
    return ad.Tensor(RNG.normal(size=shape), requires_grad=True)


PRIMITIVES = {
    "matmul": lambda a, b: ad.matmul(a, b),
    "batched_matmul": lambda a, b: ad.matmul(ad.reshape(a, (2, 2, 3)), ad.reshape(b, (2, 3, 2))),
    "add_mul": lambda a, b: ad.mul(ad.add(a, a), ad.sub(a, ad.scale(a, 0.3))),
    "bias_add": lambda a, b: ad.bias_add(a, ad.reshape(ad.slice_axis(b, 1, 0, 1), (3,))),
    "gelu": lambda a, b: ad.gelu(a),
    "rms_norm": lambda a, b: ad.rms_norm(a, ad.reshape(ad.slice_axis(b, 1, 0, 1), (3,))),
    "softmax": lambda a, b: ad.softmax(a, axis=-1),
    "log_softmax": lambda a, b: ad.log_softmax(a, axis=0),
    "concat_slice": lambda a, b: ad.slice_axis(ad.concat([a, ad.transpose(b, (1, 0))], axis=0), 0, 1, 6),
    "gather_scatter": lambda a, b: ad.scatter_rows(5, [(np.array([4, 0]), ad.gather_rows(a, np.array([1, 1]))),
                                                      (np.array([0, 2, 3, 1]), a)], like=a),
    "take_pick": lambda a, b: ad.scale_rows(ad.take_along(a, np.array([[2, 0], [1, 1], [0, 2], [2, 1]])),
                                            ad.pick(a, np.arange(4), np.array([0, 1, 2, 0]))),
    "scatter_cols": lambda a, b: ad.scatter_cols(a, np.array([[4, 0, 2], [1, 3, 0], [0, 1, 2], [2, 4, 3]]), 5),
    "masked_fill": lambda a, b: ad.masked_fill(a, np.array([[True, False, True]] * 4), -3.0),
    "mean_sum": lambda a, b: ad.mean(ad.sum(a, axis=1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    a, b = _weights((4, 3)), _weights((3, 4))
    probe = RNG.normal(size=PRIMITIVES[name](a, b).shape)

    def loss():
        out = PRIMITIVES[name](a, b)
        return ad.sum(ad.mul(out, ad.constant(probe)))

    assert _check(loss, [a, b]) <= 1e-4


def test_embedding_and_cross_entropy_gradients():
    table = _weights((6, 4))
    head = _weights((4, 5))
    ids = np.array([0, 3, 3, 5])

    def loss():
        logits = ad.matmul(ad.embedding(table, ids), head)
        return ad.cross_entropy(logits, np.array([1, 4, 0, 2]), np.array([True, True, False, True]))

    assert _check(loss, [table, head]) <= 1e-4


def test_dense_ffn_grad_check():
    ffn = FFN(8, 32, np.random.default_rng(4), np.float64, std=0.3)
    x = ad.constant(np.random.default_rng(5).normal(size=(6, 8)))
    target = np.random.default_rng(6).normal(size=(6, 8))

    def loss():
        return ad.sum(ad.mul(ffn(x), ad.constant(target)))

    assert _check(loss, ffn.parameters(), probes=64) <= 1e-4


def test_linear_layer_finite_difference_exact():
    lin = Linear(3, 2, np.random.default_rng(8), np.float64, std=1.0)
    x = ad.constant(np.array([[0.5, -1.0, 2.0]]))
    assert _check(lambda: ad.sum(lin(x)), lin.parameters(), probes=16) <= 1e-9


def test_grad_check_requires_float64():
    p = ad.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        ad.grad_check(lambda: ad.sum(p), [p])


def test_grad_check_reports_unstable_selection():
    w = ad.Tensor(np.array([1.0, 1.0 + 1e-9]), requires_grad=True)

    def loss():
        idx = ad.topk_indices(w.data[None, :], 1)
        return ad.sum(ad.take_along(ad.reshape(w, (1, 2)), idx))

    with pytest.raises(ad.SelectionInstabilityError):
        ad.grad_check(loss, [w], probes=4)


def test_topk_tie_breaks_to_lower_index():
    idx = ad.topk_indices(np.array([[1.0, 1.0, 1.0], [0.0, 2.0, 2.0]]), 2)
    np.testing.assert_array_equal(idx, [[0, 1], [1, 2]])
