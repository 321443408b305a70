from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comoe import autograd as ag
from comoe.autograd import ContractError, DegenerateInputError, DomainError, ShapeError, Tensor


def _param(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _weights(rng, shape):
    # fixed projection so every op reduces to a scalar with a non-trivial gradient
    return Tensor(rng.normal(size=shape))


OPS = {
    "add": lambda a, b: ag.add(a, b),
    "sub": lambda a, b: ag.sub(a, b),
    "mul": lambda a, b: ag.mul(a, b),
    "div": lambda a, b: ag.div(a, ag.add(ag.mul(b, b), 1.0)),
    "exp": lambda a, b: ag.exp(a),
    "log": lambda a, b: ag.log(ag.add(ag.mul(a, a), 0.5)),
    "tanh": lambda a, b: ag.tanh(a),
    "softmax": lambda a, b: ag.softmax(a, axis=1),
    "log_softmax": lambda a, b: ag.log_softmax(a, axis=0),
    "l2_normalize": lambda a, b: ag.l2_normalize(a, axis=1),
    "transpose": lambda a, b: ag.transpose(ag.transpose(a)),
    "reshape": lambda a, b: ag.reshape(ag.reshape(a, (12,)), (3, 4)),
    "neg_scale": lambda a, b: ag.scale(ag.neg(a), 2.5),
    "stack": lambda a, b: ag.sum(ag.stack([a, b], axis=1), axis=1),
    "einsum": lambda a, b: ag.einsum("ij,ij->ij", a, b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_ops_gradcheck(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = _weights(rng, (3, 4))
    err = ag.gradcheck(lambda: ag.sum(ag.mul(OPS[name](a, b), w)), [a, b])
    assert err < 1e-6, name


def test_matmul_dot_and_reductions_gradcheck():
    rng = np.random.default_rng(1)
    a, b = _param(rng, 3, 5), _param(rng, 5, 2)
    u, v = _param(rng, 6), _param(rng, 6)
    w = _weights(rng, (3, 2))
    assert ag.gradcheck(lambda: ag.sum(ag.mul(ag.matmul(a, b), w)), [a, b]) < 1e-6
    assert ag.gradcheck(lambda: ag.mul(ag.dot(u, v), ag.dot(u, u)), [u, v]) < 1e-6
    assert ag.gradcheck(lambda: ag.dot(ag.sum(a, axis=0), ag.mean(ag.transpose(a), axis=1)), [a]) < 1e-6


def test_einsum_contractions_gradcheck():
    rng = np.random.default_rng(2)
    x, A, B = _param(rng, 4, 6), _param(rng, 3, 6), _param(rng, 5, 3)
    w = _weights(rng, (4, 5))
    fn = lambda: ag.sum(ag.mul(ag.einsum("br,or->bo", ag.einsum("bd,rd->br", x, A), B), w))
    assert ag.gradcheck(fn, [x, A, B]) < 1e-6
    # label present in one operand only: broadcast back in the backward pass
    v = _param(rng, 4)
    fn2 = lambda: ag.sum(ag.mul(ag.einsum("b,n->bn", v, Tensor(np.ones(5))), w))
    assert ag.gradcheck(fn2, [v]) < 1e-6


def test_cross_entropy_and_relu_gradcheck():
    rng = np.random.default_rng(3)
    logits = _param(rng, 5, 4)
    target = np.array([0, 3, 1, 1, 2])
    assert ag.gradcheck(lambda: ag.cross_entropy(logits, target), [logits]) < 1e-6
    v = Tensor(rng.normal(size=7) + np.sign(rng.normal(size=7)) * 0.2, requires_grad=True)
    w = _weights(rng, (7,))
    assert ag.gradcheck(lambda: ag.dot(ag.relu(v), w), [v]) < 1e-6


def test_logsumexp_and_softplus_gradcheck():
    rng = np.random.default_rng(4)
    v = _param(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    w = _weights(rng, (3,))
    assert ag.gradcheck(lambda: ag.dot(ag.logsumexp(v, axis=1, mask=mask, extra=0.3), w), [v]) < 1e-6
    assert ag.gradcheck(lambda: ag.dot(ag.softplus(ag.logsumexp(v, axis=1)), w), [v]) < 1e-6


def test_logsumexp_values_and_edge_cases():
    v = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -np.inf]])
    out = ag.logsumexp(Tensor(v), axis=1).data
    assert out[0] == pytest.approx(math.log(math.exp(1) + math.exp(2) + math.exp(3)), rel=1e-14)
    assert out[1] == pytest.approx(1000.0 + math.log(2.0), rel=1e-14)
    mask = np.array([[False, False, False], [True, False, False]])
    out = ag.logsumexp(Tensor(v), axis=1, mask=mask, extra=0.5).data
    assert out[0] == pytest.approx(math.log(0.5), rel=1e-14)
    assert out[1] == pytest.approx(1000.0, rel=1e-14)
    with pytest.raises(DomainError):
        ag.logsumexp(Tensor(v), axis=1, mask=np.zeros_like(v, dtype=bool))


def test_softplus_tails():
    out = ag.softplus(Tensor(np.array([-800.0, -40.0, 0.0, 40.0, 800.0]))).data
    assert 0.0 <= out[0] < 1e-300
    assert out[1] == pytest.approx(math.exp(-40.0), rel=1e-12)
    assert out[2] == pytest.approx(math.log(2.0), rel=1e-15)
    assert out[3] == pytest.approx(40.0, rel=1e-15)
    assert out[4] == 800.0


def test_cross_entropy_value_matches_direct_formula():
    logits = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]])
    target = np.array([2, 1])
    expected = np.mean([math.log(sum(math.exp(z) for z in row)) - row[t]
                        for row, t in zip(logits, target)])
    assert ag.cross_entropy(Tensor(logits), target).item() == pytest.approx(expected, abs=1e-14)


def test_backward_accumulates_over_shared_nodes():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ag.add(ag.mul(x, x), x)  # x appears three times
    ag.backward(y)
    assert x.grad == pytest.approx(7.0)
    ag.backward(ag.mul(x, x))
    assert x.grad == pytest.approx(13.0)  # accumulated, not overwritten
    ag.zero_grad([x])
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ag.backward(ag.mul(x, x))
    with pytest.raises(ContractError):
        ag.backward(Tensor(np.array(1.0)))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        ag.log(Tensor(np.array([1.0, 0.0])))


def test_l2_normalize_zero_vector():
    with pytest.raises(DegenerateInputError):
        ag.l2_normalize(Tensor(np.zeros((1, 3))), axis=1)
    out = ag.l2_normalize(Tensor(np.zeros((1, 3))), axis=1, eps=1e-12)
    assert np.all(np.isfinite(out.data))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12).filter(lambda v: max(map(abs, v)) > 1e-6))
def test_l2_normalize_unit_norm(values):
    out = ag.l2_normalize(Tensor(np.array(values)))
    assert abs(np.linalg.norm(out.data) - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(values, shift):
    v = np.array(values)
    p = ag.softmax(Tensor(v)).data
    q = ag.softmax(Tensor(v + shift)).data
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_dropout_scales_kept_units_and_is_identity_without_rng():
    x = Tensor(np.ones((200, 50)))
    assert ag.dropout(x, 0.5, None) is x
    assert ag.dropout(x, 0.0, np.random.default_rng(0)) is x
    out = ag.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02


def test_numeric_grad_on_known_function():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    g = ag.numeric_grad(lambda: ag.sum(ag.mul(ag.mul(x, x), x)), x)
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-8)


def test_max_relative_error_floor():
    assert ag.max_relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-3
    assert ag.max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_contract_error_is_runtime_error():
    assert issubclass(ContractError, RuntimeError)
