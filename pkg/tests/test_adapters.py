from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from comoe import autograd as ag
from comoe.adapters import (LoraExpert, MoeLoraLayer, Router, RoutingError, decide, expert_forward,
                            frozen_forward, load_params, lora_forward, moe_forward, route,
                            save_params, topk_indices)
from comoe.autograd import ShapeError, Tensor

# softmax([2, 1, 0.5, 0.1]) and the top-2 renormalization, evaluated with
# math.exp in plain Python
ROUTE_PROBS = [0.5745217239868243, 0.21135473076112654, 0.1281931242819321, 0.08593042097011717]
ROUTE_WEIGHTS = [0.7310585786300049, 0.2689414213699951]


def _expert(A, B, alpha=None):
    A, B = np.asarray(A, float), np.asarray(B, float)
    r = A.shape[0]
    return LoraExpert(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True),
                      alpha=float(r if alpha is None else alpha), enforce_low_rank=False)


def _layer(rng, n=4, k=2, d_in=8, d_out=6, rank=2, random_b=True):
    layer = MoeLoraLayer.init(rng.normal(size=(d_out, d_in)), n, k, rank, 2.0 * rank, rng)
    if random_b:
        for e in layer.experts:
            e.B.data = rng.normal(size=e.B.shape)
            e.A.data = rng.normal(size=e.A.shape)
        layer.router.G.data = rng.normal(size=layer.router.G.shape)
    return layer


# ---------------------------------------------------------------- experts


def test_fresh_expert_outputs_zero():
    rng = np.random.default_rng(0)
    e = LoraExpert.init(8, 6, 2, 4.0, rng)
    assert np.all(e.B.data == 0)
    assert abs(e.A.data.std() - 0.02) < 0.01
    out = expert_forward(e, Tensor(rng.normal(size=8)))
    assert np.array_equal(out.data, np.zeros(6))


def test_identity_expert_returns_input():
    x = np.array([0.3, -1.0, 2.5])
    e = _expert(np.eye(3), np.eye(3))
    np.testing.assert_array_equal(expert_forward(e, Tensor(x)).data, x)


def test_hand_matrix_product():
    e = _expert([[1, 0], [0, 1]], [[2, 0], [0, 3]])
    np.testing.assert_array_equal(expert_forward(e, Tensor([1.0, 1.0])).data, [2.0, 3.0])


def test_scaling_alpha_over_r():
    e = _expert([[1, 0], [0, 1]], [[2, 0], [0, 3]], alpha=4.0)
    assert e.scaling == 2.0
    np.testing.assert_array_equal(expert_forward(e, Tensor([1.0, 1.0])).data, [4.0, 6.0])
    e.use_scaling = False
    np.testing.assert_array_equal(expert_forward(e, Tensor([1.0, 1.0])).data, [2.0, 3.0])


def test_rank_limit_enforced():
    with pytest.raises(ShapeError):
        LoraExpert(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 3))), 3.0)
    with pytest.raises(ShapeError):
        LoraExpert(Tensor(np.ones((2, 8))), Tensor(np.ones((8, 3))), 2.0)


def test_expert_dimension_mismatch():
    e = LoraExpert.init(8, 6, 2, 4.0, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        expert_forward(e, Tensor(np.ones(7)))


def test_lora_forward_residual_cases():
    rng = np.random.default_rng(1)
    W0 = rng.normal(size=(6, 8))
    x = rng.normal(size=8)
    fresh = LoraExpert.init(8, 6, 2, 4.0, rng)
    y = lora_forward(Tensor(W0), fresh, Tensor(x)).data
    np.testing.assert_array_equal(y, frozen_forward(Tensor(W0), Tensor(x)).data)
    np.testing.assert_allclose(y, W0 @ x, atol=1e-12)
    ident = _expert(np.eye(3), np.eye(3))
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(lora_forward(Tensor(np.zeros((3, 3))), ident, Tensor(v)).data, v)


def test_lora_forward_matches_dense_reference():
    rng = np.random.default_rng(2)
    W0, A, B, x = (rng.normal(size=s) for s in ((5, 7), (2, 7), (5, 2), (7,)))
    e = LoraExpert(Tensor(A), Tensor(B), alpha=3.0)
    ref = [sum(W0[i, j] * x[j] for j in range(7))
           + 1.5 * sum(B[i, r] * sum(A[r, j] * x[j] for j in range(7)) for r in range(2))
           for i in range(5)]
    np.testing.assert_allclose(lora_forward(Tensor(W0), e, Tensor(x)).data, ref, rtol=1e-12)


# ---------------------------------------------------------------- routing


def test_route_tie_break_lowest_index():
    d = decide(Tensor(np.zeros((1, 4))), 2, squeeze=True)
    assert list(d.topk_indices) == [0, 1]
    np.testing.assert_allclose(d.renorm_weights, [0.5, 0.5], atol=1e-15)


def test_route_hand_softmax_example():
    router = Router(Tensor(np.eye(4)))
    d = route(router, Tensor([2.0, 1.0, 0.5, 0.1]), 2)
    np.testing.assert_allclose(d.gate_probs.data, ROUTE_PROBS, atol=1e-12)
    assert list(d.topk_indices) == [0, 1]
    np.testing.assert_allclose(d.renorm_weights, ROUTE_WEIGHTS, atol=1e-12)
    assert abs(d.renorm_weights[0] - 0.731) < 5e-4


def test_route_k_out_of_range():
    router = Router(Tensor(np.eye(4)))
    for k in (0, 5):
        with pytest.raises(RoutingError):
            route(router, Tensor(np.ones(4)), k)


def test_topk_indices_descending_with_ties():
    probs = np.array([[0.1, 0.3, 0.3, 0.3]])
    assert topk_indices(probs, 2).tolist() == [[1, 2]]


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)),
       st.floats(-50, 50), st.data())
def test_route_invariants(logits, shift, data):
    n = logits.shape[0]
    k = data.draw(st.integers(1, n - 1))
    d = decide(Tensor(logits[None, :]), k, squeeze=True)
    w = d.renorm_weights
    assert abs(w.sum() - 1.0) < 1e-9
    assert np.all(w > 0) and np.all(w <= 1.0)
    assert len(set(d.topk_indices.tolist())) == k
    probs = d.gate_probs.data
    assert abs(probs.sum() - 1.0) < 1e-9
    kth = np.sort(probs)[::-1][k - 1]
    assert np.all(probs[d.topk_indices] >= kth)
    shifted = decide(Tensor(logits[None, :] + shift), k, squeeze=True)
    # indices may only differ where probabilities are numerically tied
    if np.min(np.abs(np.diff(np.sort(probs)))) > 1e-9:
        assert np.array_equal(shifted.topk_indices, d.topk_indices)
        np.testing.assert_allclose(shifted.renorm_weights, w, atol=1e-9)


def test_k_equals_n_is_soft_routing():
    rng = np.random.default_rng(3)
    layer = _layer(rng, n=4, k=4)
    x = rng.normal(size=(5, 8))
    out = moe_forward(layer, Tensor(x))
    logits = x @ layer.router.G.data.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ref = x @ layer.W0.data.T
    for i, e in enumerate(layer.experts):
        ref += p[:, [i]] * (e.scaling * (x @ e.A.data.T) @ e.B.data.T)
    np.testing.assert_allclose(out.y.data, ref, atol=1e-9)


# ---------------------------------------------------------------- mixture


def test_zero_experts_give_frozen_output():
    rng = np.random.default_rng(4)
    layer = _layer(rng, random_b=False)
    x = rng.normal(size=(3, 8))
    out = moe_forward(layer, Tensor(x), need_all_experts=True)
    np.testing.assert_array_equal(out.y.data, ag.einsum("bd,od->bo", Tensor(x), layer.W0).data)


def test_k1_dominant_expert_weight_one():
    rng = np.random.default_rng(5)
    layer = _layer(rng, n=2, k=1)
    layer.router.G.data = np.array([[5.0] + [0.0] * 7, [0.0] * 8])
    x = np.zeros(8)
    x[0] = 1.0
    out = moe_forward(layer, Tensor(x))
    assert out.decision.topk_indices.tolist() == [0]
    assert out.decision.renorm_weights.tolist() == [1.0]
    ref = layer.W0.data @ x + expert_forward(layer.experts[0], Tensor(x)).data
    np.testing.assert_allclose(out.y.data, ref, atol=1e-14)


def test_moe_forward_matches_brute_force_sum():
    rng = np.random.default_rng(6)
    layer = _layer(rng)
    for _ in range(20):
        x = rng.normal(size=8)
        out = moe_forward(layer, Tensor(x), need_all_experts=True)
        logits = layer.router.G.data @ x
        p = np.exp(logits) / np.exp(logits).sum()
        top = sorted(range(4), key=lambda i: (-p[i], i))[:2]
        ref = layer.W0.data @ x
        for i in top:
            e = layer.experts[i]
            ref = ref + p[i] / sum(p[j] for j in top) * e.scaling * (e.B.data @ (e.A.data @ x))
        np.testing.assert_allclose(out.y.data, ref, atol=1e-12)
        assert out.expert_reprs.shape == (4, 6)
        for i, e in enumerate(layer.experts):
            np.testing.assert_allclose(out.expert_reprs.data[i], e.scaling * e.B.data @ e.A.data @ x,
                                       atol=1e-12)


def test_sparse_forward_returns_activated_reprs_in_topk_order():
    rng = np.random.default_rng(7)
    layer = _layer(rng)
    x = rng.normal(size=(6, 8))
    sparse = moe_forward(layer, Tensor(x))
    full = moe_forward(layer, Tensor(x), need_all_experts=True)
    np.testing.assert_array_equal(sparse.y.data, full.y.data)
    assert sparse.expert_reprs.shape == (6, 2, 6)
    gathered = np.take_along_axis(full.expert_reprs.data, sparse.decision.topk_indices[:, :, None], axis=1)
    np.testing.assert_array_equal(sparse.expert_reprs.data, gathered)


def test_frozen_weight_gets_no_gradient_and_inactive_experts_get_zero():
    rng = np.random.default_rng(8)
    layer = _layer(rng, n=4, k=1)
    x = rng.normal(size=8)
    out = moe_forward(layer, Tensor(x))
    ag.backward(ag.sum(out.y))
    assert layer.W0.grad is None
    active = set(out.decision.topk_indices.tolist())
    for i, e in enumerate(layer.experts):
        if i not in active:
            assert e.A.grad is None or not np.any(e.A.grad)
            assert e.B.grad is None or not np.any(e.B.grad)
    assert layer.router.G.grad is not None


def test_layer_rejects_trainable_w0_and_mismatched_router():
    rng = np.random.default_rng(9)
    layer = _layer(rng)
    with pytest.raises(ValueError):
        MoeLoraLayer(Tensor(layer.W0.data, requires_grad=True), layer.experts, layer.router, 2)
    with pytest.raises(ValueError):
        MoeLoraLayer(layer.W0, layer.experts[:3], layer.router, 2)


def test_dropout_applies_only_to_expert_branch():
    rng = np.random.default_rng(10)
    layer = _layer(rng)
    layer.dropout_rate = 0.5
    x = rng.normal(size=(4, 8))
    a = moe_forward(layer, Tensor(x), rng=np.random.default_rng(1))
    b = moe_forward(layer, Tensor(x))
    assert not np.allclose(a.y.data, b.y.data)
    for e in layer.experts:
        e.B.data[:] = 0
    c = moe_forward(layer, Tensor(x), rng=np.random.default_rng(1))
    np.testing.assert_array_equal(c.y.data, frozen_forward(layer.W0, Tensor(x)).data)


# ---------------------------------------------------------------- checkpoint format


def test_params_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {"layer0.expert0.A": rng.normal(size=(2, 3)), "scalar": np.array(np.pi),
              "cube": rng.normal(size=(2, 2, 2)) * 1e-300}
    path = tmp_path / "p.txt"
    save_params(path, arrays)
    back = load_params(path)
    assert list(back) == list(arrays)
    for key in arrays:
        assert back[key].shape == arrays[key].shape
        assert np.array_equal(back[key], arrays[key])


def test_params_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("not a header\n")
    with pytest.raises(ValueError):
        load_params(bad)
    bad.write_text("# comoe-params v1\nx 1 3\n1.0 2.0\n")
    with pytest.raises(ValueError):
        load_params(bad)
    with pytest.raises(ValueError):
        save_params(tmp_path / "k.txt", {"has space": np.ones(1)})
