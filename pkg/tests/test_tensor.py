import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mistnar import tensor as T
from mistnar.tensor import Graph, Tensor
from oracles import central_diff, direct_softmax, rel_err

RNG = np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def check_grad(build, *leaves, tol=1e-4):
    """``build()`` returns a scalar Tensor from ``leaves``; compare to finite differences."""
    for p in leaves:
        p.grad = None
    build().backward()
    for p in leaves:
        num = central_diff(lambda: build().item(), p.data)
        assert rel_err(p.grad, num).max() < tol, (p.grad, num)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_orthogonal():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_gradient_fd():
    a, b = leaf(RNG.normal(size=(3, 4))), leaf(RNG.normal(size=(4, 2)))
    w = RNG.normal(size=(3, 2))
    check_grad(lambda: (T.matmul(a, b) * w).sum(), a, b)


def test_batched_matmul_gradient_fd():
    a, b = leaf(RNG.normal(size=(2, 3, 4))), leaf(RNG.normal(size=(2, 4, 5)))
    w = RNG.normal(size=(2, 3, 5))
    check_grad(lambda: (T.matmul(a, b) * w).sum(), a, b)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_linear_gradient_fd():
    x, w, b = leaf(RNG.normal(size=(2, 3, 4))), leaf(RNG.normal(size=(4, 5))), leaf(RNG.normal(size=5))
    up = RNG.normal(size=(2, 3, 5))
    check_grad(lambda: (T.linear(x, w, b) * up).sum(), x, w, b)


# ---------------------------------------------------------------- softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_saturated():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_matches_direct_evaluation():
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data,
                               direct_softmax([1.0, 2.0, 3.0]), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, s, atol=1e-9)


def test_softmax_gradient_fd():
    x = leaf(RNG.normal(size=(2, 5)))
    w = RNG.normal(size=(2, 5))
    check_grad(lambda: (T.softmax(x) * w).sum(), x)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_maps_to_beta():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_zero_gamma_gives_beta():
    beta = np.array([0.1, -0.2, 0.3])
    out = T.layer_norm(Tensor(RNG.normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta, (4, 3)))


def test_layer_norm_gradient_fd():
    x, g, b = leaf(RNG.normal(size=(3, 6))), leaf(RNG.normal(size=6)), leaf(RNG.normal(size=6))
    up = RNG.normal(size=(3, 6))
    check_grad(lambda: (T.layer_norm(x, g, b, 1e-12) * up).sum(), x, g, b)


# ---------------------------------------------------------------- gelu


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert 9.99 <= T.gelu(Tensor([10.0])).data[0] <= 10.0


def test_gelu_gradient_at_half():
    x = leaf([0.5])
    check_grad(lambda: T.gelu(x).sum(), x)


# ---------------------------------------------------------------- embedding


def test_embedding_row_gather():
    table = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(T.embedding(table, [0]).data, [[1.0, 2.0]])


def test_embedding_repeated_id_accumulates():
    table = leaf(np.zeros((5, 2)))
    up = np.array([[1.0, 2.0], [10.0, 20.0]])
    (T.embedding(table, [3, 3]) * up).sum().backward()
    np.testing.assert_array_equal(table.grad[3], [11.0, 22.0])
    assert not table.grad[[0, 1, 2, 4]].any()


def test_embedding_gradient_fd():
    table = leaf(RNG.normal(size=(6, 3)))
    ids = [1, 4, 1, 0]
    up = RNG.normal(size=(4, 3))
    check_grad(lambda: (T.embedding(table, ids) * up).sum(), table)


def test_embedding_out_of_range_names_id():
    with pytest.raises(IndexError, match="7"):
        T.embedding(Tensor(np.zeros((5, 2))), [1, 7])


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_large_margin_is_zero():
    logits = np.full((1, 5), -1e3)
    logits[0, 2] = 1e3
    assert T.cross_entropy(Tensor(logits), [2]).item() < 1e-12


def test_cross_entropy_uniform_v8():
    assert T.cross_entropy(Tensor(np.zeros((1, 8))), [3]).item() == pytest.approx(np.log(8), abs=1e-12)


def test_cross_entropy_masked_mean_matches_per_position():
    logits = RNG.normal(size=(3, 6))
    tgt = [1, 4, 5]
    got = T.cross_entropy(Tensor(logits), tgt, [True, False, True]).item()
    per = [-np.log(direct_softmax(logits[i])[tgt[i]]) for i in (0, 2)]
    assert got == pytest.approx(np.mean(per), rel=1e-12)


def test_cross_entropy_gradient_closed_form_and_fd():
    logits = leaf(RNG.normal(size=(3, 4)))
    mask = [True, False, True]
    tgt = [0, 2, 3]
    T.cross_entropy(logits, tgt, mask).backward()
    expect = np.zeros((3, 4))
    for i in (0, 2):
        expect[i] = direct_softmax(logits.data[i])
        expect[i, tgt[i]] -= 1.0
    np.testing.assert_allclose(logits.grad, expect / 2, rtol=1e-10)
    check_grad(lambda: T.cross_entropy(logits, tgt, mask), logits)


def test_cross_entropy_all_false_mask_is_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
       st.lists(st.integers(0, 5), min_size=4, max_size=4))
def test_cross_entropy_nonnegative(logits, tgt):
    assert T.cross_entropy(Tensor(logits), tgt).item() >= 0.0


# ---------------------------------------------------------------- backward engine


def test_backward_sum_gives_ones():
    x = leaf(RNG.normal(size=(2, 2)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_zero_times_x():
    x = leaf(RNG.normal(size=(2, 2)))
    (x * 0.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_backward_twice_accumulates_exactly_double():
    a, b = leaf(RNG.normal(size=(3, 4))), leaf(RNG.normal(size=(4, 2)))
    loss = T.softmax(T.matmul(a, b)).sum() + (T.gelu(T.matmul(a, b)) * 3.0).sum()
    loss.backward()
    g1 = a.grad.copy(), b.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(a.grad, 2 * g1[0])
    np.testing.assert_array_equal(b.grad, 2 * g1[1])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (leaf(np.ones((2, 2))) * 2.0).backward()


def test_graph_is_topological_and_visits_once():
    x = leaf(RNG.normal(size=(3,)))
    y = x * 2.0
    z = y + y
    loss = (z * x).sum()
    g = Graph.from_root(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for node in g.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert g.nodes[-1] is loss


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad and y.is_leaf


def test_grads_finite_after_backward():
    x = leaf(RNG.normal(size=(4, 8)) * 100)
    T.cross_entropy(T.gelu(x), [0, 1, 2, 3]).backward()
    assert np.isfinite(x.grad).all()
