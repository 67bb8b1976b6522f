import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from screc import numerics as nx
from screc.numerics import RngState, Tensor, finite_diff_grad, relative_error


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    M = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = nx.matmul(Tensor(np.eye(2)), Tensor(M))
    np.testing.assert_array_equal(out.data, M)


def test_matmul_hand_arithmetic():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_of_sum_against_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
    a = leaf(a0)
    nx.backward(nx.tsum(nx.matmul(a, Tensor(b0))))
    fd = finite_diff_grad(lambda x: (x @ b0).sum(), a0, 1e-6)
    np.testing.assert_allclose(a.grad, fd, atol=1e-8)
    np.testing.assert_allclose(a.grad, np.ones((5, 4)) @ b0.T, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- logsumexp

def test_logsumexp_values():
    assert nx.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert nx.logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-9)
    assert nx.logsumexp(Tensor([-np.inf, 3.0])).item() == 3.0


def test_logsumexp_all_masked():
    with pytest.raises(nx.EmptySupportError):
        nx.logsumexp(Tensor([-np.inf, -np.inf]))


# ---------------------------------------------------------------- top_k

def test_top_k_cases():
    assert nx.top_k(np.array([5.0, 1, 9, 3]), 2).tolist() == [2, 0]
    assert nx.top_k(np.array([7.0, 7, 7]), 3).tolist() == [0, 1, 2]
    assert nx.top_k(np.array([4.2]), 1).tolist() == [0]
    with pytest.raises(ValueError):
        nx.top_k(np.array([1.0, 2.0]), 3)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)), st.data())
def test_top_k_selects_largest(v, data):
    k = data.draw(st.integers(1, len(v)))
    idx = nx.top_k(v, k)
    assert len(set(idx.tolist())) == k
    rest = np.setdiff1d(np.arange(len(v)), idx)
    if rest.size:
        assert v[idx].min() >= v[rest].max()
    assert np.all(np.diff(v[idx]) <= 0)


def test_top_k_passes_no_gradient():
    x = leaf([3.0, 1.0, 2.0])
    idx = nx.top_k(x, 2)
    assert isinstance(idx, np.ndarray) and idx.dtype.kind == "i"


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    X = leaf(np.random.default_rng(1).normal(size=(3, 4)))
    nx.backward(nx.tsum(X))
    np.testing.assert_array_equal(X.grad, np.ones((3, 4)))


def test_backward_ce_matches_softmax_minus_onehot():
    rng = np.random.default_rng(2)
    X0, Y0 = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    targets = np.array([1, 3])
    logits = leaf(X0 @ Y0.T)
    nx.backward(nx.cross_entropy(logits, targets, np.ones(2)))
    expected = nx.softmax(X0 @ Y0.T) - np.eye(4)[targets]
    np.testing.assert_allclose(logits.grad, expected, atol=1e-14)


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ValueError):
        nx.backward(nx.mul(leaf([1.0, 2.0]), 2.0))


def test_backward_unreached_params_get_zero():
    a, b = leaf([1.0, 2.0]), leaf([5.0])
    grads = nx.backward(nx.tsum(nx.mul(a, a)), params=[a, b])
    np.testing.assert_array_equal(grads[0], [2.0, 4.0])
    np.testing.assert_array_equal(grads[1], [0.0])


def test_tape_is_topological():
    a = leaf([1.0, 2.0])
    b = nx.mul(a, 3.0)
    c = nx.add(b, a)
    d = nx.tsum(nx.mul(c, b))
    order = nx.Tape.from_root(d).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len(pos) == len(order)


# ---------------------------------------------------------------- finite differences

def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_logsumexp():
    g = finite_diff_grad(lambda x: nx.logsumexp(Tensor(x)).item(), np.zeros(2), 1e-6)
    np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-6)


def test_finite_diff_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.0, np.ones(3)), np.zeros(3))


# ---------------------------------------------------------------- per-op gradient consistency

def _check(build, shapes, seed, tol=1e-5):
    """``build(*tensors) -> scalar Tensor``; compare every input's grad with FD."""
    rng = np.random.default_rng(seed)
    inputs = [rng.normal(size=s) for s in shapes]
    leaves = [leaf(x) for x in inputs]
    nx.backward(build(*leaves))
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(inputs[j]) for j in range(len(inputs))]
            return build(*args).item()
        assert relative_error(leaves[i].grad, finite_diff_grad(f, x, 1e-6)) <= tol


_W = np.random.default_rng(99).normal(size=(3, 4, 5))
_KEEP = np.random.default_rng(98).random((3, 4, 5)) > 0.3
_KEEP[..., 0] = True
_IDX = np.array([[0, 2, 2], [1, 0, 3]])

OPS = {
    "add": (lambda a, b: nx.tsum(nx.mul(nx.add(a, b), Tensor(_W[0, :, :]))), [(4, 5), (5,)]),
    "sub": (lambda a, b: nx.tsum(nx.mul(nx.sub(a, b), Tensor(_W[0]))), [(4, 5), (4, 1)]),
    "mul": (lambda a, b: nx.tsum(nx.mul(a, b)), [(3, 4, 5), (4, 5)]),
    "matmul": (lambda a, b: nx.tsum(nx.mul(nx.matmul(a, b), Tensor(_W[:, :, :2]))), [(3, 4, 6), (6, 2)]),
    "bmm": (lambda a, b: nx.tsum(nx.mul(nx.matmul(a, b), Tensor(_W))), [(3, 4, 2), (3, 2, 5)]),
    "transpose": (lambda a: nx.tsum(nx.mul(nx.swap_last(a), Tensor(_W.transpose(0, 2, 1)))), [(3, 4, 5)]),
    "reshape": (lambda a: nx.tsum(nx.mul(a.reshape(3, 20), Tensor(_W.reshape(3, 20)))), [(3, 4, 5)]),
    "relu": (lambda a: nx.tsum(nx.mul(nx.relu(a), Tensor(_W))), [(3, 4, 5)]),
    "exp": (lambda a: nx.tsum(nx.exp(a)), [(4, 5)]),
    "log_sigmoid": (lambda a: nx.tsum(nx.mul(nx.log_sigmoid(a), Tensor(_W))), [(3, 4, 5)]),
    "logsumexp": (lambda a: nx.tsum(nx.mul(nx.logsumexp(a), Tensor(_W[:, :, 0]))), [(3, 4, 5)]),
    "masked_softmax": (lambda a: nx.tsum(nx.mul(nx.masked_softmax(a, _KEEP), Tensor(_W))), [(3, 4, 5)]),
    "masked_fill": (lambda a: nx.tsum(nx.mul(nx.masked_fill(a, ~_KEEP, -3.0), Tensor(_W))), [(3, 4, 5)]),
    "layer_norm": (lambda x, g, b: nx.tsum(nx.mul(nx.layer_norm(x, g, b), Tensor(_W))), [(3, 4, 5), (5,), (5,)]),
    "index_select": (lambda t: nx.tsum(nx.mul(nx.index_select(t, _IDX), Tensor(_W[:2, :3, :]))), [(4, 5)]),
    "slice_rows": (lambda t: nx.tsum(nx.mul(nx.slice_rows(t, 1, 4), Tensor(_W[0, :3]))), [(5, 5)]),
    "take_along": (lambda a: nx.tsum(nx.mul(nx.take_along(a, _IDX[:, :3] % 5), Tensor(_W[:2, :3, 0]))), [(2, 3, 5)]),
    "concat": (lambda a, b: nx.tsum(nx.mul(nx.concat([a, b], axis=1), Tensor(_W[0]))), [(4, 2), (4, 3)]),
    "mean": (lambda a: nx.mean(nx.mul(a, a)), [(3, 4)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.array([0, 3, 4, 1]), np.array([0.1, 0.2, 0.3, 0.4])), [(4, 5)]),
    "binary_cross_entropy": (lambda a: nx.binary_cross_entropy(a, _KEEP[0], _W[1] ** 2), [(4, 5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    for seed in range(100 if name not in ("layer_norm", "bmm", "matmul") else 30):
        _check(build, shapes, seed)


def test_dropout_gradient_uses_same_mask():
    x0 = np.random.default_rng(0).normal(size=(4, 5))
    x = leaf(x0)
    nx.backward(nx.tsum(nx.mul(nx.dropout(x, 0.5, RngState(3)), Tensor(_W[0]))))

    def f(v):
        return nx.tsum(nx.mul(nx.dropout(Tensor(v), 0.5, RngState(3)), Tensor(_W[0]))).item()

    assert relative_error(x.grad, finite_diff_grad(f, x0)) <= 1e-6
    assert nx.dropout(x, 0.5, None, training=False) is x


# ---------------------------------------------------------------- softmax / stability

@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    p = nx.softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nx.softmax(v + c), p, atol=1e-12)


def test_no_nonfinite_on_large_inputs():
    out = nx.cross_entropy(Tensor([[1e4, -1e4, 0.0]]), np.array([1]), np.ones(1))
    assert np.isfinite(out.item())


# ---------------------------------------------------------------- RNG

def test_rng_determinism():
    a, b = RngState(17), RngState(17)
    np.testing.assert_array_equal(a.normal((5, 3)), b.normal((5, 3)))
    assert a.draws == b.draws == 15
    assert not np.array_equal(RngState(18).normal(4), RngState(17).normal(4))


def test_rng_uniform_open_interval_and_moments():
    u = RngState(0).uniform((200_000,))
    assert u.min() > 0.0 and u.max() < 1.0
    z = RngState(1).normal((200_000,))
    assert abs(z.mean()) < 3 / math.sqrt(z.size) * 1.5
    assert abs(z.var() - 1.0) < 0.02


def test_forward_bit_identical_under_fixed_seed():
    def run():
        rng = RngState(5)
        x = Tensor(rng.normal((6, 4)))
        return nx.dropout(nx.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))), 0.3, rng).data
    assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------- memory counter

def test_tracker_counts_outputs_and_releases():
    x = leaf(np.ones((100, 10)))
    with nx.track_memory() as mem:
        y = nx.mul(x, 2.0)
        assert mem.current == y.data.nbytes
        del y
        assert mem.current == 0
    assert mem.peak == 100 * 10 * 8


def test_tracker_ignores_views_of_parents():
    x = leaf(np.ones((10, 10)))
    with nx.track_memory() as mem:
        nx.transpose(x)
        nx.slice_rows(x, 2, 5)
    assert mem.peak == 0
