import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screc import numerics as nx
from screc.losses import EmptyBatchError, full_ce, per_position_ce
from screc.numerics import RngState, Tensor, finite_diff_grad, relative_error
from screc.sce import (BucketAssignment, DegenerateAssignmentError, SceConfig, assign_buckets,
                       derive_bucket_params, generate_bucket_centers, mix_bucket_centers, sce_loss)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def oracle_sce(x, y, targets, B, b_x, b_y, mask):
    """Loop-by-loop reference: returns (value, per-position max loss dict)."""
    real = [i for i in range(len(x)) if mask[i]]
    best = {}
    for b in B:
        px = sorted(real, key=lambda i: (-float(b @ x[i]), i))[:b_x]
        py = sorted(range(len(y)), key=lambda j: (-float(b @ y[j]), j))[:b_y]
        for i in px:
            pos = float(x[i] @ y[targets[i] - 1])
            terms = [pos] + [float(x[i] @ y[j]) for j in py if j != targets[i] - 1]
            m = max(terms)
            loss = m + math.log(sum(math.exp(v - m) for v in terms)) - pos
            best[i] = max(best.get(i, -math.inf), loss)
    return sum(best.values()) / len(best), best


def random_instance(rng, s_max=4, l_max=8, c_max=50, d_max=16):
    s, l = rng.integers(1, s_max + 1), rng.integers(1, l_max + 1)
    C, d = rng.integers(2, c_max + 1), rng.integers(1, d_max + 1)
    N = s * l
    X, Y = rng.normal(size=(N, d)), rng.normal(size=(C, d))
    t = rng.integers(1, C + 1, size=N)
    mask = rng.random(N) < 0.8
    mask[rng.integers(N)] = True
    return X, Y, t, mask


# ---------------------------------------------------------------- centres

def test_centers_reproducible_and_moments():
    a = generate_bucket_centers(300, 64, RngState(1))
    np.testing.assert_array_equal(a, generate_bucket_centers(300, 64, RngState(1)))
    assert abs(a.mean()) <= 3 / math.sqrt(a.size)
    assert abs(a.var() - 1) < 0.05
    assert generate_bucket_centers(1, 1, RngState(0)).shape == (1, 1)
    with pytest.raises(ValueError):
        generate_bucket_centers(0, 3, RngState(0))


def test_mix_rank_one_case():
    X = np.zeros((5, 3))
    X[2] = [1.0, -2.0, 0.5]
    mask = np.array([False, False, True, False, False])
    X[[0, 1, 3, 4]] = 99.0  # padded rows must not leak in
    B = mix_bucket_centers(X, 7, RngState(4), mask)
    for c in B:
        coef = c @ X[2] / (X[2] @ X[2])
        np.testing.assert_allclose(c, coef * X[2], atol=1e-12)


def test_mix_centers_lie_in_row_span():
    rng = np.random.default_rng(0)
    X = np.zeros((6, 8))
    X[:3] = rng.normal(size=(3, 8))
    mask = np.array([True] * 3 + [False] * 3)
    B = mix_bucket_centers(X, 10, RngState(2), mask)
    coef, *_ = np.linalg.lstsq(X[:3].T, B.T, rcond=None)
    assert np.abs(X[:3].T @ coef - B.T).max() <= 1e-8


def test_mix_fresh_each_call_and_empty_error():
    X = np.random.default_rng(1).normal(size=(4, 3))
    rng = RngState(3)
    assert not np.array_equal(mix_bucket_centers(X, 2, rng), mix_bucket_centers(X, 2, rng))
    with pytest.raises(EmptyBatchError):
        mix_bucket_centers(X, 2, rng, np.zeros(4, bool))


# ---------------------------------------------------------------- assignment

def test_assign_shape_contract():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    a = assign_buckets(rng.normal(size=(2, 3)), X, Y, 2, 2)
    assert a.I.shape == (2, 2) and a.J.shape == (2, 2)


def test_assign_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(10, 4)), rng.normal(size=(12, 4))
    B = X[[3, 7]] / np.linalg.norm(X[[3, 7]], axis=1, keepdims=True)
    a = assign_buckets(B, X, Y, 3, 4)
    for b in range(2):
        assert a.I[b].tolist() == sorted(range(10), key=lambda i: (-(B[b] @ X[i]), i))[:3]
        assert a.J[b].tolist() == sorted(range(12), key=lambda j: (-(B[b] @ Y[j]), j))[:4]
    # the largest-norm rows aside, a centre equal to a row direction selects it
    assert 7 in a.I[1] or np.linalg.norm(X, axis=1).max() > np.linalg.norm(X[7])


def test_assign_never_selects_padding():
    X = np.ones((6, 2))
    X[[0, 4]] = 1e6
    mask = np.array([False, True, True, True, False, True])
    a = assign_buckets(np.ones((3, 2)), X, np.ones((4, 2)), 4, 2, mask)
    assert not np.isin(a.I, [0, 4]).any()
    for row in a.I:
        assert len(set(row.tolist())) == 4


def test_assign_degenerate():
    X, Y = np.ones((3, 2)), np.ones((4, 2))
    mask = np.array([True, False, True])
    with pytest.raises(DegenerateAssignmentError):
        assign_buckets(np.ones((1, 2)), X, Y, 3, 2, mask)
    a = assign_buckets(np.ones((1, 2)), X, Y, 3, 9, mask, strict=False)
    assert a.I.shape == (1, 2) and a.J.shape == (1, 4)


# ---------------------------------------------------------------- loss values

def test_micro_instance_golden():
    # s=1, l=4, C=5, n_b=2, b_x=2, b_y=2 with hand-fixed centres
    X = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [-1.0, 0.2]])
    Y = np.array([[1.0, 0.1], [0.2, 1.0], [-0.5, 0.5], [0.9, -0.3], [0.0, -1.0]])
    t = np.array([2, 3, 4, 1])
    B = np.array([[1.0, 0.0], [0.0, 1.0]])
    cfg = SceConfig(n_b=2, b_x=2, b_y=2)
    out = sce_loss(Tensor(X), Tensor(Y), t, cfg, centers=B)
    assert out.assignment.I.tolist() == [[0, 1], [2, 1]]
    assert out.assignment.J.tolist() == [[0, 3], [1, 2]]
    ref, _ = oracle_sce(X, Y, t, B, 2, 2, np.ones(4, bool))
    golden = 1.6646063480248765  # hand-computed from the four placements
    assert ref == pytest.approx(golden, abs=1e-12)
    assert out.item() == pytest.approx(golden, abs=1e-12)
    assert out.covered_positions == 3
    assert out.unique_selection_fraction == pytest.approx(2 / 4)
    assert out.correct_logit_fraction == pytest.approx(1 / 4)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    X, Y, t, mask = random_instance(rng, c_max=20, d_max=5)
    n_real = int(mask.sum())
    n_b = int(rng.integers(1, 4))
    b_x, b_y = int(rng.integers(1, n_real + 1)), int(rng.integers(1, len(Y) + 1))
    B = rng.normal(size=(n_b, X.shape[1]))
    out = sce_loss(Tensor(X), Tensor(Y), t, SceConfig(n_b, b_x, b_y), mask, centers=B)
    ref, best = oracle_sce(X, Y, t, B, b_x, b_y, mask)
    assert out.item() == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert out.covered_positions == len(best)
    for i, v in best.items():
        assert out.position_loss[i] == pytest.approx(v, rel=1e-12, abs=1e-12)


def test_full_coverage_equals_full_ce():
    rng = np.random.default_rng(5)
    X, Y, t, mask = random_instance(rng)
    n_real = int(mask.sum())
    cfg = SceConfig(1, n_real, len(Y), use_mix=False)
    Xs, Ys, Xc, Yc = leaf(X), leaf(Y), leaf(X), leaf(Y)
    out = sce_loss(Xs, Ys, t, cfg, mask, RngState(0))
    ref = full_ce(Xc, Yc, t, mask)
    assert out.unique_selection_fraction == 1.0
    assert abs(out.item() - ref.item()) <= 1e-10 * abs(ref.item())
    nx.backward(out.value)
    nx.backward(ref.value)
    assert relative_error(Xs.grad, Xc.grad) <= 1e-10
    assert relative_error(Ys.grad, Yc.grad) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lower_bound_per_position(seed):
    rng = np.random.default_rng(seed)
    X, Y, t, mask = random_instance(rng)
    n_real = int(mask.sum())
    cfg = SceConfig(int(rng.integers(1, 6)), int(rng.integers(1, n_real + 1)), int(rng.integers(1, len(Y) + 1)),
                    use_mix=bool(rng.integers(2)))
    out = sce_loss(Tensor(X), Tensor(Y), t, cfg, mask, RngState(seed))
    ce = per_position_ce(X, Y, t)
    covered = ~np.isnan(out.position_loss)
    assert np.all(out.position_loss[covered] <= ce[covered] + 1e-12)
    assert 0 <= out.unique_selection_fraction <= 1 and 0 <= out.correct_logit_fraction <= 1


def test_adding_bucket_never_lowers_position_max():
    rng = np.random.default_rng(6)
    X, Y, t, mask = random_instance(rng)
    B = rng.normal(size=(4, X.shape[1]))
    cfg = SceConfig(3, 2, 5)
    small = sce_loss(Tensor(X), Tensor(Y), t, cfg, mask, centers=B[:3])
    big = sce_loss(Tensor(X), Tensor(Y), t, cfg, mask, centers=B)
    cov = ~np.isnan(small.position_loss)
    assert np.all(big.position_loss[cov] >= small.position_loss[cov])


def test_positive_masked_only_for_own_row():
    # item 1 is row 0's target and a negative for row 1
    X = np.array([[1.0, 0.0], [0.8, 0.1]])
    Y = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.array([1, 2])
    out = sce_loss(Tensor(X), Tensor(Y), t, SceConfig(1, 2, 2), centers=np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(out.position_loss, per_position_ce(X, Y, t), atol=1e-14)


# ---------------------------------------------------------------- gradients

def test_gradients_sparse_and_match_finite_differences():
    rng = np.random.default_rng(7)
    X0, Y0 = rng.normal(size=(8, 3)), rng.normal(size=(15, 3))
    t = rng.integers(1, 16, size=8)
    mask = np.ones(8, bool)
    cfg = SceConfig(2, 3, 4)
    a = assign_buckets(rng.normal(size=(2, 3)), X0, Y0, 3, 4)
    X, Y = leaf(X0), leaf(Y0)
    nx.backward(sce_loss(X, Y, t, cfg, mask, assignment=a).value)
    fx = finite_diff_grad(lambda v: sce_loss(Tensor(v), Tensor(Y0), t, cfg, mask, assignment=a).item(), X0)
    fy = finite_diff_grad(lambda v: sce_loss(Tensor(X0), Tensor(v), t, cfg, mask, assignment=a).item(), Y0)
    assert relative_error(X.grad, fx) <= 1e-5
    assert relative_error(Y.grad, fy) <= 1e-5
    untouched_x = np.setdiff1d(np.arange(8), a.I)
    assert np.all(X.grad[untouched_x] == 0)
    touched_y = set(a.J.reshape(-1).tolist()) | set((t[a.I.reshape(-1)] - 1).tolist())
    untouched_y = np.setdiff1d(np.arange(15), list(touched_y))
    assert np.all(Y.grad[untouched_y] == 0)


# ---------------------------------------------------------------- config derivation

def test_derive_bucket_params():
    assert derive_bucket_params(128, 200, 200) == (320, 320)
    n_b, b_x = derive_bucket_params(128, 200, 200, 2.0, 4.0)
    assert n_b / b_x == pytest.approx(1 / 4, rel=1e-2)
    assert derive_bucket_params(1, 1, 1, 0.01, 1) == (1, 1)
    assert derive_bucket_params(2, 2, 2, 100, 1) == (4, 4)
    with pytest.raises(ValueError):
        derive_bucket_params(0, 1, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        SceConfig(0, 1, 1)
    with pytest.raises(ValueError):
        SceConfig(1, 1, 1, alpha=0)
    with pytest.raises(ValueError):
        SceConfig(1, 1, 1, mix_target="z")
    c = SceConfig.from_alpha_beta(128, 200, 200, 4096)
    assert (c.n_b, c.b_x, c.b_y) == (320, 320, 4096)


def test_assignment_is_reusable():
    a = BucketAssignment(np.array([[0, 1]]), np.array([[0, 1]]))
    assert a.n_b == 1


def test_mix_on_catalog_rows_runs():
    rng = np.random.default_rng(11)
    X, Y = rng.normal(size=(12, 4)), rng.normal(size=(9, 4))
    t = rng.integers(1, 10, size=12)
    cfg = SceConfig(3, 4, 5, mix_target="y")
    out = sce_loss(Tensor(X), Tensor(Y), t, cfg, np.ones(12, bool), RngState(0))
    assert np.isfinite(out.value.item())
    # with centers drawn from Y's row span the bound still holds
    cov = ~np.isnan(out.position_loss)
    assert np.all(out.position_loss[cov] <= per_position_ce(X, Y, t)[cov] + 1e-12)
