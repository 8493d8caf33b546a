import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidlcp.matrixcore import (
    BlockDiagInertia,
    CholeskyFactor,
    ContractError,
    Singular,
    cholesky_factor,
    count_ops,
    factor_update_append,
    inertia_solve,
    mm,
    solve_spd,
)

from oracles import random_spd


def test_identity_factor_is_identity():
    F = cholesky_factor(np.eye(3))
    np.testing.assert_array_equal(F.L, np.eye(3))


def test_two_by_two_factor_by_hand():
    F = cholesky_factor([[4.0, 2.0], [2.0, 2.0]])
    np.testing.assert_allclose(F.L, [[2, 0], [1, 1]], atol=1e-15)
    np.testing.assert_allclose(F.L @ F.L.T, [[4, 2], [2, 2]], atol=1e-14)


def test_rank_one_matrix_reports_failing_pivot():
    res = cholesky_factor([[1.0, 1.0], [1.0, 1.0]])
    assert isinstance(res, Singular)
    assert not res
    assert res.index == 1  # 0-based: the second pivot


@pytest.mark.parametrize("A", [np.ones((2, 3)), [[1.0, 2.0], [0.0, 1.0]]])
def test_non_square_or_asymmetric_input_is_rejected(A):
    with pytest.raises(ContractError):
        cholesky_factor(A)


def test_non_finite_input_is_rejected():
    with pytest.raises(ContractError):
        cholesky_factor([[np.nan]])


def test_append_unit_row_to_identity():
    F = factor_update_append(cholesky_factor(np.eye(3)), [0, 0, 0, 1])
    np.testing.assert_array_equal(F.L, np.eye(4))


def test_append_duplicate_row_is_singular_and_leaves_factor_alone():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    F = cholesky_factor(A)
    before = F.L.copy()
    res = F.append([2.0, 1.0, 2.0])  # copy of row/column 0
    assert isinstance(res, Singular)
    np.testing.assert_array_equal(F.L, before)
    assert isinstance(factor_update_append(F, [2.0, 1.0, 2.0]), Singular)


def test_grow_five_from_leading_four_matches_direct():
    rng = np.random.default_rng(5)
    A = random_spd(rng, 5)
    F = cholesky_factor(A[:4, :4])
    G = factor_update_append(F, A[4])
    np.testing.assert_allclose(G.L, cholesky_factor(A).L, atol=1e-10)
    assert F.order == 4  # functional form does not mutate


def test_append_cost_is_quadratic_in_order():
    rng = np.random.default_rng(0)
    counts = []
    for n in (20, 40, 80):
        A = random_spd(rng, n + 1)
        F = cholesky_factor(A[:n, :n])
        with count_ops() as ops:
            F.append(A[n])
        counts.append(ops.macs)
    ratios = np.array(counts[1:]) / np.array(counts[:-1])
    assert np.all(ratios < 4.5) and np.all(ratios > 3.0)


def test_solve_examples():
    np.testing.assert_allclose(solve_spd(cholesky_factor(np.eye(2)), [3.0, -1.0]), [3, -1])
    np.testing.assert_allclose(solve_spd(cholesky_factor([[4.0, 2.0], [2.0, 2.0]]), [6.0, 4.0]), [1, 1])
    np.testing.assert_allclose(solve_spd(cholesky_factor(2 * np.eye(4)), np.ones(4)), 0.5 * np.ones(4))


def test_solve_length_mismatch():
    with pytest.raises(ContractError):
        solve_spd(cholesky_factor(np.eye(2)), np.ones(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_factor_solve_residual(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, cond=1e4)
    b = rng.normal(size=n)
    F = cholesky_factor(A)
    np.testing.assert_allclose(F.L @ F.L.T, A, atol=1e-10 * (1 + np.abs(A).max()))
    x = solve_spd(F, b)
    assert np.abs(A @ x - b).max() <= 1e-9 * (1 + np.abs(b).max())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.booleans(), min_size=1, max_size=20))
def test_append_remove_schedule_matches_scratch(seed, schedule):
    rng = np.random.default_rng(seed)
    pool = random_spd(rng, 24, cond=100)
    members: list[int] = []
    F = CholeskyFactor()
    unused = list(range(24))
    for grow in schedule:
        if grow or not members:
            k = unused.pop(0)
            row = pool[members + [k], k]
            assert F.append(row) is None
            members.append(k)
        else:
            pos = int(rng.integers(len(members)))
            F.remove(pos)
            members.pop(pos)
        if members:
            ref = cholesky_factor(pool[np.ix_(members, members)])
            np.testing.assert_allclose(F.L, ref.L, atol=1e-9)


def test_append_then_remove_restores_factor():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 6)
    F = cholesky_factor(A[:5, :5])
    before = F.L.copy()
    F.append(A[:, 5])
    F.remove(5)
    np.testing.assert_allclose(F.L, before, atol=1e-10 * (1 + np.abs(A).max()))


def test_inertia_solve_single_body():
    M = BlockDiagInertia([2.0 * np.eye(6)])
    np.testing.assert_allclose(inertia_solve(M, [4, 0, 0, 0, 0, 0]), [2, 0, 0, 0, 0, 0])


def test_inertia_solve_two_bodies_scales_per_block():
    M = BlockDiagInertia([np.eye(3), 4.0 * np.eye(3)])
    np.testing.assert_allclose(M.solve(np.ones(6)), [1, 1, 1, 0.25, 0.25, 0.25])
    assert M.offsets == (0, 3, 6) and M.dim == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inertia_solve_matches_dense(seed):
    rng = np.random.default_rng(seed)
    blocks = [random_spd(rng, int(k)) for k in rng.integers(1, 7, size=3)]
    M = BlockDiagInertia(blocks)
    b = rng.normal(size=(M.dim, 2))
    np.testing.assert_allclose(M.solve(b), np.linalg.solve(M.dense(), b), atol=1e-10)
    np.testing.assert_allclose(M.matvec(M.solve(b[:, 0])), b[:, 0], atol=1e-10)


def test_inertia_rejects_indefinite_or_asymmetric_block():
    with pytest.raises(ContractError):
        BlockDiagInertia([np.diag([1.0, -1.0])])
    with pytest.raises(ContractError):
        BlockDiagInertia([[[1.0, 0.1], [0.0, 1.0]]])
    with pytest.raises(ContractError):
        inertia_solve(BlockDiagInertia([np.eye(2)]), np.ones(3))


def test_op_counter_nests_and_counts_products():
    a, b = np.ones((3, 4)), np.ones((4, 5))
    with count_ops() as outer:
        mm(a, b)
        with count_ops() as inner:
            mm(a, b[:, 0])
    assert inner.macs == 12
    assert outer.macs == 60 + 12
