import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidlcp import contactmodels as cm
from rigidlcp.lcpkit import LcpProblem, loads_problem, mlcp_reduce, solve_lcp_enumerate, solve_lcp_lemke, solve_lcp_ppm
from rigidlcp.matrixcore import BlockDiagInertia, ContractError, cholesky_factor

from oracles import random_spd, svd_rank

G = 9.8
Z = np.zeros((0, 6))


def particle_bundle(**kw) -> cm.JacobianBundle:
    """A unit-mass body with one contact at its center: n = z, s = x, t = y."""
    N = np.array([[0, 0, 1, 0, 0, 0.0]])
    S = np.array([[1, 0, 0, 0, 0, 0.0]])
    T = np.array([[0, 1, 0, 0, 0, 0.0]])
    return cm.JacobianBundle(N=N, S=S, T=T, **kw)


UNIT = BlockDiagInertia([np.eye(6)])
GRAVITY = np.array([0, 0, -G, 0, 0, 0])


def solve(cp, solver=solve_lcp_ppm):
    sol = solver(cp.lcp)
    return sol, cp.unpack(sol.z)


# --- frames and bundles -------------------------------------------------------


@pytest.mark.parametrize("n", [(0, 0, 1), (1, 0, 0), (-1, 0, 0), (0.3, -0.4, 0.866)])
def test_tangent_frame_is_orthonormal(n):
    n = np.asarray(n, float) / np.linalg.norm(n)
    s, t = cm.tangent_frame(n)
    B = np.vstack([n, s, t])
    np.testing.assert_allclose(B @ B.T, np.eye(3), atol=1e-12)


def test_tangent_frame_uses_world_x_then_y():
    s, t = cm.tangent_frame([0, 0, 1])
    np.testing.assert_allclose(s, [1, 0, 0])
    np.testing.assert_allclose(t, [0, 1, 0])
    s, _ = cm.tangent_frame([1, 0, 0])
    np.testing.assert_allclose(s, [0, 1, 0])


def test_contact_point_rejects_bad_frame():
    with pytest.raises(ContractError):
        cm.ContactPoint(0, None, np.zeros(3), [0, 0, 1], s=[1, 0, 0.1], t=[0, 1, 0])


def test_bundle_validates_shapes_and_coefficients():
    with pytest.raises(ContractError):
        cm.JacobianBundle(N=np.ones((2, 6)), S=np.ones((1, 6)), T=np.ones((2, 6)))
    with pytest.raises(ContractError):
        particle_bundle(mu_v=-1.0)
    jb = particle_bundle(mu_v=0.5)
    assert jb.m == 6 and jb.n == 1 and jb.mu_v.tolist() == [0.5]


# --- find_indices -------------------------------------------------------------


def test_duplicate_bilateral_row_is_dropped():
    J = np.array([[1.0, 0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0, 0]])
    assert cm.find_indices(UNIT, J, Z, Z).J == (0,)


def test_single_particle_keeps_both_tangents():
    M = BlockDiagInertia([np.eye(3)])
    a = cm.find_indices(M, np.zeros((0, 3)), [[1.0, 0, 0]], [[0, 1.0, 0]])
    assert a.S == (0,) and a.T == (0,)


def test_coincident_contacts_keep_one_frame():
    S = np.array([[1.0, 0, 0, 0, 0, 0]] * 2)
    T = np.array([[0, 1.0, 0, 0, 0, 0]] * 2)
    a = cm.find_indices(UNIT, Z, S, T)
    assert a.S == (0,) and a.T == (0,)
    assert a.size == svd_rank(np.vstack([S, T]))


def test_scan_order_interleaves_tangents():
    # S1 == T0, so T0 is accepted before S1 and S1 is rejected
    S = np.array([[1.0, 0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0, 0]])
    T = np.array([[0, 1.0, 0, 0, 0, 0], [0, 0, 1.0, 0, 0, 0]])
    a = cm.find_indices(UNIT, Z, S, T)
    assert a.S == (0,) and a.T == (0, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_find_indices_matches_rank_and_factorizes(seed):
    rng = np.random.default_rng(seed)
    m = 12
    M = BlockDiagInertia([random_spd(rng, 6), random_spd(rng, 6)])
    base = rng.normal(size=(int(rng.integers(2, 9)), m))
    pick = lambda k: rng.normal(size=(k, base.shape[0])) @ base  # noqa: E731
    J, S, T = pick(int(rng.integers(0, 4))), pick(int(rng.integers(1, 6))), None
    T = pick(S.shape[0])
    a = cm.find_indices(M, J, S, T)
    X = np.vstack([J[list(a.J)], S[list(a.S)], T[list(a.T)]])
    assert a.size == svd_rank(np.vstack([J, S, T])) <= m
    assert cholesky_factor(X @ np.linalg.solve(M.dense(), X.T))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_find_indices_ignores_late_duplicates(seed):
    rng = np.random.default_rng(seed)
    S, T = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    a = cm.find_indices(UNIT, Z, S, T)
    b = cm.find_indices(UNIT, Z, np.vstack([S, S[a.S[0]]]), np.vstack([T, T[a.T[0]]]))
    assert b == a


# --- viscous ------------------------------------------------------------------


def test_viscous_resting_particle():
    cp = cm.build_viscous_mlcp(UNIT, np.zeros(6), GRAVITY, particle_bundle())
    _, out = solve(cp)
    np.testing.assert_allclose(out.f_n, [G], atol=1e-12)
    np.testing.assert_allclose(out.v, 0, atol=1e-12)


def test_viscous_sliding_particle():
    v = np.array([1.0, 0, 0, 0, 0, 0])
    cp = cm.build_viscous_mlcp(UNIT, v, GRAVITY, particle_bundle(mu_v=0.1))
    _, out = solve(cp)
    np.testing.assert_allclose(out.f_n, [G], atol=1e-12)
    np.testing.assert_allclose(out.v, [-0.1, 0, 0, 0, 0, 0], atol=1e-12)


def test_viscous_null_forcing():
    cp = cm.build_viscous_mlcp(UNIT, np.zeros(6), np.zeros(6), particle_bundle())
    _, out = solve(cp)
    np.testing.assert_array_equal(out.f_n, [0.0])
    np.testing.assert_allclose(out.v, 0)


def test_viscous_reduction_matches_implicit_form():
    cp = cm.build_viscous_mlcp(UNIT, np.zeros(6), GRAVITY, particle_bundle())
    lcp, back = mlcp_reduce(cp.mlcp)
    np.testing.assert_allclose(lcp.Q, [[1.0]])
    np.testing.assert_allclose(lcp.q, [-G])
    np.testing.assert_allclose(lcp.q, cp.lcp.q, atol=1e-12)
    np.testing.assert_allclose(back([G])[:6], 0, atol=1e-12)


def test_viscous_drift_term_enters_constant():
    jb = particle_bundle(Ndot_v=[0.5])
    cp = cm.build_viscous_mlcp(UNIT, np.zeros(6), GRAVITY, jb)
    np.testing.assert_allclose(cp.lcp.q, [-G + 0.5])
    np.testing.assert_allclose(mlcp_reduce(cp.mlcp)[0].q, [-G + 0.5])


def test_viscous_with_joint_keeps_joint_satisfied():
    rng = np.random.default_rng(3)
    M = BlockDiagInertia([random_spd(rng, 6), random_spd(rng, 6)])
    J = rng.normal(size=(3, 12))
    N = rng.normal(size=(4, 12))
    drift = rng.normal(size=3)
    # the fourth J row repeats the first and must be dropped
    jb = cm.JacobianBundle(N=N, S=rng.normal(size=(4, 12)), T=rng.normal(size=(4, 12)), J=np.vstack([J, J[0]]),
                           Jdot_v=np.r_[drift, drift[0]], mu_v=0.3)
    v, f = rng.normal(size=12), rng.normal(size=12)
    cp = cm.build_viscous_mlcp(M, v, f, jb)
    assert cp.active.J == (0, 1, 2)
    sol, out = solve(cp)
    np.testing.assert_allclose(J @ out.v + jb.Jdot_v[:3], 0, atol=1e-9)
    gamma = N @ out.v
    assert gamma.min() >= -1e-9 and abs(out.f_n @ gamma) <= 1e-8


def frictionless_accel_fn(M, N, f):
    """Independent frictionless acceleration LCP: F = N M^-1 N^T, e = N M^-1 f."""
    Md = M.dense()
    F = N @ np.linalg.solve(Md, N.T)
    e = N @ np.linalg.solve(Md, f)
    return solve_lcp_enumerate(LcpProblem.explicit(F, e)).z


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_viscous_without_drag_is_frictionless(seed):
    rng = np.random.default_rng(seed)
    M = BlockDiagInertia([random_spd(rng, 6)])
    N = rng.normal(size=(3, 6))
    f = rng.normal(size=6)
    jb = cm.JacobianBundle(N=N, S=rng.normal(size=(3, 6)), T=rng.normal(size=(3, 6)), mu_v=0.0)
    cp = cm.build_viscous_mlcp(M, rng.normal(size=6), f, jb)
    _, out = solve(cp)
    fn_ref = frictionless_accel_fn(M, N, f)
    np.testing.assert_allclose(out.f_n, fn_ref, atol=1e-9)


# --- no-slip ------------------------------------------------------------------


def test_noslip_particle_impact_stops():
    v = np.array([1.0, 0, -1, 0, 0, 0])
    cp = cm.build_noslip_mlcp(UNIT, v, np.zeros(6), particle_bundle(), 0.0)
    _, out = solve(cp)
    np.testing.assert_allclose(out.v, 0, atol=1e-12)
    np.testing.assert_allclose(out.f_n, [1.0], atol=1e-12)
    _, ref = solve(cp, lambda p: solve_lcp_enumerate(p.to_explicit()))
    np.testing.assert_allclose(ref.f_n, out.f_n, atol=1e-12)


def test_noslip_separating_contact():
    v = np.array([0, 0, 1.0, 0, 0, 0])
    cp = cm.build_noslip_mlcp(UNIT, v, np.zeros(6), particle_bundle(), 0.0)
    _, out = solve(cp)
    np.testing.assert_array_equal(out.f_n, [0.0])
    np.testing.assert_allclose(out.v, v, atol=1e-12)


def test_noslip_includes_external_impulse():
    cp = cm.build_noslip_mlcp(UNIT, np.zeros(6), GRAVITY, particle_bundle(), 0.01)
    _, out = solve(cp)
    np.testing.assert_allclose(out.f_n, [G * 0.01], atol=1e-12)
    np.testing.assert_allclose(out.v, 0, atol=1e-12)


def test_noslip_structure():
    rng = np.random.default_rng(9)
    N, S, T = (rng.normal(size=(5, 6)) for _ in range(3))
    cp = cm.build_noslip_mlcp(UNIT, rng.normal(size=6), rng.normal(size=6), cm.JacobianBundle(N=N, S=S, T=T), 0.01)
    p = cp.mlcp
    np.testing.assert_allclose(p.D, -p.C.T, atol=1e-12)
    np.testing.assert_array_equal(p.B, 0)
    assert p.ny == 5  # N is never row-reduced
    assert cp.active.size == 6
    F = mlcp_reduce(p)[0].Q
    np.testing.assert_allclose(F, cp.lcp.matrix(), atol=1e-9)


def random_contact_setup(rng, n_bodies=2, n=4, joints=1):
    m = 6 * n_bodies
    M = BlockDiagInertia([random_spd(rng, 6) for _ in range(n_bodies)])
    J = rng.normal(size=(3 * joints, m))
    N, S, T = (rng.normal(size=(n, m)) for _ in range(3))
    return M, cm.JacobianBundle(N=N, S=S, T=T, J=J)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_noslip_invariants(seed, n):
    rng = np.random.default_rng(seed)
    M, jb = random_contact_setup(rng, n=n)
    v = rng.normal(size=jb.m)
    cp = cm.build_noslip_mlcp(M, v, np.zeros(jb.m), jb, 0.0)
    F = cp.lcp.matrix()
    np.testing.assert_allclose(F, F.T, atol=1e-9)
    assert np.linalg.eigvalsh(F).min() >= -1e-8 * max(1.0, np.abs(F).max())
    sol, out = solve(cp)
    a = cp.active
    for rows, idx in ((jb.J, a.J), (jb.S, a.S), (jb.T, a.T)):
        assert np.abs(rows[list(idx)] @ out.v).max(initial=0) <= 1e-8
    Nv = jb.N @ out.v
    assert Nv.min() >= -1e-8
    assert abs(out.f_n @ Nv) <= 1e-8
    ke = lambda u: 0.5 * u @ M.matvec(u)  # noqa: E731
    assert ke(out.v) <= ke(v) * (1 + 1e-10)


def test_contact_problem_dump_has_provenance():
    cp = cm.build_noslip_mlcp(UNIT, np.zeros(6), GRAVITY, particle_bundle(), 0.01)
    buf = io.StringIO()
    cm.dump_contact_problem(cp, buf)
    p, meta = loads_problem(buf.getvalue())
    assert meta["provenance"] == "no-slip"
    np.testing.assert_array_equal(p.A, cp.mlcp.A)


# --- friction pyramid ----------------------------------------------------------


def pyramid_solve(v, mu, dt=0.0, f=np.zeros(6)):
    jb = particle_bundle(mu_c=mu)
    lcp, pmap = cm.build_pyramid_baseline_lcp(UNIT, v, f, jb, dt)
    sol = solve_lcp_lemke(lcp)
    return lcp, pmap, sol


def test_pyramid_has_six_variables_per_contact():
    rng = np.random.default_rng(0)
    M, jb = random_contact_setup(rng, n=5, joints=0)
    lcp, pmap = cm.build_pyramid_baseline_lcp(M, np.zeros(12), np.zeros(12), jb, 0.01)
    assert lcp.n == pmap.size == 30


def test_pyramid_without_friction_matches_frictionless():
    v = np.array([1.0, 0.5, -1, 0, 0, 0])
    _, pmap, sol = pyramid_solve(v, 0.0)
    fn, _, _ = pmap.split(sol.z)
    cp = cm.build_frictionless_mlcp(UNIT, v, np.zeros(6), particle_bundle(), 0.0)
    _, out = solve(cp)
    np.testing.assert_allclose(fn, out.f_n, atol=1e-8)
    np.testing.assert_allclose(pmap.velocity(sol.z), [1, 0.5, 0, 0, 0, 0], atol=1e-8)


def test_pyramid_high_friction_matches_noslip():
    v = np.array([1.0, 0, -1, 0, 0, 0])
    _, pmap, sol = pyramid_solve(v, 100.0)
    np.testing.assert_allclose(pmap.velocity(sol.z), 0, atol=1e-6)


def test_pyramid_low_friction_slides_on_edge():
    v = np.array([1.0, 0, -1, 0, 0, 0])
    lcp, pmap, sol = pyramid_solve(v, 0.1)
    fn, _, _ = pmap.split(sol.z)
    ft = pmap.tangential(sol.z)
    np.testing.assert_allclose(fn, [1.0], atol=1e-10)
    np.testing.assert_allclose(np.abs(ft).sum(), 0.1 * fn[0], atol=1e-10)
    np.testing.assert_allclose(pmap.velocity(sol.z), [0.9, 0, 0, 0, 0, 0], atol=1e-10)
