"""Assembly of contact problems from Jacobians.

Three models are built here:

* viscous friction at the acceleration level (tangential drag ``mu_v`` enters
  the free force, only normal forces are complementarity variables);
* no-slip at the velocity level (tangential contact velocities are equality
  constraints, so again only normal impulses are complementarity variables);
* a friction-pyramid LCP with six variables per contact, kept as a baseline.

The first two reduce to ``F = N P N^T``, ``e = N r (+ drift)`` where ``P`` is
the velocity block of the inverse of ``[[M, -X^T], [X, 0]]`` and ``X`` stacks
the equality rows. :class:`SaddleInverse` applies ``P`` without forming it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .lcpkit import LcpProblem, MlcpProblem, dump_problem
from .matrixcore import (
    TOL,
    BlockDiagInertia,
    CholeskyFactor,
    ContractError,
    Singular,
    SingularMatrixError,
    Tolerances,
    as_matrix,
    as_vector,
    cholesky_factor,
    mm,
)

VISCOUS = "viscous"
NOSLIP = "no-slip"
PYRAMID = "pyramid-baseline"


# ---------------------------------------------------------------------------
# contact frames and Jacobian bundles
# ---------------------------------------------------------------------------


def tangent_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangents: ``s`` from world x projected on the plane.

    Falls back to world y when the normal is (anti)parallel to x.
    """
    n = np.asarray(normal, dtype=float)
    axis = np.array([1.0, 0.0, 0.0])
    if np.linalg.norm(np.cross(n, axis)) < 1e-6:
        axis = np.array([0.0, 1.0, 0.0])
    s = axis - (axis @ n) * n
    s /= np.linalg.norm(s)
    return s, np.cross(n, s)


@dataclass(frozen=True, eq=False)
class ContactPoint:
    """A contact between ``body_a`` and ``body_b`` (``None`` = static world).

    ``normal`` points from B towards A, so a positive normal impulse pushes A
    away from B. ``distance`` is the signed gap at generation time.
    """

    body_a: int
    body_b: int | None
    position: np.ndarray
    normal: np.ndarray
    s: np.ndarray = None
    t: np.ndarray = None
    distance: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.s is None or self.t is None:
            s, t = tangent_frame(n)
            object.__setattr__(self, "s", s)
            object.__setattr__(self, "t", t)
        s, t = np.asarray(self.s, float), np.asarray(self.t, float)
        eps = TOL.unit_vector
        for name, u in (("s", s), ("t", t)):
            if abs(np.linalg.norm(u) - 1.0) > eps:
                raise ContractError(f"contact tangent {name} is not unit length")
        if max(abs(n @ s), abs(n @ t), abs(s @ t)) > eps:
            raise ContractError("contact frame is not orthogonal")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)


@dataclass(frozen=True, eq=False)
class JacobianBundle:
    """Constraint rows over ``m`` generalized velocities.

    ``Jdot_v`` and ``Ndot_v`` are the drift products, zero when omitted.
    ``mu_v`` holds one viscous coefficient per contact; ``mu_c`` is the
    Coulomb coefficient used only by the pyramid baseline.
    """

    N: np.ndarray
    S: np.ndarray
    T: np.ndarray
    J: np.ndarray | None = None
    Jdot_v: np.ndarray | None = None
    Ndot_v: np.ndarray | None = None
    mu_v: np.ndarray | float = 0.0
    mu_c: np.ndarray | float = 0.0

    def __post_init__(self):
        N = np.asarray(self.N, dtype=float)
        m = N.shape[1] if N.ndim == 2 else np.asarray(self.J).shape[1]
        N = as_matrix(N.reshape(-1, m), "N", m)
        n = N.shape[0]
        S = as_matrix(np.asarray(self.S, float).reshape(-1, m), "S", m)
        T = as_matrix(np.asarray(self.T, float).reshape(-1, m), "T", m)
        if S.shape[0] != n or T.shape[0] != n:
            raise ContractError("N, S and T must have one row per contact")
        J = np.zeros((0, m)) if self.J is None else as_matrix(np.asarray(self.J, float).reshape(-1, m), "J", m)
        Jdv = np.zeros(J.shape[0]) if self.Jdot_v is None else as_vector(self.Jdot_v, "Jdot_v", J.shape[0])
        Ndv = np.zeros(n) if self.Ndot_v is None else as_vector(self.Ndot_v, "Ndot_v", n)
        mu_v = np.broadcast_to(np.asarray(self.mu_v, float), (n,)).copy()
        mu_c = np.broadcast_to(np.asarray(self.mu_c, float), (n,)).copy()
        if (mu_v < 0).any() or (mu_c < 0).any() or not np.isfinite(mu_c).all():
            raise ContractError("friction coefficients must be finite and non-negative")
        for name, value in (("N", N), ("S", S), ("T", T), ("J", J), ("Jdot_v", Jdv),
                            ("Ndot_v", Ndv), ("mu_v", mu_v), ("mu_c", mu_c)):
            object.__setattr__(self, name, value)

    @property
    def m(self) -> int:
        return self.N.shape[1]

    @property
    def n(self) -> int:
        return self.N.shape[0]


@dataclass(frozen=True)
class ActiveRows:
    """Row indices of J, S and T kept so the equality block is nonsingular."""

    J: tuple[int, ...] = ()
    S: tuple[int, ...] = ()
    T: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.J) + len(self.S) + len(self.T)


# ---------------------------------------------------------------------------
# constrained inverse
# ---------------------------------------------------------------------------


class SaddleInverse:
    """Solves ``[[M, -X^T], [X, 0]] [v; lam] = [b; c]`` by Schur complement.

    ``solve(b)`` returns the velocity block with ``c = 0``, i.e. applies the
    symmetric PSD operator ``P = M^-1 - M^-1 X^T (X M^-1 X^T)^-1 X M^-1``.
    With no rows in ``X`` it is plain ``M^-1``.
    """

    def __init__(self, M: BlockDiagInertia, X: np.ndarray, schur: CholeskyFactor | None = None,
                 tol: Tolerances = TOL):
        self.M = M
        self.X = as_matrix(X, "X", M.dim)
        self.dim = M.dim
        self.MiXt = M.solve(np.ascontiguousarray(self.X.T))
        if schur is None:
            schur = cholesky_factor(mm(self.X, self.MiXt), tol)
            if isinstance(schur, Singular):
                raise SingularMatrixError(schur.index, schur.value, "X M^-1 X^T")
        self.schur = schur

    def solve_full(self, b, c=None) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(b, dtype=float)
        Mib = self.M.solve(b)
        k = self.X.shape[0]
        if k == 0:
            return Mib, np.zeros((0,) + b.shape[1:])
        rhs = -mm(self.X, Mib)
        if c is not None:
            rhs = rhs + c
        lam = self.schur.solve(rhs)
        return Mib + mm(self.MiXt, lam), lam

    def solve(self, b) -> np.ndarray:
        return self.solve_full(b)[0]


def find_indices(M: BlockDiagInertia, J, S, T, tol: Tolerances = TOL) -> ActiveRows:
    """Greedy row selection keeping ``X M^-1 X^T`` positive definite.

    All J rows are scanned first, then S and T rows alternate per contact.
    A row is kept iff appending it to the Cholesky factor of the Gram matrix
    succeeds, so each test costs O(k m + k^2) after the block solve.
    """
    m = M.dim
    J = as_matrix(np.asarray(J, float).reshape(-1, m), "J", m)
    S = as_matrix(np.asarray(S, float).reshape(-1, m), "S", m)
    T = as_matrix(np.asarray(T, float).reshape(-1, m), "T", m)
    factor = CholeskyFactor(tol=tol)
    rows: list[np.ndarray] = []
    kept = {"J": [], "S": [], "T": []}

    def consider(tag, i, row):
        Mi_row = M.solve(row)
        col = [r @ Mi_row for r in rows] + [row @ Mi_row]
        if factor.append(col) is None:
            rows.append(row)
            kept[tag].append(i)

    for i in range(J.shape[0]):
        consider("J", i, J[i])
    for i in range(max(S.shape[0], T.shape[0])):
        if i < S.shape[0]:
            consider("S", i, S[i])
        if i < T.shape[0]:
            consider("T", i, T[i])
    return ActiveRows(tuple(kept["J"]), tuple(kept["S"]), tuple(kept["T"]))


# ---------------------------------------------------------------------------
# assembled problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContactForces:
    """Unpacked solution. ``v`` is an acceleration for the viscous model and
    the post-step velocity for velocity-level models."""

    v: np.ndarray
    f_n: np.ndarray
    f_j: np.ndarray
    f_s: np.ndarray
    f_t: np.ndarray


@dataclass(frozen=True, eq=False)
class ContactProblem:
    mlcp: MlcpProblem
    kind: str
    active: ActiveRows
    lcp: LcpProblem  # implicit (N, P, r) form of the reduced LCP
    saddle: SaddleInverse = field(repr=False)

    def recover(self, y) -> np.ndarray:
        """Back-substitute the free variables ``x`` from normal forces ``y``."""
        p = self.mlcp
        m = self.saddle.dim
        y = as_vector(y, "y", p.ny)
        rhs = -(p.C @ y + p.g)
        v, lam = self.saddle.solve_full(rhs[:m], rhs[m:])
        return np.concatenate([v, lam])

    def unpack(self, y) -> ContactForces:
        m = self.saddle.dim
        x = self.recover(y)
        a = self.active
        lam = x[m:]
        j, s = len(a.J), len(a.S)
        return ContactForces(
            v=x[:m], f_n=np.asarray(y, float), f_j=lam[:j], f_s=lam[j : j + s], f_t=lam[j + s :]
        )


def _assemble_saddle(M: BlockDiagInertia, X: np.ndarray, N: np.ndarray, g: np.ndarray,
                     h: np.ndarray) -> MlcpProblem:
    m, k, n = M.dim, X.shape[0], N.shape[0]
    A = np.zeros((m + k, m + k))
    A[:m, :m] = M.dense()
    A[:m, m:] = -X.T
    A[m:, :m] = X
    C = np.zeros((m + k, n))
    C[:m] = -N.T
    return MlcpProblem(A=A, B=np.zeros((n, n)), C=C, D=-C.T, g=g, h=h)


def build_viscous_mlcp(M: BlockDiagInertia, v, f, jb: JacobianBundle,
                       active: ActiveRows | None = None, tol: Tolerances = TOL) -> ContactProblem:
    """Acceleration-level contact with purely viscous friction.

    Unknowns are ``x = (vdot, f_j)``, ``y = f_n``; the free force is
    ``f* = -f + S^T mu_v S v + T^T mu_v T v`` and the normal rows read
    ``gamma = N vdot + Ndot v``. Redundant J rows are dropped first.
    """
    m = M.dim
    v = as_vector(v, "v", m)
    f = as_vector(f, "f", m)
    if active is None:
        active = find_indices(M, jb.J, np.zeros((0, m)), np.zeros((0, m)), tol)
    Jidx = list(active.J)
    X = jb.J[Jidx]
    saddle = SaddleInverse(M, X, tol=tol)
    f_star = -f + jb.S.T @ (jb.mu_v * (jb.S @ v)) + jb.T.T @ (jb.mu_v * (jb.T @ v))
    g = np.concatenate([f_star, jb.Jdot_v[Jidx]])
    mlcp = _assemble_saddle(M, X, jb.N, g, jb.Ndot_v)
    r = -saddle.solve_full(f_star, jb.Jdot_v[Jidx])[0]
    lcp = LcpProblem.implicit(jb.N, saddle, r, offset=jb.Ndot_v)
    return ContactProblem(mlcp, VISCOUS, ActiveRows(J=tuple(Jidx)), lcp, saddle)


def build_noslip_mlcp(M: BlockDiagInertia, v, f, jb: JacobianBundle, dt: float,
                      active: ActiveRows | None = None, tol: Tolerances = TOL) -> ContactProblem:
    """Velocity-level contact with zero tangential velocity at every contact.

    Unknowns are ``x = (v+, f_j, f_s, f_t)`` over the active rows and
    ``y = f_n`` over all contacts; ``g = (-M v - dt f, 0, 0, 0)``. ``dt = 0``
    resolves an impact without the external-force impulse.
    """
    if dt < 0:
        raise ContractError("dt must be non-negative")
    m = M.dim
    v = as_vector(v, "v", m)
    f = as_vector(f, "f", m)
    if active is None:
        active = find_indices(M, jb.J, jb.S, jb.T, tol)
    X = np.vstack([jb.J[list(active.J)], jb.S[list(active.S)], jb.T[list(active.T)]]).reshape(-1, m)
    saddle = SaddleInverse(M, X, tol=tol)
    momentum = M.matvec(v) + dt * f
    g = np.concatenate([-momentum, np.zeros(X.shape[0])])
    mlcp = _assemble_saddle(M, X, jb.N, g, np.zeros(jb.n))
    lcp = LcpProblem.implicit(jb.N, saddle, saddle.solve(momentum))
    return ContactProblem(mlcp, NOSLIP, active, lcp, saddle)


def build_frictionless_mlcp(M: BlockDiagInertia, v, f, jb: JacobianBundle, dt: float,
                            tol: Tolerances = TOL) -> ContactProblem:
    """Velocity-level model with only bilateral rows kept (no tangential rows)."""
    m = M.dim
    empty = np.zeros((0, m))
    active = find_indices(M, jb.J, empty, empty, tol)
    return build_noslip_mlcp(M, v, f, jb, dt, active, tol)


def dump_contact_problem(cp: ContactProblem, out: TextIO) -> None:
    dump_problem(cp.mlcp, out, meta={"provenance": cp.kind, "m": cp.saddle.dim,
                                     "active": f"J={len(cp.active.J)} S={len(cp.active.S)} T={len(cp.active.T)}"})


# ---------------------------------------------------------------------------
# friction pyramid baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PyramidMap:
    """Layout of the pyramid LCP: ``[f_n (n), beta (4n), lambda (n)]``.

    ``beta`` for contact i holds impulses along ``+s, -s, +t, -t``.
    """

    n: int
    D: np.ndarray
    N: np.ndarray
    saddle: SaddleInverse = field(repr=False)
    v_free: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return 6 * self.n

    def split(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return z[:n], z[n : 5 * n].reshape(n, 4), z[5 * n :]

    def velocity(self, z) -> np.ndarray:
        f_n, beta, _ = self.split(np.asarray(z, float))
        impulse = self.N.T @ f_n + self.D.T @ beta.reshape(-1)
        return self.v_free + self.saddle.solve(impulse)

    def tangential(self, z) -> np.ndarray:
        """Per-contact friction impulse components along (s, t)."""
        _, beta, _ = self.split(np.asarray(z, float))
        return np.column_stack([beta[:, 0] - beta[:, 1], beta[:, 2] - beta[:, 3]])


def build_pyramid_baseline_lcp(M: BlockDiagInertia, v, f, jb: JacobianBundle, dt: float,
                               tol: Tolerances = TOL) -> tuple[LcpProblem, PyramidMap]:
    """Velocity-level LCP with a four-sided friction pyramid (6 n variables).

    ::

        [ N P N^T   N P D^T   0 ] [f_n ]   [N v']
        [ D P N^T   D P D^T   E ] [beta] + [D v'] >= 0
        [ mu        -E^T      0 ] [lam ]   [ 0  ]

    with ``v' = P (M v + dt f)`` and ``P`` the J-constrained inverse.
    """
    m, n = M.dim, jb.n
    v = as_vector(v, "v", m)
    f = as_vector(f, "f", m)
    empty = np.zeros((0, m))
    active = find_indices(M, jb.J, empty, empty, tol)
    saddle = SaddleInverse(M, jb.J[list(active.J)], tol=tol)
    D = np.empty((4 * n, m))
    D[0::4], D[1::4], D[2::4], D[3::4] = jb.S, -jb.S, jb.T, -jb.T
    E = np.zeros((4 * n, n))
    E[np.arange(4 * n), np.repeat(np.arange(n), 4)] = 1.0
    W = np.vstack([jb.N, D])
    PW = saddle.solve(np.ascontiguousarray(W.T))
    K = mm(W, PW)
    K = 0.5 * (K + K.T)
    Q = np.zeros((6 * n, 6 * n))
    Q[: 5 * n, : 5 * n] = K
    Q[n : 5 * n, 5 * n :] = E
    Q[5 * n :, :n] = np.diag(jb.mu_c)
    Q[5 * n :, n : 5 * n] = -E.T
    v_free = saddle.solve(M.matvec(v) + dt * f)
    q = np.concatenate([W @ v_free, np.zeros(n)])
    return LcpProblem.explicit(Q, q), PyramidMap(n, D, jb.N, saddle, v_free)
