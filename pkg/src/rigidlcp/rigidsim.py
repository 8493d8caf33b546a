"""Minimal multi rigid body layer driving the contact models.

Each body contributes six generalized velocities: linear velocity of the
center of mass and angular velocity, both in world coordinates. Orientation
is a unit quaternion ``(w, x, y, z)`` integrated with the exponential map.
"""

from __future__ import annotations

import copy
import io
import itertools
import time
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from . import contactmodels as cm
from .lcpkit import (
    LcpProblem,
    LcpSolution,
    PpmOptions,
    SolverError,
    dump_problem,
    solve_lcp_enumerate,
    solve_lcp_lemke,
    solve_lcp_ppm,
)
from .matrixcore import TOL, BlockDiagInertia, ContractError, count_ops

# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < 1e-15:
        return np.array([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]]) / np.sqrt(1 + 0.25 * angle**2)
    axis = rv / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def skew(r) -> np.ndarray:
    x, y, z = r
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# bodies, geometry, joints
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RigidBody:
    mass: float
    inertia: np.ndarray  # body frame
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        if not self.mass > 0:
            raise ContractError("body mass must be positive")
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        if np.max(np.abs(self.inertia - self.inertia.T)) > 1e-12 * (1 + np.abs(self.inertia).max()):
            raise ContractError("inertia tensor must be symmetric")
        if np.linalg.eigvalsh(self.inertia).min() <= 0:
            raise ContractError("inertia tensor must be positive definite")
        for name in ("position", "velocity", "angular_velocity", "force", "torque"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3).copy())
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ContractError("orientation quaternion must be unit length")
        self.orientation = q.copy()

    @classmethod
    def box(cls, mass: float, half_extents, **kw) -> RigidBody:
        hx, hy, hz = 2 * np.asarray(half_extents, dtype=float)
        I = mass / 12.0 * np.diag([hy * hy + hz * hz, hx * hx + hz * hz, hx * hx + hy * hy])
        return cls(mass, I, **kw)

    @classmethod
    def sphere(cls, mass: float, radius: float, **kw) -> RigidBody:
        # a zero radius gives a point mass; keep the inertia well conditioned
        r2 = max(radius, 0.1) ** 2
        return cls(mass, 0.4 * mass * r2 * np.eye(3), **kw)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def world_inertia(self) -> np.ndarray:
        R = self.rotation()
        return R @ self.inertia @ R.T

    def mass_block(self) -> np.ndarray:
        blk = np.zeros((6, 6))
        blk[:3, :3] = self.mass * np.eye(3)
        Iw = self.world_inertia()
        blk[3:, 3:] = 0.5 * (Iw + Iw.T)
        return blk


@dataclass(frozen=True)
class Plane:
    """Static half-space ``{x : normal . x <= offset}``."""

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def unit_normal(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Box:
    body: int
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class Sphere:
    body: int
    radius: float


@dataclass(frozen=True)
class SphericalJoint:
    """Keeps two anchor points coincident (three rows of J).

    ``anchor_a`` is in body A's frame; ``anchor_b`` is in body B's frame, or a
    world point when ``body_b`` is ``None``.
    """

    body_a: int
    anchor_a: tuple[float, float, float]
    body_b: int | None
    anchor_b: tuple[float, float, float]


@dataclass(eq=False)
class MultibodySystem:
    bodies: list[RigidBody]
    geometries: list = field(default_factory=list)
    joints: list[SphericalJoint] = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    mu_v: float = 0.0
    mu_c: float = 0.0
    contact_duplication: int = 1
    time: float = 0.0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)

    @property
    def m(self) -> int:
        return 6 * len(self.bodies)

    def copy(self) -> MultibodySystem:
        return copy.deepcopy(self)

    def inertia(self) -> BlockDiagInertia:
        return BlockDiagInertia([b.mass_block() for b in self.bodies])

    def velocity(self) -> np.ndarray:
        if not self.bodies:
            return np.zeros(0)
        return np.concatenate([np.r_[b.velocity, b.angular_velocity] for b in self.bodies])

    def set_velocity(self, v) -> None:
        v = np.asarray(v, dtype=float).reshape(-1, 6)
        for b, vb in zip(self.bodies, v):
            b.velocity = vb[:3].copy()
            b.angular_velocity = vb[3:].copy()

    def forces(self, v=None) -> np.ndarray:
        """Gravity, applied loads and gyroscopic torque ``-w x (I w)``."""
        out = []
        vv = self.velocity() if v is None else np.asarray(v, float)
        for i, b in enumerate(self.bodies):
            w = vv[6 * i + 3 : 6 * i + 6]
            gyro = -np.cross(w, b.world_inertia() @ w)
            out.append(np.r_[b.mass * self.gravity + b.force, b.torque + gyro])
        return np.concatenate(out) if out else np.zeros(0)

    def integrate_positions(self, dt: float, v=None) -> None:
        v = self.velocity() if v is None else np.asarray(v, float)
        for i, b in enumerate(self.bodies):
            b.position = b.position + dt * v[6 * i : 6 * i + 3]
            dq = quat_from_rotvec(dt * v[6 * i + 3 : 6 * i + 6])
            q = quat_mul(dq, b.orientation)
            b.orientation = q / np.linalg.norm(q)

    def state(self) -> np.ndarray:
        """Per-body rows ``[position, quaternion, velocity, angular velocity]``."""
        return np.array([np.r_[b.position, b.orientation, b.velocity, b.angular_velocity] for b in self.bodies])

    def set_state(self, state) -> None:
        for b, row in zip(self.bodies, np.asarray(state, dtype=float)):
            b.position, b.orientation = row[:3].copy(), row[3:7].copy()
            b.velocity, b.angular_velocity = row[7:10].copy(), row[10:13].copy()


def dump_state(sys: MultibodySystem, out: TextIO) -> None:
    """Plain-text record per body: ``body <i> <px py pz qw qx qy qz vx vy vz wx wy wz>``."""
    out.write(f"time {sys.time!r}\n")
    for i, row in enumerate(sys.state()):
        out.write(f"body {i} " + " ".join(repr(float(x)) for x in row) + "\n")


def restore_state(sys: MultibodySystem, src: TextIO) -> None:
    rows = {}
    for line in src:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "time":
            sys.time = float(parts[1])
        elif parts[0] == "body":
            rows[int(parts[1])] = [float(x) for x in parts[2:]]
    if sorted(rows) != list(range(len(sys.bodies))):
        raise ContractError("state record does not match the body count")
    sys.set_state([rows[i] for i in range(len(sys.bodies))])


# ---------------------------------------------------------------------------
# contact generation
# ---------------------------------------------------------------------------


class UnsupportedGeometryError(ContractError):
    pass


def _box_vertices(sys: MultibodySystem, g: Box) -> np.ndarray:
    b = sys.bodies[g.body]
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
    return b.position + (signs * np.asarray(g.half_extents)) @ b.rotation().T


def _plane_contacts(sys, plane: Plane, g, tol) -> list[cm.ContactPoint]:
    n = plane.unit_normal()
    out = []
    if isinstance(g, Box):
        for p in _box_vertices(sys, g):
            d = n @ p - plane.offset
            if d <= tol:
                out.append(cm.ContactPoint(g.body, None, p, n, distance=float(d)))
    elif isinstance(g, Sphere):
        c = sys.bodies[g.body].position
        d = n @ c - g.radius - plane.offset
        if d <= tol:
            out.append(cm.ContactPoint(g.body, None, c - g.radius * n, n, distance=float(d)))
    else:
        raise UnsupportedGeometryError(f"plane vs {type(g).__name__} is not supported")
    return out


def _box_box_contacts(sys, ga: Box, gb: Box, tol) -> list[cm.ContactPoint]:
    A, B = sys.bodies[ga.body], sys.bodies[gb.body]
    reach = np.linalg.norm(ga.half_extents) + np.linalg.norm(gb.half_extents)
    if np.linalg.norm(B.position - A.position) > reach + tol:
        return []
    Ra, Rb = A.rotation(), B.rotation()
    rel = np.abs(Ra.T @ Rb)
    if np.max(np.abs(rel - np.round(rel))) > 1e-9:
        raise UnsupportedGeometryError("box-box contact requires face-aligned boxes")
    ha = np.asarray(ga.half_extents, dtype=float)
    hb = np.round(rel) @ np.asarray(gb.half_extents, dtype=float)
    d = Ra.T @ (B.position - A.position)
    gaps = np.abs(d) - (ha + hb)
    k = int(np.argmax(gaps))
    if gaps[k] > tol:
        return []
    others = [j for j in range(3) if j != k]
    lo = {j: max(-ha[j], d[j] - hb[j]) for j in others}
    hi = {j: min(ha[j], d[j] + hb[j]) for j in others}
    if any(hi[j] - lo[j] <= tol for j in others):
        return []  # edge or vertex touching only
    sgn = 1.0 if d[k] >= 0 else -1.0
    normal = -sgn * Ra[:, k]  # from B towards A
    depth = float(gaps[k])
    plane_coord = sgn * (ha[k] + 0.5 * depth)
    # equal, coincident faces: corners lie on shared edges, so each corner is
    # reported once per candidate normal direction
    degenerate = all(
        abs(lo[j] + ha[j]) < 1e-9 and abs(hi[j] - ha[j]) < 1e-9
        and abs(lo[j] - (d[j] - hb[j])) < 1e-9 and abs(hi[j] - (d[j] + hb[j])) < 1e-9
        for j in others
    )
    out = []
    j1, j2 = others
    for u, w in itertools.product((lo[j1], hi[j1]), (lo[j2], hi[j2])):
        local = np.zeros(3)
        local[k], local[j1], local[j2] = plane_coord, u, w
        p = A.position + Ra @ local
        out.append(cm.ContactPoint(ga.body, gb.body, p, normal, distance=depth))
        if degenerate:
            out.append(cm.ContactPoint(ga.body, gb.body, p, np.sign(u) * Ra[:, j1], distance=depth))
            out.append(cm.ContactPoint(ga.body, gb.body, p, np.sign(w) * Ra[:, j2], distance=depth))
    return out


def generate_contacts(sys: MultibodySystem, geometries: Sequence | None = None,
                      tol: float = TOL.contact_distance) -> list[cm.ContactPoint]:
    """Contacts between every geometry pair within ``tol`` of touching.

    Supported pairs: plane-box (vertices), plane-sphere, and face-aligned
    box-box. Bodies linked by a joint are not tested against each other.
    Each contact is repeated ``sys.contact_duplication`` times.
    """
    geoms = list(sys.geometries if geometries is None else geometries)
    linked = {frozenset((j.body_a, j.body_b)) for j in sys.joints if j.body_b is not None}
    out: list[cm.ContactPoint] = []
    for a, b in itertools.combinations(geoms, 2):
        if isinstance(a, Plane) and isinstance(b, Plane):
            continue
        if isinstance(b, Plane):
            a, b = b, a
        if isinstance(a, Plane):
            out.extend(_plane_contacts(sys, a, b, tol))
        elif isinstance(a, Box) and isinstance(b, Box):
            if a.body != b.body and frozenset((a.body, b.body)) not in linked:
                out.extend(_box_box_contacts(sys, a, b, tol))
        else:
            if a.body == b.body:
                continue
            raise UnsupportedGeometryError(f"{type(a).__name__} vs {type(b).__name__} is not supported")
    k = max(1, int(sys.contact_duplication))
    return [c for c in out for _ in range(k)]


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def _point_row(sys, body: int, point, direction) -> tuple[slice, np.ndarray]:
    r = point - sys.bodies[body].position
    return slice(6 * body, 6 * body + 6), np.r_[direction, np.cross(r, direction)]


def contact_jacobians(sys: MultibodySystem, contacts: Sequence[cm.ContactPoint]):
    m, n = sys.m, len(contacts)
    N, S, T = np.zeros((n, m)), np.zeros((n, m)), np.zeros((n, m))
    for i, c in enumerate(contacts):
        for mat, u in ((N, c.normal), (S, c.s), (T, c.t)):
            sl, row = _point_row(sys, c.body_a, c.position, u)
            mat[i, sl] += row
            if c.body_b is not None:
                sl, row = _point_row(sys, c.body_b, c.position, u)
                mat[i, sl] -= row
    return N, S, T


def joint_jacobian(sys: MultibodySystem) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``d(p_a - p_b)/dt`` for every spherical joint, plus ``Jdot v``."""
    m = sys.m
    J = np.zeros((3 * len(sys.joints), m))
    Jdv = np.zeros(3 * len(sys.joints))
    for k, jt in enumerate(sys.joints):
        rows = slice(3 * k, 3 * k + 3)
        A = sys.bodies[jt.body_a]
        ra = A.rotation() @ np.asarray(jt.anchor_a, float)
        J[rows, 6 * jt.body_a : 6 * jt.body_a + 3] = np.eye(3)
        J[rows, 6 * jt.body_a + 3 : 6 * jt.body_a + 6] = -skew(ra)
        wa = A.angular_velocity
        Jdv[rows] = np.cross(wa, np.cross(wa, ra))
        if jt.body_b is not None:
            B = sys.bodies[jt.body_b]
            rb = B.rotation() @ np.asarray(jt.anchor_b, float)
            J[rows, 6 * jt.body_b : 6 * jt.body_b + 3] = -np.eye(3)
            J[rows, 6 * jt.body_b + 3 : 6 * jt.body_b + 6] = skew(rb)
            wb = B.angular_velocity
            Jdv[rows] -= np.cross(wb, np.cross(wb, rb))
    return J, Jdv


def joint_error(sys: MultibodySystem) -> np.ndarray:
    out = []
    for jt in sys.joints:
        A = sys.bodies[jt.body_a]
        pa = A.position + A.rotation() @ np.asarray(jt.anchor_a, float)
        if jt.body_b is None:
            pb = np.asarray(jt.anchor_b, float)
        else:
            B = sys.bodies[jt.body_b]
            pb = B.position + B.rotation() @ np.asarray(jt.anchor_b, float)
        out.append(pa - pb)
    return np.concatenate(out) if out else np.zeros(0)


def jacobian_bundle(sys: MultibodySystem, contacts: Sequence[cm.ContactPoint]) -> cm.JacobianBundle:
    N, S, T = contact_jacobians(sys, contacts)
    J, Jdv = joint_jacobian(sys)
    return cm.JacobianBundle(N=N, S=S, T=T, J=J, Jdot_v=Jdv, mu_v=sys.mu_v, mu_c=sys.mu_c)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


class StepError(SolverError):
    """Solver failure during a step; ``dump`` holds the offending problem."""

    def __init__(self, message: str, dump: str):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True, eq=False)
class StepResult:
    state: np.ndarray
    model: str
    n_contacts: int
    lcp_size: int
    f_n: np.ndarray
    f_s: np.ndarray
    f_t: np.ndarray
    f_j: np.ndarray
    residuals: dict
    pivots: int = 0
    max_order: int = 0
    wall_time: float = 0.0
    macs: int = 0
    kinetic_energy: float = 0.0
    impact: bool = False


def kinetic_energy(sys: MultibodySystem) -> float:
    v = sys.velocity()
    if v.size == 0:
        return 0.0
    return 0.5 * float(v @ sys.inertia().matvec(v))


def solve_lcp(problem: LcpProblem, solver: str = "ppm", incremental: bool = True) -> LcpSolution:
    if solver == "ppm":
        return solve_lcp_ppm(problem, PpmOptions(incremental=incremental))
    if solver == "lemke":
        return solve_lcp_lemke(problem.to_explicit())
    if solver == "enumerate":
        return solve_lcp_enumerate(problem.to_explicit())
    raise ContractError(f"unknown solver {solver!r}")


def _velocity_residuals(jb: cm.JacobianBundle, active: cm.ActiveRows, v, f_n) -> dict:
    def inf(x):
        return float(np.max(np.abs(x))) if np.size(x) else 0.0

    Nv = jb.N @ v
    return {
        "S_active": inf(jb.S[list(active.S)] @ v),
        "T_active": inf(jb.T[list(active.T)] @ v),
        "J": inf(jb.J @ v),
        "min_Nv": float(Nv.min()) if Nv.size else 0.0,
        "fn_dot_Nv": float(abs(f_n @ Nv)) if Nv.size else 0.0,
    }


def _solve_contact_problem(cp: cm.ContactProblem, solver: str, incremental: bool) -> LcpSolution:
    try:
        return solve_lcp(cp.lcp, solver, incremental)
    except SolverError as exc:
        buf = io.StringIO()
        cm.dump_contact_problem(cp, buf)
        raise StepError(f"{cp.kind} solve failed: {exc}", buf.getvalue()) from exc


def step_noslip(sys: MultibodySystem, dt: float, solver: str = "ppm", incremental: bool = True) -> StepResult:
    """One symplectic Euler step: no-slip impulses, then positions with v+."""
    if not dt > 0:
        raise ContractError("dt must be positive")
    t0 = time.perf_counter()
    with count_ops() as ops:
        contacts = generate_contacts(sys)
        M, v, f = sys.inertia(), sys.velocity(), sys.forces()
        jb = jacobian_bundle(sys, contacts)
        active = cm.find_indices(M, jb.J, jb.S, jb.T)
        cp = cm.build_noslip_mlcp(M, v, f, jb, dt, active)
        sol = _solve_contact_problem(cp, solver, incremental)
        out = cp.unpack(sol.z)
    wall = time.perf_counter() - t0
    sys.set_velocity(out.v)
    sys.integrate_positions(dt, out.v)
    sys.time += dt
    return StepResult(
        state=sys.state(), model=cm.NOSLIP, n_contacts=len(contacts), lcp_size=cp.lcp.n,
        f_n=out.f_n, f_s=out.f_s, f_t=out.f_t, f_j=out.f_j,
        residuals=_velocity_residuals(jb, active, out.v, out.f_n),
        pivots=sol.pivots, max_order=sol.max_order, wall_time=wall, macs=ops.macs,
        kinetic_energy=kinetic_energy(sys),
    )


def step_pyramid(sys: MultibodySystem, dt: float, solver: str = "lemke") -> StepResult:
    """Velocity-level step with the friction-pyramid LCP (Coulomb baseline)."""
    if not dt > 0:
        raise ContractError("dt must be positive")
    t0 = time.perf_counter()
    with count_ops() as ops:
        contacts = generate_contacts(sys)
        M, v, f = sys.inertia(), sys.velocity(), sys.forces()
        jb = jacobian_bundle(sys, contacts)
        lcp, pmap = cm.build_pyramid_baseline_lcp(M, v, f, jb, dt)
        try:
            if solver == "enumerate":
                sol = solve_lcp_enumerate(lcp)
            elif solver == "lemke":
                sol = solve_lcp_lemke(lcp)
            else:
                raise ContractError("the pyramid baseline is not PSD; use lemke or enumerate")
        except SolverError as exc:
            buf = io.StringIO()
            dump_problem(lcp, buf, meta={"provenance": cm.PYRAMID})
            raise StepError(f"pyramid solve failed: {exc}", buf.getvalue()) from exc
        v_new = pmap.velocity(sol.z)
    wall = time.perf_counter() - t0
    f_n, _, _ = pmap.split(sol.z)
    ft = pmap.tangential(sol.z)
    sys.set_velocity(v_new)
    sys.integrate_positions(dt, v_new)
    sys.time += dt
    Nv = jb.N @ v_new
    return StepResult(
        state=sys.state(), model=cm.PYRAMID, n_contacts=len(contacts), lcp_size=lcp.n,
        f_n=f_n, f_s=ft[:, 0], f_t=ft[:, 1], f_j=np.zeros(0),
        residuals={"min_Nv": float(Nv.min()) if Nv.size else 0.0,
                   "fn_dot_Nv": float(abs(f_n @ Nv)) if Nv.size else 0.0,
                   "J": float(np.max(np.abs(jb.J @ v_new))) if jb.J.size else 0.0},
        pivots=sol.pivots, max_order=lcp.n, wall_time=wall, macs=ops.macs,
        kinetic_energy=kinetic_energy(sys),
    )


def resolve_impact(sys: MultibodySystem, variant: str = "frictionless", solver: str = "ppm") -> StepResult:
    """Inelastic velocity-level impact resolution (``dt = 0``)."""
    t0 = time.perf_counter()
    contacts = generate_contacts(sys)
    M, v = sys.inertia(), sys.velocity()
    jb = jacobian_bundle(sys, contacts)
    approach = jb.N @ v
    if not approach.size or approach.min() >= -1e-9:
        z = np.zeros(len(contacts))
        return StepResult(
            state=sys.state(), model=variant, n_contacts=len(contacts), lcp_size=len(contacts),
            f_n=z, f_s=np.zeros(0), f_t=np.zeros(0), f_j=np.zeros(0),
            residuals={"min_Nv": float(approach.min()) if approach.size else 0.0},
            kinetic_energy=kinetic_energy(sys),
        )
    f0 = np.zeros(sys.m)
    if variant == "no-slip":
        cp = cm.build_noslip_mlcp(M, v, f0, jb, 0.0)
    elif variant == "frictionless":
        cp = cm.build_frictionless_mlcp(M, v, f0, jb, 0.0)
    else:
        raise ContractError(f"unknown impact variant {variant!r}")
    sol = _solve_contact_problem(cp, solver, True)
    out = cp.unpack(sol.z)
    sys.set_velocity(out.v)
    return StepResult(
        state=sys.state(), model=variant, n_contacts=len(contacts), lcp_size=cp.lcp.n,
        f_n=out.f_n, f_s=out.f_s, f_t=out.f_t, f_j=out.f_j,
        residuals=_velocity_residuals(jb, cp.active, out.v, out.f_n),
        pivots=sol.pivots, max_order=sol.max_order, wall_time=time.perf_counter() - t0,
        kinetic_energy=kinetic_energy(sys), impact=True,
    )


def step_viscous(sys: MultibodySystem, dt: float, solver: str = "ppm") -> StepResult:
    """Classical RK4 where every stage solves the acceleration-level MLCP.

    Contacts, Jacobians and inertia are taken at the step start and held
    fixed across the four stages.
    """
    if not dt > 0:
        raise ContractError("dt must be positive")
    t0 = time.perf_counter()
    pivots = max_order = 0
    with count_ops() as ops:
        contacts = generate_contacts(sys)
        M = sys.inertia()
        jb0 = jacobian_bundle(sys, contacts)
        v0 = sys.velocity()
        first = None

        def accel(v):
            nonlocal pivots, max_order, first
            jb = cm.JacobianBundle(N=jb0.N, S=jb0.S, T=jb0.T, J=jb0.J,
                                   Jdot_v=_joint_drift(sys, v), mu_v=jb0.mu_v)
            cp = cm.build_viscous_mlcp(M, v, sys.forces(v), jb)
            sol = _solve_contact_problem(cp, solver, True)
            pivots += sol.pivots
            max_order = max(max_order, sol.max_order)
            out = cp.unpack(sol.z)
            if first is None:
                first = (out, cp, sol)
            return out.v

        k1 = accel(v0)
        v1 = v0 + 0.5 * dt * k1
        k2 = accel(v1)
        v2 = v0 + 0.5 * dt * k2
        k3 = accel(v2)
        v3 = v0 + dt * k3
        k4 = accel(v3)
    wall = time.perf_counter() - t0
    v_new = v0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    v_avg = (v0 + 2 * v1 + 2 * v2 + v3) / 6.0
    sys.integrate_positions(dt, v_avg)
    sys.set_velocity(v_new)
    sys.time += dt
    out, cp, _ = first
    gamma = jb0.N @ out.v + jb0.Ndot_v
    return StepResult(
        state=sys.state(), model=cm.VISCOUS, n_contacts=len(contacts), lcp_size=cp.lcp.n,
        f_n=out.f_n, f_s=np.zeros(0), f_t=np.zeros(0), f_j=out.f_j,
        residuals={"min_gamma": float(gamma.min()) if gamma.size else 0.0,
                   "fn_dot_gamma": float(abs(out.f_n @ gamma)) if gamma.size else 0.0},
        pivots=pivots, max_order=max_order, wall_time=wall, macs=ops.macs,
        kinetic_energy=kinetic_energy(sys),
    )


def _joint_drift(sys: MultibodySystem, v) -> np.ndarray:
    saved = sys.velocity()
    sys.set_velocity(v)
    try:
        return joint_jacobian(sys)[1]
    finally:
        sys.set_velocity(saved)
