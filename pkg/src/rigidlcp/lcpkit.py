"""Linear complementarity problems and their solvers.

An LCP ``(q, Q)`` asks for ``z, w >= 0`` with ``w = Q z + q`` and ``z.w = 0``.
Contact problems produce ``Q = G H G^T`` with ``H`` symmetric PSD and ``q`` in
the range of ``G``; :class:`LcpProblem` can hold that product implicitly so the
pivoting solver never forms the n x n matrix.

Solvers
-------
solve_lcp_ppm
    Principal pivoting on the implicit form. Only the principal block over the
    current free set is assembled, and that block never exceeds the rank of
    ``G H G^T``.
solve_lcp_lemke
    Complementary pivoting on the explicit matrix, retried with a growing
    diagonal shift when it ray-terminates.
solve_lcp_enumerate
    Exhaustive search over supports. Only for tests (n <= 16).
"""

from __future__ import annotations

import io
import itertools
import warnings
from dataclasses import dataclass
from typing import Iterable, Protocol, TextIO

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .matrixcore import (
    TOL,
    CholeskyFactor,
    ContractError,
    Singular,
    SingularMatrixError,
    Tolerances,
    as_matrix,
    as_vector,
    cholesky_factor,
    mm,
    solve_spd,
    tally,
)


class SolverError(RuntimeError):
    """A solver could not produce a valid complementarity solution."""


class PivotLimitError(SolverError):
    def __init__(self, message: str, best: LcpSolution):
        super().__init__(message)
        self.best = best


class UnsolvableError(SolverError):
    pass


class InnerOperator(Protocol):
    """Applies the inverse of the inner matrix (``M`` or a constrained saddle).

    ``solve`` accepts an ``(dim,)`` vector or a ``(dim, k)`` matrix.
    """

    dim: int

    def solve(self, b: np.ndarray) -> np.ndarray: ...


class DenseInverse:
    """Inner operator backed by a Cholesky factor of a dense SPD matrix."""

    def __init__(self, H: np.ndarray, tol: Tolerances = TOL):
        F = cholesky_factor(H, tol)
        if isinstance(F, Singular):
            raise SingularMatrixError(F.index, F.value, "inner matrix")
        self.factor = F
        self.dim = F.order

    def solve(self, b):
        return solve_spd(self.factor, b)


# ---------------------------------------------------------------------------
# problem and solution types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LcpProblem:
    """LCP in explicit form (``Q`` given) or implicit form (``G``, inner, ``r``).

    In implicit form ``Q = G H G^T`` and ``q = G r + offset`` where ``H`` is the
    operator applied by ``inner.solve``.
    """

    q: np.ndarray
    Q: np.ndarray | None = None
    G: np.ndarray | None = None
    inner: InnerOperator | None = None
    r: np.ndarray | None = None
    offset: np.ndarray | None = None

    @classmethod
    def explicit(cls, Q, q) -> LcpProblem:
        q = as_vector(q, "q")
        Q = as_matrix(Q, "Q", cols=q.size)
        if Q.shape[0] != q.size:
            raise ContractError(f"Q is {Q.shape}, q has length {q.size}")
        return cls(q=q, Q=Q)

    @classmethod
    def implicit(cls, G, inner: InnerOperator, r, offset=None) -> LcpProblem:
        G = as_matrix(G, "G", cols=inner.dim)
        r = as_vector(r, "r", inner.dim)
        q = mm(G, r)
        if offset is not None:
            offset = as_vector(offset, "offset", G.shape[0])
            q = q + offset
        return cls(q=q, G=G, inner=inner, r=r, offset=offset)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def is_implicit(self) -> bool:
        return self.Q is None

    def matvec(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.Q is not None:
            return mm(self.Q, z)
        return mm(self.G, self.inner.solve(mm(self.G.T, z)))

    def matrix(self) -> np.ndarray:
        """The LCP matrix; materializes ``G H G^T`` for implicit problems."""
        if self.Q is not None:
            return self.Q
        HG = self.inner.solve(np.ascontiguousarray(self.G.T))
        Q = mm(self.G, HG)
        return 0.5 * (Q + Q.T)

    def to_explicit(self) -> LcpProblem:
        return LcpProblem(q=self.q, Q=self.matrix())


@dataclass(frozen=True)
class IndexPartition:
    """Split of ``0..n-1``.

    ``free`` holds the indices whose ``z`` is solved for (``w = 0`` there);
    ``basic`` holds the rest, where ``z = 0`` and ``w`` is computed.
    """

    basic: tuple[int, ...]
    free: tuple[int, ...]

    def __post_init__(self):
        both = set(self.basic) | set(self.free)
        if len(both) != len(self.basic) + len(self.free):
            raise ContractError("basic and free index sets overlap")


@dataclass(frozen=True, eq=False)
class LcpSolution:
    z: np.ndarray
    w: np.ndarray
    basis: IndexPartition
    pivots: int = 0
    max_order: int = 0
    regularization: float = 0.0
    method: str = ""

    def residuals(self, problem: LcpProblem) -> dict[str, float]:
        z, w = self.z, self.w
        return {
            "min_z": float(z.min()) if z.size else 0.0,
            "min_w": float(w.min()) if w.size else 0.0,
            "complementarity": float(abs(z @ w)),
            "equation": float(np.max(np.abs(problem.matvec(z) + problem.q - w)))
            if z.size
            else 0.0,
        }


def check_solution(problem: LcpProblem, sol: LcpSolution, scale: float = 1.0) -> bool:
    """True iff ``sol`` meets the three complementarity invariants."""
    res = sol.residuals(problem)
    qn = float(np.max(np.abs(problem.q))) if problem.n else 0.0
    comp_tol = 1e-8 * (1.0 + np.linalg.norm(sol.z) * np.linalg.norm(sol.w))
    return (
        res["min_z"] >= -1e-9 * scale
        and res["min_w"] >= -1e-9 * scale
        and res["complementarity"] <= comp_tol * scale
        and res["equation"] <= 1e-8 * (1.0 + qn) * scale
    )


@dataclass(frozen=True)
class MlcpProblem:
    """``A x + C y + g = 0``, ``0 <= y  _|_  D x + B y + h >= 0``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        nx, ny = np.shape(self.g)[0], np.shape(self.h)[0]
        object.__setattr__(self, "g", as_vector(self.g, "g", nx))
        object.__setattr__(self, "h", as_vector(self.h, "h", ny))
        for name, shape in (("A", (nx, nx)), ("B", (ny, ny)), ("C", (nx, ny)), ("D", (ny, nx))):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, as_matrix(arr, name))

    @property
    def nx(self) -> int:
        return self.g.size

    @property
    def ny(self) -> int:
        return self.h.size


class MlcpBackSubstitution:
    """Recovers ``x = -A^{-1}(C y + g)`` from an LCP solution ``y``."""

    def __init__(self, lu, C: np.ndarray, g: np.ndarray):
        self._lu = lu
        self._C = C
        self._g = g

    def __call__(self, y) -> np.ndarray:
        y = as_vector(y, "y", self._C.shape[1])
        return -lu_solve(self._lu, self._C @ y + self._g)


def _checked_lu(A: np.ndarray, tol: Tolerances):
    if A.shape[0] == 0:
        return (np.zeros((0, 0)), np.zeros(0, dtype=np.int32))
    with warnings.catch_warnings():
        # singularity is reported below with the offending pivot
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
    diag = np.abs(np.diag(lu))
    bad = np.flatnonzero(diag <= tol.lu_pivot * max(diag.max(), 1e-300))
    if bad.size:
        raise SingularMatrixError(int(bad[0]), float(np.diag(lu)[bad[0]]), "MLCP block A")
    tally(A.shape[0] ** 3 // 3)
    return lu, piv


def mlcp_reduce(p: MlcpProblem, tol: Tolerances = TOL) -> tuple[LcpProblem, MlcpBackSubstitution]:
    """Eliminate the free variables: ``F = B - D A^-1 C``, ``e = h - D A^-1 g``.

    Raises :class:`SingularMatrixError` (naming the failed pivot) when ``A``
    is singular; for contact problems that means row selection was skipped.
    """
    lu = _checked_lu(p.A, tol)
    AiC = lu_solve(lu, p.C) if p.nx else np.zeros((0, p.ny))
    Aig = lu_solve(lu, p.g) if p.nx else np.zeros(0)
    F = p.B - mm(p.D, AiC)
    e = p.h - mm(p.D, Aig)
    return LcpProblem.explicit(F, e), MlcpBackSubstitution(lu, p.C, p.g)


# ---------------------------------------------------------------------------
# modified principal pivoting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PpmOptions:
    incremental: bool = False
    max_pivots: int | None = None  # default 50 + 10 n
    tol: Tolerances = TOL


def _argmin_lowest(values: np.ndarray, tie: float) -> int:
    """Index of the minimum; among near-ties the lowest index wins."""
    lo = values.min()
    return int(np.flatnonzero(values <= lo + tie)[0])


class _SubsystemOps:
    """Products the pivoting loop needs, for explicit and implicit problems."""

    def __init__(self, problem: LcpProblem):
        self.p = problem
        self.HG: dict[int, np.ndarray] = {}  # cache of H g_i for implicit rows

    def limit(self) -> int:
        if self.p.is_implicit:
            return min(self.p.n, self.p.inner.dim)
        return self.p.n

    def _h_row(self, i: int) -> np.ndarray:
        hg = self.HG.get(i)
        if hg is None:
            hg = self.p.inner.solve(self.p.G[i])
            self.HG[i] = hg
        return hg

    def block(self, free: list[int]) -> np.ndarray:
        if not self.p.is_implicit:
            return self.p.Q[np.ix_(free, free)]
        Gf = self.p.G[free]
        HGt = np.column_stack([self._h_row(i) for i in free])
        return mm(Gf, HGt)

    def column(self, free: list[int], i: int) -> np.ndarray:
        """``Q[free + [i], i]`` (the row appended to the factor)."""
        idx = free + [i]
        if not self.p.is_implicit:
            return self.p.Q[idx, i]
        return mm(self.p.G[idx], self._h_row(i))

    def w_full(self, free: list[int], zf: np.ndarray) -> np.ndarray:
        p = self.p
        if not p.is_implicit:
            return mm(p.Q[:, free], zf) + p.q
        a = p.inner.solve(mm(p.G[free].T, zf))
        return mm(p.G, a) + p.q


def _factor(block: np.ndarray, tol: Tolerances) -> CholeskyFactor:
    F = cholesky_factor(0.5 * (block + block.T), tol)
    if isinstance(F, Singular):
        raise SolverError(
            f"principal block of order {block.shape[0]} is singular at pivot {F.index}; "
            "input is degenerate or not PSD"
        )
    return F


def solve_lcp_ppm(problem: LcpProblem, opts: PpmOptions | None = None) -> LcpSolution:
    """Modified principal pivoting for ``Q = G H G^T`` (or explicit PSD ``Q``).

    Starting from the most negative ``q_i``, indices move into the free set
    while their ``w`` is negative and out of it while their ``z`` is negative;
    each iteration may move one index each way. Only the principal block
    over the free set is factored. ``max_order`` records the largest block
    assembled; it can never exceed ``min(n, inner.dim)``.
    """
    opts = opts or PpmOptions()
    tol = opts.tol
    n = problem.n
    q = problem.q
    neg = -tol.negativity * (1.0 + (np.max(np.abs(q)) if n else 0.0))
    max_pivots = opts.max_pivots if opts.max_pivots is not None else 50 + 10 * n

    if n == 0 or q.min() >= neg:
        z = np.zeros(n)
        w = np.maximum(q, 0.0)
        return LcpSolution(z, w, IndexPartition(tuple(range(n)), ()), method="ppm")

    ops = _SubsystemOps(problem)
    limit = ops.limit()
    i = _argmin_lowest(q, tol.tie)
    free = [i]
    in_free = np.zeros(n, dtype=bool)
    in_free[i] = True
    pivots = 1
    max_order = 1
    factor = _factor(ops.block(free), tol) if opts.incremental else None

    def snapshot(zf, wfull):
        z = np.zeros(n)
        z[free] = np.maximum(zf, 0.0)
        w = np.where(in_free, 0.0, np.maximum(wfull, 0.0))
        basic = tuple(int(k) for k in np.flatnonzero(~in_free))
        return LcpSolution(
            z, w, IndexPartition(basic, tuple(free)), pivots, max_order, method="ppm"
        )

    def add(k):
        nonlocal factor, max_order
        if opts.incremental:
            bad = factor.append(ops.column(free, k))
            if bad is not None:
                raise SolverError(f"adding index {k} makes the principal block singular")
        free.append(k)
        in_free[k] = True
        max_order = max(max_order, len(free))
        if max_order > limit:
            raise SolverError(f"assembled order {max_order} exceeds bound {limit}")

    def drop(pos):
        k = free.pop(pos)
        in_free[k] = False
        if opts.incremental:
            factor.remove(pos)

    while True:
        if opts.incremental:
            zf = -factor.solve(q[free])
        else:
            zf = -_factor(ops.block(free), tol).solve(q[free])
        wfull = ops.w_full(free, zf)
        wb = np.where(in_free, np.inf, wfull)
        i = _argmin_lowest(wb, tol.tie) if (~in_free).any() else -1
        if i < 0 or wb[i] >= neg:
            j = _argmin_lowest(zf, tol.tie)
            if zf[j] < neg:
                if pivots >= max_pivots:
                    raise PivotLimitError(f"pivot limit {max_pivots} reached", snapshot(zf, wfull))
                drop(j)
                pivots += 1
                continue
            return snapshot(zf, wfull)
        if pivots >= max_pivots:
            raise PivotLimitError(f"pivot limit {max_pivots} reached", snapshot(zf, wfull))
        old_free = list(free)
        add(i)
        pivots += 1
        j = _argmin_lowest(zf, tol.tie)
        if zf[j] < neg:
            drop(free.index(old_free[j]))
            pivots += 1


# ---------------------------------------------------------------------------
# Lemke with diagonal regularization
# ---------------------------------------------------------------------------

LEMKE_SCHEDULE = (0.0,) + tuple(1e-10 * 2.0**k for k in range(21))


def _lemke(Q: np.ndarray, q: np.ndarray, max_iter: int, tol: Tolerances):
    """One Lemke run. Returns (z, pivots) or None on ray termination."""
    n = q.size
    if q.min() >= 0:
        return np.zeros(n), 0
    z0 = 2 * n
    basis = list(range(n))  # w_i is variable i, z_i is n + i, z0 is 2n
    Binv = np.eye(n)
    x = q.copy()

    def column(var):
        if var < n:
            col = np.zeros(n)
            col[var] = 1.0
            return col
        if var == z0:
            return -np.ones(n)
        return -Q[:, var - n]

    r = _argmin_lowest(q, 0.0)
    entering = z0
    pivots = 0
    while True:
        d = Binv @ column(entering)
        tally(n * n)
        if pivots > 0:
            ok = d > 1e-12 * max(1.0, np.max(np.abs(d)))
            if not ok.any():
                return None
            ratios = np.full(n, np.inf)
            ratios[ok] = x[ok] / d[ok]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + 1e-12 * (1.0 + abs(best)))
            if len(ties) > 1:
                zrow = [t for t in ties if basis[t] == z0]
                if zrow:
                    r = zrow[0]
                else:
                    # lexicographic rule on rows of Binv / d
                    cand = list(ties)
                    for c in range(n):
                        vals = Binv[cand, c] / d[cand]
                        lo = vals.min()
                        cand = [t for t, v in zip(cand, vals) if v <= lo + 1e-14]
                        if len(cand) == 1:
                            break
                    r = cand[0]
            else:
                r = int(ties[0])
        piv = d[r]
        Binv[r] /= piv
        x[r] /= piv
        others = np.arange(n) != r
        Binv[others] -= np.outer(d[others], Binv[r])
        x[others] -= d[others] * x[r]
        tally(n * n)
        leaving = basis[r]
        basis[r] = entering
        pivots += 1
        if leaving == z0:
            break
        if pivots > max_iter:
            return None
        entering = leaving + n if leaving < n else leaving - n
    # polish the final basic solution with a fresh solve
    Bm = np.column_stack([column(v) for v in basis])
    try:
        xb = np.linalg.solve(Bm, q)
    except np.linalg.LinAlgError:
        xb = x
    z = np.zeros(n)
    for row, var in enumerate(basis):
        if n <= var < 2 * n:
            z[var - n] = xb[row]
    return z, pivots


def solve_lcp_lemke(
    problem: LcpProblem,
    schedule: Iterable[float] = LEMKE_SCHEDULE,
    tol: Tolerances = TOL,
    max_iter: int | None = None,
) -> LcpSolution:
    """Lemke's method; on ray termination retry with ``Q + eps I``.

    The first ``eps`` in ``schedule`` that yields a valid solution wins and is
    reported as ``regularization``.
    """
    Q = problem.matrix()
    q = problem.q
    n = q.size
    max_iter = max_iter if max_iter is not None else max(1000, 50 * n)
    for eps in schedule:
        Qe = Q + eps * np.eye(n) if eps else Q
        out = _lemke(Qe, q, max_iter, tol)
        if out is None:
            continue
        z, pivots = out
        z = np.maximum(z, 0.0)
        w = np.maximum(Qe @ z + q, 0.0)
        sol = LcpSolution(
            z,
            w,
            IndexPartition(tuple(np.flatnonzero(z <= 0)), tuple(np.flatnonzero(z > 0))),
            pivots=pivots,
            regularization=eps,
            method="lemke",
        )
        if check_solution(LcpProblem(q=q, Q=Qe), sol):
            return sol
    raise UnsolvableError("Lemke ray-terminated for every regularization level")


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------


def solve_lcp_enumerate(problem: LcpProblem, tol: Tolerances = TOL) -> LcpSolution:
    """Try every support set, smallest first and lexicographic within a size.

    For support ``s`` it solves ``Q_ss z_s = -q_s`` and accepts the first
    candidate with ``z >= 0`` and ``w >= 0``. Independent of the pivoting code.
    """
    Q = problem.matrix()
    q = problem.q
    n = q.size
    if n > 16:
        raise ContractError(f"enumeration is limited to n <= 16, got {n}")
    feas = tol.negativity * (1.0 + (np.max(np.abs(q)) if n else 0.0))
    tried = 0
    for k in range(n + 1):
        for support in itertools.combinations(range(n), k):
            tried += 1
            s = list(support)
            z = np.zeros(n)
            if k:
                Qs = Q[np.ix_(s, s)]
                try:
                    zs = np.linalg.solve(Qs, -q[s])
                except np.linalg.LinAlgError:
                    continue
                if np.max(np.abs(Qs @ zs + q[s])) > feas or zs.min() < -feas:
                    continue
                z[s] = zs
            w = Q @ z + q
            if k < n and np.delete(w, s).min() < -feas:
                continue
            z = np.maximum(z, 0.0)
            w[s] = 0.0
            w = np.maximum(w, 0.0)
            basic = tuple(i for i in range(n) if i not in support)
            return LcpSolution(z, w, IndexPartition(basic, support), pivots=tried, method="enumerate")
    raise UnsolvableError("no support set yields a feasible complementary solution")


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------
#
#   # key: value            optional comment/metadata lines
#   lcp <n>
#   <q>                     one line
#   <Q>                     n lines, row-major
#
#   mlcp <nx> <ny>
#   <A> <C> <D> <B>         row-major blocks, one matrix row per line
#   <g>
#   <h>


def _fmt_row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dump_problem(problem: LcpProblem | MlcpProblem, out: TextIO, meta: dict | None = None) -> None:
    for key, value in (meta or {}).items():
        out.write(f"# {key}: {value}\n")
    if isinstance(problem, MlcpProblem):
        out.write(f"mlcp {problem.nx} {problem.ny}\n")
        for block in (problem.A, problem.C, problem.D, problem.B):
            for row in block:
                out.write(_fmt_row(row) + "\n")
        out.write(_fmt_row(problem.g) + "\n")
        out.write(_fmt_row(problem.h) + "\n")
        return
    out.write(f"lcp {problem.n}\n")
    out.write(_fmt_row(problem.q) + "\n")
    for row in problem.matrix():
        out.write(_fmt_row(row) + "\n")


def dumps_problem(problem, meta: dict | None = None) -> str:
    buf = io.StringIO()
    dump_problem(problem, buf, meta)
    return buf.getvalue()


def load_problem(src: TextIO) -> tuple[LcpProblem | MlcpProblem, dict[str, str]]:
    meta: dict[str, str] = {}
    header = None
    tokens: list[str] = []
    for line in src:
        line = line.strip()
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
            continue
        if not line:
            continue
        if header is None:
            header = line.split()
        else:
            tokens.extend(line.split())
    if header is None:
        raise ContractError("problem file has no header line")
    vals = np.array([float(t) for t in tokens])
    kind = header[0]
    if kind == "lcp":
        n = int(header[1])
        if vals.size != n + n * n:
            raise ContractError(f"lcp {n} expects {n + n * n} numbers, found {vals.size}")
        return LcpProblem.explicit(vals[n:].reshape(n, n), vals[:n]), meta
    if kind == "mlcp":
        nx, ny = int(header[1]), int(header[2])
        sizes = [nx * nx, nx * ny, ny * nx, ny * ny, nx, ny]
        if vals.size != sum(sizes):
            raise ContractError(f"mlcp {nx} {ny} expects {sum(sizes)} numbers, found {vals.size}")
        parts = np.split(vals, np.cumsum(sizes)[:-1])
        A, C, D, B, g, h = parts
        return (
            MlcpProblem(
                A=A.reshape(nx, nx), B=B.reshape(ny, ny), C=C.reshape(nx, ny), D=D.reshape(ny, nx), g=g, h=h
            ),
            meta,
        )
    raise ContractError(f"unknown problem kind {kind!r}")


def loads_problem(text: str):
    return load_problem(io.StringIO(text))

