"""Dense linear algebra used by the contact solvers.

Matrices are plain ``numpy`` arrays. This module adds what the solvers need
on top of numpy: a Cholesky factor that grows and shrinks one row/column at a
time, a block-diagonal inertia operator, and a multiply-accumulate counter so
complexity claims can be checked without wall-clock timing.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import solve_triangular


@dataclass(frozen=True)
class Tolerances:
    """Every numeric threshold used by the package, in one place."""

    chol_pivot: float = 1e-10  # relative to trace/order
    symmetry: float = 1e-10
    block_symmetry: float = 1e-12
    negativity: float = 1e-9  # scaled by 1 + ||q||_inf
    tie: float = 1e-12
    lu_pivot: float = 1e-13  # relative to max |U_ii|
    unit_vector: float = 1e-10
    contact_distance: float = 1e-6


TOL = Tolerances()


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A factorization hit a non-positive (or zero) pivot."""

    def __init__(self, index: int, value: float = float("nan"), what: str = "matrix"):
        self.index = index
        self.value = value
        super().__init__(f"{what} is singular: pivot {index} = {value:.3e}")


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation
# ---------------------------------------------------------------------------


class OpCounter:
    """Accumulates multiply-accumulate operations reported via :func:`tally`."""

    def __init__(self) -> None:
        self.macs = 0

    def __repr__(self) -> str:
        return f"OpCounter(macs={self.macs})"


_COUNTERS: contextvars.ContextVar[tuple[OpCounter, ...]] = contextvars.ContextVar(
    "rigidlcp_op_counters", default=()
)


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count MACs performed inside the ``with`` block. Nesting is allowed."""
    counter = OpCounter()
    token = _COUNTERS.set(_COUNTERS.get() + (counter,))
    try:
        yield counter
    finally:
        _COUNTERS.reset(token)


def tally(macs: int) -> None:
    for counter in _COUNTERS.get():
        counter.macs += int(macs)


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Counted matrix (or matrix-vector) product."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = a.shape[-1]
    rows = a.shape[0] if a.ndim == 2 else 1
    cols = b.shape[1] if b.ndim == 2 else 1
    tally(rows * k * cols)
    return a @ b


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def as_matrix(a, name: str = "matrix", cols: int | None = None) -> np.ndarray:
    """Return ``a`` as a finite 2-D float array (empty inputs allowed)."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, cols if cols is not None else 0)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ContractError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def as_vector(b, name: str = "vector", size: int | None = None) -> np.ndarray:
    arr = np.asarray(b, dtype=float).reshape(-1)
    if size is not None and arr.size != size:
        raise ContractError(f"{name} must have length {size}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def check_symmetric(a: np.ndarray, rel: float, name: str = "matrix") -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"{name} must be square, got shape {a.shape}")
    scale = 1.0 + (np.max(np.abs(a)) if a.size else 0.0)
    if a.size and np.max(np.abs(a - a.T)) > rel * scale:
        raise ContractError(f"{name} is not symmetric")


# ---------------------------------------------------------------------------
# Cholesky factor with append / remove updates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Singular:
    """Returned instead of a factor when a pivot is not positive enough.

    ``index`` is the 0-based row/column at which positivity failed.
    """

    index: int
    value: float

    def __bool__(self) -> bool:
        return False


class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T == A``, updatable in place.

    Storage is a square buffer that doubles when full, so appends do not
    reallocate every time. ``order`` is the current size of ``A``.
    """

    def __init__(self, L: np.ndarray | None = None, tol: Tolerances = TOL):
        self.tol = tol
        if L is None:
            L = np.zeros((0, 0))
        n = L.shape[0]
        self._buf = np.zeros((max(4, n), max(4, n)))
        self._buf[:n, :n] = L
        self.order = n
        self.valid = True
        self._trace = float(np.sum(L * L))

    @property
    def L(self) -> np.ndarray:
        return self._buf[: self.order, : self.order]

    def copy(self) -> CholeskyFactor:
        out = CholeskyFactor(self.L.copy(), self.tol)
        out.valid = self.valid
        return out

    def matrix(self) -> np.ndarray:
        """Reassemble ``A = L L^T`` (for tests and diagnostics)."""
        return self.L @ self.L.T

    def _grow(self) -> None:
        n = self._buf.shape[0]
        buf = np.zeros((2 * n, 2 * n))
        buf[:n, :n] = self._buf
        self._buf = buf

    def append(self, new_row) -> Singular | None:
        """Extend ``A`` by one row/column; ``new_row`` has length ``order + 1``.

        Returns ``None`` on success, or a :class:`Singular` and leaves the
        factor untouched. Costs O(order^2).
        """
        k = self.order
        row = as_vector(new_row, "new_row", k + 1)
        if k:
            l = solve_triangular(self.L, row[:k], lower=True, check_finite=False)
            tally(k * k // 2 + k)
            d2 = row[k] - l @ l
        else:
            l = np.zeros(0)
            d2 = row[0]
        trace = self._trace + float(row[k])
        # pivot rule: accept iff d2 > rel * trace/order of the extended matrix
        thresh = self.tol.chol_pivot * max(trace, 0.0) / (k + 1)
        if not d2 > thresh or not np.isfinite(d2):
            return Singular(k, float(d2))
        if k + 1 > self._buf.shape[0]:
            self._grow()
        self._buf[k, :k] = l
        self._buf[k, k] = np.sqrt(d2)
        self._buf[:k, k] = 0.0
        self.order = k + 1
        self._trace = trace
        return None

    def remove(self, index: int) -> None:
        """Delete row/column ``index`` of ``A`` with an O(order^2) update."""
        n = self.order
        if not 0 <= index < n:
            raise ContractError(f"remove index {index} out of range for order {n}")
        L = self._buf
        x = L[index + 1 : n, index].copy()
        # shift the trailing block up/left by one, then absorb x x^T into it
        L[index : n - 1, :index] = L[index + 1 : n, :index]
        L[index : n - 1, index : n - 1] = L[index + 1 : n, index + 1 : n]
        L[n - 1, :n] = 0.0
        L[:n, n - 1] = 0.0
        _chol_rank1_update(L, index, n - 1, x)
        tally((n - index) ** 2)
        self.order = n - 1
        self._trace = float(np.sum(self.L * self.L))

    def solve(self, b) -> np.ndarray:
        return solve_spd(self, b)


def _chol_rank1_update(L: np.ndarray, start: int, stop: int, x: np.ndarray) -> None:
    """In place: ``L[s:e, s:e]`` becomes the factor of ``L L^T + x x^T``."""
    x = x.copy()
    for j, k in enumerate(range(start, stop)):
        lkk = L[k, k]
        r = np.hypot(lkk, x[j])
        c = r / lkk
        s = x[j] / lkk
        L[k, k] = r
        if k + 1 < stop:
            col = L[k + 1 : stop, k]
            col += s * x[j + 1 :]
            col /= c
            x[j + 1 :] = c * x[j + 1 :] - s * col


def cholesky_factor(A, tol: Tolerances = TOL) -> CholeskyFactor | Singular:
    """Factor a symmetric matrix, or report the first failing pivot.

    Non-positive-definite input is not an error: callers such as row
    selection consume the :class:`Singular` result.
    """
    A = as_matrix(A, "A")
    check_symmetric(A, tol.symmetry, "A")
    n = A.shape[0]
    trace = float(np.trace(A)) if n else 0.0
    thresh = tol.chol_pivot * max(trace, 0.0) / max(n, 1)
    L = np.zeros((n, n))
    for j in range(n):
        d2 = A[j, j] - L[j, :j] @ L[j, :j]
        if not d2 > thresh:
            return Singular(j, float(d2))
        L[j, j] = np.sqrt(d2)
        if j + 1 < n:
            L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    tally(n**3 // 3)
    return CholeskyFactor(L, tol)


def factor_update_append(F: CholeskyFactor, new_row) -> CholeskyFactor | Singular:
    """Functional form of :meth:`CholeskyFactor.append`; ``F`` is not modified."""
    out = F.copy()
    bad = out.append(new_row)
    return bad if bad is not None else out


def solve_spd(F: CholeskyFactor, b) -> np.ndarray:
    """Solve ``A x = b`` given ``A = L L^T``; ``b`` may be a vector or matrix."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.order:
        raise ContractError(f"rhs has {b.shape[0]} rows, factor has order {F.order}")
    if F.order == 0:
        return b.copy()
    y = solve_triangular(F.L, b, lower=True, check_finite=False)
    x = solve_triangular(F.L, y, lower=True, trans="T", check_finite=False)
    tally(F.order * F.order * (b.shape[1] if b.ndim == 2 else 1))
    return x


# ---------------------------------------------------------------------------
# block-diagonal inertia
# ---------------------------------------------------------------------------


class BlockDiagInertia:
    """Block-diagonal SPD generalized inertia with per-block factors.

    ``solve`` applies ``M^{-1}``; it also serves as the inner operator of the
    pivoting solver, which only ever needs products with an inverse.
    """

    def __init__(self, blocks: Sequence[np.ndarray], tol: Tolerances = TOL):
        self.blocks: list[np.ndarray] = []
        self._chol: list[np.ndarray] = []
        offsets = [0]
        for i, blk in enumerate(blocks):
            blk = as_matrix(blk, f"block {i}")
            check_symmetric(blk, tol.block_symmetry, f"block {i}")
            try:
                c = np.linalg.cholesky(blk)
            except np.linalg.LinAlgError:
                raise ContractError(f"inertia block {i} is not positive definite") from None
            self.blocks.append(blk)
            self._chol.append(c)
            offsets.append(offsets[-1] + blk.shape[0])
        self.offsets = tuple(offsets)
        self.dim = offsets[-1]

    @classmethod
    def from_dense(cls, M: np.ndarray, sizes: Sequence[int]) -> BlockDiagInertia:
        blocks, at = [], 0
        for s in sizes:
            blocks.append(M[at : at + s, at : at + s])
            at += s
        return cls(blocks)

    def dense(self) -> np.ndarray:
        M = np.zeros((self.dim, self.dim))
        for blk, a, b in zip(self.blocks, self.offsets, self.offsets[1:]):
            M[a:b, a:b] = blk
        return M

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for blk, a, b in zip(self.blocks, self.offsets, self.offsets[1:]):
            out[a:b] = blk @ x[a:b]
        tally(sum(blk.size for blk in self.blocks) * (x.shape[1] if x.ndim == 2 else 1))
        return out

    def solve(self, b) -> np.ndarray:
        return inertia_solve(self, b)


def inertia_solve(Mi: BlockDiagInertia, b) -> np.ndarray:
    """Apply ``M^{-1}`` block by block; ``b`` may be a vector or an m x k matrix."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != Mi.dim:
        raise ContractError(f"rhs has {b.shape[0]} rows, inertia has dimension {Mi.dim}")
    out = np.empty_like(b)
    for c, a, e in zip(Mi._chol, Mi.offsets, Mi.offsets[1:]):
        y = solve_triangular(c, b[a:e], lower=True, check_finite=False)
        out[a:e] = solve_triangular(c, y, lower=True, trans="T", check_finite=False)
    tally(sum(c.size for c in Mi._chol) * (b.shape[1] if b.ndim == 2 else 1))
    return out
