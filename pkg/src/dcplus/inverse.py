"""Inverse handles: objects that apply ``M⁻¹`` to vectors without forming it.

A handle is either an LU factorization or a low-rank correction stacked on
another handle. Every handle exposes ``solve(x)`` for 1-D or 2-D ``x``.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

# inner systems with reciprocal condition below this are treated as singular
RCOND_MIN = 1e-12
MAX_DEPTH = 8


# neither SuperLU nor the bundled OpenBLAS survives concurrent calls from
# several Python threads (heap corruption), so native solves are serialised
NATIVE_LOCK = threading.RLock()


def sparse_solve(a: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Thread-safe ``spsolve``."""
    with NATIVE_LOCK:
        return spsolve(a, b)


class SingularUpdateError(np.linalg.LinAlgError):
    """The inner low-rank system is singular (topological or numerical degeneracy)."""


class InverseHandle:
    depth = 0
    dim: int

    def solve(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self) -> np.ndarray | None:
        """Dense matrix whose inverse this handle applies, when it is finite."""
        return None

    def compact(self) -> InverseHandle:
        """Refactor from scratch, dropping the correction stack."""
        mat = self.matrix()
        if mat is None:
            return self
        return LUInverse(mat)

    def dense(self) -> np.ndarray:
        """Explicit inverse; intended for tests and small grids only."""
        return self.solve(np.eye(self.dim))


class LUInverse(InverseHandle):
    def __init__(self, matrix: np.ndarray):
        self._matrix = np.asarray(matrix, dtype=float)
        self.dim = self._matrix.shape[0]
        if self.dim == 0:
            self._lu = None
            return
        with np.errstate(all="ignore"), NATIVE_LOCK:
            self._lu = la.lu_factor(self._matrix, check_finite=False)
        anorm = np.abs(self._matrix).sum(axis=0).max()
        rcond, _ = la.lapack.dgecon(self._lu[0], anorm, norm="1")
        if not np.isfinite(rcond) or rcond < 1e-14:
            raise np.linalg.LinAlgError(f"matrix is singular (rcond={rcond:.2e}); the state space is disconnected")

    def solve(self, x):
        if self._lu is None:
            return np.zeros_like(x, dtype=float)
        with NATIVE_LOCK:
            return la.lu_solve(self._lu, x, check_finite=False)

    def matrix(self):
        return self._matrix


def _as_dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def _inner_solver(k: np.ndarray):
    if k.size == 0:
        return lambda b: b
    with np.errstate(all="ignore"):
        rcond = 1.0 / np.linalg.cond(k)
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularUpdateError(f"inner {k.shape[0]}x{k.shape[0]} system is singular (rcond={rcond:.2e})")
    with NATIVE_LOCK:
        lu = la.lu_factor(k)

    def solve(b):
        with NATIVE_LOCK:
            return la.lu_solve(lu, b)

    return solve


class WoodburyInverse(InverseHandle):
    """``(M + c⁻¹·S R)⁻¹`` via the Woodbury identity.

    ``shift`` is the multiple of the identity in the inner matrix
    ``shift·1 + R M⁻¹ S``: 1 for an ordinary update, ``1/b`` for a scaled
    one, and 0 for the infinite-susceptance limit.
    """

    def __init__(self, base: InverseHandle, S, R, shift: float = 1.0):
        self.base = base
        self.dim = base.dim
        self.S = S
        self.R = sp.csr_matrix(R)
        self.shift = shift
        self.depth = base.depth + 1
        self.rank = self.R.shape[0]
        self._z = base.solve(_as_dense(S))
        inner = shift * np.eye(self.rank) + self.R @ self._z
        self.inner = np.asarray(inner)
        self._inner_solve = _inner_solver(self.inner)

    def solve(self, x):
        y = self.base.solve(x)
        return y - self._z @ self._inner_solve(self.R @ y)

    def matrix(self):
        if self.shift == 0:
            return None
        base = self.base.matrix()
        if base is None:
            return None
        return base + _as_dense(self.S) @ self.R.toarray() / self.shift


class PaddedInverse(InverseHandle):
    """Inverse of a grid whose duplicated coordinates are rigidly tied together.

    ``lift[k]`` names the coordinate of the base handle that coordinate ``k``
    copies; applying the handle sums duplicated entries, solves with the
    base, and copies the result back out.
    """

    def __init__(self, base: InverseHandle, lift: np.ndarray):
        self.base = base
        self.lift = np.asarray(lift, dtype=int)
        self.dim = len(self.lift)
        self.depth = base.depth + 1

    def contract(self, x):
        out = np.zeros((self.base.dim,) + x.shape[1:])
        np.add.at(out, self.lift, x)
        return out

    def solve(self, x):
        return self.base.solve(self.contract(x))[self.lift]


class SplitOpenInverse(InverseHandle):
    """Opening-limit update from a closed-coupler inverse ``Hc`` to ``M_o⁻¹``.

    Evaluates ``Hc + (1 − Hc Mo) W K⁻¹ Wᵀ (1 − Mo Hc)`` with
    ``K = Wᵀ (Mo − Mo Hc Mo) W`` and ``W = (μ_e, ν_e)``.
    """

    def __init__(self, closed: InverseHandle, open_matrix: np.ndarray, W: np.ndarray):
        self.base = closed
        self.dim = closed.dim
        self.depth = closed.depth + 1
        self.mo = np.asarray(open_matrix)
        self.W = np.asarray(W)
        mo_w = self.mo @ self.W
        self._wt_mo = self.W.T @ self.mo
        hc_mo_w = closed.solve(mo_w)
        self._left = self.W - hc_mo_w
        self.inner = self.W.T @ mo_w - self._wt_mo @ hc_mo_w
        scale = max(np.abs(self.W.T @ mo_w).max(), 1.0)
        if np.abs(self.inner).max() <= 1e-10 * scale:
            raise SingularUpdateError("split bracket vanishes; a busbar is left without connections")
        self._inner_solve = _inner_solver(self.inner)

    def solve(self, x):
        y = self.base.solve(x)
        rhs = self.W.T @ x - self._wt_mo @ y
        return y + self._left @ self._inner_solve(rhs)

    def matrix(self):
        return self.mo
