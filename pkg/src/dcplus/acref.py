"""Full AC load flow (polar Newton-Raphson) used as reference state and oracle.

Generator limits and PV/PQ switching are deliberately absent: PV buses hold
their set-point voltage whatever reactive power that takes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .gridio import IndexedGrid, connectivity_check
from .inverse import sparse_solve

logger = logging.getLogger(__name__)


class IslandingError(RuntimeError):
    """The topology leaves part of the grid disconnected from the slack."""

    def __init__(self, buses=frozenset()):
        super().__init__(f"grid is islanded; disconnected buses {sorted(buses)}")
        self.buses = frozenset(buses)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, state: ACState):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True, eq=False)
class ACState:
    """Solved (or attempted) AC operating point, arrays in internal bus order."""

    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    n: int
    m: int
    converged: bool
    max_mismatch: float
    iterations: int

    @property
    def p_slack(self) -> float:
        return float(self.p[self.n + self.m])

    @property
    def q_slack(self) -> float:
        return float(self.q[self.n + self.m])

    @property
    def q_pv(self) -> np.ndarray:
        return self.q[self.n:self.n + self.m]


def ybus(grid: IndexedGrid) -> sp.csr_matrix:
    nb, nl = grid.n_bus, grid.n_branch
    yff, yft, ytf, ytt = grid.admittances()
    rows = np.arange(nl)
    cf = sp.csr_matrix((np.ones(nl), (rows, grid.f)), shape=(nl, nb))
    ct = sp.csr_matrix((np.ones(nl), (rows, grid.t)), shape=(nl, nb))
    yf = sp.diags(yff) @ cf + sp.diags(yft) @ ct
    yt = sp.diags(ytf) @ cf + sp.diags(ytt) @ ct
    return (cf.T @ yf + ct.T @ yt + sp.diags(grid.g_shunt + 1j * grid.b_shunt)).tocsr()


def injections(grid: IndexedGrid, v: np.ndarray, theta: np.ndarray, y=None) -> tuple[np.ndarray, np.ndarray]:
    """Nodal power injections ``(p, q)`` implied by the voltages."""
    y = ybus(grid) if y is None else y
    V = v * np.exp(1j * theta)
    s = V * np.conj(y @ V)
    return s.real, s.imag


def jacobian(grid: IndexedGrid, v: np.ndarray, theta: np.ndarray, y=None) -> sp.csr_matrix:
    """Derivative of ``(p[:n+m], q[:n])`` w.r.t. ``(theta[:n+m], v[:n])``."""
    y = ybus(grid) if y is None else y
    V = v * np.exp(1j * theta)
    ibus = y @ V
    dv = sp.diags(V)
    ds_dtheta = 1j * dv @ np.conj(sp.diags(ibus) - y @ dv)
    vnorm = sp.diags(V / np.abs(V))
    ds_dv = dv @ np.conj(y @ vnorm) + np.conj(sp.diags(ibus)) @ vnorm
    k, n = grid.n + grid.m, grid.n
    ds_dtheta = ds_dtheta.tocsc()[:, :k]
    ds_dv = ds_dv.tocsc()[:, :n]
    top = sp.hstack([ds_dtheta[:k].real, ds_dv[:k].real])
    bottom = sp.hstack([ds_dtheta[:n].imag, ds_dv[:n].imag])
    return sp.vstack([top, bottom]).tocsr()


def _mismatch(grid, p_calc, q_calc):
    k, n = grid.n + grid.m, grid.n
    return np.concatenate([p_calc[:k] - grid.p_inj[:k], q_calc[:n] - grid.q_inj[:n]])


def flat_start(grid: IndexedGrid) -> tuple[np.ndarray, np.ndarray]:
    v = np.where(np.isnan(grid.v_set), 1.0, grid.v_set)
    return v, np.zeros(grid.n_bus)


def ac_solve(grid: IndexedGrid, init: str | ACState = "flat", tol: float = 1e-8, max_iter: int = 30) -> ACState:
    """Solve the AC load flow by Newton-Raphson with step halving.

    ``init`` is ``"flat"`` or a previous :class:`ACState` to warm-start from.
    Raises :class:`IslandingError` on a disconnected grid and
    :class:`ConvergenceError` (carrying the last iterate) when ``max_iter``
    is exhausted.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    conn = connectivity_check(grid)
    if not conn:
        raise IslandingError(conn.islanded)
    if isinstance(init, ACState):
        v, theta = init.v.copy(), init.theta.copy()
        fixed = ~np.isnan(grid.v_set)
        v[fixed] = grid.v_set[fixed]
        theta[grid.slack] = 0.0
    else:
        v, theta = flat_start(grid)
    y = ybus(grid)
    k, n = grid.n + grid.m, grid.n

    p, q = injections(grid, v, theta, y)
    f = _mismatch(grid, p, q)
    err = np.abs(f).max(initial=0.0)
    it = 0
    while err > tol and it < max_iter:
        it += 1
        step = sparse_solve(jacobian(grid, v, theta, y).tocsc(), -f)
        scale = 1.0
        for _ in range(5):
            theta_new = theta.copy()
            v_new = v.copy()
            theta_new[:k] += scale * step[:k]
            v_new[:n] += scale * step[k:]
            p, q = injections(grid, v_new, theta_new, y)
            f_new = _mismatch(grid, p, q)
            err_new = np.abs(f_new).max(initial=0.0)
            if np.isfinite(err_new) and err_new < err:
                break
            scale *= 0.5
        theta, v, f, err = theta_new, v_new, f_new, err_new
        logger.debug("newton iteration %d: max mismatch %.3e", it, err)

    converged = bool(err <= tol and np.all(v > 0))
    state = ACState(v, theta, p, q, grid.n, grid.m, converged, float(err), it)
    if not converged:
        raise ConvergenceError(f"AC load flow did not converge in {it} iterations (mismatch {err:.3e})", state)
    return state


def branch_flows(grid: IndexedGrid, state) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate the nonlinear pi-model flows ``(p_f, q_f, p_t, q_t)`` per branch.

    ``state`` needs ``v`` and ``theta`` arrays; out-of-service branches carry zero.
    """
    yff, yft, ytf, ytt = grid.admittances()
    V = state.v * np.exp(1j * state.theta)
    vf, vt = V[grid.f], V[grid.t]
    sf = vf * np.conj(yff * vf + yft * vt)
    st = vt * np.conj(ytf * vf + ytt * vt)
    return sf.real, sf.imag, st.real, st.imag
