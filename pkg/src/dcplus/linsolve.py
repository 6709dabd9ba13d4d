"""Solving the linear model, the classical DC baseline, and output recovery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import acref
from .gridio import IndexedGrid
from .indexing import StateIndexer
from .inverse import InverseHandle, sparse_solve
from .linearizer import LinearModel, ReferenceState, branch_blocks, shunt_block


@dataclass(frozen=True, eq=False)
class LinState:
    """Angles of the non-slack buses and relative voltage deviations of the PQ buses."""

    theta: np.ndarray
    u: np.ndarray

    @classmethod
    def from_vector(cls, indexer: StateIndexer, x: np.ndarray) -> LinState:
        theta, u = indexer.split(np.asarray(x))
        return cls(theta.copy(), u.copy())

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.u])

    def __add__(self, delta) -> LinState:
        psi, sigma = delta
        return LinState(self.theta + psi, self.u + sigma)

    def bus_theta(self) -> np.ndarray:
        """Angles per bus including the slack (zero)."""
        return np.append(self.theta, 0.0)

    def bus_u(self, n_bus: int) -> np.ndarray:
        out = np.zeros(n_bus)
        out[: len(self.u)] = self.u
        return out

    def bus_v(self, ref: ReferenceState) -> np.ndarray:
        return ref.v_hat * (1.0 + self.bus_u(len(ref.v_hat)))


def solve(model: LinearModel, p=None, q=None, inverse: InverseHandle | None = None) -> LinState:
    """Solve ``(p; q) = (p̂; q̂) + M (θ; u)``.

    ``p``/``q`` are per-bus injections (default: the grid's). ``inverse``
    overrides the model's own factorization, e.g. with an updated handle.
    """
    inverse = model.inverse if inverse is None else inverse
    return LinState.from_vector(model.indexer, inverse.solve(model.rhs(p, q)))


def injection_sensitivity(model: LinearModel, bus: int, reactive: bool = False) -> LinState:
    """State response to a unit injection at ``bus`` balanced by the slack (``M⁻¹η_j`` or ``M⁻¹ζ_j``)."""
    sel = model.indexer.zeta(bus) if reactive else model.indexer.eta(bus)
    return LinState.from_vector(model.indexer, model.inverse.solve(sel.dense(model.dim)))


@dataclass(frozen=True, eq=False)
class DCResult:
    theta: np.ndarray
    flow: np.ndarray
    p_slack: float


def dc_solve(grid: IndexedGrid, p=None) -> DCResult:
    """Classical lossless DC load flow with unit voltages and a single slack.

    Branch susceptance is ``1/(x·τ)``; phase shifters enter as equivalent
    injections and shunt conductance as load at unit voltage. ``p`` defaults
    to the grid's net injections.
    """
    nb, nl = grid.n_bus, grid.n_branch
    p = grid.p_inj if p is None else np.asarray(p, dtype=float)
    on = grid.status
    b = np.where(on, 1.0 / np.where(on, grid.x * grid.tau, 1.0), 0.0)
    rows = np.arange(nl)
    inc = sp.csr_matrix((np.r_[np.ones(nl), -np.ones(nl)], (np.r_[rows, rows], np.r_[grid.f, grid.t])), shape=(nl, nb))
    bbus = (inc.T @ sp.diags(b) @ inc).tocsc()
    p_shift = -b * grid.alpha
    p_net = p - grid.g_shunt - inc.T @ p_shift
    k = grid.slack
    theta = np.zeros(nb)
    if k > 0:
        red = bbus[:k, :k]
        theta[:k] = sparse_solve(red, p_net[:k]) if k > 1 else p_net[:1] / red.toarray()[0, 0]
    if not np.all(np.isfinite(theta)):
        raise np.linalg.LinAlgError("reduced susceptance matrix is singular")
    flow = b * (theta[grid.f] - theta[grid.t]) + p_shift
    p_slack = float((bbus @ theta)[k] + (inc.T @ p_shift)[k] + grid.g_shunt[k])
    return DCResult(theta, flow, p_slack)


@dataclass(frozen=True, eq=False)
class BusReport:
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class BranchFlows:
    p_f: np.ndarray
    q_f: np.ndarray
    p_t: np.ndarray
    q_t: np.ndarray


def recover(grid: IndexedGrid, ref: ReferenceState, state: LinState, nonlinear: bool = False) -> tuple[BusReport, BranchFlows]:
    """Bus voltages, injections and branch flows implied by ``state``.

    By default flows come from the linearized branch relation, so nodal sums
    balance the linear model exactly; the slack P/Q and PV Q are those sums.
    With ``nonlinear=True`` the pi-model equations are evaluated at the
    linear state instead.
    """
    nb = grid.n_bus
    theta = state.bus_theta()
    u = state.bus_u(nb)
    v = ref.v_hat * (1.0 + u)
    if nonlinear:
        pf, qf, pt, qt = acref.branch_flows(grid, BusReport(v, theta, None, None))
        p, q = acref.injections(grid, v, theta)
        return BusReport(v, theta, p, q), BranchFlows(pf, qf, pt, qt)

    blk = branch_blocks(grid, ref)
    f, t = grid.f, grid.t
    tf, tt, uf, ut = theta[f], theta[t], u[f], u[t]
    pf = blk.p_f + blk.mpt_ff * tf + blk.mpt_ft * tt + blk.mpu_ff * uf + blk.mpu_ft * ut
    pt = blk.p_t + blk.mpt_tf * tf + blk.mpt_tt * tt + blk.mpu_tf * uf + blk.mpu_tt * ut
    qf = blk.q_f + blk.mqt_ff * tf + blk.mqt_ft * tt + blk.mqu_ff * uf + blk.mqu_ft * ut
    qt = blk.q_t + blk.mqt_tf * tf + blk.mqt_tt * tt + blk.mqu_tf * uf + blk.mqu_tt * ut
    sh = shunt_block(grid.g_shunt, grid.b_shunt, ref.v_hat)
    p = np.bincount(f, pf, nb) + np.bincount(t, pt, nb) + sh.p_hat + sh.n_pu * u
    q = np.bincount(f, qf, nb) + np.bincount(t, qt, nb) + sh.q_hat + sh.n_qu * u
    return BusReport(v, theta, p, q), BranchFlows(pf, qf, pt, qt)
