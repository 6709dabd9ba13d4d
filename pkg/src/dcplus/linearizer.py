"""Voltage-sensitive linearization of the AC load-flow equations.

Voltages are written as ``v = v̂ (1 + u)`` and the trigonometric terms are
expanded around per-branch reference angle differences ``θ̂_ft``. Each branch
then contributes a 4x4 block and four offsets; shunts add two offsets and
two voltage couplings. Scattering them over the state coordinates gives

    (p; q) = (p̂; q̂) + M (θ; u)

with ``M`` square of size ``2n + m``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .acref import ACState
from .gridio import IndexedGrid
from .indexing import StateIndexer
from .inverse import LUInverse


class RefKind(enum.Enum):
    COLD = "cold"
    HOT = "hot"


@dataclass(frozen=True, eq=False)
class ReferenceState:
    """Expansion point: per-bus ``v_hat``/``theta_hat`` and per-branch ``branch_theta``."""

    v_hat: np.ndarray
    theta_hat: np.ndarray
    branch_theta: np.ndarray
    kind: RefKind

    def __post_init__(self):
        if not np.all(self.v_hat > 0):
            raise ValueError("reference voltages must be positive")

    def shifted(self, offset: float) -> ReferenceState:
        """Same reference with every bus angle moved by ``offset``."""
        return ReferenceState(self.v_hat, self.theta_hat + offset, self.branch_theta, self.kind)


def cold_ref(grid: IndexedGrid) -> ReferenceState:
    v_hat = np.where(np.isnan(grid.v_set), 1.0, grid.v_set)
    return ReferenceState(v_hat, np.zeros(grid.n_bus), grid.alpha.copy(), RefKind.COLD)


def hot_ref(grid: IndexedGrid, state: ACState) -> ReferenceState:
    if not state.converged:
        raise ValueError("hot-start reference needs a converged AC state")
    theta = state.theta.copy()
    return ReferenceState(state.v.copy(), theta, theta[grid.f] - theta[grid.t], RefKind.HOT)


@dataclass(frozen=True)
class BranchBlock:
    """Linearized two-port. Fields are scalars for one branch or arrays for many.

    Naming: ``mpt_ff`` is ∂p_f/∂θ_f, ``mpu_ft`` is ∂p_f/∂u_t and so on; the
    angle couplings obey ``m*t_ft = -m*t_ff`` and ``m*t_tf = -m*t_tt``.
    """

    p_f: np.ndarray
    p_t: np.ndarray
    q_f: np.ndarray
    q_t: np.ndarray
    mpt_ff: np.ndarray
    mpt_ft: np.ndarray
    mpt_tf: np.ndarray
    mpt_tt: np.ndarray
    mpu_ff: np.ndarray
    mpu_ft: np.ndarray
    mpu_tf: np.ndarray
    mpu_tt: np.ndarray
    mqt_ff: np.ndarray
    mqt_ft: np.ndarray
    mqt_tf: np.ndarray
    mqt_tt: np.ndarray
    mqu_ff: np.ndarray
    mqu_ft: np.ndarray
    mqu_tf: np.ndarray
    mqu_tt: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return np.array([self.p_f, self.p_t, self.q_f, self.q_t])

    @property
    def matrix(self) -> np.ndarray:
        """Rows ``(p_f, p_t, q_f, q_t)``, columns ``(θ_f, θ_t, u_f, u_t)``."""
        return np.array([
            [self.mpt_ff, self.mpt_ft, self.mpu_ff, self.mpu_ft],
            [self.mpt_tf, self.mpt_tt, self.mpu_tf, self.mpu_tt],
            [self.mqt_ff, self.mqt_ft, self.mqu_ff, self.mqu_ft],
            [self.mqt_tf, self.mqt_tt, self.mqu_tf, self.mqu_tt],
        ])

    def __getitem__(self, k) -> BranchBlock:
        return BranchBlock(*(getattr(self, name)[k] for name in self.__dataclass_fields__))

    def __sub__(self, other: BranchBlock) -> BranchBlock:
        return BranchBlock(*(getattr(self, n) - getattr(other, n) for n in self.__dataclass_fields__))


def _one_end(y_ii, y_ij, vi, vj, th):
    g_ii, b_ii, g, b = y_ii.real, y_ii.imag, y_ij.real, y_ij.imag
    c, s = np.cos(th), np.sin(th)
    vv = vi * vj
    mpt = vv * (-g * s + b * c)
    mqt = vv * (b * s + g * c)
    p_hat = vi**2 * g_ii + vv * (g * c + b * s) - mpt * th
    q_hat = -vi**2 * b_ii + vv * (g * s - b * c) - mqt * th
    mpu_ij = vv * (g * c + b * s)
    mqu_ij = vv * (-b * c + g * s)
    return p_hat, q_hat, mpt, mqt, 2 * vi**2 * g_ii + mpu_ij, mpu_ij, -2 * vi**2 * b_ii + mqu_ij, mqu_ij


def _blocks(admittances, vf, vt, th_ft) -> BranchBlock:
    yff, yft, ytf, ytt = admittances
    pf, qf, mpt_f, mqt_f, mpu_ff, mpu_ft, mqu_ff, mqu_ft = _one_end(yff, yft, vf, vt, th_ft)
    pt, qt, mpt_t, mqt_t, mpu_tt, mpu_tf, mqu_tt, mqu_tf = _one_end(ytt, ytf, vt, vf, -th_ft)
    return BranchBlock(
        pf, pt, qf, qt,
        mpt_f, -mpt_f, -mpt_t, mpt_t,
        mpu_ff, mpu_ft, mpu_tf, mpu_tt,
        mqt_f, -mqt_f, -mqt_t, mqt_t,
        mqu_ff, mqu_ft, mqu_tf, mqu_tt,
    )


def branch_blocks(grid: IndexedGrid, ref: ReferenceState) -> BranchBlock:
    """Blocks for every branch (arrays); out-of-service branches give zeros."""
    return _blocks(grid.admittances(), ref.v_hat[grid.f], ref.v_hat[grid.t], ref.branch_theta)


def branch_block(grid: IndexedGrid, k: int, ref: ReferenceState, admittances=None) -> BranchBlock:
    """Block of branch ``k``; ``admittances`` overrides its ``(y_ff, y_ft, y_tf, y_tt)``."""
    if admittances is None:
        admittances = tuple(y[k] for y in grid.admittances())
    return _blocks(
        tuple(np.asarray(y, dtype=complex) for y in admittances),
        ref.v_hat[grid.f[k]], ref.v_hat[grid.t[k]], ref.branch_theta[k],
    )[()]


@dataclass(frozen=True)
class ShuntBlock:
    p_hat: float
    q_hat: float
    n_pu: float
    n_qu: float


def shunt_block(g_shunt, b_shunt, v_hat) -> ShuntBlock:
    """Shunt offsets and voltage couplings; ``b_shunt`` > 0 is capacitive."""
    v2 = v_hat**2
    return ShuntBlock(v2 * g_shunt, -v2 * b_shunt, 2 * v2 * g_shunt, -2 * v2 * b_shunt)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``M``, ``p̂``, ``q̂`` for a grid at a given reference state."""

    grid: IndexedGrid
    ref: ReferenceState
    indexer: StateIndexer
    M: np.ndarray
    p_hat: np.ndarray
    q_hat: np.ndarray

    @property
    def dim(self) -> int:
        return self.indexer.dim

    @functools.cached_property
    def inverse(self) -> LUInverse:
        """LU factorization of ``M``, computed on first use."""
        return LUInverse(self.M)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([self.p_hat, self.q_hat])

    def rhs(self, p: np.ndarray | None = None, q: np.ndarray | None = None) -> np.ndarray:
        """``(p; q) − (p̂; q̂)`` with ``p``/``q`` given per bus (defaults: the grid's injections)."""
        k, n = self.grid.n + self.grid.m, self.grid.n
        p = self.grid.p_inj if p is None else p
        q = self.grid.q_inj if q is None else q
        return np.concatenate([np.asarray(p)[:k], np.asarray(q)[:n]]) - self.offsets

    def to_triplets(self) -> list[tuple[str, int, int, float]]:
        """Nonzero entries of ``M``, ``p̂``, ``q̂`` as ``(name, row, col, value)``."""
        rows, cols = np.nonzero(self.M)
        out = [("M", int(r), int(c), float(self.M[r, c])) for r, c in zip(rows, cols)]
        out += [("p_hat", i, 0, float(v)) for i, v in enumerate(self.p_hat)]
        out += [("q_hat", i, 0, float(v)) for i, v in enumerate(self.q_hat)]
        return out


def scatter_blocks(indexer: StateIndexer, f, t, blocks: BranchBlock, M: np.ndarray) -> None:
    """Add branch blocks into ``M`` in place, dropping slack/PV coordinates."""
    eta, zeta = indexer.eta_pos, indexer.zeta_pos
    rows = (eta[f], eta[t], zeta[f], zeta[t])
    cols = rows
    mat = blocks.matrix
    for a in range(4):
        for b in range(4):
            r, c, val = rows[a], cols[b], np.broadcast_to(mat[a, b], np.shape(f))
            keep = (r >= 0) & (c >= 0)
            np.add.at(M, (r[keep], c[keep]), val[keep])


def assemble(grid: IndexedGrid, ref: ReferenceState) -> LinearModel:
    indexer = StateIndexer(grid.n, grid.m)
    M = np.zeros((indexer.dim, indexer.dim))
    blocks = branch_blocks(grid, ref)
    scatter_blocks(indexer, grid.f, grid.t, blocks, M)

    sh = shunt_block(grid.g_shunt, grid.b_shunt, ref.v_hat)
    k, n = grid.n + grid.m, grid.n
    pq = np.arange(n)
    M[pq, indexer.zeta_pos[pq]] += sh.n_pu[:n]
    M[indexer.zeta_pos[pq], indexer.zeta_pos[pq]] += sh.n_qu[:n]

    nb = grid.n_bus
    p_bus = np.bincount(grid.f, blocks.p_f, nb) + np.bincount(grid.t, blocks.p_t, nb) + sh.p_hat
    q_bus = np.bincount(grid.f, blocks.q_f, nb) + np.bincount(grid.t, blocks.q_t, nb) + sh.q_hat
    return LinearModel(grid, ref, indexer, M, p_bus[:k], q_bus[:n])
