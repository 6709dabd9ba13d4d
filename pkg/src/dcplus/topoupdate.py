"""Low-rank topology updates of the linear model.

Branch modifications change ``M`` by a rank ≤ 3 term ``S R`` (rank 3k for k
branches) and are folded into an existing factorization with the Woodbury
identity. Switch closing and busbar splitting are the infinite-susceptance
limits of such updates and are evaluated in closed form, so no large
susceptance ever enters the arithmetic.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .acref import IslandingError
from .gridio import BusKind, GridCase, IndexedGrid, connectivity_check, index_grid
from .indexing import Selector, StateIndexer
from .inverse import (
    MAX_DEPTH,
    InverseHandle,
    PaddedInverse,
    SingularUpdateError,
    SplitOpenInverse,
    WoodburyInverse,
)
from .linearizer import LinearModel, ReferenceState, assemble, branch_block
from .linsolve import LinState

logger = logging.getLogger(__name__)


class IslandingUpdateError(SingularUpdateError, IslandingError):
    """A topology action disconnects part of the grid."""

    def __init__(self, buses=frozenset()):
        IslandingError.__init__(self, buses)


class InvalidSplitError(ValueError):
    pass


def _columns(dim: int, columns: list[list[tuple[Selector, float]]]) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    for c, terms in enumerate(columns):
        for sel, coef in terms:
            for p, s in zip(sel.positions, sel.signs):
                rows.append(p)
                cols.append(c)
                vals.append(s * coef)
    out = sp.csc_matrix((vals, (rows, cols)), shape=(dim, len(columns)))
    out.eliminate_zeros()
    return out


def _rows(dim: int, selectors: list[Selector]) -> sp.csr_matrix:
    return _columns(dim, [[(s, 1.0)] for s in selectors]).T.tocsr()


@dataclass(frozen=True, eq=False)
class LowRankUpdate:
    """``ΔM = S R`` together with the offset changes ``Δp̂``, ``Δq̂``."""

    S: sp.csc_matrix
    R: sp.csr_matrix
    dp_hat: np.ndarray
    dq_hat: np.ndarray

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([self.dp_hat, self.dq_hat])

    def delta_m(self) -> np.ndarray:
        return (self.S @ self.R).toarray()

    def __add__(self, other: LowRankUpdate) -> LowRankUpdate:
        return LowRankUpdate(
            sp.hstack([self.S, other.S]).tocsc(),
            sp.vstack([self.R, other.R]).tocsr(),
            self.dp_hat + other.dp_hat,
            self.dq_hat + other.dq_hat,
        )


def branch_delta(model: LinearModel, k: int, **new_params) -> LowRankUpdate:
    """Rank-3 update for replacing parameters of branch ``k``.

    ``new_params`` may set any of ``r``, ``x``, ``b_charging``, ``tau``,
    ``alpha`` and ``status``; ``status=False`` is an outage. The new block is
    evaluated at the unchanged reference angle of the branch.
    """
    grid, ref, idx = model.grid, model.ref, model.indexer
    modified = grid.with_branch(k, **new_params)
    new_y = tuple(y[k] for y in modified.admittances())
    d = branch_block(grid, k, ref, admittances=new_y) - branch_block(grid, k, ref)
    f, t = int(grid.f[k]), int(grid.t[k])
    eta_f, eta_t = idx.eta_or_zero(f), idx.eta_or_zero(t)
    zeta_f, zeta_t = idx.zeta(f), idx.zeta(t)

    s_ft = [(eta_f, d.mpt_ff), (eta_t, d.mpt_tf), (zeta_f, d.mqt_ff), (zeta_t, d.mqt_tf)]
    s_f = [(eta_f, d.mpu_ff), (eta_t, d.mpu_tf), (zeta_f, d.mqu_ff), (zeta_t, d.mqu_tf)]
    s_t = [(eta_f, d.mpu_ft), (eta_t, d.mpu_tt), (zeta_f, d.mqu_ft), (zeta_t, d.mqu_tt)]
    S = _columns(idx.dim, [s_ft, s_f, s_t])
    R = _rows(idx.dim, [idx.mu(f, t), zeta_f, zeta_t])

    k_ang, n = idx.n + idx.m, idx.n
    dp = np.zeros(k_ang)
    dq = np.zeros(n)
    for bus, dpv, dqv in ((f, d.p_f, d.q_f), (t, d.p_t, d.q_t)):
        if bus < k_ang:
            dp[bus] += dpv
        if bus < n:
            dq[bus] += dqv
    return LowRankUpdate(S, R, dp, dq)


def outage_delta(model: LinearModel, k: int) -> LowRankUpdate:
    return branch_delta(model, k, status=False)


def multi_branch_delta(model: LinearModel, modifications) -> LowRankUpdate:
    """Stacked rank-3k update; ``modifications`` is a list of ``(k, params)``."""
    modifications = list(modifications)
    ks = [k for k, _ in modifications]
    if len(set(ks)) != len(ks):
        raise ValueError("branches in a multi-branch update must be distinct")
    if not modifications:
        raise ValueError("no modifications given")
    updates = [branch_delta(model, k, **params) for k, params in modifications]
    total = updates[0]
    for upd in updates[1:]:
        total = total + upd
    return total


def series_admittance(grid: IndexedGrid, k: int) -> complex:
    if not grid.status[k]:
        return 0j
    return 1.0 / complex(grid.r[k], grid.x[k])


def line_d_matrix(ref: ReferenceState, grid: IndexedGrid, k: int, dg: float, db: float) -> np.ndarray:
    vv = ref.v_hat[grid.f[k]] * ref.v_hat[grid.t[k]]
    return vv * np.array([[-db, dg], [-dg, -db]])


def _w(idx: StateIndexer, f: int, t: int) -> sp.csc_matrix:
    return _columns(idx.dim, [[(idx.mu(f, t), 1.0)], [(idx.nu(f, t), 1.0)]])


def line_delta(model: LinearModel, k: int, dg: float | None = None, db: float | None = None) -> LowRankUpdate:
    """Rank-2 update ``W D Wᵀ`` for a series-admittance change on an ordinary line.

    Omitting ``dg``/``db`` means an outage (the full series admittance is removed).
    Offsets are unchanged by construction.
    """
    grid, idx = model.grid, model.indexer
    if dg is None or db is None:
        ys = series_admittance(grid, k)
        dg = -ys.real if dg is None else dg
        db = -ys.imag if db is None else db
    f, t = int(grid.f[k]), int(grid.t[k])
    W = _w(idx, f, t)
    D = line_d_matrix(model.ref, grid, k, dg, db)
    return LowRankUpdate(sp.csc_matrix(W @ D), W.T.tocsr(), np.zeros(idx.n + idx.m), np.zeros(idx.n))


def woodbury_update(inverse: InverseHandle, update: LowRankUpdate, max_depth: int = MAX_DEPTH) -> InverseHandle:
    """Handle applying ``(M + S R)⁻¹`` given a handle for ``M⁻¹``.

    Raises :class:`SingularUpdateError` when ``1 + R M⁻¹ S`` is singular.
    """
    if update.rank == 0 or update.S.nnz == 0:
        return inverse
    if inverse.depth >= max_depth:
        inverse = inverse.compact()
    return WoodburyInverse(inverse, update.S, update.R)


def state_delta(updated: InverseHandle, update: LowRankUpdate, base: LinState) -> tuple[np.ndarray, np.ndarray]:
    """``(ψ, σ)`` such that ``base + (ψ, σ)`` solves the modified model."""
    x = base.vector
    rhs = update.offsets + update.S @ (update.R @ x)
    delta = -updated.solve(rhs)
    k = len(base.theta)
    return delta[:k], delta[k:]


def apply_modification(model: LinearModel, update: LowRankUpdate, base: LinState,
                       removed=(), inverse: InverseHandle | None = None) -> tuple[InverseHandle, LinState]:
    """Check connectivity (when branches are ``removed``), update the inverse, shift the state."""
    removed = list(removed)
    if removed:
        conn = connectivity_check(model.grid, removed)
        if not conn:
            raise IslandingUpdateError(conn.islanded)
    inverse = model.inverse if inverse is None else inverse
    try:
        updated = woodbury_update(inverse, update)
    except SingularUpdateError as exc:
        raise SingularUpdateError(f"numerical degeneracy without islanding: {exc}") from exc
    return updated, base + state_delta(updated, update, base)


# --------------------------------------------------------------------------
# line modification distribution factors

@dataclass(frozen=True)
class LmdfMatrix:
    """2x2 map from ``(θ_f − θ_t, u_f − u_t)`` to ``(ψ_k − ψ_l, σ_k − σ_l)``."""

    matrix: np.ndarray
    monitored: int
    modified: int

    def apply(self, model: LinearModel, base: LinState) -> np.ndarray:
        grid, idx = model.grid, model.indexer
        f, t = int(grid.f[self.modified]), int(grid.t[self.modified])
        x = base.vector
        return self.matrix @ np.array([idx.mu(f, t).apply(x), idx.nu(f, t).apply(x)])


def _check_line_assumptions(model: LinearModel, k: int, max_angle: float, max_dv: float) -> None:
    grid, ref = model.grid, model.ref
    f, t = grid.f[k], grid.t[k]
    problems = []
    if abs(ref.branch_theta[k]) > max_angle:
        problems.append(f"|θ̂_ft| = {abs(ref.branch_theta[k]):.3g} rad")
    if abs(ref.v_hat[f] - ref.v_hat[t]) > max_dv:
        problems.append(f"|v̂_f − v̂_t| = {abs(ref.v_hat[f] - ref.v_hat[t]):.3g} pu")
    if grid.alpha[k] != 0:
        problems.append("phase shifter")
    if grid.tau[k] != 1:
        problems.append(f"tap ratio {grid.tau[k]:.4g}")
    if problems:
        warnings.warn(f"branch {grid.labels[k]} outside line-modification assumptions: " + ", ".join(problems),
                      stacklevel=3)


def lmdf(model: LinearModel, monitored: int, modified: int, dg: float | None = None, db: float | None = None,
         max_angle: float = 0.05, max_dv: float = 0.02, inverse: InverseHandle | None = None) -> LmdfMatrix:
    """Voltage-sensitive line modification distribution factor.

    ``LMDF = −A_kl (1 + D A_ft)⁻¹ D`` where ``A_kl = W_klᵀ M⁻¹ W_ft`` and
    ``A_ft = W_ftᵀ M⁻¹ W_ft``. Omitting ``dg``/``db`` means an outage.
    """
    _check_line_assumptions(model, modified, max_angle, max_dv)
    grid, idx = model.grid, model.indexer
    inverse = model.inverse if inverse is None else inverse
    upd = line_delta(model, modified, dg, db)
    D = line_d_matrix(model.ref, grid, modified, *_dg_db(grid, modified, dg, db))
    f, t = int(grid.f[modified]), int(grid.t[modified])
    k, l = int(grid.f[monitored]), int(grid.t[monitored])
    w_ft = _w(idx, f, t)
    z = inverse.solve(w_ft.toarray())
    a_ft = w_ft.T @ z
    a_kl = _w(idx, k, l).T @ z
    inner = np.eye(2) + D @ a_ft
    if np.linalg.cond(inner) > 1e12:
        raise SingularUpdateError("1 + D A is singular for this modification")
    del upd
    return LmdfMatrix(-a_kl @ np.linalg.solve(inner, D), monitored, modified)


def _dg_db(grid, k, dg, db):
    ys = series_admittance(grid, k)
    return (-ys.real if dg is None else dg), (-ys.imag if db is None else db)


# --------------------------------------------------------------------------
# switches and busbar couplers

def _compress(S: np.ndarray, R: np.ndarray, rtol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Minimal-rank factorization of ``S R``; limit updates need full-rank factors."""
    u, s, vt = np.linalg.svd(S, full_matrices=False)
    keep = s > rtol * max(s.max(initial=0.0), 1e-300)
    S1, R1 = u[:, keep], (s[keep, None] * vt[keep]) @ R
    u2, s2, vt2 = np.linalg.svd(R1, full_matrices=False)
    keep2 = s2 > rtol * max(s2.max(initial=0.0), 1e-300)
    return S1 @ (u2[:, keep2] * s2[keep2]), vt2[keep2]


def switch_vectors(idx: StateIndexer, f: int, t: int, theta_e: float) -> tuple[np.ndarray, np.ndarray]:
    """``S`` and ``R`` of a coupler (per unit susceptance and ``v̂²``) at reference angle ``theta_e``."""
    s, c = np.sin(theta_e), np.cos(theta_e)
    eta = {i: idx.eta_or_zero(i) for i in (f, t)}
    zf, zt = idx.zeta(f), idx.zeta(t)
    s_f = [(eta[t], s), (eta[f], -s), (zt, c), (zf, c), (zf, -2.0)]
    s_t = [(eta[t], s), (eta[f], -s), (zt, c), (zf, c), (zt, -2.0)]
    s_ft = [(zf, -s), (zt, s), (eta[f], -c), (eta[t], c)]
    S = _columns(idx.dim, [s_ft, s_f, s_t]).toarray()
    R = _rows(idx.dim, [idx.mu(f, t), zf, zt]).toarray()
    return S, R


def close_switch(inverse_open: InverseHandle, model_open: LinearModel, f: int, t: int,
                 theta_e: float | None = None, v_tol: float = 1e-9) -> InverseHandle:
    """Inverse after closing an ideal coupler between internal buses ``f`` and ``t``.

    ``theta_e`` defaults to the reference angle difference of the two buses.
    Requires equal reference voltages at both ends.
    """
    ref = model_open.ref
    if abs(ref.v_hat[f] - ref.v_hat[t]) > v_tol:
        raise ValueError("closing a coupler needs equal reference voltages at both ends")
    if theta_e is None:
        theta_e = float(ref.theta_hat[f] - ref.theta_hat[t])
    S, R = _compress(*switch_vectors(model_open.indexer, f, t, theta_e))
    return WoodburyInverse(inverse_open, S, R, shift=0.0)


@dataclass(frozen=True, eq=False)
class SplitContext:
    """Everything needed to open a busbar coupler at one substation.

    ``model_open`` is assembled from the re-wired grid; ``closed_inverse``
    is the padded merged inverse; ``lift`` maps open coordinates to merged
    ones; ``coupler`` holds the internal indices of the two busbars.
    """

    model_merged: LinearModel
    model_open: LinearModel
    closed_inverse: PaddedInverse
    lift: np.ndarray
    coupler: tuple[int, int]
    bus_map: dict[int, int]

    @property
    def W(self) -> np.ndarray:
        f, t = self.coupler
        return _w(self.model_open.indexer, f, t).toarray()

    def lift_state(self, state: LinState) -> LinState:
        """Copy a merged-grid state onto the open grid's coordinates."""
        return LinState.from_vector(self.model_open.indexer, state.vector[self.lift])

    def contract_state(self, state: LinState) -> LinState:
        """Read a closed-grid state back in merged coordinates (busbar A values)."""
        out = np.empty(self.model_merged.dim)
        out[self.lift[::-1]] = state.vector[::-1]
        return LinState.from_vector(self.model_merged.indexer, out)


def _side(value) -> str:
    side = str(value).upper()
    if side not in ("A", "B"):
        raise InvalidSplitError(f"busbar must be 'A' or 'B', got {value!r}")
    return side


def split_case(grid: IndexedGrid, bus_id: int, assignment: dict) -> tuple[GridCase, int]:
    """Re-wired case where busbar B of ``bus_id`` becomes a new PQ bus.

    ``assignment`` has ``"branches"`` mapping branch index (or label tuple)
    to ``"A"``/``"B"``, plus ``"load"`` and ``"generation"`` sides
    (default ``"A"``). Returns the new case and the new bus id.
    """
    case = grid.case
    if bus_id not in grid.pos:
        raise InvalidSplitError(f"unknown bus {bus_id}")
    bus = next(b for b in case.buses if b.id == bus_id)
    if bus.kind != BusKind.PQ:
        raise InvalidSplitError(f"bus {bus_id} is {bus.kind.name}; only PQ busbars can be split")
    if bus.g_shunt != 0 or bus.b_shunt != 0:
        raise InvalidSplitError(f"bus {bus_id} carries a shunt; split busbars must be shunt-free")

    sides: dict[int, str] = {}
    for key, side in assignment.get("branches", {}).items():
        k = grid.branch_index(key) if isinstance(key, (tuple, list)) else int(key)
        sides[k] = _side(side)
    s = grid.pos[bus_id]
    incident = {int(k) for k in grid.incident(s) if grid.status[k]}
    missing = incident - set(sides)
    if missing:
        raise InvalidSplitError(f"branches {sorted(grid.labels[k] for k in missing)} have no busbar assignment")
    extra = set(sides) - incident
    if extra:
        raise InvalidSplitError(f"branches {sorted(grid.labels[k] for k in extra)} are not connected to bus {bus_id}")

    new_id = max(b.id for b in case.buses) + 1
    load_side = _side(assignment.get("load", "A"))
    gen_side = _side(assignment.get("generation", "A"))
    empty = dataclasses.replace(bus, id=new_id, p_load=0.0, q_load=0.0)
    if load_side == "B":
        new_bus, old_bus = dataclasses.replace(empty, p_load=bus.p_load, q_load=bus.q_load), \
            dataclasses.replace(bus, p_load=0.0, q_load=0.0)
    else:
        new_bus, old_bus = empty, bus
    buses = tuple(old_bus if b.id == bus_id else b for b in case.buses) + (new_bus,)

    branches = list(case.branches)
    for k, side in sides.items():
        if side == "B":
            br = branches[k]
            branches[k] = dataclasses.replace(
                br,
                from_bus=new_id if br.from_bus == bus_id else br.from_bus,
                to_bus=new_id if br.to_bus == bus_id else br.to_bus,
            )
    gens = tuple(
        dataclasses.replace(g, bus=new_id) if g.bus == bus_id and gen_side == "B" else g for g in case.gens
    )
    return GridCase(f"{case.name}_split{bus_id}", case.base_mva, buses, tuple(branches), gens), new_id


def pad_for_split(model_merged: LinearModel, bus_id: int, assignment: dict,
                  inverse_merged: InverseHandle | None = None) -> SplitContext:
    """Pad the merged inverse to the split grid's coordinates and assemble ``M_o``."""
    grid_m = model_merged.grid
    case_o, new_id = split_case(grid_m, bus_id, assignment)
    grid_o = index_grid(case_o)
    bus_map = {bid: grid_m.pos[bid if bid != new_id else bus_id] for bid in grid_o.bus_ids}
    to_merged = np.array([bus_map[bid] for bid in grid_o.bus_ids])

    ref_m = model_merged.ref
    ref_o = ReferenceState(
        ref_m.v_hat[to_merged], ref_m.theta_hat[to_merged], ref_m.branch_theta.copy(), ref_m.kind
    )
    model_o = assemble(grid_o, ref_o)

    idx_m, idx_o = model_merged.indexer, model_o.indexer
    lift = np.empty(idx_o.dim, dtype=int)
    k_o = idx_o.n + idx_o.m
    lift[:k_o] = idx_m.eta_pos[to_merged[:k_o]]
    lift[k_o:] = idx_m.zeta_pos[to_merged[: idx_o.n]]
    if np.any(lift < 0):
        raise InvalidSplitError("split maps a state coordinate onto the slack or a PV bus")

    inverse_merged = model_merged.inverse if inverse_merged is None else inverse_merged
    coupler = (grid_o.pos[bus_id], grid_o.pos[new_id])
    return SplitContext(model_merged, model_o, PaddedInverse(inverse_merged, lift), lift, coupler,
                        {int(k): int(v) for k, v in bus_map.items()})


def open_split(ctx: SplitContext) -> InverseHandle:
    """``M_o⁻¹`` from the padded closed inverse by the finite opening-limit formula."""
    conn = connectivity_check(ctx.model_open.grid)
    if not conn:
        raise IslandingUpdateError(conn.islanded)
    return SplitOpenInverse(ctx.closed_inverse, ctx.model_open.M, ctx.W)
