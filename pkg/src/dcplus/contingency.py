"""N-1 screening: DC+ and classical DC against the AC oracle, outage by outage."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acref import ACState, ConvergenceError, ac_solve
from .gridio import IndexedGrid, connectivity_check
from .inverse import SingularUpdateError
from .linearizer import LinearModel
from .linsolve import LinState, dc_solve, recover
from .topoupdate import outage_delta, state_delta, woodbury_update

logger = logging.getLogger(__name__)

QUANTITIES = ("v", "theta", "P", "Q")
METHODS = ("dcplus", "dc")


@dataclass(frozen=True, eq=False)
class OutageRecord:
    """Result of one contingency.

    Error arrays run over internal bus order and hold ``nan`` where a
    quantity is an input rather than an output: ``v`` at PQ buses, ``theta``
    at non-slack buses, ``P`` at the slack, ``Q`` at slack and PV buses.
    They are ``None`` unless the outage is feasible and the AC oracle
    converged.
    """

    branch: tuple[int, int, int] | None
    index: int | None
    feasible: bool
    converged: bool
    errors: dict[tuple[str, str], np.ndarray] | None = field(default=None, repr=False)

    @property
    def usable(self) -> bool:
        return self.errors is not None


@dataclass(frozen=True, eq=False)
class ErrorCdf:
    quantity: str
    method: str
    abs_error: np.ndarray
    cum_fraction: np.ndarray
    excluded: int = 0

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.abs_error, q))

    @property
    def median(self) -> float:
        return float(np.median(self.abs_error))


def _masks(grid: IndexedGrid) -> dict[str, np.ndarray]:
    nb, n, k = grid.n_bus, grid.n, grid.n + grid.m
    idx = np.arange(nb)
    return {"v": idx < n, "theta": idx < k, "P": idx == k, "Q": idx >= n}


def _masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, values, np.nan)


class _Scan:
    def __init__(self, grid: IndexedGrid, model: LinearModel, base: LinState, ac_base: ACState, tol: float):
        self.grid, self.model, self.base, self.ac_base, self.tol = grid, model, base, ac_base, tol
        self.masks = _masks(grid)

    def ac(self, grid: IndexedGrid) -> ACState | None:
        try:
            return ac_solve(grid, init=self.ac_base, tol=self.tol)
        except ConvergenceError:
            pass
        try:
            return ac_solve(grid, init="flat", tol=self.tol)
        except ConvergenceError:
            return None

    def errors(self, grid: IndexedGrid, state: LinState, ac: ACState) -> dict[tuple[str, str], np.ndarray]:
        rep, _ = recover(grid, self.model.ref, state)
        dc = dc_solve(grid)
        m = self.masks
        p_dc = grid.p_inj.copy()
        p_dc[grid.slack] = dc.p_slack
        return {
            ("v", "dcplus"): _masked(rep.v - ac.v, m["v"]),
            ("theta", "dcplus"): _masked(rep.theta - ac.theta, m["theta"]),
            ("P", "dcplus"): _masked(rep.p - ac.p, m["P"]),
            ("Q", "dcplus"): _masked(rep.q - ac.q, m["Q"]),
            ("theta", "dc"): _masked(dc.theta - ac.theta, m["theta"]),
            ("P", "dc"): _masked(p_dc - ac.p, m["P"]),
        }

    def outage(self, k: int) -> OutageRecord:
        grid = self.grid
        label = grid.labels[k]
        if not connectivity_check(grid, [k]):
            return OutageRecord(label, k, False, False)
        upd = outage_delta(self.model, k)
        try:
            handle = woodbury_update(self.model.inverse, upd)
        except SingularUpdateError:
            logger.warning("outage %s is connected but numerically singular", label)
            return OutageRecord(label, k, False, False)
        state = self.base + state_delta(handle, upd, self.base)
        reduced = grid.with_status([k])
        ac = self.ac(reduced)
        if ac is None:
            logger.warning("AC oracle diverged for outage %s", label)
            return OutageRecord(label, k, True, False)
        return OutageRecord(label, k, True, True, self.errors(reduced, state, ac))


def n1_scan(grid: IndexedGrid, model: LinearModel, base: LinState, ac_base: ACState,
            branches=None, workers: int = 1, tol: float = 1e-8) -> list[OutageRecord]:
    """Outage every in-service branch (or those in ``branches``) and compare to AC.

    ``model`` should be hot-started at ``ac_base`` and ``base`` its solution.
    Records come back sorted by branch label regardless of ``workers``.
    """
    if not ac_base.converged:
        raise ValueError("base AC state must be converged")
    scan = _Scan(grid, model, base, ac_base, tol)
    if branches is None:
        branches = [k for k in range(grid.n_branch) if grid.status[k]]
    model.inverse  # factor once before any threads start
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(scan.outage, branches))
    else:
        records = [scan.outage(k) for k in branches]
    return sorted(records, key=lambda r: r.branch)


def base_record(grid: IndexedGrid, model: LinearModel, base: LinState, ac_base: ACState) -> OutageRecord:
    """Errors with no outage applied; zero for DC+ at a hot start."""
    scan = _Scan(grid, model, base, ac_base, 1e-8)
    return OutageRecord(None, None, True, True, scan.errors(grid, base, ac_base))


def error_cdf(records, quantity: str, method: str = "dcplus") -> ErrorCdf:
    """Pooled absolute errors over all usable ``(outage, bus)`` pairs."""
    if quantity not in QUANTITIES or method not in METHODS:
        raise ValueError(f"unknown quantity/method {quantity!r}/{method!r}")
    if method == "dc" and quantity in ("v", "Q"):
        raise ValueError("the DC approximation has no voltage or reactive output")
    records = list(records)
    usable = [r for r in records if r.usable]
    excluded = sum(1 for r in records if r.feasible and not r.usable)
    pool = [np.abs(r.errors[quantity, method]) for r in usable]
    pool = np.concatenate(pool) if pool else np.empty(0)
    pool = np.sort(pool[~np.isnan(pool)])
    if pool.size == 0:
        raise ValueError("no feasible contingencies to pool")
    frac = np.arange(1, pool.size + 1) / pool.size
    return ErrorCdf(quantity, method, pool, frac, excluded)


def infeasible(records) -> list[tuple[int, int, int]]:
    return [r.branch for r in records if not r.feasible]
