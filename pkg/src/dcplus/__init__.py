"""Voltage-sensitive linear load flow with low-rank topology updates."""

from .acref import ACState, ConvergenceError, IslandingError, ac_solve
from .contingency import ErrorCdf, OutageRecord, error_cdf, n1_scan
from .gridio import GridCase, IndexedGrid, index_grid, load_case, parse_matpower
from .inverse import SingularUpdateError
from .linearizer import LinearModel, ReferenceState, assemble, cold_ref, hot_ref
from .linsolve import LinState, dc_solve, recover, solve
from .topoupdate import (
    IslandingUpdateError,
    branch_delta,
    close_switch,
    lmdf,
    multi_branch_delta,
    outage_delta,
    open_split,
    pad_for_split,
    state_delta,
    woodbury_update,
)

__all__ = [
    "ACState", "ConvergenceError", "ErrorCdf", "GridCase", "IndexedGrid", "IslandingError",
    "IslandingUpdateError", "LinState", "LinearModel", "OutageRecord", "ReferenceState", "SingularUpdateError",
    "ac_solve", "assemble", "branch_delta", "close_switch", "cold_ref", "dc_solve", "error_cdf", "hot_ref",
    "index_grid", "lmdf", "load_case", "multi_branch_delta", "n1_scan", "open_split", "outage_delta", "pad_for_split",
    "parse_matpower", "recover", "solve", "state_delta", "woodbury_update",
]
