from __future__ import annotations

import dataclasses
import functools
from pathlib import Path

import numpy as np
import pytest

from dcplus.acref import ac_solve, injections
from dcplus.gridio import index_grid, load_case, parse_matpower
from dcplus.linearizer import assemble, hot_ref
from dcplus.linsolve import solve

FIXTURES = Path(__file__).parent / "fixtures"

TWO_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 110 1 1.1 0.9;
  2 1 {pd} 0 0 0 1 1 0 110 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 100 0;
];
mpc.branch = [
  1 2 {r} 0.1 {b} 0 0 0 0 0 1 -360 360;
];
"""


def two_bus(pd: float = 0.0, r: float = 0.0, b: float = 0.0):
    return index_grid(parse_matpower(TWO_BUS.format(pd=pd, r=r, b=b), "two_bus"))


@functools.lru_cache(maxsize=None)
def grid(name: str):
    return index_grid(load_case(FIXTURES / f"{name}.m"))


@functools.lru_cache(maxsize=None)
def hot(name: str):
    """(grid, ac state, hot model, base linear state) for a fixture."""
    g = grid(name)
    ac = ac_solve(g, tol=1e-10)
    model = assemble(g, hot_ref(g, ac))
    return g, ac, model, solve(model)


def fd_jacobian(g, v, theta, step=1e-6):
    """Central differences of the mismatch in the retained coordinates, voltage columns scaled by v."""
    n, k = g.n, g.n + g.m

    def mismatch(x):
        th = theta.copy()
        vv = v.copy()
        th[:k] = x[:k]
        vv[:n] = v[:n] * (1 + x[k:])
        p, q = injections(g, vv, th)
        return np.concatenate([p[:k], q[:n]])

    x0 = np.concatenate([theta[:k], np.zeros(n)])
    jac = np.empty((len(x0), len(x0)))
    for j in range(len(x0)):
        e = np.zeros_like(x0)
        e[j] = step
        jac[:, j] = (mismatch(x0 + e) - mismatch(x0 - e)) / (2 * step)
    return jac


def lossless(g):
    """Unit-voltage copy of ``g`` without resistance, charging, shunts, taps or shifts."""
    case = g.case
    buses = tuple(dataclasses.replace(b, g_shunt=0.0, b_shunt=0.0, v_set=1.0) for b in case.buses)
    branches = tuple(dataclasses.replace(br, r=0.0, b_charging=0.0, tau=1.0, alpha=0.0) for br in case.branches)
    gens = tuple(dataclasses.replace(x, v_set=1.0) for x in case.gens)
    return index_grid(dataclasses.replace(case, buses=buses, branches=branches, gens=gens))


def split_example():
    """Merged 4-bus model (hot start) and the assignment used by the split tests."""
    import json

    g, ac, model, base = hot("split4")
    raw = json.loads((FIXTURES / "split4_assignment.json").read_text())
    assignment = {
        "branches": {tuple(e["branch"]): e["busbar"] for e in raw["branches"]},
        "load": raw["load"],
        "generation": raw["generation"],
    }
    return g, ac, model, base, raw["bus"], assignment


def bridges_of(g):
    from dcplus.gridio import bridges

    return bridges(g)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
