"""Command-line front end: ``dcplus <command> CASE [options]``.

Exit codes: 0 success, 2 input error, 3 AC failure, 4 empty result,
5 invalid topology action.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import contingency, topoupdate
from .acref import ACState, ConvergenceError, IslandingError, ac_solve, branch_flows
from .gridio import BusKind, GridCase, GridError, IndexedGrid, connectivity_check, index_grid, load_case
from .inverse import SingularUpdateError
from .linearizer import ReferenceState, assemble, cold_ref, hot_ref
from .linsolve import LinState, dc_solve, recover, solve

logger = logging.getLogger("dcplus")

EXIT_OK, EXIT_INPUT, EXIT_AC, EXIT_EMPTY, EXIT_TOPOLOGY = 0, 2, 3, 4, 5

ERROR_COLUMNS = [("v", "dcplus"), ("theta", "dcplus"), ("P", "dcplus"), ("Q", "dcplus"), ("theta", "dc"), ("P", "dc")]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _num(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer, str)):
        return str(x)
    return format(float(x), ".12g")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return None if np.isnan(x) else float(format(float(x), ".12g"))
    return x


def write_table(out: Path, stem: str, header: list[str], rows: list[list], fmt: str) -> Path:
    if fmt == "json":
        path = out / f"{stem}.json"
        records = [{h: _jsonable(v) if not isinstance(v, str) else v for h, v in zip(header, r)} for r in rows]
        path.write_text(json.dumps(records, indent=1) + "\n")
        return path
    path = out / f"{stem}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])
    return path


def write_json(out: Path, name: str, payload: dict) -> Path:
    path = out / name
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def _load(path: str) -> IndexedGrid:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"case not found: {path}")
    try:
        return index_grid(load_case(p))
    except GridError as exc:
        raise CliError(EXIT_INPUT, f"cannot read case: {exc}") from exc


def _ac(grid: IndexedGrid, tol: float, required: bool, init="flat") -> ACState | None:
    try:
        return ac_solve(grid, init=init, tol=tol)
    except (ConvergenceError, IslandingError) as exc:
        if required:
            raise CliError(EXIT_AC, f"AC load flow failed: {exc}") from exc
        logger.warning("AC load flow failed: %s", exc)
        return None


def _reference(grid: IndexedGrid, args) -> tuple[ReferenceState, ACState | None]:
    ac = _ac(grid, args.tol, required=args.ref == "hot")
    ref = hot_ref(grid, ac) if args.ref == "hot" else cold_ref(grid)
    return ref, ac


def parse_label(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).replace(",", "-").split("-") if p != ""]
    if len(parts) == 2:
        parts.append(1)
    if len(parts) != 3:
        raise CliError(EXIT_INPUT, f"branch must be FROM-TO or FROM-TO-ORDINAL, got {text!r}")
    return tuple(parts)


def _branch(grid: IndexedGrid, text: str) -> int:
    try:
        return grid.branch_index(parse_label(text))
    except KeyError as exc:
        raise CliError(EXIT_INPUT, f"unknown branch {text}") from exc


def _has_kv(grid: IndexedGrid) -> bool:
    return bool(np.all(grid.base_kv > 0))


def _bus_rows(grid: IndexedGrid, ac: ACState | None, rep, dc) -> tuple[list[str], list[list]]:
    header = ["bus", "kind", "v_ac", "v_dcplus", "theta_ac", "theta_dcplus", "theta_dc",
              "p_ac", "p_dcplus", "q_ac", "q_dcplus"]
    kv = _has_kv(grid)
    if kv:
        header += ["v_ac_kv", "v_dcplus_kv", "theta_ac_deg", "theta_dcplus_deg", "theta_dc_deg"]
    nan = np.full(grid.n_bus, np.nan)
    v_ac, th_ac, p_ac, q_ac = (ac.v, ac.theta, ac.p, ac.q) if ac is not None else (nan,) * 4
    rows = []
    for i in range(grid.n_bus):
        row = [int(grid.bus_ids[i]), BusKind(grid.kind[i]).name, v_ac[i], rep.v[i], th_ac[i], rep.theta[i],
               dc.theta[i], p_ac[i], rep.p[i], q_ac[i], rep.q[i]]
        if kv:
            b = grid.base_kv[i]
            row += [v_ac[i] * b, rep.v[i] * b] + list(np.degrees([th_ac[i], rep.theta[i], dc.theta[i]]))
        rows.append(row)
    return header, rows


def cmd_loadflow(args) -> int:
    t0 = time.perf_counter()
    grid = _load(args.case)
    ref, ac = _reference(grid, args)
    model = assemble(grid, ref)
    state = solve(model)
    rep, flows = recover(grid, ref, state)
    dc = dc_solve(grid)
    out = _outdir(args)
    header, rows = _bus_rows(grid, ac, rep, dc)
    write_table(out, "busses", header, rows, args.format)

    nan = np.full(grid.n_branch, np.nan)
    pf, qf, pt, qt = branch_flows(grid, ac) if ac is not None else (nan,) * 4
    bheader = ["from", "to", "ordinal", "p_from_ac", "p_from_dcplus", "p_from_dc", "q_from_ac", "q_from_dcplus",
               "p_to_ac", "p_to_dcplus", "q_to_ac", "q_to_dcplus"]
    brows = [
        [*grid.labels[k], pf[k], flows.p_f[k], dc.flow[k], qf[k], flows.q_f[k], pt[k], flows.p_t[k], qt[k],
         flows.q_t[k]]
        for k in range(grid.n_branch)
    ]
    write_table(out, "branches", bheader, brows, args.format)
    summary = {
        "case": grid.case.name, "ref": args.ref, "buses": grid.n_bus, "branches": grid.n_branch,
        "ac_converged": ac is not None,
        "ac_iterations": None if ac is None else ac.iterations,
        "max_abs_v_error": None if ac is None else float(np.max(np.abs(rep.v - ac.v))),
        "max_abs_theta_error": None if ac is None else float(np.max(np.abs(rep.theta - ac.theta))),
        "wall_time_s": time.perf_counter() - t0,
    }
    write_json(out, "summary.json", summary)
    return EXIT_OK


def _hot_setup(args):
    grid = _load(args.case)
    if args.ref != "hot":
        logger.warning("contingency comparisons use a hot start; ignoring --ref %s", args.ref)
    ac = _ac(grid, args.tol, required=True)
    model = assemble(grid, hot_ref(grid, ac))
    return grid, ac, model, solve(model)


def cmd_n1(args) -> int:
    t0 = time.perf_counter()
    grid, ac, model, base = _hot_setup(args)
    branches = [k for k in range(grid.n_branch) if grid.status[k]]
    if args.sample and args.sample < len(branches):
        rng = np.random.default_rng(args.seed)
        branches = sorted(rng.choice(branches, size=args.sample, replace=False).tolist())
    records = contingency.n1_scan(grid, model, base, ac, branches, workers=args.workers, tol=args.tol)
    out = _outdir(args)

    names = ERROR_COLUMNS
    header = ["from", "to", "ordinal", "feasible", "converged", "bus"] + [f"d{q}_{m}" for q, m in names]
    rows = []
    for r in records:
        if not r.usable:
            rows.append([*r.branch, int(r.feasible), int(r.converged), ""] + [None] * len(names))
            continue
        for i in range(grid.n_bus):
            rows.append([*r.branch, 1, 1, int(grid.bus_ids[i])] + [r.errors[n][i] for n in names])
    write_table(out, "outages", header, rows, args.format)

    usable = [r for r in records if r.usable]
    medians = {}
    if usable:
        for q, m in names:
            cdf = contingency.error_cdf(records, q, m)
            medians[f"{q}_{m}"] = cdf.median
            write_table(out, f"cdf_{q}_{m}", ["abs_error", "cum_fraction"],
                        [list(p) for p in zip(cdf.abs_error, cdf.cum_fraction)], args.format)
    summary = {
        "case": grid.case.name, "outages": len(records),
        "infeasible_outages": sum(not r.feasible for r in records),
        "infeasible_branches": [list(b) for b in contingency.infeasible(records)],
        "ac_diverged_outages": sum(r.feasible and not r.converged for r in records),
        "median_abs_error": medians,
        "wall_time_s": time.perf_counter() - t0,
    }
    write_json(out, "summary.json", summary)
    if not usable:
        raise CliError(EXIT_EMPTY, "no feasible contingencies")
    return EXIT_OK


def cmd_lmdf(args) -> int:
    grid = _load(args.case)
    ref, _ = _reference(grid, args)
    model = assemble(grid, ref)
    j = _branch(grid, args.modified)
    monitored = [_branch(grid, b) for b in args.monitored] if args.monitored else \
        [k for k in range(grid.n_branch) if k != j and grid.status[k]]
    if not topoupdate.series_admittance(grid, j):
        raise CliError(EXIT_TOPOLOGY, "modified branch is out of service")
    try:
        result = [
            {"monitored": list(grid.labels[k]),
             "lmdf": topoupdate.lmdf(model, k, j, args.dg, args.db).matrix}
            for k in monitored
        ]
    except SingularUpdateError as exc:
        raise CliError(EXIT_TOPOLOGY, f"modification is singular: {exc}") from exc
    write_json(_outdir(args), "lmdf.json", {"modified": list(grid.labels[j]), "dg": args.dg, "db": args.db,
                                            "factors": result})
    return EXIT_OK


def read_assignment(path: str, bus: int | None = None) -> tuple[int, dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"assignment not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"assignment is not valid JSON: {exc}") from exc
    if isinstance(raw, list):
        raw = {"branches": raw}
    bus = raw.get("bus", bus) if bus is None else bus
    if bus is None:
        raise CliError(EXIT_INPUT, "split bus not given (--bus or \"bus\" in the assignment)")
    branches = {}
    for entry in raw.get("branches", []):
        label = tuple(int(v) for v in entry["branch"])
        branches[label if len(label) == 3 else label + (1,)] = entry["busbar"]
    return int(bus), {"branches": branches, "load": raw.get("load", "A"), "generation": raw.get("generation", "A")}


def _pair(a, b) -> str:
    return f"{_num(a)} | {_num(b)}"


def cmd_split(args) -> int:
    bus, assignment = read_assignment(args.assignment, args.bus)
    grid = _load(args.case)
    ref, ac_base = _reference(grid, args)
    model = assemble(grid, ref)
    try:
        ctx = topoupdate.pad_for_split(model, bus, assignment)
        handle = topoupdate.open_split(ctx)
    except (topoupdate.InvalidSplitError, KeyError) as exc:
        raise CliError(EXIT_TOPOLOGY, f"invalid split: {exc}") from exc
    except SingularUpdateError as exc:
        raise CliError(EXIT_TOPOLOGY, f"split is singular: {exc}") from exc
    mo = ctx.model_open
    go = mo.grid
    state = solve(mo, inverse=handle)
    rep, flows = recover(go, mo.ref, state)
    ac = _ac(go, args.tol, required=True, init=_lift_ac(ctx, ac_base) if ac_base is not None else "flat")
    pf, qf, pt, qt = branch_flows(go, ac)

    kv = _has_kv(go)
    busbars = {}
    for name, i in zip(("A", "B"), ctx.coupler):
        entry = {"bus": int(go.bus_ids[i]), "v_pu": [rep.v[i], ac.v[i]], "theta_rad": [rep.theta[i], ac.theta[i]],
                 "v_pu_pair": _pair(rep.v[i], ac.v[i]), "theta_rad_pair": _pair(rep.theta[i], ac.theta[i])}
        if kv:
            entry["v_kv_pair"] = _pair(rep.v[i] * go.base_kv[i], ac.v[i] * go.base_kv[i])
            entry["theta_deg_pair"] = _pair(np.degrees(rep.theta[i]), np.degrees(ac.theta[i]))
        busbars[name] = entry
    incident = sorted({int(k) for i in ctx.coupler for k in go.incident(i)})
    branch_report = []
    for k in incident:
        side = "from" if go.f[k] in ctx.coupler else "to"
        dcp = (flows.p_f[k], flows.q_f[k]) if side == "from" else (flows.p_t[k], flows.q_t[k])
        acv = (pf[k], qf[k]) if side == "from" else (pt[k], qt[k])
        branch_report.append({"branch": list(grid.labels[k]), "end": side,
                              "p_pu_pair": _pair(dcp[0], acv[0]), "q_pu_pair": _pair(dcp[1], acv[1]),
                              "p_pu": [dcp[0], acv[0]], "q_pu": [dcp[1], acv[1]]})
    report = {
        "case": grid.case.name, "bus": bus, "ref": args.ref, "order": "dcplus | ac",
        "busbars": busbars, "branches": branch_report,
        "max_abs_v_error_pu": float(max(abs(rep.v[i] - ac.v[i]) for i in ctx.coupler)),
        "max_abs_theta_error_deg": float(max(abs(np.degrees(rep.theta[i] - ac.theta[i])) for i in ctx.coupler)),
    }
    write_json(_outdir(args), "split_report.json", report)
    return EXIT_OK


def _lift_ac(ctx, ac: ACState) -> ACState:
    to_merged = np.array([ctx.bus_map[int(b)] for b in ctx.model_open.grid.bus_ids])
    go = ctx.model_open.grid
    return dataclasses.replace(ac, v=ac.v[to_merged], theta=ac.theta[to_merged], p=ac.p[to_merged],
                               q=ac.q[to_merged], n=go.n, m=go.m)


def merged_case(grid: IndexedGrid, keep: int, drop: int) -> GridCase:
    """Case with bus ``drop`` folded into ``keep``; branches between them vanish."""
    case = grid.case
    a = next(b for b in case.buses if b.id == keep)
    d = next(b for b in case.buses if b.id == drop)
    merged = dataclasses.replace(a, p_load=a.p_load + d.p_load, q_load=a.q_load + d.q_load,
                                 g_shunt=a.g_shunt + d.g_shunt, b_shunt=a.b_shunt + d.b_shunt)
    buses = tuple(merged if b.id == keep else b for b in case.buses if b.id != drop)
    branches = []
    for br in case.branches:
        f = keep if br.from_bus == drop else br.from_bus
        t = keep if br.to_bus == drop else br.to_bus
        if {f, t} == {keep}:
            continue
        branches.append(dataclasses.replace(br, from_bus=f, to_bus=t))
    gens = tuple(dataclasses.replace(g, bus=keep) if g.bus == drop else g for g in case.gens)
    return GridCase(f"{case.name}_merge{keep}_{drop}", case.base_mva, buses, tuple(branches), gens)


def cmd_merge(args) -> int:
    grid = _load(args.case)
    a, b = args.buses
    for bid in (a, b):
        if bid not in grid.pos:
            raise CliError(EXIT_INPUT, f"unknown bus {bid}")
        if grid.kind[grid.pos[bid]] != BusKind.PQ:
            raise CliError(EXIT_TOPOLOGY, f"bus {bid} is not a PQ bus")
    ref, _ = _reference(grid, args)
    f, t = grid.pos[a], grid.pos[b]
    v = ref.v_hat.copy()
    v[f] = v[t] = 0.5 * (v[f] + v[t])
    ref = ReferenceState(v, ref.theta_hat, ref.branch_theta, ref.kind)
    model = assemble(grid, ref)
    try:
        handle = topoupdate.close_switch(model.inverse, model, f, t, theta_e=0.0)
    except SingularUpdateError as exc:
        raise CliError(EXIT_TOPOLOGY, f"merge is singular: {exc}") from exc
    state = solve(model, inverse=handle)
    rep, _ = recover(grid, ref, state)
    gm = index_grid(merged_case(grid, a, b))
    ac = _ac(gm, args.tol, required=True)
    k = gm.pos[a]
    report = {
        "case": grid.case.name, "buses": [a, b], "order": "dcplus | ac",
        "v_pu_pair": {str(a): _pair(rep.v[f], ac.v[k]), str(b): _pair(rep.v[t], ac.v[k])},
        "theta_rad_pair": {str(a): _pair(rep.theta[f], ac.theta[k]), str(b): _pair(rep.theta[t], ac.theta[k])},
        "max_abs_v_error_pu": float(max(abs(rep.v[f] - ac.v[k]), abs(rep.v[t] - ac.v[k]))),
        "max_abs_theta_error_rad": float(max(abs(rep.theta[f] - ac.theta[k]), abs(rep.theta[t] - ac.theta[k]))),
    }
    write_json(_outdir(args), "merge_report.json", report)
    return EXIT_OK


def cmd_multi_outage(args) -> int:
    grid, ac, model, base = _hot_setup(args)
    ks = [_branch(grid, b) for b in args.branches]
    if len(set(ks)) != len(ks):
        raise CliError(EXIT_INPUT, "branches must be distinct")
    upd = topoupdate.multi_branch_delta(model, [(k, {"status": False}) for k in ks])
    try:
        _, state = topoupdate.apply_modification(model, upd, base, removed=ks)
    except SingularUpdateError as exc:
        raise CliError(EXIT_TOPOLOGY, f"outage set is infeasible: {exc}") from exc
    reduced = grid.with_status(ks)
    rep, _ = recover(reduced, model.ref, state)
    ac_out = _ac(reduced, args.tol, required=True, init=ac)
    dc = dc_solve(reduced)
    header, rows = _bus_rows(reduced, ac_out, rep, dc)
    out = _outdir(args)
    write_table(out, "busses", header, rows, args.format)
    write_json(out, "summary.json", {
        "case": grid.case.name, "outages": [list(grid.labels[k]) for k in ks], "rank": upd.rank,
        "max_abs_v_error": float(np.max(np.abs(rep.v - ac_out.v))),
        "max_abs_theta_error": float(np.max(np.abs(rep.theta - ac_out.theta))),
    })
    return EXIT_OK


def selftest(args) -> int:
    """Rebuild oracle: updated-inverse action vs dense re-inversion on random vectors."""
    grid = _load(args.case)
    ref, _ = _reference(grid, args)
    model = assemble(grid, ref)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    checked = 0
    for k in range(grid.n_branch):
        if not grid.status[k] or not connectivity_check(grid, [k]):
            continue
        handle = topoupdate.woodbury_update(model.inverse, topoupdate.outage_delta(model, k))
        dense = np.linalg.inv(assemble(grid.with_status([k]), ref).M)
        x = rng.standard_normal((model.dim, 5))
        exact = dense @ x
        worst = max(worst, float(np.max(np.abs(handle.solve(x) - exact)) / np.max(np.abs(exact))))
        checked += 1
        if checked >= args.selftest_limit:
            break
    ok = worst <= 1e-8
    print(f"selftest {'PASS' if ok else 'FAIL'}: {checked} outages, worst relative error {worst:.2e}")
    return EXIT_OK if ok else 1


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("case", help="MATPOWER case file")
    common.add_argument("--ref", choices=("cold", "hot"), default="hot", help="linearization reference")
    common.add_argument("--tol", type=float, default=1e-8, help="AC mismatch tolerance (pu)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--seed", type=int, default=0, help="seed for sampling and self-test vectors")
    common.add_argument("--selftest", action="store_true", help="run the rebuild oracle and exit")
    common.add_argument("--selftest-limit", type=int, default=50, help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dcplus", description="Voltage-sensitive linear load flow and contingency tools.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("loadflow", parents=[common], help="AC, DC+ and DC side by side").set_defaults(func=cmd_loadflow)

    n1 = sub.add_parser("n1", parents=[common], help="N-1 scan with error CDFs")
    n1.add_argument("--sample", type=int, default=0, help="random subset of outages (0 = all)")
    n1.add_argument("--workers", type=int, default=1)
    n1.set_defaults(func=cmd_n1)

    lm = sub.add_parser("lmdf", parents=[common], help="line modification distribution factors")
    lm.add_argument("--modified", required=True, help="FROM-TO[-ORDINAL]")
    lm.add_argument("--monitored", nargs="*", help="branches to report (default: all)")
    lm.add_argument("--dg", type=float, default=None, help="series conductance change (default: outage)")
    lm.add_argument("--db", type=float, default=None, help="series susceptance change (default: outage)")
    lm.set_defaults(func=cmd_lmdf)

    sp_ = sub.add_parser("split", parents=[common], help="busbar split vs AC")
    sp_.add_argument("assignment", help="JSON busbar assignment")
    sp_.add_argument("--bus", type=int, default=None)
    sp_.set_defaults(func=cmd_split)

    mg = sub.add_parser("merge", parents=[common], help="close a coupler between two PQ buses")
    mg.add_argument("--buses", type=int, nargs=2, required=True, metavar=("A", "B"))
    mg.set_defaults(func=cmd_merge)

    mo = sub.add_parser("multi-outage", parents=[common], help="simultaneous branch outages")
    mo.add_argument("--branches", nargs="+", required=True)
    mo.set_defaults(func=cmd_multi_outage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return selftest(args) if args.selftest else args.func(args)
    except CliError as exc:
        print(json.dumps({"error": str(exc), "exit_code": exc.code}), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
