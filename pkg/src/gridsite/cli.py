"""Command-line pipeline driver.

Subcommands: ``demand`` (census-block port allocation), ``prioritize``
(grid-impact ranking of candidate sites), ``solve`` (siting optimization
with certified gap), ``verify`` (independent nonlinear re-check of a
stored solution), and ``bench`` (presolve-on vs presolve-off comparison
over an instance suite).

Configuration comes from an optional JSON or TOML document plus flags;
flags win.  Exit codes are stable: 0 optimal/pass, 2 limit reached with an
incumbent, 3 infeasible/failed, 4 input error.

Outputs are byte-identical across repeated single-worker runs, except for
the ``timing`` block of solve reports and the ``time_s`` bench column.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import statistics
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .acpf import solve_powerflow
from .demand import (
    DemandInfeasibleError,
    allocate_ports,
    feeder_demand,
    read_blocks_csv,
    write_allocation_csv,
)
from .feeder import (
    CandidateSet,
    CandidateSite,
    FeederModel,
    assemble_admittance,
    load_feeder,
    select_candidates,
)
from .prioritize import GiConfig, prioritize_candidates
from .problem import BuildInfeasibleError, CostConfig
from .sbnb import SolverConfig, solve_placement, verify_ac_feasibility

EXIT_OK = 0
EXIT_LIMIT = 2
EXIT_INFEASIBLE = 3
EXIT_INPUT = 4


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep 2 for limit-reached
        raise InputError(message)


def _load_config(path) -> dict:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    if path.endswith(".toml"):
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class RunConfig:
    """Resolved settings for one command invocation (config file + flags)."""

    values: dict

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key, required=True, base=""):
        p = self.values.get(key)
        if p is None:
            if required:
                raise InputError(f"missing required input: --{key}")
            return None
        p = p if os.path.isabs(p) else os.path.join(base, p)
        if not os.path.exists(p):
            raise InputError(f"{key} file not found: {p}")
        return p

    def cost_config(self) -> CostConfig:
        try:
            return CostConfig(
                charger_kw=float(self.get("charger_kw", 7.2)),
                pf=float(self.get("pf", 0.985)),
                charger_cost=float(self.get("charger_cost", 8600.0)),
                budget=float(self.get("budget", 1e9)),
                service_radius_m=float(self.get("radius_m", 100.0)),
            )
        except ValueError as exc:
            raise InputError(str(exc)) from exc

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            gap_tol=float(self.get("gap_tol", 1e-6)),
            node_limit=int(self.get("node_limit", 200_000)),
            time_limit=(
                float(self.get("time_limit")) if self.get("time_limit") else None
            ),
            presolve=str(self.get("presolve", "sbt")),
            sbt_eps=float(self.get("sbt_eps", 1e-4)),
            sbt_max_sweeps=int(self.get("sbt_max_sweeps", 25)),
            sbt_integrality=str(self.get("integrality", "relaxed")),
            dev_bound=float(self.get("dev_bound", 0.2)),
            workers=int(self.get("workers", 1)),
            seed=int(self.get("seed", 0)),
        )

    def gi_config(self, s_base_kva: float) -> GiConfig:
        return GiConfig.from_kw(
            p_kw=float(self.get("delta_s_kw", 7.2)),
            pf=float(self.get("pf", 0.985)),
            s_base_kva=s_base_kva,
            gamma=float(self.get("gamma", 10.0)),
        )


def _resolve(args, extra_keys) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(_load_config(args.config))
    for key in extra_keys:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(values=values)


def _outdir(cfg: RunConfig) -> str:
    out = cfg.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload) -> None:
    from .acpf import _json_scalar

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_json_scalar)
        fh.write("\n")


def _geojson_point(lon, lat, props) -> dict:
    return {
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [lon, lat]},
        "properties": props,
    }


# -- candidate CSV interchange ---------------------------------------------------


def read_candidates_csv(path, model: FeederModel) -> CandidateSet:
    """Columns node,phase,land_cost,z_min,z_max with optional index/weight
    columns; coordinates come from the feeder nodes."""
    sites = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            node = model.node_by_id.get(row["node"])
            if node is None:
                raise InputError(f"candidate references unknown node {row['node']!r}")
            sites.append(
                CandidateSite(
                    node=row["node"],
                    phase=row["phase"],
                    land_cost=float(row.get("land_cost", 0.0) or 0.0),
                    z_min=int(row.get("z_min", 1) or 1),
                    z_max=int(row.get("z_max", 3) or 3),
                    latitude=node.latitude,
                    longitude=node.longitude,
                    f_v=float(row["f_v"]) if row.get("f_v") else math.nan,
                    f_c=float(row["f_c"]) if row.get("f_c") else math.nan,
                    f_g=float(row["f_g"]) if row.get("f_g") else math.nan,
                    weight=float(row["weight"]) if row.get("weight") else math.nan,
                )
            )
    return CandidateSet(sites=tuple(sites))


def write_ranked_csv(path, candidates: CandidateSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "phase", "f_v", "f_c", "f_g", "weight"])
        for s in candidates:
            w.writerow([s.node, s.phase, repr(s.f_v), repr(s.f_c), repr(s.f_g),
                        repr(s.weight)])


def candidates_geojson(candidates: CandidateSet, x=None, z=None) -> dict:
    feats = []
    for i, s in enumerate(candidates):
        props = {
            "node": s.node,
            "phase": s.phase,
            "weight": None if math.isnan(s.weight) else s.weight,
            "selected": int(x[i]) if x is not None else None,
            "chargers": int(z[i]) if z is not None else None,
        }
        feats.append(_geojson_point(s.longitude, s.latitude, props))
    return {"type": "FeatureCollection", "features": feats}


# -- subcommands -------------------------------------------------------------------


def cmd_demand(args) -> int:
    cfg = _resolve(args, ["blocks", "alpha", "budget_ports", "out"])
    blocks = read_blocks_csv(cfg.path("blocks"))
    alpha = float(cfg.get("alpha", 0.85))
    budget_ports = int(cfg.get("budget_ports", 0))
    try:
        allocation = allocate_ports(blocks, alpha, budget_ports)
    except DemandInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    d = feeder_demand(allocation, blocks)
    out = _outdir(cfg)
    write_allocation_csv(os.path.join(out, "allocation.csv"), allocation)
    _write_json(
        os.path.join(out, "demand.json"),
        {
            "alpha": alpha,
            "budget_ports": budget_ports,
            "objective": allocation.objective_value,
            "feeder_demand": d,
        },
    )
    print(f"allocated {budget_ports} ports over {len(blocks)} blocks; "
          f"feeder demand D = {d}")
    return EXIT_OK


def _feeder_and_candidates(cfg: RunConfig):
    model = load_feeder(cfg.path("feeder"))
    adm = assemble_admittance(model)
    base = solve_powerflow(model, adm=adm)
    if not base.converged:
        raise InputError("base-case power flow did not converge "
                         f"(residual {base.residual_max:.2e}, {base.failure})")
    cand_path = cfg.path("candidates", required=False)
    if cand_path:
        candidates = read_candidates_csv(cand_path, model)
    else:
        candidates = select_candidates(
            model, base, float(cfg.get("headroom", 0.0)),
            land_cost=float(cfg.get("land_cost", 25_000.0)),
            z_min=int(cfg.get("z_min", 1)), z_max=int(cfg.get("z_max", 3)),
            adm=adm,
        )
    return model, adm, base, candidates


def cmd_prioritize(args) -> int:
    cfg = _resolve(args, ["feeder", "candidates", "headroom", "delta_s_kw", "gamma",
                          "pf", "workers", "out"])
    model, adm, base, candidates = _feeder_and_candidates(cfg)
    if not len(candidates):
        print("no candidate locations", file=sys.stderr)
        return EXIT_INFEASIBLE
    gi = cfg.gi_config(model.base.s_kva)
    ranked = prioritize_candidates(
        model, base, candidates, gi, workers=int(cfg.get("workers", 1)), adm=adm
    )
    out = _outdir(cfg)
    write_ranked_csv(os.path.join(out, "ranked.csv"), ranked)
    from .suite import write_candidates_csv

    write_candidates_csv(os.path.join(out, "candidates_weighted.csv"), ranked)
    _write_json(os.path.join(out, "candidates.geojson"), candidates_geojson(ranked))
    print(f"ranked {len(ranked)} candidates; weights sum to "
          f"{float(np.sum(ranked.weights)):.12f}")
    return EXIT_OK


def _demand_value(cfg: RunConfig) -> int:
    if cfg.get("demand") is not None:
        return int(cfg.get("demand"))
    blocks_path = cfg.path("blocks", required=False)
    if blocks_path is None:
        raise InputError("either --demand or --blocks must be provided")
    blocks = read_blocks_csv(blocks_path)
    allocation = allocate_ports(
        blocks, float(cfg.get("alpha", 0.85)), int(cfg.get("budget_ports", 0))
    )
    return feeder_demand(allocation, blocks)


def cmd_solve(args) -> int:
    cfg = _resolve(args, [
        "feeder", "candidates", "blocks", "alpha", "budget_ports", "demand",
        "charger_kw", "pf", "charger_cost", "budget", "radius_m",
        "delta_s_kw", "gamma", "gap_tol", "node_limit", "time_limit", "presolve",
        "integrality", "sbt_eps", "workers", "seed", "out",
    ])
    model, adm, base, candidates = _feeder_and_candidates(cfg)
    if len(candidates) and not candidates.is_weighted():
        candidates = prioritize_candidates(
            model, base, candidates, cfg.gi_config(model.base.s_kva),
            workers=int(cfg.get("workers", 1)), adm=adm,
        )
    demand = _demand_value(cfg)
    cost = cfg.cost_config()
    try:
        solution = solve_placement(
            model, candidates, demand, cost, cfg.solver_config(), adm=adm
        )
    except BuildInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = _outdir(cfg)
    _write_json(os.path.join(out, "solution.json"), solution.to_dict(model))
    _write_json(
        os.path.join(out, "solution.geojson"),
        candidates_geojson(candidates, solution.x or None, solution.z or None),
    )
    if solution.objective is None:
        print(f"{solution.status}: no feasible deployment", file=sys.stderr)
        return EXIT_INFEASIBLE if solution.status == "infeasible" else EXIT_LIMIT
    print(
        f"{solution.status}: objective {solution.objective:.4f} "
        f"gap {solution.gap_pct}% nodes {solution.nodes_explored} "
        f"locations {solution.total_locations} chargers {solution.total_chargers}"
    )
    return EXIT_OK if solution.status == "optimal" else EXIT_LIMIT


def cmd_verify(args) -> int:
    cfg = _resolve(args, ["feeder", "solution", "charger_kw", "pf", "charger_cost",
                          "budget", "radius_m", "out"])
    model = load_feeder(cfg.path("feeder"))
    with open(cfg.path("solution"), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    sites_raw = payload.get("sites", [])
    sites = []
    for s in sites_raw:
        node = model.node_by_id.get(s["node"])
        if node is None:
            raise InputError(f"solution references unknown node {s['node']!r}")
        sites.append(
            CandidateSite(node=s["node"], phase=s["phase"], land_cost=0.0,
                          z_min=0, z_max=max(1, int(s["chargers"])),
                          latitude=node.latitude, longitude=node.longitude)
        )
    candidates = CandidateSet(sites=tuple(sites))
    x = [int(s["selected"]) for s in sites_raw]
    z = [int(s["chargers"]) for s in sites_raw]
    report = verify_ac_feasibility(model, candidates, x, z, cfg.cost_config())
    out = _outdir(cfg)
    _write_json(os.path.join(out, "verify.json"), report.to_dict())
    if report.state is not None:
        report.state.dump_json(model, os.path.join(out, "verify_state.json"))
    if report.passed:
        print(f"pass: residual {report.residual_max:.2e}, "
              f"margins v={report.limit_report.v_margin_min:.4f} "
              f"i={report.limit_report.i_margin_min:.4f}")
        return EXIT_OK
    print(f"fail: {report.reason}", file=sys.stderr)
    if report.limit_report is not None:
        for v in report.limit_report.voltage:
            print(f"  voltage {v.node}/{v.phase}: {v.magnitude:.4f} outside "
                  f"[{v.lower}, {v.upper}] by {v.amount:.4f}", file=sys.stderr)
        for t in report.limit_report.thermal:
            print(f"  thermal {t.transformer}/{t.phase}: {t.magnitude:.4f} over "
                  f"{t.rating:.4f} by {t.amount:.4f}", file=sys.stderr)
    return EXIT_INFEASIBLE


def cmd_bench(args) -> int:
    cfg = _resolve(args, ["suite", "gap_tol", "node_limit", "time_limit", "workers",
                          "seed", "out"])
    suite_dir = cfg.path("suite")
    cases = sorted(
        os.path.join(suite_dir, d) for d in os.listdir(suite_dir)
        if os.path.isfile(os.path.join(suite_dir, d, "config.json"))
    )
    if not cases:
        raise InputError(f"no case directories with config.json under {suite_dir}")
    out = _outdir(cfg)
    rows = []
    ratios = []
    for case_dir in cases:
        case_cfg = RunConfig(values=_load_config(os.path.join(case_dir, "config.json")))
        name = case_cfg.get("case", os.path.basename(case_dir))
        try:
            model = load_feeder(os.path.join(case_dir, case_cfg.get("feeder")))
            adm = assemble_admittance(model)
            candidates = read_candidates_csv(
                os.path.join(case_dir, case_cfg.get("candidates")), model
            )
            demand = int(case_cfg.get("demand", 0))
            cost = case_cfg.cost_config()
            nodes = {}
            for approach, presolve in (("MIBLP", "none"), ("S-MIBLP", "sbt")):
                solver = cfg.solver_config()
                solver.presolve = presolve
                sol = solve_placement(model, candidates, demand, cost, solver, adm=adm)
                elapsed = sum(sol.timings.values())
                if sol.objective is None:
                    rows.append([name, approach, "", f"{elapsed:.3f}",
                                 sol.nodes_explored, sol.status, 0, 0])
                else:
                    gap_flag = sol.gap_pct if sol.status == "optimal" else "limit"
                    rows.append([
                        name, approach, f"{sol.objective:.4f}", f"{elapsed:.3f}",
                        sol.nodes_explored, gap_flag,
                        sol.total_locations, sol.total_chargers,
                    ])
                nodes[approach] = sol.nodes_explored
            if nodes.get("MIBLP", 0) > 0:
                ratios.append(nodes["S-MIBLP"] / nodes["MIBLP"])
        except Exception as exc:  # record the failure, keep benching
            rows.append([name, "error", "", "", "", f"error:{exc}", "", ""])
    path = os.path.join(out, "bench.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "approach", "objective", "time_s", "sbnb_nodes",
                    "gap_pct", "total_evcs", "total_chargers"])
        w.writerows(rows)
    if ratios:
        print(f"benched {len(cases)} cases; median node ratio "
              f"S-MIBLP/MIBLP = {statistics.median(ratios):.3f}; "
              f"min = {min(ratios):.3f}")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="gridsite", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridsite {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON or TOML config; flags override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output directory (default .)")

    sp = sub.add_parser("demand", help="allocate charger ports across census blocks")
    common(sp)
    sp.add_argument("--blocks", help="block CSV: id,mu,eps,cap,lat,lon,in_feeder")
    sp.add_argument("--alpha", type=float, help="equity weighting in [0,1]")
    sp.add_argument("--budget-ports", dest="budget_ports", type=int)
    sp.set_defaults(func=cmd_demand)

    sp = sub.add_parser("prioritize", help="rank candidate sites by grid impact")
    common(sp)
    sp.add_argument("--feeder")
    sp.add_argument("--candidates")
    sp.add_argument("--headroom", type=float)
    sp.add_argument("--delta-s-kw", dest="delta_s_kw", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--pf", type=float)
    sp.set_defaults(func=cmd_prioritize)

    sp = sub.add_parser("solve", help="site stations to a certified optimality gap")
    common(sp)
    sp.add_argument("--feeder")
    sp.add_argument("--candidates")
    sp.add_argument("--blocks")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--budget-ports", dest="budget_ports", type=int)
    sp.add_argument("--demand", type=int)
    sp.add_argument("--charger-kw", dest="charger_kw", type=float)
    sp.add_argument("--pf", type=float)
    sp.add_argument("--charger-cost", dest="charger_cost", type=float)
    sp.add_argument("--budget", type=float)
    sp.add_argument("--radius-m", dest="radius_m", type=float)
    sp.add_argument("--delta-s-kw", dest="delta_s_kw", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--gap-tol", dest="gap_tol", type=float)
    sp.add_argument("--node-limit", dest="node_limit", type=int)
    sp.add_argument("--time-limit", dest="time_limit", type=float)
    sp.add_argument("--presolve", choices=["sbt", "none"])
    sp.add_argument("--integrality", choices=["relaxed", "exact"])
    sp.add_argument("--sbt-eps", dest="sbt_eps", type=float)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("verify", help="independently re-verify a stored solution")
    common(sp)
    sp.add_argument("--feeder")
    sp.add_argument("--solution", help="solution.json from a solve run")
    sp.add_argument("--charger-kw", dest="charger_kw", type=float)
    sp.add_argument("--pf", type=float)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="compare presolve on/off over a suite")
    common(sp)
    sp.add_argument("--suite", help="directory of case subdirectories")
    sp.add_argument("--gap-tol", dest="gap_tol", type=float)
    sp.add_argument("--node-limit", dest="node_limit", type=int)
    sp.add_argument("--time-limit", dest="time_limit", type=float)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
