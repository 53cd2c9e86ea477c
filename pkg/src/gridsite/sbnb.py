"""Solver engine: presolve by sequential bound tightening, spatial
branch-and-bound with certified gaps, and nonlinear feasibility gating.

Every incumbent the search accepts is first re-solved with the full
nonlinear power flow and checked against the voltage band and transformer
ratings, so a returned solution is AC-feasible by construction.  The
presolve repeatedly minimizes and maximizes each voltage-deviation
variable over the McCormick-relaxed region intersected with an objective
cut from a rounding heuristic, shrinking the factor boxes the relaxation
is built on; the search then branches on fractional binaries (by
descending priority weight), fractional charger counts, and finally on the
factor box of the most violated bilinear term.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acpf import InjectionOverlay, PowerFlowState, check_limits, solve_powerflow
from .feeder import Admittance, CandidateSet, FeederModel, assemble_admittance
from .lp import INFEASIBLE, OPTIMAL, prepare_rows, solve_milp, solve_prepared
from .problem import (
    CostConfig,
    DecomposedProblem,
    Row,
    anti_clustering_constraints,
    make_row,
)

log = logging.getLogger(__name__)

RING_DIRECTIONS = 12  # static outer polygon for each thermal circle


@dataclass
class SolverConfig:
    gap_tol: float = 1e-6
    node_limit: int = 200_000
    time_limit: float | None = None
    presolve: str = "sbt"  # "sbt" or "none"
    sbt_eps: float = 1e-4
    sbt_max_sweeps: int = 25
    sbt_integrality: str = "relaxed"  # "relaxed" or "exact"
    dev_bound: float = 0.2
    int_tol: float = 1e-6
    bl_tol: float = 1e-7
    quad_tol: float = 1e-7
    workers: int = 1
    pf_tolerance: float = 1e-8
    limit_tol: float = 1e-6
    incumbent_retries: int = 8
    seed: int = 0


@dataclass
class FeasibilityReport:
    passed: bool
    reason: str  # "ok", "nonconvergence", or "limit_violation"
    residual_max: float
    limit_report: object | None
    state: PowerFlowState | None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reason": self.reason,
            "residual_max": self.residual_max,
            "limits": self.limit_report.to_dict() if self.limit_report else None,
        }


def charger_overlay(candidates: CandidateSet, z, rating_pu: float, tan_phi: float) -> InjectionOverlay:
    draws = {}
    for pos, site in enumerate(candidates):
        p = float(z[pos]) * rating_pu
        if p:
            draws[(site.node, site.phase)] = complex(p, p * tan_phi)
    return InjectionOverlay(draws=draws)


def verify_ac_feasibility(
    model: FeederModel,
    candidates: CandidateSet,
    x,
    z,
    cost: CostConfig,
    tolerance: float = 1e-8,
    limit_tol: float = 1e-6,
    adm: Admittance | None = None,
) -> FeasibilityReport:
    """Fix the charger draws implied by (x, z), run the full nonlinear power
    flow, and check the voltage band and thermal ratings."""
    if adm is None:
        adm = assemble_admittance(model)
    rating = cost.rating_pu(model.base.s_kva)
    overlay = charger_overlay(candidates, z, rating, cost.tan_phi)
    state = solve_powerflow(model, overlay, tolerance=tolerance, adm=adm)
    if not state.converged:
        return FeasibilityReport(
            passed=False, reason="nonconvergence", residual_max=state.residual_max,
            limit_report=None, state=state,
        )
    report = check_limits(model, state, adm=adm, tol=limit_tol)
    return FeasibilityReport(
        passed=report.passed,
        reason="ok" if report.passed else "limit_violation",
        residual_max=state.residual_max,
        limit_report=report,
        state=state,
    )


# -- static relaxation rows -----------------------------------------------------


def ring_cuts(quads) -> list:
    """Outer polygonal approximation of each thermal circle (globally valid)."""
    rows = []
    for q in quads:
        for k in range(RING_DIRECTIONS):
            th = 2.0 * math.pi * k / RING_DIRECTIONS
            rows.append(
                make_row([(q.x, math.cos(th)), (q.y, math.sin(th))], "L", q.limit,
                         f"{q.name}:ring{k}")
            )
    return rows


def tangent_cut(q, a: float, b: float) -> Row:
    """Supporting cut of the circle at the ray through the violating point."""
    r = math.hypot(a, b)
    return make_row([(q.x, a / r), (q.y, b / r)], "L", q.limit, f"{q.name}:tan")


# -- local incumbent heuristic ----------------------------------------------------


@dataclass
class Incumbent:
    x: np.ndarray
    z: np.ndarray
    objective: float
    state: PowerFlowState


def _greedy_assignment(order, sites, conflicts, demand, cost):
    """Pick sites in the given order under anti-clustering and budget, then
    raise charger counts toward the budget in weight order."""
    selected: list = []
    spent = 0.0
    for pos in order:
        site = sites[pos]
        if any((min(pos, q), max(pos, q)) in conflicts for q in selected):
            continue
        add = site.land_cost + cost.charger_cost * site.z_min
        if spent + add > cost.budget + 1e-9:
            continue
        selected.append(pos)
        spent += add
    z = np.zeros(len(sites), dtype=int)
    for pos in selected:
        z[pos] = sites[pos].z_min
    budget_left = cost.budget - spent
    for pos in sorted(selected, key=lambda p: (-sites[p].weight, p)):
        while z[pos] < sites[pos].z_max and budget_left >= cost.charger_cost - 1e-9:
            z[pos] += 1
            budget_left -= cost.charger_cost
    x = np.zeros(len(sites), dtype=int)
    x[selected] = 1
    return x, z


def local_incumbent(
    dec: DecomposedProblem,
    config: SolverConfig,
    static_rows=None,
) -> Incumbent | None:
    """AC-verified feasible point by rounding the relaxation greedily.

    Solves the root McCormick LP once (an infeasible relaxation proves the
    program infeasible, so no incumbent exists), then selects sites by
    descending priority weight, fills charger counts toward the budget, and
    repairs against the nonlinear check by shedding chargers and sites.
    Rotating the start of the ranking gives bounded retries.
    """
    model, candidates, cost = dec.model, dec.candidates, dec.cost
    sites = list(candidates)
    if static_rows is None:
        static_rows = list(dec.rows) + ring_cuts(dec.quads)
    lb, ub = dec.vars.bounds_arrays()
    mc = dec.mccormick_rows(lb, ub)
    prep = prepare_rows(static_rows + mc, dec.n_vars)
    root = solve_prepared(prep, dec.objective, lb, ub, maximize=True)
    if root.status == INFEASIBLE:
        return None

    def attempt(x, z):
        if z.sum() < dec.demand:
            return None
        rep = verify_ac_feasibility(
            model, candidates, x, z, cost,
            tolerance=config.pf_tolerance, limit_tol=config.limit_tol, adm=dec.adm,
        )
        if rep.passed:
            obj = float(sum(sites[p].weight * z[p] for p in range(len(sites))))
            return Incumbent(x=x.copy(), z=z.copy(), objective=obj, state=rep.state)
        return None

    conflicts = set(anti_clustering_constraints(candidates, cost.service_radius_m))
    ranked = sorted(range(len(sites)), key=lambda p: (-sites[p].weight, p))
    rotations = min(len(sites), config.incumbent_retries) if sites else 0
    for rot in range(max(rotations, 1) if sites else 0):
        order = ranked[rot:] + ranked[:rot]
        x, z = _greedy_assignment(order, sites, conflicts, dec.demand, cost)
        while True:
            found = attempt(x, z)
            if found is not None:
                return found
            # shed the largest deployment first, then whole sites
            droppable = [p for p in np.flatnonzero(x) if z[p] > sites[p].z_min]
            if droppable and z.sum() - 1 >= dec.demand:
                p = max(droppable, key=lambda p: (z[p], -sites[p].weight, -p))
                z[p] -= 1
                continue
            active = np.flatnonzero(x)
            shrinkable = [p for p in active if z.sum() - z[p] >= dec.demand]
            if len(active) > 1 and shrinkable:
                p = min(shrinkable, key=lambda p: (sites[p].weight, -p))
                x[p] = 0
                z[p] = 0
                continue
            break
    if dec.demand == 0:
        empty = attempt(np.zeros(len(sites), dtype=int), np.zeros(len(sites), dtype=int))
        if empty is not None:
            return empty
    return None


# -- sequential bound tightening ---------------------------------------------------


@dataclass
class SbtState:
    lower: np.ndarray
    upper: np.ndarray
    prev_lower: np.ndarray
    prev_upper: np.ndarray
    f_nlp: float | None
    eps: float
    sweeps: int = 0
    converged: bool = False
    certificate: str | None = None  # "incumbent_optimal" or "infeasible"
    history: list = field(default_factory=list)  # (lower, upper) per sweep
    deltas: list = field(default_factory=list)  # (l2 lower, l2 upper) per sweep
    log: list = field(default_factory=list)  # per-variable tightening amounts

    def width_reduction(self) -> float:
        w0 = self.history[0][1] - self.history[0][0]
        w1 = self.upper - self.lower
        total = float(np.sum(w0))
        return float(1.0 - np.sum(w1) / total) if total > 0 else 0.0

    def stats(self) -> dict:
        return {
            "sweeps": self.sweeps,
            "converged": self.converged,
            "certificate": self.certificate,
            "f_nlp": self.f_nlp,
            "width_reduction": self.width_reduction() if self.history else 0.0,
            "deltas": [list(d) for d in self.deltas],
        }


@dataclass
class SbtResult:
    state: SbtState
    lb: np.ndarray | None  # propagated full bound vectors
    ub: np.ndarray | None


def sbt_presolve(
    dec: DecomposedProblem,
    f_nlp: float | None,
    eps: float = 1e-4,
    max_sweeps: int = 25,
    integrality: str = "relaxed",
    workers: int = 1,
    static_rows=None,
    pad: float = 1e-7,
    min_width: float = 1e-5,
) -> SbtResult:
    """Sweep min/max subproblems over every deviation variable until the
    bound vectors settle.

    Each sweep solves, over the McCormick relaxation built from the
    previous sweep's boxes (plus the objective cut when an incumbent
    exists), two subproblems per deviation variable; the solved extremes,
    padded by a feasibility margin, become the new boxes and dependent
    bounds are re-derived through the functional chains.  Bounds never
    widen.  An infeasible subproblem certifies that no point beats the
    incumbent, which ends the solve outright.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if static_rows is None:
        static_rows = list(dec.rows) + ring_cuts(dec.quads)
    rows = list(static_rows)
    if f_nlp is not None:
        cut = make_row(
            [(i, -float(dec.objective[i])) for i in np.flatnonzero(dec.objective)],
            "L", -(f_nlp - 1e-9), "objective_cut",
        )
        rows.append(cut)

    d_idx = dec.d_idx
    d_lo, d_hi = dec.initial_dev_box()
    state = SbtState(
        lower=d_lo.copy(), upper=d_hi.copy(),
        prev_lower=d_lo.copy(), prev_upper=d_hi.copy(),
        f_nlp=f_nlp, eps=eps,
    )
    state.history.append((d_lo.copy(), d_hi.copy()))
    int_idx = dec.integer_indices()

    for sweep in range(max_sweeps):
        lb, ub = dec.propagate_bounds(d_lo, d_hi)
        mc = dec.mccormick_rows(lb, ub)
        prep = prepare_rows(rows + mc, dec.n_vars)

        def extreme(task):
            i, sense = task
            c = np.zeros(dec.n_vars)
            c[d_idx[i]] = 1.0
            if integrality == "exact":
                res = solve_milp(c, rows + mc, lb, ub, int_idx, maximize=(sense == "hi"))
            else:
                res = solve_prepared(prep, c, lb, ub, maximize=(sense == "hi"))
            return res

        tasks = [(i, s) for i in range(len(d_idx)) for s in ("lo", "hi")]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(extreme, tasks))
        else:
            results = [extreme(t) for t in tasks]

        new_lo, new_hi = d_lo.copy(), d_hi.copy()
        for (i, sense), res in zip(tasks, results):
            if res.status != OPTIMAL:
                state.certificate = (
                    "incumbent_optimal" if f_nlp is not None else "infeasible"
                )
                state.sweeps = sweep
                return SbtResult(state=state, lb=None, ub=None)
            if sense == "lo":
                new_lo[i] = min(max(res.objective - pad, d_lo[i]), d_hi[i])
            else:
                new_hi[i] = max(min(res.objective + pad, d_hi[i]), d_lo[i])
        # keep every box comfortably wider than the LP tolerances: a
        # degenerate point box turns the equality chains numerically empty
        narrow = new_hi - new_lo < min_width
        if np.any(narrow):
            mid = 0.5 * (new_lo[narrow] + new_hi[narrow])
            new_lo[narrow] = np.maximum(d_lo[narrow], mid - 0.5 * min_width)
            new_hi[narrow] = np.minimum(d_hi[narrow], mid + 0.5 * min_width)
        dl = float(np.linalg.norm(new_lo - d_lo))
        du = float(np.linalg.norm(new_hi - d_hi))
        state.log.append(
            {"sweep": sweep + 1, "tightened": float(np.sum((new_lo - d_lo) + (d_hi - new_hi)))}
        )
        state.prev_lower, state.prev_upper = d_lo, d_hi
        d_lo, d_hi = new_lo, new_hi
        state.lower, state.upper = d_lo.copy(), d_hi.copy()
        state.history.append((d_lo.copy(), d_hi.copy()))
        state.deltas.append((dl, du))
        state.sweeps = sweep + 1
        if dl <= eps and du <= eps:
            state.converged = True
            break
    lb, ub = dec.propagate_bounds(d_lo, d_hi)
    return SbtResult(state=state, lb=lb, ub=ub)


# -- spatial branch and bound -------------------------------------------------------


@dataclass
class BnbNode:
    lb: np.ndarray
    ub: np.ndarray
    bound: float  # inherited relaxation bound (parent's LP objective)
    depth: int
    seq: int
    lineage: tuple


@dataclass
class BnbOutcome:
    status: str  # "optimal", "limit", "infeasible", "limit_no_incumbent"
    incumbent: Incumbent | None
    bound: float
    gap: float
    nodes: int


def _fractional(values, idx, tol):
    out = []
    for i in idx:
        v = values[i]
        if abs(v - round(v)) > tol:
            out.append(i)
    return out


def branch_and_bound(
    dec: DecomposedProblem,
    lb0: np.ndarray,
    ub0: np.ndarray,
    config: SolverConfig,
    incumbent: Incumbent | None = None,
    static_rows=None,
) -> BnbOutcome:
    """Best-bound search over integer dichotomies and factor-box splits.

    Integral relaxation points are accepted as incumbents only after the
    full nonlinear verification passes; fully fixed discrete points that
    fail it prune their node exactly.
    """
    model, candidates, cost = dec.model, dec.candidates, dec.cost
    sites = list(candidates)
    weights = np.array([s.weight for s in sites]) if sites else np.zeros(0)
    if static_rows is None:
        static_rows = list(dec.rows) + ring_cuts(dec.quads)
    tangent_pool: list = []
    x_idx = np.array(dec.varmap.x, dtype=int)
    z_idx = np.array(dec.varmap.z, dtype=int)

    best: Incumbent | None = incumbent
    best_obj = incumbent.objective if incumbent else -math.inf
    verified_cache: dict = {}
    if incumbent is not None:
        verified_cache[(tuple(incumbent.x), tuple(incumbent.z))] = incumbent

    counter = itertools.count()
    heap: list = []
    root = BnbNode(lb=lb0.copy(), ub=ub0.copy(), bound=math.inf, depth=0,
                   seq=next(counter), lineage=())
    heapq.heappush(heap, (-root.bound, -root.depth, root.seq, root))
    nodes = 0
    start = time.perf_counter()
    status = "optimal"

    def gap_of(bound):
        if best_obj == -math.inf:
            return math.inf
        return max(0.0, bound - best_obj) / max(1.0, abs(best_obj))

    def verify(xv, zv):
        key = (tuple(int(v) for v in xv), tuple(int(v) for v in zv))
        if key in verified_cache:
            return verified_cache[key]
        rep = verify_ac_feasibility(
            model, candidates, key[0], key[1], cost,
            tolerance=config.pf_tolerance, limit_tol=config.limit_tol, adm=dec.adm,
        )
        inc = None
        if rep.passed:
            obj = float(np.dot(weights, key[1])) if sites else 0.0
            inc = Incumbent(
                x=np.array(key[0]), z=np.array(key[1]), objective=obj, state=rep.state
            )
        verified_cache[key] = inc
        return inc

    final_bound = best_obj
    while heap:
        neg_bound, _, _, node = heapq.heappop(heap)
        node_key = -neg_bound
        final_bound = max(best_obj, node_key) if node_key < math.inf else node_key
        if node_key <= best_obj + 1e-12:
            final_bound = best_obj
            break
        if best_obj > -math.inf and gap_of(min(node_key, final_bound)) <= config.gap_tol:
            break
        if nodes >= config.node_limit or (
            config.time_limit is not None
            and time.perf_counter() - start > config.time_limit
        ):
            status = "limit" if best is not None else "limit_no_incumbent"
            break
        nodes += 1

        mc = dec.mccormick_rows(node.lb, node.ub)
        res = None
        for _ in range(10):  # lazy thermal tangent refinement
            prep = prepare_rows(static_rows + tangent_pool + mc, dec.n_vars)
            res = solve_prepared(prep, dec.objective, node.lb, node.ub, maximize=True)
            if res.status != OPTIMAL:
                break
            worst, worst_q = 0.0, None
            for q in dec.quads:
                v = res.x[q.x] ** 2 + res.x[q.y] ** 2 - q.limit**2
                if v > worst:
                    worst, worst_q = v, q
            if worst_q is None or worst <= config.quad_tol:
                break
            tangent_pool.append(tangent_cut(worst_q, res.x[worst_q.x], res.x[worst_q.y]))
        if res is None or res.status != OPTIMAL:
            continue  # infeasible region: prune
        node_bound = min(res.objective, node.bound)
        if node_bound <= best_obj + 1e-12:
            continue

        def push(clb, cub, tag):
            child = BnbNode(lb=clb, ub=cub, bound=node_bound, depth=node.depth + 1,
                            seq=next(counter), lineage=node.lineage + (tag,))
            heapq.heappush(heap, (-child.bound, -child.depth, child.seq, child))

        # 1) fractional binaries, highest priority weight first
        frac_x = _fractional(res.x, x_idx, config.int_tol)
        if frac_x:
            i = max(frac_x, key=lambda i: (weights[list(x_idx).index(i)], -i))
            for val in (1.0, 0.0):
                clb, cub = node.lb.copy(), node.ub.copy()
                clb[i] = cub[i] = val
                push(clb, cub, f"x{i}={int(val)}")
            continue
        # 2) fractional charger counts
        frac_z = _fractional(res.x, z_idx, config.int_tol)
        if frac_z:
            i = max(frac_z, key=lambda i: (weights[list(z_idx).index(i)], -i))
            v = res.x[i]
            lo_hi = (
                (node.lb[i], math.floor(v)),
                (math.floor(v) + 1.0, node.ub[i]),
            )
            for lo, hi in lo_hi:
                if lo > hi:
                    continue
                clb, cub = node.lb.copy(), node.ub.copy()
                clb[i], cub[i] = lo, hi
                push(clb, cub, f"z{i}in[{lo},{hi}]")
            continue
        # integral point: check the bilinear registry
        worst_v, worst_t = 0.0, None
        for term in dec.bilinear:
            v = abs(res.x[term.s] - res.x[term.a] * res.x[term.b])
            if v > worst_v:
                worst_v, worst_t = v, term
        if worst_v <= config.bl_tol:
            xv = np.rint(res.x[x_idx]) if len(x_idx) else np.zeros(0)
            zv = np.rint(res.x[z_idx]) if len(z_idx) else np.zeros(0)
            inc = verify(xv, zv)
            if inc is not None:
                if inc.objective > best_obj:
                    best, best_obj = inc, inc.objective
                if node_bound <= best_obj + 1e-9:
                    continue
            # nonlinear check failed (or bound persists): enumerate the
            # remaining discrete freedom in this box
            unfixed = [
                i for i in np.concatenate([x_idx, z_idx]).astype(int)
                if node.ub[i] - node.lb[i] > 0.5
            ]
            if not unfixed:
                continue  # unique discrete point is AC-infeasible: prune
            i = int(unfixed[0])
            v = float(np.rint(res.x[i]))
            children = [(v, v)]
            if v - 1.0 >= node.lb[i]:
                children.append((node.lb[i], v - 1.0))
            if v + 1.0 <= node.ub[i]:
                children.append((v + 1.0, node.ub[i]))
            for lo, hi in children:
                clb, cub = node.lb.copy(), node.ub.copy()
                clb[i], cub[i] = lo, hi
                push(clb, cub, f"fix{i}:{lo}-{hi}")
            continue
        # 3) spatial branch on the widest factor of the worst term
        wa = node.ub[worst_t.a] - node.lb[worst_t.a]
        wb = node.ub[worst_t.b] - node.lb[worst_t.b]
        fac = worst_t.a if (worst_t.a == worst_t.b or wa >= wb) else worst_t.b
        lo, hi = node.lb[fac], node.ub[fac]
        width = hi - lo
        if width < 1e-9:
            log.warning("bilinear term %s violated %.2e over a point box; accepting",
                        worst_t.name, worst_v)
            continue
        point = min(max(res.x[fac], lo + 0.2 * width), hi - 0.2 * width)
        for clo, chi in ((lo, point), (point, hi)):
            clb, cub = node.lb.copy(), node.ub.copy()
            clb[fac], cub[fac] = clo, chi
            push(clb, cub, f"s{fac}@{point:.4g}")
        continue

    if not heap and status == "optimal":
        final_bound = best_obj
    if best is None:
        return BnbOutcome(
            status="infeasible" if status == "optimal" else status,
            incumbent=None, bound=final_bound, gap=math.inf, nodes=nodes,
        )
    return BnbOutcome(
        status=status, incumbent=best, bound=final_bound,
        gap=gap_of(final_bound), nodes=nodes,
    )


# -- end-to-end solve ----------------------------------------------------------------


@dataclass
class PlacementSolution:
    """Certified siting result with its nonlinear feasibility evidence."""

    status: str  # "optimal", "limit", "infeasible", "limit_no_incumbent"
    candidates: CandidateSet
    x: list
    z: list
    objective: float | None
    bound: float | None
    gap: float | None
    nodes_explored: int
    f_nlp: float | None
    sbt_stats: dict | None
    report: FeasibilityReport | None
    state: PowerFlowState | None
    timings: dict

    @property
    def gap_pct(self) -> str:
        if self.gap is None:
            return ""
        return f"{self.gap * 100.0:.4f}"

    @property
    def total_locations(self) -> int:
        return int(sum(self.x)) if self.x else 0

    @property
    def total_chargers(self) -> int:
        return int(sum(self.z)) if self.z else 0

    def to_dict(self, model: FeederModel | None = None) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "bound": self.bound,
            "gap": self.gap,
            "gap_pct": self.gap_pct,
            "nodes_explored": self.nodes_explored,
            "f_nlp": self.f_nlp,
            "total_locations": self.total_locations,
            "total_chargers": self.total_chargers,
            "sbt": self.sbt_stats,
            "sites": [
                {
                    "node": s.node,
                    "phase": s.phase,
                    "selected": int(self.x[i]),
                    "chargers": int(self.z[i]),
                    "weight": s.weight,
                }
                for i, s in enumerate(self.candidates)
            ],
            "verification": self.report.to_dict() if self.report else None,
            "timing": self.timings,
        }
        if model is not None and self.state is not None:
            out["voltages"] = self.state.to_dict(model)["voltages"]
        return out


def _validate_solution(dec: DecomposedProblem, x, z) -> None:
    sites = list(dec.candidates)
    for pos, site in enumerate(sites):
        if not (x[pos] * site.z_min <= z[pos] <= x[pos] * site.z_max):
            raise AssertionError(f"deployment window violated at {site.node}/{site.phase}")
    if sum(z) < dec.demand:
        raise AssertionError("demand constraint violated")
    spent = sum(
        sites[p].land_cost * x[p] + dec.cost.charger_cost * z[p]
        for p in range(len(sites))
    )
    if spent > dec.cost.budget + 1e-6:
        raise AssertionError("budget constraint violated")
    for i, j in anti_clustering_constraints(dec.candidates, dec.cost.service_radius_m):
        if x[i] + x[j] > 1:
            raise AssertionError(
                f"anti-clustering violated between {sites[i].node} and {sites[j].node}"
            )


def solve_placement(
    model: FeederModel,
    candidates: CandidateSet,
    demand: int,
    cost: CostConfig,
    config: SolverConfig | None = None,
    adm: Admittance | None = None,
) -> PlacementSolution:
    """Build, lift, decompose, presolve (optionally), search, and verify."""
    from .problem import build_minlp, filter_and_decompose, lift_to_miblp

    if config is None:
        config = SolverConfig()
    timings: dict = {}
    t0 = time.perf_counter()
    spec = build_minlp(model, candidates, demand, cost, adm=adm)
    miblp = lift_to_miblp(spec)
    dec = filter_and_decompose(miblp, model.slack, dev_bound=config.dev_bound)
    static_rows = list(dec.rows) + ring_cuts(dec.quads)
    timings["build"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    inc = local_incumbent(dec, config, static_rows=static_rows)
    timings["incumbent"] = time.perf_counter() - t0

    sbt_stats = None
    lb, ub = dec.vars.bounds_arrays()
    t0 = time.perf_counter()
    if config.presolve == "sbt":
        sbt = sbt_presolve(
            dec,
            inc.objective if inc else None,
            eps=config.sbt_eps,
            max_sweeps=config.sbt_max_sweeps,
            integrality=config.sbt_integrality,
            workers=config.workers,
            static_rows=static_rows,
        )
        sbt_stats = sbt.state.stats()
        if sbt.state.certificate == "incumbent_optimal":
            timings["presolve"] = time.perf_counter() - t0
            return _finalize(model, dec, config,
                             BnbOutcome("optimal", inc, inc.objective, 0.0, 0),
                             sbt_stats, timings, f_nlp=inc.objective if inc else None)
        if sbt.state.certificate == "infeasible":
            timings["presolve"] = time.perf_counter() - t0
            return _finalize(model, dec, config,
                             BnbOutcome("infeasible", None, -math.inf, math.inf, 0),
                             sbt_stats, timings, f_nlp=None)
        lb, ub = sbt.lb, sbt.ub
    timings["presolve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    outcome = branch_and_bound(dec, lb, ub, config, incumbent=inc,
                               static_rows=static_rows)
    timings["solve"] = time.perf_counter() - t0
    return _finalize(model, dec, config, outcome, sbt_stats, timings,
                     f_nlp=inc.objective if inc else None)


def _finalize(model, dec, config, outcome: BnbOutcome, sbt_stats, timings,
              f_nlp=None) -> PlacementSolution:
    t0 = time.perf_counter()
    if outcome.incumbent is None:
        timings["verify"] = 0.0
        return PlacementSolution(
            status=outcome.status, candidates=dec.candidates, x=[], z=[],
            objective=None, bound=None, gap=None, nodes_explored=outcome.nodes,
            f_nlp=f_nlp, sbt_stats=sbt_stats, report=None, state=None,
            timings=timings,
        )
    inc = outcome.incumbent
    _validate_solution(dec, inc.x, inc.z)
    report = verify_ac_feasibility(
        model, dec.candidates, inc.x, inc.z, dec.cost,
        tolerance=config.pf_tolerance, limit_tol=config.limit_tol, adm=dec.adm,
    )
    timings["verify"] = time.perf_counter() - t0
    if not report.passed:  # pragma: no cover - acceptance is gated upstream
        raise AssertionError("returned incumbent failed independent verification")
    weights = np.array([s.weight for s in dec.candidates])
    objective = float(np.dot(weights, inc.z)) if len(weights) else 0.0
    return PlacementSolution(
        status=outcome.status, candidates=dec.candidates,
        x=[int(v) for v in inc.x], z=[int(v) for v in inc.z],
        objective=objective, bound=float(outcome.bound),
        gap=float(outcome.gap), nodes_explored=outcome.nodes,
        f_nlp=f_nlp,
        sbt_stats=sbt_stats, report=report, state=report.state, timings=timings,
    )
