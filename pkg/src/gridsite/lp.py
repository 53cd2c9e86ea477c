"""Linear-program plumbing over scipy's HiGHS backend.

The solver engine feeds every relaxation through here: rows are converted
once into sparse inequality/equality blocks, after which many objectives
can be solved against the same prepared system (the bound-tightening
sweeps exploit this heavily).  A small best-bound branch-and-bound on top
of the LP handles the subproblems that keep integrality.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_STATUS = {0: OPTIMAL, 2: INFEASIBLE, 3: UNBOUNDED}


@dataclass
class LpResult:
    status: str
    x: np.ndarray | None
    objective: float | None


@dataclass
class PreparedLp:
    """Row blocks in matrix form; bounds and objective supplied per solve."""

    n: int
    a_ub: sparse.csr_matrix | None
    b_ub: np.ndarray | None
    a_eq: sparse.csr_matrix | None
    b_eq: np.ndarray | None


def prepare_rows(rows, n: int) -> PreparedLp:
    ub_r, ub_c, ub_v, ub_rhs = [], [], [], []
    eq_r, eq_c, eq_v, eq_rhs = [], [], [], []
    for row in rows:
        if row.sense == "L":
            r, cidx, val, rhs = ub_r, ub_c, ub_v, ub_rhs
        elif row.sense == "E":
            r, cidx, val, rhs = eq_r, eq_c, eq_v, eq_rhs
        else:
            raise ValueError(f"unknown sense {row.sense!r} in row {row.name}")
        k = len(rhs)
        r.extend([k] * len(row.idx))
        cidx.extend(int(i) for i in row.idx)
        val.extend(float(c) for c in row.coef)
        rhs.append(row.rhs)
    a_ub = (
        sparse.csr_matrix((ub_v, (ub_r, ub_c)), shape=(len(ub_rhs), n))
        if ub_rhs
        else None
    )
    a_eq = (
        sparse.csr_matrix((eq_v, (eq_r, eq_c)), shape=(len(eq_rhs), n))
        if eq_rhs
        else None
    )
    return PreparedLp(
        n=n,
        a_ub=a_ub,
        b_ub=np.array(ub_rhs) if ub_rhs else None,
        a_eq=a_eq,
        b_eq=np.array(eq_rhs) if eq_rhs else None,
    )


def solve_prepared(
    prep: PreparedLp,
    c: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    maximize: bool = True,
) -> LpResult:
    sign = -1.0 if maximize else 1.0
    bounds = np.column_stack([lb, ub])
    obj = sign * np.asarray(c, dtype=float)
    res = linprog(obj, A_ub=prep.a_ub, b_ub=prep.b_ub, A_eq=prep.a_eq,
                  b_eq=prep.b_eq, bounds=bounds, method="highs-ds")
    if res.status != 0:
        # the HiGHS presolve mislabels some near-degenerate boxed systems;
        # an infeasible/unbounded verdict only counts with presolve off
        res = linprog(obj, A_ub=prep.a_ub, b_ub=prep.b_ub, A_eq=prep.a_eq,
                      b_eq=prep.b_eq, bounds=bounds, method="highs-ds",
                      options={"presolve": False})
    status = _STATUS.get(res.status, INFEASIBLE)
    if status != OPTIMAL:
        return LpResult(status=status, x=None, objective=None)
    return LpResult(status=OPTIMAL, x=res.x, objective=float(sign * res.fun))


def solve_lp_relaxation(
    c: np.ndarray,
    rows,
    lb: np.ndarray,
    ub: np.ndarray,
    maximize: bool = True,
) -> LpResult:
    """Solve one boxed LP: optimum, or an infeasible/unbounded verdict.

    Deterministic for a fixed row ordering (dual simplex backend).  An
    unbounded verdict indicates a modeling bug here, since every variable
    the engine creates carries a finite box.
    """
    return solve_prepared(prepare_rows(rows, len(lb)), c, lb, ub, maximize)


def solve_milp(
    c: np.ndarray,
    rows,
    lb: np.ndarray,
    ub: np.ndarray,
    int_idx: np.ndarray,
    maximize: bool = True,
    int_tol: float = 1e-6,
    node_limit: int = 20000,
) -> LpResult:
    """Small best-bound branch-and-bound for LPs with integrality marks."""
    prep = prepare_rows(rows, len(lb))
    root = solve_prepared(prep, c, lb, ub, maximize)
    if root.status != OPTIMAL:
        return root
    better = (lambda a, b: a > b) if maximize else (lambda a, b: a < b)
    heap = []
    counter = itertools.count()
    heapq.heappush(
        heap, ((-root.objective if maximize else root.objective), next(counter),
               lb.copy(), ub.copy(), root)
    )
    best_x, best_obj = None, -math.inf if maximize else math.inf
    nodes = 0
    while heap and nodes < node_limit:
        key, _, nlb, nub, res = heapq.heappop(heap)
        bound = -key if maximize else key
        if best_x is not None and not better(bound, best_obj):
            continue
        nodes += 1
        frac = [
            (abs(res.x[i] - round(res.x[i])), i)
            for i in int_idx
            if abs(res.x[i] - round(res.x[i])) > int_tol
        ]
        if not frac:
            if best_x is None or better(res.objective, best_obj):
                best_x, best_obj = res.x.copy(), res.objective
                for i in int_idx:
                    best_x[i] = round(best_x[i])
            continue
        _, branch = max(frac)
        val = res.x[branch]
        for lo, hi in (
            (nlb[branch], math.floor(val)),
            (math.floor(val) + 1.0, nub[branch]),
        ):
            if lo > hi:
                continue
            clb, cub = nlb.copy(), nub.copy()
            clb[branch], cub[branch] = lo, hi
            child = solve_prepared(prep, c, clb, cub, maximize)
            if child.status != OPTIMAL:
                continue
            if best_x is not None and not better(child.objective, best_obj):
                continue
            heapq.heappush(
                heap,
                ((-child.objective if maximize else child.objective), next(counter),
                 clb, cub, child),
            )
    if best_x is None:
        return LpResult(status=INFEASIBLE, x=None, objective=None)
    return LpResult(status=OPTIMAL, x=best_x, objective=best_obj)
