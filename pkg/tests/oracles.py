"""Independent reference implementations used only by the tests.

Nothing here imports from the solver path it is checking: the simplex is a
dense textbook tableau, the placement oracle is exhaustive enumeration
with direct constraint arithmetic, and the admittance oracle stamps a
dense matrix by hand.
"""

import itertools
import math

import numpy as np

from gridsite.acpf import solve_powerflow, check_limits
from gridsite.feeder import haversine_distance


# -- dense tableau simplex (Big-M, Bland's rule) --------------------------------


def tableau_simplex(c, a_ub, b_ub, maximize=True):
    """Solve max/min c@x s.t. a_ub@x <= b_ub, x >= 0 on a dense tableau.

    Returns (status, objective). Assumes b_ub >= 0 (all our oracle
    instances are built that way), so slack variables give a basic start.
    """
    a = np.asarray(a_ub, dtype=float)
    b = np.asarray(b_ub, dtype=float)
    c = np.asarray(c, dtype=float)
    if not maximize:
        status, obj = tableau_simplex(-c, a, b, maximize=True)
        return status, (None if obj is None else -obj)
    m, n = a.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = a
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = list(range(n, n + m))
    for _ in range(20000):
        # Bland: first negative reduced cost
        enter = next((j for j in range(n + m) if tab[m, j] < -1e-12), None)
        if enter is None:
            x = np.zeros(n + m)
            for i, bi in enumerate(basis):
                x[bi] = tab[i, -1]
            return "optimal", float(c @ x[:n])
        ratios = [
            (tab[i, -1] / tab[i, enter], basis[i], i)
            for i in range(m)
            if tab[i, enter] > 1e-12
        ]
        if not ratios:
            return "unbounded", None
        _, _, leave = min(ratios)
        piv = tab[leave, enter]
        tab[leave] /= piv
        for i in range(m + 1):
            if i != leave and tab[i, enter] != 0.0:
                tab[i] -= tab[i, enter] * tab[leave]
        basis[leave] = enter
    raise RuntimeError("simplex did not terminate")


# -- exhaustive placement oracle --------------------------------------------------


def enumerate_placements(model, candidates, demand, cost, tolerance=1e-8,
                         limit_tol=1e-6):
    """Best (objective, x, z) over every charger assignment, or None.

    Feasibility of each combination is decided from first principles:
    demand, deployment windows, budget, pairwise node separation, then a
    fresh nonlinear power flow with the implied draws checked against the
    voltage band and transformer ratings.
    """
    from gridsite.acpf import InjectionOverlay

    sites = list(candidates)
    rating = cost.charger_kw / model.base.s_kva
    tphi = math.tan(math.acos(cost.pf))
    conflicts = []
    for i in range(len(sites)):
        for j in range(i + 1, len(sites)):
            if sites[i].node == sites[j].node:
                continue
            d = haversine_distance(sites[i].latitude, sites[i].longitude,
                                   sites[j].latitude, sites[j].longitude)
            if d <= 2.0 * cost.service_radius_m:
                conflicts.append((i, j))
    best = None
    choices = [[0] + list(range(s.z_min, s.z_max + 1)) for s in sites]
    for z in itertools.product(*choices):
        x = tuple(1 if v > 0 else 0 for v in z)
        if sum(z) < demand:
            continue
        if any(x[i] + x[j] > 1 for i, j in conflicts):
            continue
        spend = sum(sites[k].land_cost * x[k] + cost.charger_cost * z[k]
                    for k in range(len(sites)))
        if spend > cost.budget + 1e-9:
            continue
        draws = {}
        for k, s in enumerate(sites):
            if z[k]:
                p = z[k] * rating
                draws[(s.node, s.phase)] = complex(p, p * tphi)
        state = solve_powerflow(model, InjectionOverlay(draws=draws),
                                tolerance=tolerance)
        if not state.converged:
            continue
        if not check_limits(model, state, tol=limit_tol).passed:
            continue
        obj = sum(sites[k].weight * z[k] for k in range(len(sites)))
        if best is None or obj > best[0] + 1e-15:
            best = (obj, x, z, state)
    return best


# -- dense admittance assembly ------------------------------------------------------


def dense_admittance(model):
    """Hand-stamped dense nodal conductance/susceptance matrices."""
    n = model.n_np
    g = np.zeros((n, n))
    b = np.zeros((n, n))

    def stamp_block(from_node, to_node, phases, gm, bm):
        for i, pi in enumerate(phases):
            fi = model.np_index[(from_node, pi)]
            ti = model.np_index[(to_node, pi)]
            for j, pj in enumerate(phases):
                fj = model.np_index[(from_node, pj)]
                tj = model.np_index[(to_node, pj)]
                g[fi, fj] += gm[i][j]
                b[fi, fj] += bm[i][j]
                g[fi, tj] -= gm[i][j]
                b[fi, tj] -= bm[i][j]
                g[ti, tj] += gm[i][j]
                b[ti, tj] += bm[i][j]
                g[ti, fj] -= gm[i][j]
                b[ti, fj] -= bm[i][j]

    for line in model.lines:
        stamp_block(line.from_node, line.to_node, line.phases, line.g, line.b)
    for tr in model.transformers:
        k = len(tr.phases)
        gm = [[tr.g[i] if i == j else 0.0 for j in range(k)] for i in range(k)]
        bm = [[tr.b[i] if i == j else 0.0 for j in range(k)] for i in range(k)]
        stamp_block(tr.from_node, tr.to_node, tr.phases, gm, bm)
    return g, b
