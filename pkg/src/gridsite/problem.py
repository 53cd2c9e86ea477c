"""Siting optimization model: assembly, bilinear lift, and decomposition.

``build_minlp`` assembles the full siting program: nodal current balance in
rectangular coordinates, voltage and transformer limits, charger demand,
site/charger linking, budget, and pairwise anti-clustering cuts.  The only
nonlinearities are the constant-power admittance relations and the
current/voltage products, so ``lift_to_miblp`` replaces them exactly with
lifted product variables and a bilinear-term registry.
``filter_and_decompose`` then rewrites the rectangular voltages as nominal
values plus bounded deviations, which yields the small, uniform factor
boxes the relaxation machinery works on, and records the functional chains
used to derive bounds of every dependent variable from the deviation
boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .acpf import PowerFlowState, nominal_voltages
from .feeder import (
    Admittance,
    CandidateSet,
    FeederModel,
    assemble_admittance,
    haversine_distance,
    transformer_phase_currents,
)


class BuildInfeasibleError(ValueError):
    """The discrete structure alone proves the program infeasible."""


class LiftError(ValueError):
    """A continuous variable lacks the finite box the lift requires."""


@dataclass(frozen=True)
class CostConfig:
    """Charger electrical rating and the money side of the deployment."""

    charger_kw: float
    pf: float
    charger_cost: float
    budget: float
    service_radius_m: float

    def __post_init__(self):
        if self.charger_kw <= 0:
            raise ValueError("charger_kw must be positive")
        if not (0.0 < self.pf <= 1.0):
            raise ValueError("pf must lie in (0, 1]")
        if self.budget < 0 or self.service_radius_m < 0:
            raise ValueError("budget and service radius must be non-negative")

    def rating_pu(self, s_base_kva: float) -> float:
        return self.charger_kw / s_base_kva

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.pf))


# -- interval helpers ---------------------------------------------------------


def iv_mul(a, b):
    c = (a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
    return (min(c), max(c))


def iv_sq(a):
    lo = 0.0 if a[0] <= 0.0 <= a[1] else min(a[0] ** 2, a[1] ** 2)
    return (lo, max(a[0] ** 2, a[1] ** 2))


def iv_div(a, b):
    if not (b[0] > 0.0 or b[1] < 0.0):
        raise ValueError("divisor interval must exclude zero")
    c = (a[0] / b[0], a[0] / b[1], a[1] / b[0], a[1] / b[1])
    return (min(c), max(c))


def iv_lin(terms, const=0.0):
    lo = hi = const
    for coef, box in terms:
        t = (coef * box[0], coef * box[1])
        lo += min(t)
        hi += max(t)
    return (lo, hi)


# -- problem containers --------------------------------------------------------


@dataclass
class Row:
    """One linear constraint ``sum(coef * var) sense rhs`` with sense E or L."""

    idx: np.ndarray
    coef: np.ndarray
    sense: str
    rhs: float
    name: str = ""

    def violation(self, vec: np.ndarray) -> float:
        act = float(np.dot(self.coef, vec[self.idx]))
        if self.sense == "E":
            return abs(act - self.rhs)
        return max(0.0, act - self.rhs)


def make_row(pairs, sense, rhs, name=""):
    idx = np.array([i for i, _ in pairs], dtype=int)
    coef = np.array([c for _, c in pairs], dtype=float)
    return Row(idx=idx, coef=coef, sense=sense, rhs=float(rhs), name=name)


@dataclass(frozen=True)
class BilinearTerm:
    """Registry entry: lifted variable ``s`` equals the product ``a * b``."""

    s: int
    a: int
    b: int
    name: str = ""


@dataclass(frozen=True)
class QuadraticCap:
    """Convex circle constraint ``x**2 + y**2 <= limit**2``."""

    x: int
    y: int
    limit: float
    name: str = ""

    def violation(self, vec: np.ndarray) -> float:
        return max(0.0, vec[self.x] ** 2 + vec[self.y] ** 2 - self.limit**2)


class VarTable:
    """Append-only variable registry with bounds and kinds ('c', 'b', 'i')."""

    def __init__(self):
        self.names: list = []
        self.lb: list = []
        self.ub: list = []
        self.kind: list = []
        self.index: dict = {}

    def add(self, name: str, lb: float, ub: float, kind: str = "c") -> int:
        if name in self.index:
            raise ValueError(f"duplicate variable {name}")
        if lb > ub:
            raise ValueError(f"variable {name}: inverted bounds [{lb}, {ub}]")
        i = len(self.names)
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kind.append(kind)
        self.index[name] = i
        return i

    def __len__(self):
        return len(self.names)

    def bounds_arrays(self):
        return np.array(self.lb), np.array(self.ub)


# semantic index records ------------------------------------------------------


@dataclass
class LoadVars:
    key: tuple
    p: float
    q: float
    g: int
    b: int
    i_re: int
    i_im: int
    s_gvr: int = -1
    s_bvi: int = -1
    s_gvi: int = -1
    s_bvr: int = -1
    s_gvsq: int = -1
    s_bvsq: int = -1


@dataclass
class ChargerVars:
    key: tuple
    site_pos: int
    g: int
    b: int
    i_re: int
    i_im: int
    pch: int
    qch: int
    x: int
    z: int
    pch_max: float
    s_gvr: int = -1
    s_bvi: int = -1
    s_gvi: int = -1
    s_bvr: int = -1
    s_gvsq: int = -1
    s_bvsq: int = -1


@dataclass
class XfmrVars:
    transformer_id: str
    phase: str
    i_re: int
    i_im: int
    rating: float


@dataclass
class VarMap:
    vr: dict = field(default_factory=dict)
    vi: dict = field(default_factory=dict)
    vsq: dict = field(default_factory=dict)
    s_rr: dict = field(default_factory=dict)
    s_ii: dict = field(default_factory=dict)
    iline: dict = field(default_factory=dict)
    loads: list = field(default_factory=list)
    chargers: list = field(default_factory=list)
    xfmrs: list = field(default_factory=list)
    x: list = field(default_factory=list)
    z: list = field(default_factory=list)


@dataclass
class MinlpSpec:
    """Pre-lift program: linear rows plus symbolic nonlinear records."""

    model: FeederModel
    adm: Admittance
    candidates: CandidateSet
    demand: int
    cost: CostConfig
    vars: VarTable
    rows: list
    quads: list
    objective: np.ndarray
    varmap: VarMap
    rational: list  # admittance-from-power records, lifted later
    products: list  # device-current product records, lifted later
    vcaps: dict  # npkey -> (lo_sq, hi_sq)


@dataclass
class MiblpProblem:
    """Exactly lifted program: linear rows, convex caps, bilinear registry."""

    model: FeederModel
    adm: Admittance
    candidates: CandidateSet
    demand: int
    cost: CostConfig
    vars: VarTable
    rows: list
    quads: list
    bilinear: list
    objective: np.ndarray
    varmap: VarMap

    @property
    def n_vars(self) -> int:
        return len(self.vars)

    def integer_indices(self) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.vars.kind) if k in ("b", "i")], dtype=int
        )


# derivation records for dependent-bound propagation ---------------------------


@dataclass(frozen=True)
class DerivVsq:
    vsq: int
    s_rr: int
    s_ii: int
    dvr: int
    dvi: int
    nom_r: float
    nom_i: float
    cap: tuple  # static (lo, hi) from the voltage band


@dataclass(frozen=True)
class DerivQuotient:
    """out = num / vsq with a constant or boxed numerator."""

    out: int
    num: tuple  # (lo, hi) numerator box, possibly degenerate
    vsq: int


@dataclass(frozen=True)
class DerivProduct:
    out: int
    a: int
    b: int


@dataclass(frozen=True)
class DerivSquare:
    """out = t**2 for t = nom + delta-variable."""

    out: int
    dvar: int
    nom: float


@dataclass(frozen=True)
class DerivLinear:
    """out = const + sum(coef * var), optionally clipped to a static box."""

    out: int
    idx: tuple
    coef: tuple
    const: float
    clip: tuple | None = None


@dataclass
class DecomposedProblem:
    """Deviation-form program ready for bound tightening and search.

    Voltage variables are replaced in place by their deviations from the
    nominal slack profile (same column indices), every registry entry whose
    factor was a voltage now points at a companion deviation product tied
    back through an exact linear link row, and ``derivations`` lists, in
    dependency order, how every dependent bound follows from the deviation
    boxes.
    """

    model: FeederModel
    adm: Admittance
    candidates: CandidateSet
    demand: int
    cost: CostConfig
    vars: VarTable
    rows: list
    quads: list
    bilinear: list
    objective: np.ndarray
    varmap: VarMap
    d_idx: np.ndarray  # deviation variables, tightening order
    nominal: dict  # var index -> nominal offset
    derivations: list
    dev_bound: float

    @property
    def n_vars(self) -> int:
        return len(self.vars)

    def integer_indices(self) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.vars.kind) if k in ("b", "i")], dtype=int
        )

    def binary_indices(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.vars.kind) if k == "b"], dtype=int)

    def initial_dev_box(self):
        lb, ub = self.vars.bounds_arrays()
        return lb[self.d_idx].copy(), ub[self.d_idx].copy()

    def propagate_bounds(self, d_lo: np.ndarray, d_hi: np.ndarray):
        """Full bound vectors implied by the given deviation boxes."""
        lb, ub = self.vars.bounds_arrays()
        lb[self.d_idx] = d_lo
        ub[self.d_idx] = d_hi
        box = lambda i: (lb[i], ub[i])
        for der in self.derivations:
            if isinstance(der, DerivVsq):
                r = iv_sq((der.nom_r + lb[der.dvr], der.nom_r + ub[der.dvr]))
                s = iv_sq((der.nom_i + lb[der.dvi], der.nom_i + ub[der.dvi]))
                lb[der.s_rr], ub[der.s_rr] = r
                lb[der.s_ii], ub[der.s_ii] = s
                lo = max(r[0] + s[0], der.cap[0])
                hi = min(r[1] + s[1], der.cap[1])
                lb[der.vsq], ub[der.vsq] = min(lo, hi), hi
            elif isinstance(der, DerivQuotient):
                lo, hi = iv_div(der.num, box(der.vsq))
                lb[der.out], ub[der.out] = lo, hi
            elif isinstance(der, DerivSquare):
                lo, hi = iv_sq((der.nom + lb[der.dvar], der.nom + ub[der.dvar]))
                lb[der.out], ub[der.out] = lo, hi
            elif isinstance(der, DerivProduct):
                lo, hi = iv_mul(box(der.a), box(der.b))
                lb[der.out], ub[der.out] = lo, hi
            elif isinstance(der, DerivLinear):
                lo, hi = iv_lin(
                    [(c, box(i)) for c, i in zip(der.coef, der.idx)], der.const
                )
                if der.clip is not None:
                    lo = max(lo, der.clip[0])
                    hi = min(hi, der.clip[1])
                lb[der.out], ub[der.out] = min(lo, hi), hi
            else:  # pragma: no cover - defensive
                raise TypeError(f"unknown derivation {der!r}")
        return lb, ub

    def mccormick_rows(self, lb: np.ndarray, ub: np.ndarray) -> list:
        """Envelope rows for every registry term over the given boxes."""
        rows = []
        for term in self.bilinear:
            rows.extend(
                mccormick_envelope(term, (lb[term.a], ub[term.a]), (lb[term.b], ub[term.b]))
            )
        return rows


# -- McCormick envelope --------------------------------------------------------


def mccormick_envelope(term: BilinearTerm, box_a, box_b) -> list:
    """Four-inequality convex hull of ``s = a*b`` over the factor boxes.

    Square terms (``a is b``) instead get both endpoint tangents, the
    midpoint tangent, and the secant upper bound.
    """
    la, ua = box_a
    lbb, ubb = box_b
    if la > ua or lbb > ubb:
        raise ValueError(f"inverted bounds for term {term.name or term.s}")
    s, a, b = term.s, term.a, term.b
    nm = term.name
    if a == b:
        l, u = la, ua
        mid = 0.5 * (l + u)
        return [
            make_row([(a, 2.0 * l), (s, -1.0)], "L", l * l, f"{nm}:tanL"),
            make_row([(a, 2.0 * u), (s, -1.0)], "L", u * u, f"{nm}:tanU"),
            make_row([(a, 2.0 * mid), (s, -1.0)], "L", mid * mid, f"{nm}:tanM"),
            make_row([(s, 1.0), (a, -(l + u))], "L", -l * u, f"{nm}:sec"),
        ]
    return [
        make_row([(a, lbb), (b, la), (s, -1.0)], "L", la * lbb, f"{nm}:mc1"),
        make_row([(a, ubb), (b, ua), (s, -1.0)], "L", ua * ubb, f"{nm}:mc2"),
        make_row([(s, 1.0), (a, -ubb), (b, -la)], "L", -la * ubb, f"{nm}:mc3"),
        make_row([(s, 1.0), (a, -lbb), (b, -ua)], "L", -ua * lbb, f"{nm}:mc4"),
    ]


# -- anti-clustering ------------------------------------------------------------


def anti_clustering_constraints(candidates: CandidateSet, radius_m: float) -> list:
    """Index pairs (i, j) that may host at most one station between them.

    The exclusion applies at node granularity: sites on different nodes
    closer than twice the service radius conflict, while multiple phases of
    one node count as the same physical location and never conflict.
    """
    sites = list(candidates)
    pairs = []
    for i in range(len(sites)):
        for j in range(i + 1, len(sites)):
            if sites[i].node == sites[j].node:
                continue
            d = haversine_distance(
                sites[i].latitude, sites[i].longitude,
                sites[j].latitude, sites[j].longitude,
            )
            if d <= 2.0 * radius_m:
                pairs.append((i, j))
    return pairs


# -- MINLP assembly --------------------------------------------------------------


@dataclass(frozen=True)
class _RationalRec:
    """G = P / Vsq and B = -Q / Vsq at one (node, phase)."""

    g: int
    b: int
    vr: int
    vi: int
    key: tuple
    p_const: float | None = None
    q_const: float | None = None
    pch: int | None = None
    qch: int | None = None
    owner: object = None


@dataclass(frozen=True)
class _ProductRec:
    """Device current i = g*vr - b*vi (re) or i = g*vi + b*vr (im)."""

    i: int
    g: int
    b: int
    vr: int
    vi: int
    part: str
    key: tuple
    owner: object = None


def build_minlp(
    model: FeederModel,
    candidates: CandidateSet,
    demand: int,
    cost: CostConfig,
    adm: Admittance | None = None,
) -> MinlpSpec:
    """Assemble the siting program prior to lifting.

    Raises :class:`BuildInfeasibleError` for structural contradictions that
    need no solve: demand above total charger capacity, or demand with an
    empty candidate set.
    """
    if demand < 0:
        raise ValueError("demand must be non-negative")
    sites = list(candidates)
    if len({(s.node, s.phase) for s in sites}) != len(sites):
        raise ValueError("duplicate candidate (node, phase) entries")
    if demand > 0 and not sites:
        raise BuildInfeasibleError(f"demand {demand} with no candidate locations")
    if demand > sum(s.z_max for s in sites):
        raise BuildInfeasibleError(
            f"demand {demand} exceeds total charger capacity {sum(s.z_max for s in sites)}"
        )
    if sites and not candidates.is_weighted():
        raise ValueError("candidates must carry priority weights; run prioritization first")
    if adm is None:
        adm = assemble_admittance(model)

    rating = cost.rating_pu(model.base.s_kva)
    tphi = cost.tan_phi
    v = VarTable()
    rows: list = []
    quads: list = []
    rational: list = []
    products: list = []
    vcaps: dict = {}
    vm = VarMap()

    nom_re, nom_im = nominal_voltages(model)
    slack_set = set(model.slack_np_indices())
    nonslack = [i for i in range(model.n_np) if i not in slack_set]
    loads_by_np = model.loads_by_np()
    site_by_np = {}
    for pos, s in enumerate(sites):
        site_by_np[(s.node, s.phase)] = (pos, s)

    # voltages and per-(node, phase) line currents
    for i in nonslack:
        key = model.np_list[i]
        node = model.node_by_id[key[0]]
        vmax = node.v_max
        vm.vr[key] = v.add(f"vr[{key[0]},{key[1]}]", -vmax, vmax)
        vm.vi[key] = v.add(f"vi[{key[0]},{key[1]}]", -vmax, vmax)
        vcaps[key] = (node.v_min**2, node.v_max**2)

    g_dense = adm.g.toarray()
    b_dense = adm.b.toarray()
    for i in nonslack:
        key = model.np_list[i]
        # i_line = sum_j (G_ij vr_j - B_ij vi_j) ; slack columns fold into rhs
        terms_re, terms_im = [], []
        const_re = const_im = 0.0
        boxes_re, boxes_im = [], []
        for j in range(model.n_np):
            g, b = g_dense[i, j], b_dense[i, j]
            if g == 0.0 and b == 0.0:
                continue
            if j in slack_set:
                const_re += g * nom_re[j] - b * nom_im[j]
                const_im += g * nom_im[j] + b * nom_re[j]
            else:
                kj = model.np_list[j]
                if g != 0.0:
                    terms_re.append((vm.vr[kj], g))
                    terms_im.append((vm.vi[kj], g))
                    boxes_re.append((g, (v.lb[vm.vr[kj]], v.ub[vm.vr[kj]])))
                    boxes_im.append((g, (v.lb[vm.vi[kj]], v.ub[vm.vi[kj]])))
                if b != 0.0:
                    terms_re.append((vm.vi[kj], -b))
                    terms_im.append((vm.vr[kj], b))
                    boxes_re.append((-b, (v.lb[vm.vi[kj]], v.ub[vm.vi[kj]])))
                    boxes_im.append((b, (v.lb[vm.vr[kj]], v.ub[vm.vr[kj]])))
        lo_re, hi_re = iv_lin(boxes_re, const_re)
        lo_im, hi_im = iv_lin(boxes_im, const_im)
        ire = v.add(f"iline_r[{key[0]},{key[1]}]", lo_re, hi_re)
        iim = v.add(f"iline_i[{key[0]},{key[1]}]", lo_im, hi_im)
        vm.iline[key] = (ire, iim)
        rows.append(
            make_row([(ire, 1.0)] + [(t, -c) for t, c in terms_re], "E", const_re,
                     f"iline_r[{key}]")
        )
        rows.append(
            make_row([(iim, 1.0)] + [(t, -c) for t, c in terms_im], "E", const_im,
                     f"iline_i[{key}]")
        )

    # loads: surrogate admittance, device current, rational records
    for key, (p, q) in sorted(loads_by_np.items()):
        i = model.np_index[key]
        if i in slack_set:
            continue  # slack absorbs its own load through the source
        vsq_box = vcaps[key]
        g_box = iv_div((p, p), vsq_box)
        b_box = iv_div((-q, -q), vsq_box)
        g = v.add(f"gld[{key[0]},{key[1]}]", *g_box)
        b = v.add(f"bld[{key[0]},{key[1]}]", *b_box)
        vr, vi = vm.vr[key], vm.vi[key]
        vr_box = (v.lb[vr], v.ub[vr])
        vi_box = (v.lb[vi], v.ub[vi])
        ire_box = iv_lin([(1.0, iv_mul(g_box, vr_box)), (-1.0, iv_mul(b_box, vi_box))])
        iim_box = iv_lin([(1.0, iv_mul(g_box, vi_box)), (1.0, iv_mul(b_box, vr_box))])
        ire = v.add(f"ild_r[{key[0]},{key[1]}]", *ire_box)
        iim = v.add(f"ild_i[{key[0]},{key[1]}]", *iim_box)
        rec = LoadVars(key=key, p=p, q=q, g=g, b=b, i_re=ire, i_im=iim)
        vm.loads.append(rec)
        rational.append(_RationalRec(g=g, b=b, vr=vr, vi=vi, key=key,
                                     p_const=p, q_const=q, owner=rec))
        products.append(_ProductRec(i=ire, g=g, b=b, vr=vr, vi=vi, part="re",
                                    key=key, owner=rec))
        products.append(_ProductRec(i=iim, g=g, b=b, vr=vr, vi=vi, part="im",
                                    key=key, owner=rec))

    # chargers at candidate sites
    for pos, site in enumerate(sites):
        key = (site.node, site.phase)
        if key not in model.np_index:
            raise ValueError(f"candidate {key} not present in the feeder")
        if model.np_index[key] in slack_set:
            raise ValueError(f"candidate {key} sits on the slack source")
        x = v.add(f"x[{key[0]},{key[1]}]", 0.0, 1.0, kind="b")
        z = v.add(f"z[{key[0]},{key[1]}]", 0.0, float(site.z_max), kind="i")
        pch_max = site.z_max * rating
        pch = v.add(f"pch[{key[0]},{key[1]}]", 0.0, pch_max)
        qch = v.add(f"qch[{key[0]},{key[1]}]", 0.0, pch_max * tphi)
        vsq_box = vcaps[key]
        g_box = iv_div((0.0, pch_max), vsq_box)
        b_box = iv_div((-pch_max * tphi, 0.0), vsq_box)
        g = v.add(f"gch[{key[0]},{key[1]}]", *g_box)
        b = v.add(f"bch[{key[0]},{key[1]}]", *b_box)
        vr, vi = vm.vr[key], vm.vi[key]
        vr_box = (v.lb[vr], v.ub[vr])
        vi_box = (v.lb[vi], v.ub[vi])
        ire_box = iv_lin([(1.0, iv_mul(g_box, vr_box)), (-1.0, iv_mul(b_box, vi_box))])
        iim_box = iv_lin([(1.0, iv_mul(g_box, vi_box)), (1.0, iv_mul(b_box, vr_box))])
        ire = v.add(f"ich_r[{key[0]},{key[1]}]", *ire_box)
        iim = v.add(f"ich_i[{key[0]},{key[1]}]", *iim_box)
        rec = ChargerVars(key=key, site_pos=pos, g=g, b=b, i_re=ire, i_im=iim,
                          pch=pch, qch=qch, x=x, z=z, pch_max=pch_max)
        vm.chargers.append(rec)
        vm.x.append(x)
        vm.z.append(z)
        rational.append(_RationalRec(g=g, b=b, vr=vr, vi=vi, key=key,
                                     pch=pch, qch=qch, owner=rec))
        products.append(_ProductRec(i=ire, g=g, b=b, vr=vr, vi=vi, part="re",
                                    key=key, owner=rec))
        products.append(_ProductRec(i=iim, g=g, b=b, vr=vr, vi=vi, part="im",
                                    key=key, owner=rec))
        # station draw and power-factor tie
        rows.append(make_row([(pch, 1.0), (z, -rating)], "E", 0.0, f"rating[{key}]"))
        rows.append(make_row([(qch, 1.0), (pch, -tphi)], "E", 0.0, f"pf[{key}]"))
        # deployment window z in [x z_min, x z_max]
        rows.append(make_row([(x, float(site.z_min)), (z, -1.0)], "L", 0.0, f"zlo[{key}]"))
        rows.append(make_row([(z, 1.0), (x, -float(site.z_max))], "L", 0.0, f"zhi[{key}]"))

    # KCL at every non-slack (node, phase)
    load_by_key = {rec.key: rec for rec in vm.loads}
    ch_by_key = {rec.key: rec for rec in vm.chargers}
    for i in nonslack:
        key = model.np_list[i]
        for part in ("re", "im"):
            pairs = [(vm.iline[key][0 if part == "re" else 1], 1.0)]
            if key in load_by_key:
                rec = load_by_key[key]
                pairs.append((rec.i_re if part == "re" else rec.i_im, 1.0))
            if key in ch_by_key:
                rec = ch_by_key[key]
                pairs.append((rec.i_re if part == "re" else rec.i_im, 1.0))
            rows.append(make_row(pairs, "E", 0.0, f"kcl_{part}[{key}]"))

    # transformer phase currents and thermal caps
    for br in adm.transformer_branches:
        terms_re, terms_im = [], []
        const_re = const_im = 0.0
        for np_i, sign in ((br.from_np, 1.0), (br.to_np, -1.0)):
            if np_i in slack_set:
                const_re += sign * (br.g * nom_re[np_i] - br.b * nom_im[np_i])
                const_im += sign * (br.g * nom_im[np_i] + br.b * nom_re[np_i])
            else:
                kj = model.np_list[np_i]
                terms_re.append((vm.vr[kj], sign * br.g))
                terms_re.append((vm.vi[kj], -sign * br.b))
                terms_im.append((vm.vi[kj], sign * br.g))
                terms_im.append((vm.vr[kj], sign * br.b))
        ire = v.add(f"ixf_r[{br.transformer_id},{br.phase}]", -br.i_rated, br.i_rated)
        iim = v.add(f"ixf_i[{br.transformer_id},{br.phase}]", -br.i_rated, br.i_rated)
        rows.append(make_row([(ire, 1.0)] + [(t, -c) for t, c in terms_re], "E",
                             const_re, f"ixf_r[{br.transformer_id},{br.phase}]"))
        rows.append(make_row([(iim, 1.0)] + [(t, -c) for t, c in terms_im], "E",
                             const_im, f"ixf_i[{br.transformer_id},{br.phase}]"))
        quads.append(QuadraticCap(x=ire, y=iim, limit=br.i_rated,
                                  name=f"thermal[{br.transformer_id},{br.phase}]"))
        vm.xfmrs.append(XfmrVars(br.transformer_id, br.phase, ire, iim, br.i_rated))

    # demand, budget, anti-clustering
    if sites:
        rows.append(
            make_row([(z, -1.0) for z in vm.z], "L", -float(demand), "demand")
        )
        budget_pairs = [(vm.x[p], sites[p].land_cost) for p in range(len(sites))]
        budget_pairs += [(vm.z[p], cost.charger_cost) for p in range(len(sites))]
        rows.append(make_row(budget_pairs, "L", cost.budget, "budget"))
        for i, j in anti_clustering_constraints(candidates, cost.service_radius_m):
            rows.append(
                make_row([(vm.x[i], 1.0), (vm.x[j], 1.0)], "L", 1.0,
                         f"anticluster[{sites[i].node},{sites[j].node}]")
            )
    elif demand > 0:  # pragma: no cover - guarded above
        raise BuildInfeasibleError("demand without candidates")

    # objective: site weights on charger counts (the x*z product collapses
    # to z exactly because the deployment window pins z = 0 when x = 0)
    objective = np.zeros(len(v))
    for pos, site in enumerate(sites):
        objective[vm.z[pos]] = site.weight

    return MinlpSpec(
        model=model, adm=adm, candidates=candidates, demand=demand, cost=cost,
        vars=v, rows=rows, quads=quads, objective=objective, varmap=vm,
        rational=rational, products=products, vcaps=vcaps,
    )


# -- exact lift -------------------------------------------------------------------


def lift_to_miblp(spec: MinlpSpec) -> MiblpProblem:
    """Replace every rational and product nonlinearity with lifted equalities."""
    v = spec.vars
    rows = list(spec.rows)
    bilinear: list = []
    vm = spec.varmap

    for name, lo, hi in zip(v.names, v.lb, v.ub):
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise LiftError(f"variable {name} lacks finite bounds required by the lift")

    # squared-voltage lifting variables
    for key, vr in vm.vr.items():
        vi = vm.vi[key]
        lo_sq, hi_sq = spec.vcaps[key]
        rr_box = iv_sq((v.lb[vr], v.ub[vr]))
        ii_box = iv_sq((v.lb[vi], v.ub[vi]))
        vsq = v.add(f"vsq[{key[0]},{key[1]}]", lo_sq, hi_sq)
        s_rr = v.add(f"s_rr[{key[0]},{key[1]}]", rr_box[0], min(rr_box[1], hi_sq))
        s_ii = v.add(f"s_ii[{key[0]},{key[1]}]", ii_box[0], min(ii_box[1], hi_sq))
        vm.vsq[key] = vsq
        vm.s_rr[key] = s_rr
        vm.s_ii[key] = s_ii
        rows.append(make_row([(vsq, 1.0), (s_rr, -1.0), (s_ii, -1.0)], "E", 0.0,
                             f"vsq_def[{key}]"))
        bilinear.append(BilinearTerm(s=s_rr, a=vr, b=vr, name=f"s_rr[{key}]"))
        bilinear.append(BilinearTerm(s=s_ii, a=vi, b=vi, name=f"s_ii[{key}]"))

    def product_var(tag, key, a, b):
        box = iv_mul((v.lb[a], v.ub[a]), (v.lb[b], v.ub[b]))
        s = v.add(f"{tag}[{key[0]},{key[1]}]", *box)
        bilinear.append(BilinearTerm(s=s, a=a, b=b, name=f"{tag}[{key}]"))
        return s

    # G * Vsq = P and B * Vsq = -Q (P, Q data for loads, variables for chargers)
    for rec in spec.rational:
        vsq = vm.vsq[rec.key]
        kind = "ld" if rec.p_const is not None else "ch"
        s_g = product_var(f"s_gvsq_{kind}", rec.key, rec.g, vsq)
        s_b = product_var(f"s_bvsq_{kind}", rec.key, rec.b, vsq)
        if rec.p_const is not None:
            rows.append(make_row([(s_g, 1.0)], "E", rec.p_const, f"gvsq[{rec.key}]"))
            rows.append(make_row([(s_b, 1.0)], "E", -rec.q_const, f"bvsq[{rec.key}]"))
        else:
            rows.append(make_row([(s_g, 1.0), (rec.pch, -1.0)], "E", 0.0,
                                 f"gvsq[{rec.key}]"))
            rows.append(make_row([(s_b, 1.0), (rec.qch, 1.0)], "E", 0.0,
                                 f"bvsq[{rec.key}]"))
        rec.owner.s_gvsq = s_g
        rec.owner.s_bvsq = s_b

    # device currents: i_re = g vr - b vi, i_im = g vi + b vr
    for rec in spec.products:
        kind = "ld" if isinstance(rec.owner, LoadVars) else "ch"
        if rec.part == "re":
            s1 = product_var(f"s_gvr_{kind}", rec.key, rec.g, rec.vr)
            s2 = product_var(f"s_bvi_{kind}", rec.key, rec.b, rec.vi)
            rows.append(make_row([(rec.i, 1.0), (s1, -1.0), (s2, 1.0)], "E", 0.0,
                                 f"idef_r_{kind}[{rec.key}]"))
            rec.owner.s_gvr = s1
            rec.owner.s_bvi = s2
        else:
            s1 = product_var(f"s_gvi_{kind}", rec.key, rec.g, rec.vi)
            s2 = product_var(f"s_bvr_{kind}", rec.key, rec.b, rec.vr)
            rows.append(make_row([(rec.i, 1.0), (s1, -1.0), (s2, -1.0)], "E", 0.0,
                                 f"idef_i_{kind}[{rec.key}]"))
            rec.owner.s_gvi = s1
            rec.owner.s_bvr = s2

    objective = np.concatenate([spec.objective, np.zeros(len(v) - len(spec.objective))])
    return MiblpProblem(
        model=spec.model, adm=spec.adm, candidates=spec.candidates,
        demand=spec.demand, cost=spec.cost, vars=v, rows=rows, quads=spec.quads,
        bilinear=bilinear, objective=objective, varmap=vm,
    )


# -- deviation decomposition -------------------------------------------------------


def filter_and_decompose(miblp: MiblpProblem, slack, dev_bound: float = 0.2) -> DecomposedProblem:
    """Rewrite rectangular voltages as nominal-plus-deviation, in place.

    The filtered independents are exactly the voltage variables; every
    other continuous quantity is dependent and keeps a derivation chain so
    its bounds follow from the deviation boxes.
    """
    if dev_bound <= 0:
        raise ValueError("dev_bound must be positive")
    model = miblp.model
    vm = miblp.varmap
    v = miblp.vars
    vk = slack.v_nominal

    nominal: dict = {}
    d_idx: list = []
    for key in vm.vr:
        th = slack.angle(key[1])
        nominal[vm.vr[key]] = vk * math.cos(th)
        nominal[vm.vi[key]] = vk * math.sin(th)
        d_idx.extend([vm.vr[key], vm.vi[key]])

    # rebind the voltage columns as deviations: shift bounds, rename
    for idx, nom in nominal.items():
        lo = max(-dev_bound, v.lb[idx] - nom)
        hi = min(dev_bound, v.ub[idx] - nom)
        del v.index[v.names[idx]]
        v.names[idx] = "d" + v.names[idx]
        v.index[v.names[idx]] = idx
        v.lb[idx], v.ub[idx] = lo, hi

    # fold nominal offsets out of every linear row
    rows: list = []
    for row in miblp.rows:
        shift = sum(
            c * nominal[i] for i, c in zip(row.idx, row.coef) if i in nominal
        )
        if shift:
            row = replace(row, rhs=row.rhs - shift)
        rows.append(row)

    # split registry terms touching a voltage into deviation products
    bilinear: list = []
    link_derivs: list = []
    for term in miblp.bilinear:
        a_nom = nominal.get(term.a)
        b_nom = nominal.get(term.b)
        if a_nom is None and b_nom is None:
            bilinear.append(term)
            continue
        if term.a == term.b:
            # s = (nom + d)^2 = nom^2 + 2 nom d + d^2
            box = iv_sq((v.lb[term.a], v.ub[term.a]))
            s_bl = v.add(f"{v.names[term.s]}~dd", *box)
            rows.append(
                make_row([(term.s, 1.0), (term.a, -2.0 * a_nom), (s_bl, -1.0)], "E",
                         a_nom * a_nom, f"link[{term.name}]")
            )
            bilinear.append(BilinearTerm(s=s_bl, a=term.a, b=term.a, name=f"{term.name}~dd"))
            link_derivs.append(DerivSquare(out=term.s, dvar=term.a, nom=a_nom))
        else:
            # exactly one factor is a voltage by construction
            dvar, other, nom = (
                (term.a, term.b, a_nom) if a_nom is not None else (term.b, term.a, b_nom)
            )
            box = iv_mul((v.lb[dvar], v.ub[dvar]), (v.lb[other], v.ub[other]))
            s_bl = v.add(f"{v.names[term.s]}~d", *box)
            rows.append(
                make_row([(term.s, 1.0), (other, -nom), (s_bl, -1.0)], "E", 0.0,
                         f"link[{term.name}]")
            )
            bilinear.append(BilinearTerm(s=s_bl, a=dvar, b=other, name=f"{term.name}~d"))
            link_derivs.append(
                DerivLinear(out=term.s, idx=(other, s_bl), coef=(nom, 1.0), const=0.0)
            )

    # derivation chains, in dependency order
    derivations: list = []
    for key in vm.vr:
        derivations.append(
            DerivVsq(
                vsq=vm.vsq[key], s_rr=vm.s_rr[key], s_ii=vm.s_ii[key],
                dvr=vm.vr[key], dvi=vm.vi[key],
                nom_r=nominal[vm.vr[key]], nom_i=nominal[vm.vi[key]],
                cap=(
                    model.node_by_id[key[0]].v_min ** 2,
                    model.node_by_id[key[0]].v_max ** 2,
                ),
            )
        )
    for rec in vm.loads:
        vsq = vm.vsq[rec.key]
        derivations.append(DerivQuotient(out=rec.g, num=(rec.p, rec.p), vsq=vsq))
        derivations.append(DerivQuotient(out=rec.b, num=(-rec.q, -rec.q), vsq=vsq))
    for rec in vm.chargers:
        vsq = vm.vsq[rec.key]
        tphi = miblp.cost.tan_phi
        derivations.append(DerivQuotient(out=rec.g, num=(0.0, rec.pch_max), vsq=vsq))
        derivations.append(
            DerivQuotient(out=rec.b, num=(-rec.pch_max * tphi, 0.0), vsq=vsq)
        )
    # product registry bounds (factors now all have derivable boxes)
    for term in bilinear:
        if term.a == term.b:
            continue  # squares handled by DerivVsq / DerivSquare chains
        derivations.append(DerivProduct(out=term.s, a=term.a, b=term.b))
    derivations.extend(link_derivs)
    # currents follow from their defining equality rows
    defined = {
        *(vm.iline[key][0] for key in vm.iline),
        *(vm.iline[key][1] for key in vm.iline),
        *(rec.i_re for rec in vm.loads), *(rec.i_im for rec in vm.loads),
        *(rec.i_re for rec in vm.chargers), *(rec.i_im for rec in vm.chargers),
        *(xf.i_re for xf in vm.xfmrs), *(xf.i_im for xf in vm.xfmrs),
    }
    xf_caps = {}
    for xf in vm.xfmrs:
        xf_caps[xf.i_re] = (-xf.rating, xf.rating)
        xf_caps[xf.i_im] = (-xf.rating, xf.rating)
    for row in rows:
        if row.sense != "E" or len(row.idx) == 0:
            continue
        head = int(row.idx[0])
        if head in defined and row.coef[0] == 1.0 and row.name.startswith(("iline", "ixf", "idef")):
            idx = tuple(int(i) for i in row.idx[1:])
            coef = tuple(-float(c) for c in row.coef[1:])
            derivations.append(
                DerivLinear(out=head, idx=idx, coef=coef, const=row.rhs,
                            clip=xf_caps.get(head))
            )

    dec = DecomposedProblem(
        model=model, adm=miblp.adm, candidates=miblp.candidates,
        demand=miblp.demand, cost=miblp.cost, vars=v, rows=rows,
        quads=miblp.quads, bilinear=bilinear,
        objective=np.concatenate(
            [miblp.objective, np.zeros(len(v) - len(miblp.objective))]
        ),
        varmap=vm, d_idx=np.array(d_idx, dtype=int), nominal=nominal,
        derivations=derivations, dev_bound=dev_bound,
    )
    # tighten every dependent bound once from the initial deviation boxes
    d_lo, d_hi = dec.initial_dev_box()
    lb, ub = dec.propagate_bounds(d_lo, d_hi)
    dec.vars.lb = list(lb)
    dec.vars.ub = list(ub)
    return dec


# -- embeddings and checks ----------------------------------------------------------


def _charger_draws(candidates, x, z, rating, tphi):
    draws = {}
    for pos, site in enumerate(candidates):
        p = z[pos] * rating
        draws[(site.node, site.phase)] = complex(p, p * tphi)
    return draws


def embed_state(
    problem: MiblpProblem | DecomposedProblem,
    state: PowerFlowState,
    x=None,
    z=None,
) -> np.ndarray:
    """Map a converged power-flow state (plus integer decisions) into the
    problem's variable space.

    The state must have been solved with the charger draws implied by
    ``(x, z)`` overlaid, so device currents and surrogate admittances are
    consistent.
    """
    model = problem.model
    vm = problem.varmap
    vec = np.zeros(problem.n_vars)
    nominal = getattr(problem, "nominal", {})
    vr_full, vi_full = state.v_real, state.v_imag
    vsq_full = vr_full**2 + vi_full**2

    for key, idx in vm.vr.items():
        i = model.np_index[key]
        vec[idx] = vr_full[i] - nominal.get(idx, 0.0)
        vec[vm.vi[key]] = vi_full[i] - nominal.get(vm.vi[key], 0.0)
        vec[vm.vsq[key]] = vsq_full[i]
        vec[vm.s_rr[key]] = vr_full[i] ** 2
        vec[vm.s_ii[key]] = vi_full[i] ** 2
        ire, iim = vm.iline[key]
        vec[ire] = state.i_line_re[i]
        vec[iim] = state.i_line_im[i]
    rating = problem.cost.rating_pu(model.base.s_kva)
    tphi = problem.cost.tan_phi
    for rec in vm.loads:
        i = model.np_index[rec.key]
        g = rec.p / vsq_full[i]
        b = -rec.q / vsq_full[i]
        vec[rec.g] = g
        vec[rec.b] = b
        vec[rec.i_re] = state.i_load_re[i]
        vec[rec.i_im] = state.i_load_im[i]
    for pos, rec in enumerate(vm.chargers):
        i = model.np_index[rec.key]
        zval = 0 if z is None else z[pos]
        xval = 0 if x is None else x[pos]
        pch = zval * rating
        qch = pch * tphi
        g = pch / vsq_full[i]
        b = -qch / vsq_full[i]
        vec[rec.x] = xval
        vec[rec.z] = zval
        vec[rec.pch] = pch
        vec[rec.qch] = qch
        vec[rec.g] = g
        vec[rec.b] = b
        vec[rec.i_re] = state.i_ch_re[i]
        vec[rec.i_im] = state.i_ch_im[i]
    for xf, cur in zip(
        vm.xfmrs, transformer_phase_currents(problem.adm, vr_full, vi_full)
    ):
        vec[xf.i_re] = cur.real
        vec[xf.i_im] = cur.imag
    # lifted products and deviation links from their defining factors
    for term in problem.bilinear:
        vec[term.s] = vec[term.a] * vec[term.b]
    if nominal:
        # original lifted products s = (nom + d) * other recovered via links
        for row in problem.rows:
            if row.name.startswith("link["):
                head = int(row.idx[0])
                rest = row.rhs - sum(
                    c * vec[int(i)] for i, c in zip(row.idx[1:], row.coef[1:])
                )
                vec[head] = rest
    return vec


def max_row_violation(rows, vec: np.ndarray) -> float:
    return max((row.violation(vec) for row in rows), default=0.0)


def max_quad_violation(quads, vec: np.ndarray) -> float:
    return max((q.violation(vec) for q in quads), default=0.0)


def bound_violation(lb: np.ndarray, ub: np.ndarray, vec: np.ndarray) -> float:
    return float(max(np.max(lb - vec, initial=0.0), np.max(vec - ub, initial=0.0)))
