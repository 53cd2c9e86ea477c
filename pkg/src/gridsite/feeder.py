"""Three-phase distribution feeder model.

Defines the network data types (nodes, lines, transformers, loads, slack
source), a versioned JSON file format with exact round-trip, nodal
admittance assembly in rectangular coordinates, great-circle geometry, and
headroom-based candidate site selection.

All electrical quantities are per-unit on the bases declared in the file
header.  Constructed models and assembled admittance structures are
immutable and safe for concurrent read-only use.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

PHASES = "ABC"
EARTH_RADIUS_M = 6_371_000.0  # mean Earth radius, 6371 km

SCHEMA_VERSION = 1


class FeederSchemaError(ValueError):
    """A feeder file is malformed: missing field, wrong type, bad value."""


class FeederTopologyError(ValueError):
    """The node/branch graph is disconnected or the slack is missing."""


class FeederReferenceError(ValueError):
    """A branch, load, or slack references a node or phase that is absent."""


@dataclass(frozen=True)
class BaseUnits:
    """Per-unit bases declared in the file header."""

    s_kva: float
    v_kv: float = 1.0


@dataclass(frozen=True)
class Node:
    id: str
    phases: str  # ordered subset of "ABC"
    latitude: float
    longitude: float
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        if not self.phases or any(p not in PHASES for p in self.phases):
            raise FeederSchemaError(f"node {self.id}: phases {self.phases!r} not a subset of ABC")
        if list(self.phases) != sorted(set(self.phases), key=PHASES.index):
            raise FeederSchemaError(f"node {self.id}: phases must be unique and in ABC order")
        if not (0.0 < self.v_min < self.v_max):
            raise FeederSchemaError(f"node {self.id}: need 0 < v_min < v_max")
        if not (-90.0 <= self.latitude <= 90.0):
            raise FeederSchemaError(f"node {self.id}: latitude out of range")
        if not (-180.0 <= self.longitude <= 180.0):
            raise FeederSchemaError(f"node {self.id}: longitude out of range")


@dataclass(frozen=True)
class Line:
    """Series branch with a symmetric phase-coupled admittance block.

    ``g`` and ``b`` are nested tuples indexed by the line's phase list, so
    ``g[i][j]`` couples ``phases[i]`` at one terminal to ``phases[j]``.
    """

    id: str
    from_node: str
    to_node: str
    phases: str
    g: tuple
    b: tuple

    def __post_init__(self):
        n = len(self.phases)
        for name, m in (("g", self.g), ("b", self.b)):
            if len(m) != n or any(len(row) != n for row in m):
                raise FeederSchemaError(f"line {self.id}: {name} must be {n}x{n}")
            for i in range(n):
                for j in range(n):
                    if m[i][j] != m[j][i]:
                        raise FeederSchemaError(f"line {self.id}: {name} block not symmetric")
        if all(v == 0.0 for row in self.g for v in row) and all(
            v == 0.0 for row in self.b for v in row
        ):
            raise FeederSchemaError(f"line {self.id}: zero admittance block")


@dataclass(frozen=True)
class Transformer:
    """Series transformer branch with per-phase admittance and a thermal limit."""

    id: str
    from_node: str
    to_node: str
    phases: str
    g: tuple  # per-phase series conductance, aligned with ``phases``
    b: tuple
    i_rated: float  # per-unit current limit, per phase

    def __post_init__(self):
        n = len(self.phases)
        if len(self.g) != n or len(self.b) != n:
            raise FeederSchemaError(f"transformer {self.id}: g/b must have {n} entries")
        if self.i_rated <= 0:
            raise FeederSchemaError(f"transformer {self.id}: i_rated must be positive")
        if any(gg == 0.0 and bb == 0.0 for gg, bb in zip(self.g, self.b)):
            raise FeederSchemaError(f"transformer {self.id}: zero admittance phase")


@dataclass(frozen=True)
class Load:
    node: str
    phase: str
    p: float  # active power drawn, per-unit
    q: float  # reactive power drawn, per-unit

    def __post_init__(self):
        if self.phase not in PHASES:
            raise FeederSchemaError(f"load at {self.node}: bad phase {self.phase!r}")
        if not (math.isfinite(self.p) and math.isfinite(self.q)):
            raise FeederSchemaError(f"load at {self.node}: non-finite power")
        if self.p < 0:
            raise FeederSchemaError(f"load at {self.node}: negative active power")


@dataclass(frozen=True)
class SlackSource:
    """Feeder head with fixed voltage magnitude and balanced phase angles."""

    node: str
    v_nominal: float
    angles: tuple  # radians for phases A, B, C

    def __post_init__(self):
        if self.v_nominal <= 0:
            raise FeederSchemaError("slack: v_nominal must be positive")
        if len(self.angles) != 3:
            raise FeederSchemaError("slack: exactly three phase angles required")
        third = 2.0 * math.pi / 3.0
        for i in range(3):
            for j in range(i + 1, 3):
                d = abs(self.angles[i] - self.angles[j]) % (2.0 * math.pi)
                sep = min(d, 2.0 * math.pi - d)
                if abs(sep - third) > 1e-9:
                    raise FeederSchemaError("slack: phase angles must be mutually 2*pi/3 apart")

    def angle(self, phase: str) -> float:
        return self.angles[PHASES.index(phase)]


@dataclass(frozen=True)
class CandidateSite:
    """One candidate (node, phase) siting location.

    Impact indices and the priority weight start as NaN and are filled by
    the prioritization pass.
    """

    node: str
    phase: str
    land_cost: float
    z_min: int
    z_max: int
    latitude: float
    longitude: float
    f_v: float = math.nan
    f_c: float = math.nan
    f_g: float = math.nan
    weight: float = math.nan

    def __post_init__(self):
        if self.z_min < 0 or self.z_max < self.z_min:
            raise ValueError(f"candidate {self.node}/{self.phase}: need 0 <= z_min <= z_max")


@dataclass(frozen=True)
class CandidateSet:
    sites: tuple

    def __len__(self):
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.sites])

    def is_weighted(self) -> bool:
        w = self.weights
        return len(w) > 0 and np.all(np.isfinite(w)) and abs(w.sum() - 1.0) < 1e-9


class FeederModel:
    """Immutable feeder network with index maps over (node, phase) pairs."""

    def __init__(self, base, nodes, lines, transformers, loads, slack):
        self.base = base
        self.nodes = tuple(nodes)
        self.lines = tuple(lines)
        self.transformers = tuple(transformers)
        self.loads = tuple(loads)
        self.slack = slack

        self.node_by_id = {n.id: n for n in self.nodes}
        if len(self.node_by_id) != len(self.nodes):
            raise FeederSchemaError("duplicate node ids")
        # flat ordering of every present (node, phase)
        self.np_list = [(n.id, p) for n in self.nodes for p in n.phases]
        self.np_index = {key: i for i, key in enumerate(self.np_list)}
        self._validate_references()
        self._validate_topology()

    # -- validation -------------------------------------------------------

    def _require_phase(self, node_id: str, phase: str, what: str):
        node = self.node_by_id.get(node_id)
        if node is None:
            raise FeederReferenceError(f"{what} references missing node {node_id!r}")
        if phase not in node.phases:
            raise FeederReferenceError(f"{what} references absent phase {phase} of node {node_id}")

    def _validate_references(self):
        for br in list(self.lines) + list(self.transformers):
            for end in (br.from_node, br.to_node):
                for p in br.phases:
                    self._require_phase(end, p, f"branch {br.id}")
        for ld in self.loads:
            self._require_phase(ld.node, ld.phase, "load")
        if self.slack.node not in self.node_by_id:
            raise FeederReferenceError(f"slack references missing node {self.slack.node!r}")

    def _validate_topology(self):
        adj: dict = {n.id: set() for n in self.nodes}
        for br in list(self.lines) + list(self.transformers):
            adj[br.from_node].add(br.to_node)
            adj[br.to_node].add(br.from_node)
        seen = {self.slack.node}
        stack = [self.slack.node]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.node_by_id) - seen)
            raise FeederTopologyError(f"graph not connected; unreachable nodes: {missing}")

    # -- convenience ------------------------------------------------------

    @property
    def n_np(self) -> int:
        return len(self.np_list)

    def slack_np_indices(self) -> list:
        node = self.node_by_id[self.slack.node]
        return [self.np_index[(node.id, p)] for p in node.phases]

    def nonslack_np_indices(self) -> np.ndarray:
        slack = set(self.slack_np_indices())
        return np.array([i for i in range(self.n_np) if i not in slack], dtype=int)

    def loads_by_np(self) -> dict:
        """Aggregate load powers per (node, phase) key."""
        out: dict = {}
        for ld in self.loads:
            p, q = out.get((ld.node, ld.phase), (0.0, 0.0))
            out[(ld.node, ld.phase)] = (p + ld.p, q + ld.q)
        return out


# -- JSON round trip --------------------------------------------------------


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise FeederSchemaError(f"{where}: missing key {key!r}")
    return obj[key]


def feeder_from_dict(raw: dict) -> FeederModel:
    if not isinstance(raw, dict):
        raise FeederSchemaError("feeder document must be a JSON object")
    base_raw = _need(raw, "base", "feeder")
    version = base_raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise FeederSchemaError(f"unsupported schema_version {version}")
    try:
        base = BaseUnits(s_kva=float(_need(base_raw, "s_kva", "base")),
                         v_kv=float(base_raw.get("v_kv", 1.0)))
        nodes = [
            Node(
                id=str(_need(n, "id", "node")),
                phases=str(_need(n, "phases", "node")),
                latitude=float(_need(n, "lat", "node")),
                longitude=float(_need(n, "lon", "node")),
                v_min=float(n.get("v_min", 0.95)),
                v_max=float(n.get("v_max", 1.05)),
            )
            for n in _need(raw, "nodes", "feeder")
        ]
        lines = [
            Line(
                id=str(_need(l, "id", "line")),
                from_node=str(_need(l, "from", "line")),
                to_node=str(_need(l, "to", "line")),
                phases=str(_need(l, "phases", "line")),
                g=tuple(tuple(float(v) for v in row) for row in _need(l, "g", "line")),
                b=tuple(tuple(float(v) for v in row) for row in _need(l, "b", "line")),
            )
            for l in _need(raw, "lines", "feeder")
        ]
        transformers = [
            Transformer(
                id=str(_need(t, "id", "transformer")),
                from_node=str(_need(t, "from", "transformer")),
                to_node=str(_need(t, "to", "transformer")),
                phases=str(_need(t, "phases", "transformer")),
                g=tuple(float(v) for v in _need(t, "g", "transformer")),
                b=tuple(float(v) for v in _need(t, "b", "transformer")),
                i_rated=float(_need(t, "i_rated", "transformer")),
            )
            for t in _need(raw, "transformers", "feeder")
        ]
        loads = [
            Load(
                node=str(_need(ld, "node", "load")),
                phase=str(_need(ld, "phase", "load")),
                p=float(_need(ld, "p", "load")),
                q=float(_need(ld, "q", "load")),
            )
            for ld in _need(raw, "loads", "feeder")
        ]
        slack_raw = _need(raw, "slack", "feeder")
        slack = SlackSource(
            node=str(_need(slack_raw, "node", "slack")),
            v_nominal=float(_need(slack_raw, "v_nominal", "slack")),
            angles=tuple(math.radians(float(a)) for a in _need(slack_raw, "angles_deg", "slack")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (FeederSchemaError, FeederReferenceError, FeederTopologyError)):
            raise
        raise FeederSchemaError(str(exc)) from exc
    return FeederModel(base, nodes, lines, transformers, loads, slack)


def feeder_to_dict(model: FeederModel) -> dict:
    return {
        "base": {
            "schema_version": SCHEMA_VERSION,
            "s_kva": model.base.s_kva,
            "v_kv": model.base.v_kv,
        },
        "nodes": [
            {
                "id": n.id,
                "phases": n.phases,
                "lat": n.latitude,
                "lon": n.longitude,
                "v_min": n.v_min,
                "v_max": n.v_max,
            }
            for n in model.nodes
        ],
        "lines": [
            {
                "id": l.id,
                "from": l.from_node,
                "to": l.to_node,
                "phases": l.phases,
                "g": [list(row) for row in l.g],
                "b": [list(row) for row in l.b],
            }
            for l in model.lines
        ],
        "transformers": [
            {
                "id": t.id,
                "from": t.from_node,
                "to": t.to_node,
                "phases": t.phases,
                "g": list(t.g),
                "b": list(t.b),
                "i_rated": t.i_rated,
            }
            for t in model.transformers
        ],
        "loads": [
            {"node": ld.node, "phase": ld.phase, "p": ld.p, "q": ld.q} for ld in model.loads
        ],
        "slack": {
            "node": model.slack.node,
            "v_nominal": model.slack.v_nominal,
            "angles_deg": [math.degrees(a) for a in model.slack.angles],
        },
    }


def load_feeder(path) -> FeederModel:
    """Parse and validate a feeder JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederSchemaError(f"not valid JSON: {exc}") from exc
    return feeder_from_dict(raw)


def save_feeder(model: FeederModel, path) -> None:
    """Write a feeder model; floats keep full precision so round trips are exact."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(feeder_to_dict(model), fh, indent=1)
        fh.write("\n")


# -- admittance assembly -----------------------------------------------------


@dataclass(frozen=True)
class TransformerBranch:
    """One rated phase conductor of a transformer, for current extraction."""

    transformer_id: str
    phase: str
    from_np: int
    to_np: int
    g: float
    b: float
    i_rated: float


@dataclass(frozen=True)
class Admittance:
    """Nodal admittance over the flat (node, phase) index.

    ``g`` and ``b`` are CSR matrices such that the branch-current injection
    leaving each (node, phase) is ``i_re = g @ v_re - b @ v_im`` and
    ``i_im = g @ v_im + b @ v_re``.
    """

    g: sparse.csr_matrix
    b: sparse.csr_matrix
    transformer_branches: tuple

    def line_current(self, v_re: np.ndarray, v_im: np.ndarray):
        return self.g @ v_re - self.b @ v_im, self.g @ v_im + self.b @ v_re


def assemble_admittance(model: FeederModel) -> Admittance:
    """Stamp lines and transformers into nodal conductance/susceptance matrices."""
    n = model.n_np
    rows, cols, gv, bv = [], [], [], []

    def stamp(i: int, j: int, g: float, b: float):
        rows.append(i)
        cols.append(j)
        gv.append(g)
        bv.append(b)

    for line in model.lines:
        for a, pa in enumerate(line.phases):
            ifrom = model.np_index[(line.from_node, pa)]
            ito = model.np_index[(line.to_node, pa)]
            for c, pc in enumerate(line.phases):
                jfrom = model.np_index[(line.from_node, pc)]
                jto = model.np_index[(line.to_node, pc)]
                g, b = line.g[a][c], line.b[a][c]
                stamp(ifrom, jfrom, g, b)
                stamp(ifrom, jto, -g, -b)
                stamp(ito, jto, g, b)
                stamp(ito, jfrom, -g, -b)

    xf_branches = []
    for tr in model.transformers:
        for a, pa in enumerate(tr.phases):
            ifrom = model.np_index[(tr.from_node, pa)]
            ito = model.np_index[(tr.to_node, pa)]
            g, b = tr.g[a], tr.b[a]
            stamp(ifrom, ifrom, g, b)
            stamp(ifrom, ito, -g, -b)
            stamp(ito, ito, g, b)
            stamp(ito, ifrom, -g, -b)
            xf_branches.append(
                TransformerBranch(tr.id, pa, ifrom, ito, g, b, tr.i_rated)
            )

    gmat = sparse.csr_matrix((gv, (rows, cols)), shape=(n, n))
    bmat = sparse.csr_matrix((bv, (rows, cols)), shape=(n, n))
    gmat.sum_duplicates()
    bmat.sum_duplicates()
    return Admittance(g=gmat, b=bmat, transformer_branches=tuple(xf_branches))


def transformer_phase_currents(adm: Admittance, v_re: np.ndarray, v_im: np.ndarray) -> np.ndarray:
    """Complex series current through each rated transformer phase."""
    out = np.empty(len(adm.transformer_branches), dtype=complex)
    for k, br in enumerate(adm.transformer_branches):
        dv = (v_re[br.from_np] - v_re[br.to_np]) + 1j * (v_im[br.from_np] - v_im[br.to_np])
        out[k] = (br.g + 1j * br.b) * dv
    return out


# -- geometry ----------------------------------------------------------------


def haversine_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters between two points in decimal degrees."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    c = 2.0 * math.atan2(math.sqrt(a), math.sqrt(1.0 - a))
    return EARTH_RADIUS_M * c


# -- candidate selection -----------------------------------------------------


class EmptyCandidateSetWarning(UserWarning):
    pass


def _upstream_transformers(model: FeederModel) -> dict:
    """Map node id -> transformers on its path back to the slack."""
    adj: dict = {n.id: [] for n in model.nodes}
    for br in list(model.lines) + list(model.transformers):
        is_xf = isinstance(br, Transformer)
        adj[br.from_node].append((br.to_node, br if is_xf else None))
        adj[br.to_node].append((br.from_node, br if is_xf else None))
    upstream: dict = {model.slack.node: ()}
    stack = [model.slack.node]
    while stack:
        here = stack.pop()
        for nxt, xf in adj[here]:
            if nxt in upstream:
                continue
            chain = upstream[here] + ((xf,) if xf is not None else ())
            upstream[nxt] = chain
            stack.append(nxt)
    return upstream


def select_candidates(
    model: FeederModel,
    base_state,
    headroom_threshold: float,
    *,
    land_cost=25_000.0,
    z_min: int = 1,
    z_max: int = 3,
    adm: Admittance | None = None,
) -> CandidateSet:
    """Pick (node, phase) sites whose upstream transformers retain headroom.

    ``base_state`` must be a converged power-flow state for the unmodified
    feeder.  A candidate qualifies when every transformer between it and
    the slack keeps at least ``headroom_threshold`` per-unit current margin
    on the candidate's phase at the base operating point.  ``land_cost``
    may be a scalar or a mapping from node id.
    """
    if adm is None:
        adm = assemble_admittance(model)
    currents = transformer_phase_currents(adm, base_state.v_real, base_state.v_imag)
    margin_by_branch = {
        (br.transformer_id, br.phase): br.i_rated - abs(cur)
        for br, cur in zip(adm.transformer_branches, currents)
    }
    upstream = _upstream_transformers(model)

    def cost_of(node_id: str) -> float:
        if isinstance(land_cost, dict):
            return float(land_cost[node_id])
        return float(land_cost)

    sites = []
    for node in model.nodes:
        if node.id == model.slack.node:
            continue
        for phase in node.phases:
            margins = [
                margin_by_branch[(xf.id, phase)]
                for xf in upstream[node.id]
                if phase in xf.phases
            ]
            margin = min(margins) if margins else math.inf
            if margin >= headroom_threshold:
                sites.append(
                    CandidateSite(
                        node=node.id,
                        phase=phase,
                        land_cost=cost_of(node.id),
                        z_min=z_min,
                        z_max=z_max,
                        latitude=node.latitude,
                        longitude=node.longitude,
                    )
                )
    if not sites:
        warnings.warn(
            "no candidate locations retain the requested transformer headroom",
            EmptyCandidateSetWarning,
            stacklevel=2,
        )
    return CandidateSet(sites=tuple(sites))
