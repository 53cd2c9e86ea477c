"""Grid-impact prioritization of candidate sites.

Each candidate is stressed with one charger's apparent-power draw and the
feeder is re-solved.  The voltage impact index accumulates voltage-
magnitude shifts (with limit violations penalized), the current impact
index accumulates transformer-current shifts, and the combined grid impact
index weights the two so the dominant effect governs.  A softmax over the
negated index turns impacts into priority weights that favor the least
disruptive locations.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .acpf import InjectionOverlay, PowerFlowState, solve_powerflow, transformer_phase_currents
from .feeder import Admittance, CandidateSet, CandidateSite, FeederModel, assemble_admittance


@dataclass(frozen=True)
class GiConfig:
    """Perturbation-study settings: draw size, violation penalty, power factor."""

    delta_s: float  # apparent power of the probe draw, per-unit
    gamma: float = 10.0
    pf: float = 0.985

    def __post_init__(self):
        if self.delta_s <= 0:
            raise ValueError("delta_s must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not (0.0 < self.pf <= 1.0):
            raise ValueError("pf must lie in (0, 1]")

    @classmethod
    def from_kw(cls, p_kw: float, pf: float, s_base_kva: float, gamma: float = 10.0):
        """Build from a charger's active draw in kW on the declared base."""
        return cls(delta_s=(p_kw / pf) / s_base_kva, gamma=gamma, pf=pf)

    def draw(self) -> complex:
        phi = math.acos(self.pf)
        return complex(self.delta_s * self.pf, self.delta_s * math.sin(phi))


def _perturbed_state(model, adm, base_state, site, cfg, tolerance, max_iter):
    overlay = InjectionOverlay(draws={(site.node, site.phase): cfg.draw()})
    return solve_powerflow(
        model, overlay, tolerance=tolerance, max_iter=max_iter, x0=base_state, adm=adm
    )


def _voltage_impact_from_states(model, base_state, hat_state, cfg) -> float:
    v = base_state.v_mag()
    v_hat = hat_state.v_mag()
    total = 0.0
    for i, (nid, _) in enumerate(model.np_list):
        node = model.node_by_id[nid]
        penalty = min(0.0, v_hat[i] - node.v_min) + min(0.0, node.v_max - v_hat[i])
        total += abs(v_hat[i] - v[i]) + cfg.gamma * abs(penalty)
    return total / cfg.delta_s


def _current_impact_from_states(adm, base_state, hat_state, cfg) -> float:
    if not adm.transformer_branches:
        return 0.0
    i0 = np.abs(transformer_phase_currents(adm, base_state.v_real, base_state.v_imag))
    i1 = np.abs(transformer_phase_currents(adm, hat_state.v_real, hat_state.v_imag))
    total = 0.0
    for br, a, b in zip(adm.transformer_branches, i0, i1):
        total += abs(b - a) + cfg.gamma * abs(min(0.0, br.i_rated - b))
    return total / cfg.delta_s


def voltage_impact(
    model: FeederModel,
    base_state: PowerFlowState,
    site: CandidateSite,
    cfg: GiConfig,
    tolerance: float = 1e-8,
    max_iter: int = 50,
    adm: Admittance | None = None,
) -> float:
    """Normalized voltage-deviation sum caused by the probe draw at ``site``.

    Returns ``inf`` when the perturbed power flow fails to converge, which
    marks the candidate unusable.
    """
    if adm is None:
        adm = assemble_admittance(model)
    hat = _perturbed_state(model, adm, base_state, site, cfg, tolerance, max_iter)
    if not hat.converged:
        return math.inf
    return _voltage_impact_from_states(model, base_state, hat, cfg)


def current_impact(
    model: FeederModel,
    base_state: PowerFlowState,
    site: CandidateSite,
    cfg: GiConfig,
    tolerance: float = 1e-8,
    max_iter: int = 50,
    adm: Admittance | None = None,
) -> float:
    """Normalized transformer-current deviation sum for the probe at ``site``."""
    if adm is None:
        adm = assemble_admittance(model)
    hat = _perturbed_state(model, adm, base_state, site, cfg, tolerance, max_iter)
    if not hat.converged:
        return math.inf
    return _current_impact_from_states(adm, base_state, hat, cfg)


def combination_weights(f_v: np.ndarray, f_c: np.ndarray):
    """Per-candidate mixing weights of the normalized impact components.

    Components whose whole vector is zero get zero weight everywhere; at
    candidates where both normalized components vanish the weights are zero
    and the combined index is zero.
    """
    f_v = np.asarray(f_v, dtype=float)
    f_c = np.asarray(f_c, dtype=float)
    if f_v.shape != f_c.shape:
        raise ValueError("impact vectors must have the same length")
    fin_v = f_v[np.isfinite(f_v)]
    fin_c = f_c[np.isfinite(f_c)]
    max_v = float(np.max(fin_v)) if fin_v.size else 0.0
    max_c = float(np.max(fin_c)) if fin_c.size else 0.0
    nv = f_v / max_v if max_v > 0 else np.zeros_like(f_v)
    nc = f_c / max_c if max_c > 0 else np.zeros_like(f_c)
    denom = nv + nc
    with np.errstate(invalid="ignore"):
        a = np.where(denom > 0, nv / denom, 0.0)
        b = np.where(denom > 0, nc / denom, 0.0)
    return a, b, nv, nc


def grid_impact(f_v: np.ndarray, f_c: np.ndarray) -> np.ndarray:
    """Combine impact indices so the dominant normalized component governs."""
    a, b, nv, nc = combination_weights(f_v, f_c)
    f_g = a * nv + b * nc
    f_g = np.where(np.isfinite(f_v) & np.isfinite(f_c), f_g, math.inf)
    return f_g


def priority_weights(f_g: np.ndarray) -> np.ndarray:
    """Softmax of the negated grid impact; infinite entries get zero weight."""
    f_g = np.asarray(f_g, dtype=float)
    if f_g.size == 0:
        raise ValueError("empty candidate set")
    usable = np.isfinite(f_g)
    if not np.any(usable):
        raise ValueError("no usable candidates: every grid impact is infinite")
    w = np.zeros_like(f_g)
    shifted = f_g[usable] - np.min(f_g[usable])  # softmax is shift invariant
    e = np.exp(-shifted)
    w[usable] = e / e.sum()
    return w


def prioritize_candidates(
    model: FeederModel,
    base_state: PowerFlowState,
    candidates: CandidateSet,
    cfg: GiConfig,
    tolerance: float = 1e-8,
    max_iter: int = 50,
    workers: int = 1,
    adm: Admittance | None = None,
) -> CandidateSet:
    """Run one probe power flow per candidate and attach indices and weights.

    Probe solves are independent; with ``workers > 1`` they run on a thread
    pool and results are gathered by candidate position, so the output is
    identical for any worker count.
    """
    if adm is None:
        adm = assemble_admittance(model)
    if not base_state.converged:
        raise ValueError("base state must be converged")

    def probe(site):
        hat = _perturbed_state(model, adm, base_state, site, cfg, tolerance, max_iter)
        if not hat.converged:
            return math.inf, math.inf
        return (
            _voltage_impact_from_states(model, base_state, hat, cfg),
            _current_impact_from_states(adm, base_state, hat, cfg),
        )

    sites = list(candidates)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(probe, sites))
    else:
        results = [probe(s) for s in sites]
    f_v = np.array([r[0] for r in results])
    f_c = np.array([r[1] for r in results])
    f_g = grid_impact(f_v, f_c)
    w = priority_weights(f_g)
    out = [
        replace(site, f_v=float(f_v[i]), f_c=float(f_c[i]), f_g=float(f_g[i]), weight=float(w[i]))
        for i, site in enumerate(sites)
    ]
    return CandidateSet(sites=tuple(out))
