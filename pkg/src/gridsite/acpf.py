"""Three-phase unbalanced power flow in rectangular current-injection form.

Unknowns are the rectangular voltages of every non-slack (node, phase).
Constant-power loads and charger draws enter through surrogate conductance
and susceptance G = P / |V|^2, B = -Q / |V|^2, re-evaluated at every
iterate, which makes the mismatch the exact nodal current imbalance.
Newton steps are damped by halving whenever the residual grows or any
loaded node voltage collapses toward zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import (
    Admittance,
    FeederModel,
    assemble_admittance,
    transformer_phase_currents,
)

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITER = 50
VSQ_GUARD = 1e-6  # reject iterates that collapse a loaded node voltage


def _json_scalar(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


@dataclass(frozen=True)
class InjectionOverlay:
    """Extra constant-power draws keyed by (node id, phase).

    Values are complex powers in per-unit; the real part is consumption.
    """

    draws: dict = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "InjectionOverlay":
        return cls(draws={})

    def validate(self, model: FeederModel) -> None:
        for key in self.draws:
            if key not in model.np_index:
                raise KeyError(f"overlay references absent (node, phase) {key}")


@dataclass
class PowerFlowState:
    """Voltages, surrogate load admittances, device currents, and mismatch."""

    v_real: np.ndarray
    v_imag: np.ndarray
    g_load: np.ndarray
    b_load: np.ndarray
    i_load_re: np.ndarray
    i_load_im: np.ndarray
    i_line_re: np.ndarray
    i_line_im: np.ndarray
    i_ch_re: np.ndarray
    i_ch_im: np.ndarray
    residual: np.ndarray  # stacked [re; im] over non-slack (node, phase)
    converged: bool
    iterations: int
    tolerance: float
    failure: str | None = None

    @property
    def residual_max(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0

    def v_mag(self) -> np.ndarray:
        return np.hypot(self.v_real, self.v_imag)

    def to_dict(self, model: FeederModel) -> dict:
        mag = self.v_mag()
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_max": self.residual_max,
            "voltages": [
                {
                    "node": nid,
                    "phase": ph,
                    "v_real": float(self.v_real[i]),
                    "v_imag": float(self.v_imag[i]),
                    "magnitude": float(mag[i]),
                }
                for i, (nid, ph) in enumerate(model.np_list)
            ],
        }

    def dump_json(self, model: FeederModel, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(model), fh, indent=1, sort_keys=True,
                      default=_json_scalar)
            fh.write("\n")


def nominal_voltages(model: FeederModel):
    """Flat rectangular profile: slack magnitude at nominal phase angles."""
    v = model.slack.v_nominal
    v_re = np.empty(model.n_np)
    v_im = np.empty(model.n_np)
    for i, (_, phase) in enumerate(model.np_list):
        th = model.slack.angle(phase)
        v_re[i] = v * math.cos(th)
        v_im[i] = v * math.sin(th)
    return v_re, v_im


def _power_vectors(model: FeederModel, overlay: InjectionOverlay | None):
    """Per-(node, phase) load and overlay powers as flat arrays."""
    p_load = np.zeros(model.n_np)
    q_load = np.zeros(model.n_np)
    for key, (p, q) in model.loads_by_np().items():
        p_load[model.np_index[key]] += p
        q_load[model.np_index[key]] += q
    p_ch = np.zeros(model.n_np)
    q_ch = np.zeros(model.n_np)
    if overlay is not None:
        overlay.validate(model)
        for key, s in overlay.draws.items():
            p_ch[model.np_index[key]] += s.real
            q_ch[model.np_index[key]] += s.imag
    return p_load, q_load, p_ch, q_ch


def _draw_currents(p, q, v_re, v_im, active):
    """Current into a constant-power draw, zero where inactive."""
    i_re = np.zeros_like(v_re)
    i_im = np.zeros_like(v_im)
    if np.any(active):
        vsq = v_re[active] ** 2 + v_im[active] ** 2
        i_re[active] = (p[active] * v_re[active] + q[active] * v_im[active]) / vsq
        i_im[active] = (p[active] * v_im[active] - q[active] * v_re[active]) / vsq
    return i_re, i_im


def _residual_parts(model, adm, v_re, v_im, p_load, q_load, p_ch, q_ch):
    load_active = (p_load != 0.0) | (q_load != 0.0)
    ch_active = (p_ch != 0.0) | (q_ch != 0.0)
    il_re, il_im = _draw_currents(p_load, q_load, v_re, v_im, load_active)
    ic_re, ic_im = _draw_currents(p_ch, q_ch, v_re, v_im, ch_active)
    ln_re, ln_im = adm.line_current(v_re, v_im)
    unk = model.nonslack_np_indices()
    res = np.concatenate(
        [
            il_re[unk] + ln_re[unk] + ic_re[unk],
            il_im[unk] + ln_im[unk] + ic_im[unk],
        ]
    )
    return res, (il_re, il_im, ln_re, ln_im, ic_re, ic_im)


def kcl_residual(
    model: FeederModel,
    state: PowerFlowState,
    overlay: InjectionOverlay | None = None,
    adm: Admittance | None = None,
) -> np.ndarray:
    """Nodal current mismatch [re; im] at every non-slack (node, phase).

    Load and charger draws are evaluated as constant-power surrogates at
    the state's voltages, so a converged state returns a residual below the
    solver tolerance.
    """
    if adm is None:
        adm = assemble_admittance(model)
    p_load, q_load, p_ch, q_ch = _power_vectors(model, overlay)
    if len(state.v_real) != model.n_np:
        raise ValueError("state dimensions do not match model")
    res, _ = _residual_parts(model, adm, state.v_real, state.v_imag, p_load, q_load, p_ch, q_ch)
    return res


def kcl_jacobian_arrays(model, adm, v_re, v_im, p_load, q_load, p_ch, q_ch):
    """Analytic Jacobian of the stacked mismatch w.r.t. non-slack (v_re, v_imag)."""
    unk = model.nonslack_np_indices()
    m = len(unk)
    gd = adm.g.toarray()[np.ix_(unk, unk)]
    bd = adm.b.toarray()[np.ix_(unk, unk)]
    # line part: d i_re/d v_re = G, d i_re/d v_im = -B, and so on
    j_rr = gd.copy()
    j_ri = -bd.copy()
    j_ir = bd.copy()
    j_ii = gd.copy()

    p_tot = p_load + p_ch
    q_tot = q_load + q_ch
    active = (p_tot != 0.0) | (q_tot != 0.0)
    for row, k in enumerate(unk):
        if not active[k]:
            continue
        vr, vi = v_re[k], v_im[k]
        vsq = vr * vr + vi * vi
        p, q = p_tot[k], q_tot[k]
        ire = (p * vr + q * vi) / vsq
        iim = (p * vi - q * vr) / vsq
        j_rr[row, row] += p / vsq - 2.0 * vr * ire / vsq
        j_ri[row, row] += q / vsq - 2.0 * vi * ire / vsq
        j_ir[row, row] += -q / vsq - 2.0 * vr * iim / vsq
        j_ii[row, row] += p / vsq - 2.0 * vi * iim / vsq
    top = np.hstack([j_rr, j_ri])
    bot = np.hstack([j_ir, j_ii])
    return np.vstack([top, bot])


def kcl_jacobian(
    model: FeederModel,
    state: PowerFlowState,
    overlay: InjectionOverlay | None = None,
    adm: Admittance | None = None,
) -> np.ndarray:
    if adm is None:
        adm = assemble_admittance(model)
    p_load, q_load, p_ch, q_ch = _power_vectors(model, overlay)
    return kcl_jacobian_arrays(
        model, adm, state.v_real, state.v_imag, p_load, q_load, p_ch, q_ch
    )


def solve_powerflow(
    model: FeederModel,
    overlay: InjectionOverlay | None = None,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iter: int = DEFAULT_MAX_ITER,
    x0: PowerFlowState | None = None,
    adm: Admittance | None = None,
) -> PowerFlowState:
    """Newton solve of the nodal current mismatch with step-halving damping.

    Returns the final iterate either way; ``converged`` and ``failure``
    record non-convergence or a singular Jacobian instead of raising.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if adm is None:
        adm = assemble_admittance(model)
    p_load, q_load, p_ch, q_ch = _power_vectors(model, overlay)
    guard_active = (p_load != 0.0) | (q_load != 0.0) | (p_ch != 0.0) | (q_ch != 0.0)

    if x0 is not None:
        v_re, v_im = x0.v_real.copy(), x0.v_imag.copy()
    else:
        v_re, v_im = nominal_voltages(model)
    # slack voltages are pinned to the nominal profile
    nom_re, nom_im = nominal_voltages(model)
    slack_idx = model.slack_np_indices()
    v_re[slack_idx] = nom_re[slack_idx]
    v_im[slack_idx] = nom_im[slack_idx]

    unk = model.nonslack_np_indices()
    m = len(unk)
    failure = None
    res, _ = _residual_parts(model, adm, v_re, v_im, p_load, q_load, p_ch, q_ch)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        norm = np.max(np.abs(res)) if res.size else 0.0
        if norm <= tolerance:
            iterations -= 1
            break
        jac = kcl_jacobian_arrays(model, adm, v_re, v_im, p_load, q_load, p_ch, q_ch)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            failure = "singular_jacobian"
            break
        # damped update: halve on residual growth or voltage collapse
        alpha = 1.0
        for _ in range(40):
            trial_re = v_re.copy()
            trial_im = v_im.copy()
            trial_re[unk] += alpha * step[:m]
            trial_im[unk] += alpha * step[m:]
            vsq = trial_re**2 + trial_im**2
            if np.any(vsq[guard_active] < VSQ_GUARD):
                alpha *= 0.5
                continue
            trial_res, _ = _residual_parts(
                model, adm, trial_re, trial_im, p_load, q_load, p_ch, q_ch
            )
            if np.max(np.abs(trial_res), initial=0.0) < norm or alpha < 1.0 / (2**20):
                v_re, v_im, res = trial_re, trial_im, trial_res
                break
            alpha *= 0.5
        else:
            failure = "stalled"
            break
    norm = np.max(np.abs(res)) if res.size else 0.0
    converged = bool(failure is None and norm <= tolerance)

    # finalize device currents and surrogate admittances at the iterate
    _, parts = _residual_parts(model, adm, v_re, v_im, p_load, q_load, p_ch, q_ch)
    il_re, il_im, ln_re, ln_im, ic_re, ic_im = parts
    vsq = v_re**2 + v_im**2
    g_load = np.where((p_load != 0.0) | (q_load != 0.0), p_load / vsq, 0.0)
    b_load = np.where((p_load != 0.0) | (q_load != 0.0), -q_load / vsq, 0.0)
    return PowerFlowState(
        v_real=v_re,
        v_imag=v_im,
        g_load=g_load,
        b_load=b_load,
        i_load_re=il_re,
        i_load_im=il_im,
        i_line_re=ln_re,
        i_line_im=ln_im,
        i_ch_re=ic_re,
        i_ch_im=ic_im,
        residual=res,
        converged=converged,
        iterations=iterations,
        tolerance=tolerance,
        failure=failure if not converged else None,
    )


# -- operating-limit checks ---------------------------------------------------


@dataclass(frozen=True)
class VoltageViolation:
    node: str
    phase: str
    magnitude: float
    lower: float
    upper: float
    amount: float  # per-unit distance outside the band


@dataclass(frozen=True)
class ThermalViolation:
    transformer: str
    phase: str
    magnitude: float
    rating: float
    amount: float


@dataclass(frozen=True)
class LimitReport:
    voltage: tuple
    thermal: tuple
    v_margin_min: float  # most binding voltage margin (negative if violated)
    i_margin_min: float

    @property
    def passed(self) -> bool:
        return not self.voltage and not self.thermal

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "v_margin_min": self.v_margin_min,
            "i_margin_min": self.i_margin_min,
            "voltage_violations": [v.__dict__ for v in self.voltage],
            "thermal_violations": [t.__dict__ for t in self.thermal],
        }


def check_limits(
    model: FeederModel,
    state: PowerFlowState,
    adm: Admittance | None = None,
    tol: float = 0.0,
) -> LimitReport:
    """List voltage-band and transformer-rating violations beyond ``tol``."""
    if adm is None:
        adm = assemble_admittance(model)
    mag = state.v_mag()
    voltage = []
    v_margin = math.inf
    for i, (nid, ph) in enumerate(model.np_list):
        node = model.node_by_id[nid]
        v_margin = min(v_margin, mag[i] - node.v_min, node.v_max - mag[i])
        if mag[i] < node.v_min - tol:
            voltage.append(
                VoltageViolation(nid, ph, float(mag[i]), node.v_min, node.v_max,
                                 float(node.v_min - mag[i]))
            )
        elif mag[i] > node.v_max + tol:
            voltage.append(
                VoltageViolation(nid, ph, float(mag[i]), node.v_min, node.v_max,
                                 float(mag[i] - node.v_max))
            )
    thermal = []
    i_margin = math.inf
    currents = transformer_phase_currents(adm, state.v_real, state.v_imag)
    for br, cur in zip(adm.transformer_branches, currents):
        amag = abs(cur)
        i_margin = min(i_margin, br.i_rated - amag)
        if amag > br.i_rated + tol:
            thermal.append(
                ThermalViolation(br.transformer_id, br.phase, float(amag), br.i_rated,
                                 float(amag - br.i_rated))
            )
    return LimitReport(
        voltage=tuple(voltage),
        thermal=tuple(thermal),
        v_margin_min=float(v_margin),
        i_margin_min=float(i_margin) if adm.transformer_branches else math.inf,
    )
