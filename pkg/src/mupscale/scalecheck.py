"""Measure first-step width-scaling exponents and compare them to the abcd predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .microtrain import (NetworkConfig, TaskSpec, TrainConfig, backward, forward, init_network,
                         measure_attention_logit_ratio, rms, train, _BATCH, _task_cache, keyed_rng)
from .param_engine import Alignment, Optimizer, ParamSpec, Role, SpecError

H = 0.5

ALIGN_KEYS = ("rho_w", "omega_w", "sigma_w", "rho_v", "omega_v", "sigma_v")
UPDATE_QUANTITIES = ("norm_dh1", "norm_dz1", "norm_df1")
INIT_QUANTITIES = ("norm_h0", "norm_z0", "norm_f0")


def _alignment_values(alignment) -> Dict[str, float]:
    if isinstance(alignment, Mapping):
        return {k: float(alignment[k]) for k in ALIGN_KEYS}
    al = Alignment.parse(alignment)
    return {k: float(getattr(al, k)) for k in ALIGN_KEYS}


def predict_exponents(spec: ParamSpec, alignment: Union[Alignment, str, Mapping[str, float]] = "Init",
                      attn_alignment: float = H) -> Dict[str, float]:
    """Width exponents of first-step norms implied by the abcd exponents.

    Unlike the stability tables these do not assume the stable-init or r=0
    conditions: each term carries the exponent of whatever it multiplies.
    Inputs are taken with width-independent norm.
    """
    if spec.weight_tied:
        raise SpecError("first-step predictions are implemented for untied networks only")
    al = _alignment_values(alignment)
    u, w, v = (spec[r] for r in (Role.INPUT, Role.HIDDEN, Role.OUTPUT))
    a_u, b_u, c_u = float(u.a), float(u.b), float(u.c)
    a_w, b_w, c_w = float(w.a), float(w.b), float(w.c)
    a_v, b_v, c_v = float(v.a), float(v.b), float(v.c)

    e_h = -(a_u + b_u)
    e_z = H - a_w - b_w + e_h
    e_f = H - a_v - b_v + e_z

    # gradient norms at initialization
    back_z = -a_v - b_v                     # dL/dz
    back_h = H - a_w - b_w + back_z         # dL/dh
    g_v = -a_v + e_z
    g_w = -a_w + back_z + e_h
    g_u = -a_u + back_h

    if spec.optimizer is Optimizer.ADAM:   # first Adam step is sign(g): unit RMS
        d_u, d_w, d_v = -c_u, -c_w, -c_v
    else:
        d_u, d_w, d_v = -c_u + g_u, -c_w + g_w, -c_v + g_v

    r_u = -a_u + d_u
    z_terms = (al["rho_w"] - a_w + d_w + e_h, al["omega_w"] - a_w - b_w + r_u, al["sigma_w"] - a_w + d_w + r_u)
    r_w = max(z_terms)
    f_terms = (al["rho_v"] - a_v + d_v + e_z, al["omega_v"] - a_v - b_v + r_w, al["sigma_v"] - a_v + d_v + r_w)
    r_v = max(f_terms)
    out = {
        "norm_h0": e_h, "norm_z0": e_z, "norm_f0": e_f,
        "norm_gU0": g_u, "norm_gW0": g_w, "norm_gV0": g_v,
        "norm_dU1": d_u, "norm_dW1": d_w, "norm_dV1": d_v,
        "norm_dh1": r_u, "norm_dz1": r_w, "norm_df1": r_v,
        "dz1_weight": z_terms[0], "dz1_act": z_terms[1], "dz1_second": z_terms[2],
        "df1_weight": f_terms[0], "df1_act": f_terms[1], "df1_second": f_terms[2],
        "attn_logit": float(attn_alignment),
    }
    return out


@dataclass(frozen=True)
class ExponentMeasurement:
    quantity: str
    widths: tuple
    values: tuple
    slope: float
    slope_stderr: float
    n_seeds: int


def fit_slope(widths: Sequence[float], values: Sequence[float]):
    """OLS slope of log(value) on log(width) and its standard error."""
    x = np.log(np.asarray(widths, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    if x.size < 2:
        raise SpecError("need at least two widths for a slope")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = x.size - 2
    if dof > 0:
        s2 = float(resid @ resid) / dof
        se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    else:
        se = 0.0
    return float(coef[0]), se


# trace quantity -> (step, trace quantity, role)
_TRACE_MAP = {
    "norm_h0": (0, "act", Role.INPUT),
    "norm_z0": (0, "act", Role.HIDDEN),
    "norm_f0": (0, "act", Role.OUTPUT),
    "norm_dU1": (1, "weight_update", Role.INPUT),
    "norm_dW1": (1, "weight_update", Role.HIDDEN),
    "norm_dV1": (1, "weight_update", Role.OUTPUT),
    "norm_dh1": (1, "act_update", Role.INPUT),
    "norm_dz1": (1, "act_update", Role.HIDDEN),
    "norm_df1": (1, "act_update", Role.OUTPUT),
    "dz1_weight": (1, "term_weight", Role.HIDDEN),
    "dz1_act": (1, "term_act", Role.HIDDEN),
    "dz1_second": (1, "term_second", Role.HIDDEN),
    "df1_weight": (1, "term_weight", Role.OUTPUT),
    "df1_act": (1, "term_act", Role.OUTPUT),
    "df1_second": (1, "term_second", Role.OUTPUT),
    "align_rho_w": (1, "align_rho", Role.HIDDEN),
    "align_omega_w": (1, "align_omega", Role.HIDDEN),
    "align_sigma_w": (1, "align_sigma", Role.HIDDEN),
    "align_rho_v": (1, "align_rho", Role.OUTPUT),
    "align_omega_v": (1, "align_omega", Role.OUTPUT),
    "align_sigma_v": (1, "align_sigma", Role.OUTPUT),
}


@dataclass(frozen=True)
class ProbeSetup:
    """Task and step settings used for first-step measurements."""

    d_in: int = 16
    d_out: int = 4
    batch_size: int = 32
    eta: float = 0.05
    nonlinearity: str = "identity"
    teacher_width: int = 256
    task_seed: int = 0


def measure(spec: ParamSpec, widths: Sequence[int], n_seeds: int = 8,
            setup: ProbeSetup = ProbeSetup(), seed_offset: int = 0) -> List[ExponentMeasurement]:
    """One optimizer step per (width, seed); geometric means over seeds, then log-log slopes."""
    widths = sorted(int(n) for n in widths)
    if len(widths) < 4:
        raise SpecError("slope regression needs at least 4 widths")
    task = TaskSpec(d_in=setup.d_in, d_out=setup.d_out, seed=setup.task_seed,
                    teacher_width=setup.teacher_width, size=max(1024, setup.batch_size))
    cfg = TrainConfig(steps=1, batch_size=setup.batch_size, eta=setup.eta, trace=True, eval_size=8)
    per_width: Dict[str, List[float]] = {q: [] for q in list(_TRACE_MAP) + ["norm_gU0", "norm_gW0", "norm_gV0"]}
    used = []
    for n in widths:
        cells: Dict[str, List[float]] = {q: [] for q in per_width}
        for s in range(seed_offset, seed_offset + n_seeds):
            net = NetworkConfig(n, setup.d_in, setup.d_out, nonlinearity=setup.nonlinearity, seed=s)
            res = train(spec, net, task, cfg)
            vals = {q: res.trace.get(*_TRACE_MAP[q]) for q in _TRACE_MAP} if not res.diverged else {}
            if res.diverged or not all(math.isfinite(x) and x > 0 for x in vals.values()):
                continue
            vals.update(_init_grad_norms(spec, net, task, setup.batch_size))
            for q, x in vals.items():
                cells[q].append(x)
        used.append(len(cells["norm_h0"]))
        for q in per_width:
            arr = np.asarray(cells[q])
            per_width[q].append(float(np.exp(np.mean(np.log(arr)))) if arr.size else float("nan"))
    out = []
    for q, vals in per_width.items():
        if not all(math.isfinite(x) and x > 0 for x in vals):
            continue
        slope, se = fit_slope(widths, vals)
        out.append(ExponentMeasurement(q, tuple(widths), tuple(vals), slope, se, min(used)))
    return out


def _init_grad_norms(spec, net, task_spec, batch_size) -> Dict[str, float]:
    # gradients on the same first batch train() draws
    task = _task_cache(task_spec)
    state = init_network(spec, net)
    idx = keyed_rng(net.seed, _BATCH).integers(0, task_spec.size, batch_size)
    x, y = task.pool_x[idx], task.pool_y[idx]
    _, _, f, cache = forward(state, x)
    _, dl = task.loss_and_grad(f, y)
    g = backward(state, cache, dl)
    return {"norm_gU0": rms(g["U"]), "norm_gW0": rms(g["W"]), "norm_gV0": rms(g["V"])}


def measure_attention(head_dims: Sequence[int], n_seeds: int = 8, tokens: int = 8,
                      aligned: bool = False) -> ExponentMeasurement:
    head_dims = sorted(int(d) for d in head_dims)
    vals = []
    for d in head_dims:
        r = [measure_attention_logit_ratio(d, seed=s, tokens=tokens, aligned=aligned) for s in range(n_seeds)]
        vals.append(float(np.exp(np.mean(np.log(r)))))
    slope, se = fit_slope(head_dims, vals)
    return ExponentMeasurement("attn_logit", tuple(head_dims), tuple(vals), slope, se, n_seeds)


@dataclass(frozen=True)
class CheckRow:
    quantity: str
    measured: float
    predicted: float
    tolerance: float
    passed: bool
    predicted_init: Optional[float] = None
    predicted_full: Optional[float] = None


@dataclass
class ScalingReport:
    spec_name: str
    optimizer: str
    rows: List[CheckRow] = field(default_factory=list)
    alignment_rows: List[CheckRow] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def alignment_ok(self) -> bool:
        return all(r.passed for r in self.alignment_rows)

    def row(self, quantity: str) -> CheckRow:
        for r in self.rows + self.alignment_rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    def to_dict(self) -> dict:
        def conv(r: CheckRow):
            return {"quantity": r.quantity, "measured": r.measured, "predicted": r.predicted,
                    "tolerance": r.tolerance, "pass": r.passed,
                    "predicted_init": r.predicted_init, "predicted_full": r.predicted_full}
        return {"spec": self.spec_name, "optimizer": self.optimizer, "ok": self.ok,
                "alignment_ok": self.alignment_ok,
                "rows": [conv(r) for r in self.rows], "alignment_rows": [conv(r) for r in self.alignment_rows]}

    def table(self) -> str:
        lines = [f"{'quantity':<14} {'measured':>9} {'predicted':>9} {'init':>7} {'full':>7} {'tol':>5}  result"]
        for r in self.rows + self.alignment_rows:
            pi = "" if r.predicted_init is None else f"{r.predicted_init:7.3f}"
            pf = "" if r.predicted_full is None else f"{r.predicted_full:7.3f}"
            lines.append(f"{r.quantity:<14} {r.measured:9.3f} {r.predicted:9.3f} {pi:>7} {pf:>7} "
                         f"{r.tolerance:5.2f}  {'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines)


DEFAULT_TOLERANCES = {"init": 0.1, "update": 0.15, "alignment": 0.05}


def verify(spec: ParamSpec, measurements: Sequence[ExponentMeasurement],
           tolerances: Optional[Mapping[str, float]] = None,
           quantities: Sequence[str] = INIT_QUANTITIES + UPDATE_QUANTITIES) -> ScalingReport:
    """Compare measured slopes with predictions that use the measured alignment slopes."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    meas = {m.quantity: m.slope for m in measurements}
    missing = [f"align_{k}" for k in ALIGN_KEYS if f"align_{k}" not in meas]
    if missing:
        raise SpecError(f"measurements lack alignment slopes: {missing}")
    measured_al = {k: meas[f"align_{k}"] for k in ALIGN_KEYS}
    pred = predict_exponents(spec, measured_al)
    p_init = predict_exponents(spec, "Init")
    p_full = predict_exponents(spec, "Full")
    rep = ScalingReport(spec.name, spec.optimizer.value)
    for q in quantities:
        if q not in meas:
            continue
        t = tol["init"] if q in INIT_QUANTITIES else tol["update"]
        rep.rows.append(CheckRow(q, meas[q], pred[q], t, abs(meas[q] - pred[q]) <= t, p_init[q], p_full[q]))
    full = Alignment.full()
    for k in ALIGN_KEYS:
        q = f"align_{k}"
        rep.alignment_rows.append(CheckRow(q, meas[q], H, tol["alignment"], abs(meas[q] - H) <= tol["alignment"],
                                           H, float(getattr(full, k))))
    if "attn_logit" in meas:
        rep.alignment_rows.append(CheckRow("attn_logit", meas["attn_logit"], H, tol["alignment"],
                                           abs(meas["attn_logit"] - H) <= tol["alignment"], H, 1.0))
    return rep


# ---------------------------------------------------------------- gauge dynamics


def gauge_deviation(spec_a: ParamSpec, spec_b: ParamSpec, steps: int = 100, width: int = 128,
                    eta: float = 2 ** -6, eps: float = 1e-12, grad_clip: Optional[float] = None,
                    setup: ProbeSetup = ProbeSetup(), seed: int = 0) -> float:
    """Max relative gap between the loss trajectories of two specs under coupled seeding (lambda = 0)."""
    if spec_a.optimizer is not spec_b.optimizer:
        raise SpecError("gauge comparison needs a common optimizer")
    task = TaskSpec(d_in=setup.d_in, d_out=setup.d_out, seed=setup.task_seed, teacher_width=setup.teacher_width)
    net = NetworkConfig(width, setup.d_in, setup.d_out, nonlinearity=setup.nonlinearity, seed=seed)
    cfg = TrainConfig(steps=steps, batch_size=setup.batch_size, eta=eta, lam=0.0, eps=eps,
                      grad_clip=grad_clip, eval_size=64)
    la = np.asarray(train(spec_a, net, task, cfg).losses)
    lb = np.asarray(train(spec_b, net, task, cfg).losses)
    if la.shape != lb.shape or not (np.all(np.isfinite(la)) and np.all(np.isfinite(lb))):
        return float("inf")
    return float(np.max(np.abs(la - lb) / np.maximum(np.abs(la), 1e-300)))


def verify_gauge(spec_a: ParamSpec, spec_b: ParamSpec, steps: int = 100, tol: float = 1e-5, **kw) -> bool:
    return gauge_deviation(spec_a, spec_b, steps=steps, **kw) <= tol
