"""Fit reports: JSON documents holding metrics plus every curve the plots need."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import transferfit as tf

REPORT_VERSION = 1
LAW_SAMPLES = 64


def _f(x) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _fl(xs) -> List[Optional[float]]:
    return [_f(v) for v in xs]


def group_records(records: Iterable) -> Dict[Tuple[str, float], list]:
    """Records keyed by (spec_name, lambda)."""
    out: Dict[Tuple[str, float], list] = defaultdict(list)
    for r in records:
        out[(r.spec_name, r.lam)].append(r)
    return dict(sorted(out.items()))


def fit_store(records: Sequence, specs: Optional[Sequence[str]] = None, f: float = tf.DEFAULT_F,
              s: float = tf.DEFAULT_S, restarts: int = tf.DEFAULT_RESTARTS, seed: int = 0,
              on_error=None) -> Tuple[List[Tuple[float, tf.SpecFit]], List[dict]]:
    """Fit every (spec, lambda) group; groups with too little data are reported, not fatal."""
    fits, failures = [], []
    for (name, lam), recs in group_records(records).items():
        if specs and name not in specs:
            continue
        try:
            fits.append((lam, tf.fit_spec(name, recs, f=f, s=s, restarts=restarts, seed=seed)))
        except (tf.InsufficientData, tf.FitError) as exc:
            failures.append({"name": name, "lambda": lam, "error": str(exc)})
            if on_error:
                on_error(name, lam, exc)
    return fits, failures


def _law_curve(fit: tf.PowerLawFit, widths: Sequence[int], gamma_law: bool = False):
    lo, hi = math.log(min(widths)), math.log(max(widths))
    ns = np.exp(np.linspace(lo, hi, LAW_SAMPLES))
    ys = fit.coef * ns ** (-fit.exponent) + (0.0 if gamma_law else fit.asymptote)
    return _fl(ns), _fl(ys)


def spec_entry(lam: float, sf: tf.SpecFit, m: tf.TransferMetrics) -> dict:
    widths = [c.width for c in sf.curves]
    joint_curves = []
    for c in sf.curves:
        joint_curves.append({"width": c.width, "nu": _fl(c.grid_nu), "loss": _fl(sf.joint.predict(c.grid_nu, float(c.width)))})
    normalized = [{"width": nc.width, "nu_tilde": _fl(nc.nu_tilde), "L_tilde": _fl(nc.L_tilde)}
                  for nc in tf.normalize_coordinates(sf.curves, sf.loss_fit, sf.nu_fit)]
    ln, ll = _law_curve(sf.loss_fit, widths)
    nn, nl = _law_curve(sf.nu_fit, widths)
    hn, hl = _law_curve(sf.H_fit, widths, gamma_law=True)
    return {
        "name": sf.name,
        "lambda": lam,
        "metrics": m.as_report(),
        "loss_law": {"L_inf": sf.loss_fit.asymptote, "A": sf.loss_fit.coef, "alpha": sf.loss_fit.exponent},
        "nu_law": {"nu_inf": sf.nu_fit.asymptote, "B": sf.nu_fit.coef, "beta": sf.nu_fit.exponent,
                   "degenerate_resolved": sf.resolved},
        "H_law": {"C": sf.H_fit.coef, "gamma": sf.gamma},
        "joint": sf.joint.as_dict(),
        "dropped_widths": list(sf.dropped_widths),
        "optima": [{"width": n, "nu_star": nu, "L_min": L} for n, nu, L in sf.optima],
        "curvatures": [{"width": c.width, "H": c.H} for c in sf.curvatures],
        "curves": [{"width": c.width, "nu": _fl(c.nu), "loss": _fl(c.loss),
                    "grid_nu": _fl(c.grid_nu), "grid_loss": _fl(c.grid_loss)} for c in sf.curves],
        "joint_curves": joint_curves,
        "normalized": normalized,
        "law_curves": {"loss": {"n": ln, "y": ll}, "nu": {"n": nn, "y": nl}, "H": {"n": hn, "y": hl}},
    }


def build_report(fits: Sequence[Tuple[float, tf.SpecFit]], f: float, s: float, restarts: int,
                 seed: int, failures: Sequence[dict] = ()) -> dict:
    """Report over all fitted groups; R_inf uses the best L_inf among them."""
    entries = []
    if fits:
        metrics = tf.metrics_for([sf for _, sf in fits])
        entries = [spec_entry(lam, sf, m) for (lam, sf), m in zip(fits, metrics)]
    return {"version": REPORT_VERSION, "f": f, "s": s, "restarts": restarts, "seed": seed,
            "specs": entries, "failures": list(failures)}


def dumps(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"


def load(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != REPORT_VERSION or "specs" not in doc:
        raise ValueError(f"{path}: not a fit report (version {doc.get('version')!r})")
    return doc


METRIC_COLUMNS = ("name", "lambda", "E", "kappa", "R_inf", "alpha", "beta", "gamma", "L_inf", "flags")


def metrics_rows(report: dict) -> List[dict]:
    rows = []
    for e in report["specs"]:
        m = e["metrics"]
        rows.append({"name": e["name"], "lambda": e["lambda"], "E": m["E"], "kappa": m["kappa"],
                     "R_inf": m["R_inf"], "alpha": m["alpha"], "beta": m["beta"], "gamma": m["gamma"],
                     "L_inf": m["L_inf"], "flags": ";".join(m["flags"])})
    return rows


def metrics_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in metrics_rows(report):
        w.writerow(r)
    return buf.getvalue()


def metrics_table(report: dict) -> str:
    lines = [f"{'spec':<24} {'lambda':>8} {'E':>10} {'kappa':>7} {'R_inf':>9}  flags"]
    for r in metrics_rows(report):
        lines.append(f"{r['name']:<24} {r['lambda']:8.3g} {r['E']:10.3e} {r['kappa']:7.3f} "
                     f"{r['R_inf']:9.3e}  {r['flags']}")
    for fl in report.get("failures", []):
        lines.append(f"{fl['name']:<24} {fl['lambda']:8.3g}  not fitted: {fl['error']}")
    return "\n".join(lines)
