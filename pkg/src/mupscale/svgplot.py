"""Six-panel SVG figures rendered from a fit report.

Only report contents are drawn; nothing is refitted. Output is deterministic
text so panels can be compared byte for byte.
"""
from __future__ import annotations

import math
import os
import re
from html import escape
from typing import Dict, List, Optional, Sequence, Tuple

W, H = 420, 300
ML, MR, MT, MB = 58, 16, 30, 42
PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")

PANELS = (
    ("a_loss_curves", "Loss vs log2 learning rate"),
    ("b_joint_fit", "Joint fit overlay"),
    ("c_normalized", "Normalized coordinates"),
    ("d_loss_law", "Optimal loss vs width"),
    ("e_nu_law", "Optimal log2 LR vs width"),
    ("f_curvature_law", "Curvature vs width"),
)


def _num(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _tick(x: float) -> str:
    if x == 0:
        return "0"
    a = abs(x)
    if a >= 1e4 or a < 1e-2:
        return f"{x:.1e}"
    return f"{x:.3g}"


class Axes:
    def __init__(self, title: str, xlabel: str, ylabel: str, logx: bool = False, logy: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.logx, self.logy = logx, logy
        self.items: List[Tuple[str, list, list, str, str]] = []
        self.legend: List[Tuple[str, str]] = []

    def _ok(self, x, y):
        if x is None or y is None or not (math.isfinite(x) and math.isfinite(y)):
            return False
        return (not self.logx or x > 0) and (not self.logy or y > 0)

    def line(self, xs, ys, color, dash: str = ""):
        pts = [(x, y) for x, y in zip(xs, ys) if self._ok(x, y)]
        if pts:
            self.items.append(("line", [p[0] for p in pts], [p[1] for p in pts], color, dash))

    def points(self, xs, ys, color):
        pts = [(x, y) for x, y in zip(xs, ys) if self._ok(x, y)]
        if pts:
            self.items.append(("pts", [p[0] for p in pts], [p[1] for p in pts], color, ""))

    def label(self, text: str, color: str):
        self.legend.append((text, color))

    def _range(self, axis: int, log: bool):
        vals = [v for it in self.items for v in it[1 + axis]]
        if log:
            vals = [math.log10(v) for v in vals]
        if not vals:
            return 0.0, 1.0
        lo, hi = min(vals), max(vals)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.04 * (hi - lo)
        return lo - pad, hi + pad

    def render(self) -> str:
        x0, x1 = self._range(0, self.logx)
        y0, y1 = self._range(1, self.logy)
        pw, ph = W - ML - MR, H - MT - MB

        def px(x):
            v = math.log10(x) if self.logx else x
            return ML + (v - x0) / (x1 - x0) * pw

        def py(y):
            v = math.log10(y) if self.logy else y
            return MT + ph - (v - y0) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
               f'font-family="sans-serif" font-size="10">',
               f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
               f'<text x="{W / 2:.0f}" y="16" text-anchor="middle" font-size="12">{escape(self.title)}</text>',
               f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
        for k in range(5):
            fx = x0 + (x1 - x0) * (k + 0.5) / 5
            fy = y0 + (y1 - y0) * (k + 0.5) / 5
            tx = 10 ** fx if self.logx else fx
            ty = 10 ** fy if self.logy else fy
            X = ML + (k + 0.5) / 5 * pw
            Y = MT + ph - (k + 0.5) / 5 * ph
            out.append(f'<line x1="{_num(X)}" y1="{MT + ph}" x2="{_num(X)}" y2="{MT + ph + 4}" stroke="black"/>')
            out.append(f'<text x="{_num(X)}" y="{MT + ph + 15}" text-anchor="middle">{_tick(tx)}</text>')
            out.append(f'<line x1="{ML - 4}" y1="{_num(Y)}" x2="{ML}" y2="{_num(Y)}" stroke="black"/>')
            out.append(f'<text x="{ML - 6}" y="{_num(Y + 3)}" text-anchor="end">{_tick(ty)}</text>')
        out.append(f'<text x="{ML + pw / 2:.0f}" y="{H - 8}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="12" y="{MT + ph / 2:.0f}" text-anchor="middle" '
                   f'transform="rotate(-90 12 {MT + ph / 2:.0f})">{escape(self.ylabel)}</text>')
        for kind, xs, ys, color, dash in self.items:
            if kind == "line":
                d = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys))
                extra = f' stroke-dasharray="{dash}"' if dash else ""
                out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')
            else:
                for x, y in zip(xs, ys):
                    out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="2.5" fill="{color}"/>')
        for i, (text, color) in enumerate(self.legend):
            y = MT + 12 + 12 * i
            out.append(f'<rect x="{W - MR - 70}" y="{y - 7}" width="8" height="8" fill="{color}"/>')
            out.append(f'<text x="{W - MR - 58}" y="{y}">{escape(text)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


def render_panels(entry: Dict) -> Dict[str, str]:
    """Panel id -> SVG text for one report entry."""
    name = entry["name"]
    panels: Dict[str, str] = {}
    titles = dict(PANELS)

    ax = Axes(f"{titles['a_loss_curves']} ({name})", "nu = log2(eta)", "final loss")
    for i, c in enumerate(entry["curves"]):
        ax.points(c["nu"], c["loss"], _color(i))
        ax.line(c["grid_nu"], c["grid_loss"], _color(i))
        ax.label(f"n={c['width']}", _color(i))
    panels["a_loss_curves"] = ax.render()

    ax = Axes(f"{titles['b_joint_fit']} ({name})", "nu = log2(eta)", "final loss")
    for i, (c, j) in enumerate(zip(entry["curves"], entry["joint_curves"])):
        ax.points(c["nu"], c["loss"], _color(i))
        ax.line(j["nu"], j["loss"], _color(i), dash="4 3")
        ax.label(f"n={c['width']}", _color(i))
    panels["b_joint_fit"] = ax.render()

    ax = Axes(f"{titles['c_normalized']} ({name})", "normalized nu", "normalized loss")
    for i, c in enumerate(entry["normalized"]):
        ax.line(c["nu_tilde"], c["L_tilde"], _color(i))
        ax.label(f"n={c['width']}", _color(i))
    panels["c_normalized"] = ax.render()

    widths = [o["width"] for o in entry["optima"]]
    laws = entry["law_curves"]

    ax = Axes(f"{titles['d_loss_law']} ({name})", "width n", "L*(n)", logx=True)
    ax.points(widths, [o["L_min"] for o in entry["optima"]], _color(0))
    ax.line(laws["loss"]["n"], laws["loss"]["y"], _color(1))
    ax.label(f"alpha={entry['loss_law']['alpha']:.3f}", _color(1))
    panels["d_loss_law"] = ax.render()

    ax = Axes(f"{titles['e_nu_law']} ({name})", "width n", "nu*(n)", logx=True)
    ax.points(widths, [o["nu_star"] for o in entry["optima"]], _color(0))
    ax.line(laws["nu"]["n"], laws["nu"]["y"], _color(1))
    ax.label(f"beta={entry['nu_law']['beta']:.3f}", _color(1))
    panels["e_nu_law"] = ax.render()

    ax = Axes(f"{titles['f_curvature_law']} ({name})", "width n", "H(n)", logx=True, logy=True)
    ax.points([c["width"] for c in entry["curvatures"]], [c["H"] for c in entry["curvatures"]], _color(0))
    ax.line(laws["H"]["n"], laws["H"]["y"], _color(1))
    ax.label(f"gamma={entry['H_law']['gamma']:.3f}", _color(1))
    panels["f_curvature_law"] = ax.render()
    return panels


def slug(name: str, lam: float) -> str:
    s = re.sub(r"[^A-Za-z0-9]+", "_", name.replace("μ", "mu")).strip("_")
    return f"{s}_lambda{lam:g}"


def write_panels(report: Dict, out_dir: str, specs: Optional[Sequence[str]] = None) -> List[str]:
    written = []
    for entry in report["specs"]:
        if specs and entry["name"] not in specs:
            continue
        d = os.path.join(out_dir, slug(entry["name"], entry["lambda"]))
        os.makedirs(d, exist_ok=True)
        for pid, svg in render_panels(entry).items():
            p = os.path.join(d, f"{pid}.svg")
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(svg)
            written.append(p)
    return written
