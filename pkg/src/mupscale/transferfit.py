"""Transfer metrics from loss-vs-learning-rate sweeps across widths.

Pipeline: filter runs near each width's optimum, smooth each curve with a
cubic spline, read off nu*(n), L*(n) and the curvature H(n), fit power laws
in width, jointly fit the full loss model, then report E, kappa, R_inf.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import UnivariateSpline
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

HUBER_DELTA = 1e-3
EXPONENT_CAP = 2.0
DEFAULT_RESTARTS = 200
DEFAULT_F = 1.35
DEFAULT_S = 0.1
GRID_POINTS = 400
MIN_POINTS = 4


class InsufficientData(ValueError):
    """Raised when filtering or fitting leaves too little data."""


class FitError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


def huber(r: np.ndarray, delta: float = HUBER_DELTA) -> float:
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))))


# ---------------------------------------------------------------- curves


@dataclass
class WidthCurve:
    width: int
    nu: np.ndarray
    loss: np.ndarray
    grid_nu: Optional[np.ndarray] = None
    grid_loss: Optional[np.ndarray] = None

    @property
    def interpolated(self) -> bool:
        return self.grid_nu is not None


def filter_runs(records: Iterable, f: float = DEFAULT_F, min_points: int = MIN_POINTS):
    """Keep finite losses within f times each width's best loss.

    `records` are objects or dicts with width, nu and final_loss. Duplicate
    (width, nu) entries are averaged. Returns (curves, dropped_widths).
    """
    by_width: Dict[int, Dict[float, List[float]]] = {}
    for r in records:
        get = r.get if isinstance(r, Mapping) else (lambda k, _r=r: getattr(_r, k))
        n, nu, loss = int(get("width")), float(get("nu")), float(get("final_loss"))
        by_width.setdefault(n, {}).setdefault(nu, []).append(loss)
    curves, dropped = [], []
    for n in sorted(by_width):
        pts = sorted((nu, float(np.mean(ls))) for nu, ls in by_width[n].items()
                     if all(math.isfinite(x) for x in ls))
        if not pts:
            dropped.append(n)
            continue
        best = min(l for _, l in pts)
        keep = [(nu, l) for nu, l in pts if l <= f * best]
        if len(keep) < min_points:
            dropped.append(n)
            continue
        arr = np.asarray(keep)
        curves.append(WidthCurve(n, arr[:, 0], arr[:, 1]))
    if not curves:
        raise InsufficientData(f"no width kept at least {min_points} points (dropped widths: {dropped})")
    return curves, dropped


def interpolate(curve: WidthCurve, s: float = DEFAULT_S, grid: int = GRID_POINTS) -> WidthCurve:
    """Cubic smoothing spline with residual budget S = s * N * Var(L), sampled on a uniform grid."""
    N = curve.nu.size
    if N < 4:
        raise InsufficientData(f"width {curve.width}: a cubic spline needs >= 4 points, have {N}")
    if np.any(np.diff(curve.nu) <= 0):
        raise InsufficientData(f"width {curve.width}: learning-rate abscissae must be strictly increasing")
    S = s * N * float(np.var(curve.loss))
    try:
        spl = UnivariateSpline(curve.nu, curve.loss, k=3, s=S)
    except Exception as exc:  # scipy raises a mix of ValueError/dfitpack errors
        raise InsufficientData(f"width {curve.width}: spline fit failed ({exc})") from None
    g = np.linspace(curve.nu[0], curve.nu[-1], grid)
    return WidthCurve(curve.width, curve.nu, curve.loss, g, spl(g))


def extract_optimum(curve: WidthCurve) -> Tuple[float, float]:
    """nu* from the dense grid (first minimum), L_min from the raw points."""
    if not curve.interpolated:
        raise ValueError("curve must be interpolated first")
    i = int(np.argmin(curve.grid_loss))
    return float(curve.grid_nu[i]), float(np.min(curve.loss))


@dataclass(frozen=True)
class CurvatureFit:
    width: int
    nu_star: float
    L_min: float
    H: float
    residual: float


def fit_curvature(curve: WidthCurve, nu_star: float) -> CurvatureFit:
    """Least squares L = L_min + H/2 (nu - nu*)^2 on the dense grid, H >= 0."""
    x = 0.5 * (curve.grid_nu - nu_star) ** 2
    y = curve.grid_loss
    A = np.vstack([np.ones_like(x), x]).T
    (L0, Hc), *_ = np.linalg.lstsq(A, y, rcond=None)
    if Hc < 0:
        L0, Hc = float(np.mean(y)), 0.0
    r = y - (L0 + Hc * x)
    return CurvatureFit(curve.width, float(nu_star), float(L0), float(Hc), float(np.mean(r * r)))


# ---------------------------------------------------------------- power laws


@dataclass(frozen=True)
class PowerLawFit:
    asymptote: float
    coef: float
    exponent: float
    huber_residual: float
    capped: bool = False
    flags: Tuple[str, ...] = ()

    def __call__(self, n):
        return self.asymptote + self.coef * np.asarray(n, dtype=np.float64) ** (-self.exponent)


def _multistart(residual: Callable, jac: Callable, starts: np.ndarray, lower, upper,
                loss: str = "huber") -> Tuple[np.ndarray, float]:
    """Run least squares from each start; lowest Huber objective wins, ties by index."""
    best_x, best_f = None, math.inf
    for x0 in starts:
        x0 = np.clip(x0, lower, upper)
        try:
            res = least_squares(residual, x0, jac=jac, bounds=(lower, upper), loss=loss,
                                f_scale=HUBER_DELTA, method="trf", x_scale="jac", max_nfev=400)
        except (ValueError, FloatingPointError):
            continue
        r = residual(res.x)
        if not np.all(np.isfinite(r)):
            continue
        obj = huber(r)
        if best_x is None or obj < best_f - 1e-15 * max(1.0, abs(best_f)):
            best_x, best_f = res.x, obj
    if best_x is None:
        raise FitError("optimizer failed from every start")
    return best_x, best_f


def _loguniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def _prep(n, y, label):
    n = np.asarray(n, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if n.size < 3:
        raise InsufficientData(f"{label} fit needs >= 3 widths, have {n.size}")
    order = np.argsort(n)
    return n[order], y[order]


def _cap_flag(exponent: float, hi: float) -> Tuple[float, bool]:
    if exponent >= hi - 1e-6:
        return hi, True
    return exponent, False


def fit_loss_law(n: Sequence[float], L: Sequence[float], restarts: int = DEFAULT_RESTARTS,
                 seed: int = 0) -> PowerLawFit:
    """L(n) = L_inf + A n^-alpha, Huber on log residuals, L_inf, A >= 0, 0 <= alpha <= 2."""
    n, L = _prep(n, L, "loss")
    if np.any(L <= 0):
        raise InsufficientData("log-space loss fit needs positive losses")
    n0 = n[0]
    u = n / n0
    lu = np.log(u)
    logL = np.log(L)

    def resid(p):
        Li, A, a = p
        return np.log(Li + A * u ** (-a)) - logL

    def jac(p):
        Li, A, a = p
        t = u ** (-a)
        m = Li + A * t
        return np.stack([1 / m, t / m, -A * t * lu / m], axis=1)

    rng = np.random.default_rng(seed)
    lmin, lmax = float(L.min()), float(L.max())
    span = max(lmax - lmin, 1e-6 * lmax)
    starts = np.column_stack([
        rng.uniform(0, lmin, restarts),
        _loguniform(rng, span * 1e-2, span * 1e2 + lmin, restarts),
        _loguniform(rng, 0.05, EXPONENT_CAP, restarts),
    ])
    lo, hi = np.array([0.0, 0.0, 0.0]), np.array([np.inf, np.inf, EXPONENT_CAP])
    x, obj = _multistart(resid, jac, starts, lo, hi)
    alpha, capped = _cap_flag(float(x[2]), EXPONENT_CAP)
    A = float(x[1]) * n0 ** alpha
    flags = []
    if capped:
        flags.append("alpha_capped")
    if x[1] <= 1e-9 * max(lmax, 1e-300):
        flags.append("amplitude_zero")
    return PowerLawFit(float(x[0]), A, alpha, obj, capped, tuple(flags))


def _nu_fit(n, nu, beta_min, restarts, seed, starts_extra=None):
    n0 = n[0]
    u = n / n0
    lu = np.log(u)

    def resid(p):
        ni, B, b = p
        return ni + B * u ** (-b) - nu

    def jac(p):
        ni, B, b = p
        t = u ** (-b)
        return np.stack([np.ones_like(t), t, -B * t * lu], axis=1)

    rng = np.random.default_rng(seed)
    span = max(float(np.ptp(nu)), 1e-3)
    mags = _loguniform(rng, span * 1e-2, span * 1e2, restarts)
    starts = np.column_stack([
        rng.uniform(nu.min() - span, nu.max() + span, restarts),
        mags * rng.choice([-1.0, 1.0], restarts),
        _loguniform(rng, max(beta_min, 0.05), EXPONENT_CAP, restarts) if beta_min < EXPONENT_CAP
        else np.full(restarts, EXPONENT_CAP - 1e-9),
    ])
    if starts_extra is not None:
        starts = np.vstack([starts_extra, starts])
    # scipy needs lower < upper; a bound at the cap pins beta to within 1e-9 of it
    lo = np.array([-np.inf, -np.inf, min(beta_min, EXPONENT_CAP - 1e-9)])
    hi = np.array([np.inf, np.inf, EXPONENT_CAP])
    x, obj = _multistart(resid, jac, starts, lo, hi)
    return x, obj, n0


@dataclass(frozen=True)
class BetaSweep:
    beta_min: np.ndarray
    beta: np.ndarray
    objective: np.ndarray
    step_residual: float
    linear_residual: float
    jump_at: Optional[float]
    degenerate: bool


def _step_fit(x, y):
    best = (math.inf, None)
    for k in range(1, len(x)):
        lo, hi = np.median(y[:k]), np.median(y[k:])
        r = np.concatenate([y[:k] - lo, y[k:] - hi])
        obj = huber(r)
        if obj < best[0]:
            best = (obj, k)
    return best


def _linear_fit(x, y):
    def resid(p):
        return p[0] + p[1] * x - y
    A = np.vstack([np.ones_like(x), x]).T
    p0, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = least_squares(resid, p0, loss="huber", f_scale=HUBER_DELTA)
    return huber(resid(res.x))


def resolve_beta_degeneracy(n: Sequence[float], nu: Sequence[float], fit: PowerLawFit,
                            step: float = 0.05, restarts: int = 8, seed: int = 0):
    """Sweep a lower bound on beta and decide whether a small fitted beta is genuine.

    Returns (fit, resolved, sweep). `resolved` is True when the step model
    beats the linear model and the large-beta branch is adopted.
    """
    n, nu = _prep(n, nu, "nu")
    if fit.exponent >= 1.0:
        return fit, False, None
    grid = np.round(np.arange(0.0, EXPONENT_CAP + 1e-9, step), 10)
    betas, objs, sols = [], [], []
    prev = None
    for i, bmin in enumerate(grid):
        warm = None if prev is None else prev[None, :].copy()
        x, obj, n0 = _nu_fit(n, nu, float(bmin), restarts, seed + 1000 + i, warm)
        prev = x
        betas.append(float(x[2]))
        objs.append(obj)
        sols.append((x, n0))
    betas, objs = np.asarray(betas), np.asarray(objs)
    step_res, k = _step_fit(grid, betas)
    lin_res = _linear_fit(grid, betas)
    degenerate = k is not None and step_res < lin_res
    if not degenerate:
        return fit, False, BetaSweep(grid, betas, objs, step_res, lin_res, None, False)
    jump = float(grid[k])
    cand = [i for i in range(k, len(grid)) if betas[i] > jump]
    if not cand:
        cand = list(range(k, len(grid)))
    i = min(cand, key=lambda j: (objs[j], j))
    x, n0 = sols[i]
    beta, capped = _cap_flag(float(x[2]), EXPONENT_CAP)
    flags = tuple(sorted(set(fit.flags) | {"beta_degenerate_resolved"} | ({"beta_capped"} if capped else set())))
    out = PowerLawFit(float(x[0]), float(x[1]) * n0 ** beta, beta, float(objs[i]), capped, flags)
    return out, True, BetaSweep(grid, betas, objs, step_res, lin_res, jump, True)


def fit_nu_law(n: Sequence[float], nu_star: Sequence[float], restarts: int = DEFAULT_RESTARTS,
               seed: int = 0, sweep_restarts: int = 8):
    """nu*(n) = nu_inf + B n^-beta in linear space, beta in [0, 2], B free.

    Returns (fit, resolved). An exactly constant nu* is the limiting case of
    rapid convergence: every beta fits exactly, so the capped branch is returned.
    """
    n, nu = _prep(n, nu_star, "nu")
    if float(np.ptp(nu)) <= 1e-12 * max(1.0, float(np.max(np.abs(nu)))):
        return PowerLawFit(float(nu[0]), 0.0, EXPONENT_CAP, 0.0, True,
                           ("beta_capped", "beta_degenerate_resolved", "constant")), True
    x, obj, n0 = _nu_fit(n, nu, 0.0, restarts, seed)
    beta, capped = _cap_flag(float(x[2]), EXPONENT_CAP)
    fit = PowerLawFit(float(x[0]), float(x[1]) * n0 ** beta, beta, obj, capped,
                      ("beta_capped",) if capped else ())
    fit, resolved, _ = resolve_beta_degeneracy(n, nu, fit, restarts=sweep_restarts, seed=seed)
    return fit, resolved


def fit_H_law(n: Sequence[float], H: Sequence[float], seed: int = 0) -> PowerLawFit:
    """H(n) = C n^gamma by Huber regression of log H on log n; |gamma| <= 2."""
    n = np.asarray(n, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    ok = H > 0
    if not np.all(ok):
        log.warning("curvature fit: excluding widths with H <= 0: %s", n[~ok].tolist())
    n, H = n[ok], H[ok]
    if n.size < 3:
        raise InsufficientData(f"curvature law needs >= 3 widths with H > 0, have {n.size}")
    x, y = np.log(n), np.log(H)

    def resid(p):
        return p[0] + p[1] * x - y

    A = np.vstack([np.ones_like(x), x]).T
    p0, *_ = np.linalg.lstsq(A, y, rcond=None)
    p0[1] = np.clip(p0[1], -EXPONENT_CAP, EXPONENT_CAP)
    res = least_squares(resid, p0, loss="huber", f_scale=HUBER_DELTA,
                        bounds=([-np.inf, -EXPONENT_CAP], [np.inf, EXPONENT_CAP]))
    g = float(res.x[1])
    capped = abs(g) >= EXPONENT_CAP - 1e-6
    if capped:
        g = math.copysign(EXPONENT_CAP, g)
    return PowerLawFit(0.0, float(math.exp(res.x[0])), -g, huber(resid(res.x)), capped,
                       ("gamma_capped",) if capped else ())


def H_gamma(fit: PowerLawFit) -> float:
    """gamma of an H(n) = C n^gamma fit (stored as exponent = -gamma)."""
    return -fit.exponent + 0.0


# ---------------------------------------------------------------- joint model


JOINT_NAMES = ("L_inf", "A", "alpha", "C", "gamma", "B", "beta", "nu_inf")


@dataclass(frozen=True)
class JointFit:
    L_inf: float
    A: float
    alpha: float
    C: float
    gamma: float
    B: float
    beta: float
    nu_inf: float
    objective: float

    def predict(self, nu, n):
        nu = np.asarray(nu, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        return joint_model(nu, n, self.L_inf, self.A, self.alpha, self.C, self.gamma, self.B, self.beta, self.nu_inf)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in JOINT_NAMES + ("objective",)}


def joint_model(nu, n, L_inf, A, alpha, C, gamma, B, beta, nu_inf):
    d = nu - nu_inf - B * n ** (-beta)
    return L_inf + A * n ** (-alpha) + 0.5 * C * n ** gamma * d * d


def joint_fit(curves: Sequence[WidthCurve], loss_fit: PowerLawFit, nu_fit: PowerLawFit,
              H_fit: PowerLawFit, restarts: int = DEFAULT_RESTARTS, seed: int = 0,
              use_grid: bool = True, stride: int = 4) -> JointFit:
    """Fit the full loss model to all interpolated points with Huber loss and multistart."""
    nus, ns, ys = [], [], []
    for c in curves:
        if use_grid:
            if not c.interpolated:
                raise ValueError("joint fit uses interpolated curves")
            # every stride-th grid point; the smoothed curve carries no extra information at full density
            g, l = c.grid_nu[::stride], c.grid_loss[::stride]
            nus.append(g), ys.append(l), ns.append(np.full(g.size, float(c.width)))
        else:
            nus.append(c.nu), ys.append(c.loss), ns.append(np.full(c.nu.size, float(c.width)))
    nu, n, y = np.concatenate(nus), np.concatenate(ns), np.concatenate(ys)
    n0 = float(min(c.width for c in curves))
    u = n / n0
    lu = np.log(u)

    # parameters: L_inf, A', alpha, C', gamma, B', beta, nu_inf with amplitudes at reference width n0
    def resid(p):
        Li, A, a, C, g, B, b, ni = p
        d = nu - ni - B * u ** (-b)
        return Li + A * u ** (-a) + 0.5 * C * u ** g * d * d - y

    def jac(p):
        Li, A, a, C, g, B, b, ni = p
        ta, tg, tb = u ** (-a), u ** g, u ** (-b)
        d = nu - ni - B * tb
        q = 0.5 * tg * d * d
        cd = C * tg * d
        return np.stack([
            np.ones_like(nu), ta, -A * ta * lu, q, C * q * lu,
            -cd * tb, cd * B * tb * lu, -cd,
        ], axis=1)

    gamma0 = H_gamma(H_fit)
    base = np.array([
        loss_fit.asymptote, loss_fit.coef * n0 ** (-loss_fit.exponent), loss_fit.exponent,
        H_fit.coef * n0 ** gamma0, gamma0,
        nu_fit.coef * n0 ** (-nu_fit.exponent), nu_fit.exponent, nu_fit.asymptote,
    ])
    lo = np.array([0, 0, 0, 0, -EXPONENT_CAP, -np.inf, 0, -np.inf], dtype=np.float64)
    hi = np.array([np.inf, np.inf, EXPONENT_CAP, np.inf, EXPONENT_CAP, np.inf, EXPONENT_CAP, np.inf])
    rng = np.random.default_rng(seed)
    starts = [np.clip(base, lo, hi)]
    for _ in range(restarts - 1):
        p = base.copy()
        # log-uniform multiplicative kicks on magnitudes, additive kicks on exponents/offsets
        p[[0, 1, 3]] = np.maximum(p[[0, 1, 3]], 1e-6) * _loguniform(rng, 0.5, 2.0, 3)
        p[5] = (p[5] if p[5] != 0 else 1e-3) * _loguniform(rng, 0.5, 2.0, 1)[0] * rng.choice([1.0, -1.0], p=[0.9, 0.1])
        p[[2, 6]] = _loguniform(rng, 0.05, EXPONENT_CAP, 2)
        p[4] = p[4] + rng.uniform(-0.5, 0.5)
        p[7] = p[7] + rng.uniform(-1.0, 1.0)
        starts.append(np.clip(p, lo, hi))
    x, obj = _multistart(resid, jac, np.asarray(starts), lo, hi)
    Li, A, a, C, g, B, b, ni = (float(v) for v in x)
    return JointFit(Li, A * n0 ** a, a, C * n0 ** (-g), g, B * n0 ** b, b, ni, obj)


def compute_E(joint: JointFit, curves: Sequence[WidthCurve]) -> float:
    """Mean squared error of the joint model over the raw filtered points."""
    r = np.concatenate([c.loss - joint.predict(c.nu, float(c.width)) for c in curves])
    return float(np.mean(r * r))


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class TransferMetrics:
    name: str
    E: float
    kappa: float
    R_inf: float
    alpha: float
    beta: float
    gamma: float
    L_inf: float
    degenerate_beta_resolved: bool
    flags: Tuple[str, ...] = ()

    def as_report(self) -> dict:
        return {"name": self.name, "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "kappa": self.kappa, "E": self.E, "R_inf": self.R_inf, "L_inf": self.L_inf,
                "flags": sorted(set(self.flags) | ({"beta_degenerate_resolved"} if self.degenerate_beta_resolved else set()))}


def compute_metrics(name: str, alpha: float, beta: float, gamma: float, L_inf: float, E: float,
                    L_inf_best: float, resolved: bool = False, flags: Sequence[str] = ()) -> TransferMetrics:
    kappa = alpha - 2.0 * beta + gamma
    gap = L_inf - L_inf_best
    flags = list(flags)
    if gap < 0:
        flags.append("R_inf_clamped")
    return TransferMetrics(name, E, kappa, max(0.0, gap), alpha, beta, gamma, L_inf, resolved, tuple(flags))


@dataclass
class SpecFit:
    """Everything fitted for one parameterization."""

    name: str
    curves: List[WidthCurve]
    dropped_widths: List[int]
    optima: List[Tuple[int, float, float]]
    curvatures: List[CurvatureFit]
    loss_fit: PowerLawFit
    nu_fit: PowerLawFit
    H_fit: PowerLawFit
    resolved: bool
    joint: JointFit
    E: float

    @property
    def gamma(self) -> float:
        return H_gamma(self.H_fit)


def fit_spec(name: str, records: Iterable, f: float = DEFAULT_F, s: float = DEFAULT_S,
             restarts: int = DEFAULT_RESTARTS, seed: int = 0, grid: int = GRID_POINTS,
             sweep_restarts: int = 8) -> SpecFit:
    curves, dropped = filter_runs(records, f)
    if len(curves) < 3:
        raise InsufficientData(f"{name}: need >= 3 widths after filtering, kept {[c.width for c in curves]}")
    curves = [interpolate(c, s, grid) for c in curves]
    optima, curvs = [], []
    for c in curves:
        nu_star, Lmin = extract_optimum(c)
        optima.append((c.width, nu_star, Lmin))
        curvs.append(fit_curvature(c, nu_star))
    ns = [o[0] for o in optima]
    lf = fit_loss_law(ns, [o[2] for o in optima], restarts, seed)
    nf, resolved = fit_nu_law(ns, [o[1] for o in optima], restarts, seed, sweep_restarts)
    hf = fit_H_law([c.width for c in curvs if c.H > 0], [c.H for c in curvs if c.H > 0], seed)
    jf = joint_fit(curves, lf, nf, hf, restarts, seed)
    return SpecFit(name, curves, dropped, optima, curvs, lf, nf, hf, resolved, jf, compute_E(jf, curves))


def metrics_for(fits: Sequence[SpecFit]) -> List[TransferMetrics]:
    """Metrics of each spec with R_inf measured against the best L_inf in the set."""
    best = min(sf.loss_fit.asymptote for sf in fits)
    out = []
    for sf in fits:
        flags = list(sf.loss_fit.flags) + list(sf.nu_fit.flags) + list(sf.H_fit.flags)
        out.append(compute_metrics(sf.name, sf.loss_fit.exponent, sf.nu_fit.exponent, sf.gamma,
                                   sf.loss_fit.asymptote, sf.E, best, sf.resolved, flags))
    return out


# ---------------------------------------------------------------- normalized coordinates


@dataclass(frozen=True)
class NormalizedCurve:
    width: int
    nu_tilde: np.ndarray
    L_tilde: np.ndarray


def normalize_coordinates(curves: Sequence[WidthCurve], loss_fit: PowerLawFit, nu_fit: PowerLawFit,
                          use_grid: bool = True) -> List[NormalizedCurve]:
    """L~ = (L - L_inf)/(A n^-alpha), nu~ = (nu - nu_inf)/(B n^-beta); widths with zero scale are skipped."""
    out = []
    for c in curves:
        nu = c.grid_nu if (use_grid and c.interpolated) else c.nu
        L = c.grid_loss if (use_grid and c.interpolated) else c.loss
        sL = loss_fit.coef * c.width ** (-loss_fit.exponent)
        sN = nu_fit.coef * c.width ** (-nu_fit.exponent)
        if sL == 0 or sN == 0 or not (math.isfinite(sL) and math.isfinite(sN)):
            log.warning("normalized coordinates: width %d has a zero scale and is excluded", c.width)
            continue
        out.append(NormalizedCurve(c.width, (nu - nu_fit.asymptote) / sN, (L - loss_fit.asymptote) / sL))
    return out


def normalized_curvature_slope(normalized: Sequence[NormalizedCurve]) -> float:
    """Log-log slope in n of the curvature of L~ against nu~ (quadratic fit around the minimum)."""
    ns, hs = [], []
    for c in normalized:
        i = int(np.argmin(c.L_tilde))
        x = c.nu_tilde - c.nu_tilde[i]
        A = np.vstack([np.ones_like(x), x, 0.5 * x * x]).T
        coef, *_ = np.linalg.lstsq(A, c.L_tilde, rcond=None)
        if coef[2] > 0:
            ns.append(c.width)
            hs.append(coef[2])
    if len(ns) < 2:
        raise InsufficientData("need >= 2 widths with positive normalized curvature")
    return float(np.polyfit(np.log(ns), np.log(hs), 1)[0])
