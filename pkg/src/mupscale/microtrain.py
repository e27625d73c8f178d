"""Three-layer network with per-layer width scaling, SGD/AdamW and norm tracing.

Forward pass for a batch X (rows are examples):

    h = n^-a_u X U^T,  p = phi(LN(h)),  z = n^-a_w p W^T,  f = n^-a_v LN(z) V^T

LayerNorm is optional and sits on h and z right before the next matrix.
With weight tying V is U^T.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .param_engine import Optimizer, ParamSpec, Role, SpecError, frac, resolve

LN_EPS = 1e-5
LN_PLACEMENT = "h -> LN -> phi -> W ; z -> LN -> V"

PARAM_ROLE = {
    "U": Role.INPUT,
    "W": Role.HIDDEN,
    "V": Role.OUTPUT,
    "ln_h.gain": Role.LAYERNORM,
    "ln_h.bias": Role.LAYERNORM,
    "ln_z.gain": Role.LAYERNORM,
    "ln_z.bias": Role.LAYERNORM,
}

# stream ids for the keyed generator
_INIT, _TEACHER, _POOL, _BATCH, _EVAL, _NOISE, _ATTN = range(7)
_LAYER_ID = {"U": 0, "W": 1, "V": 2}


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class NetworkConfig:
    width: int
    d_in: int
    d_out: int
    nonlinearity: str = "identity"
    layernorm: bool = False
    attention_probe: bool = False
    head_dim: int = 64
    weight_tied: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.width, self.d_in, self.d_out, self.head_dim) < 1:
            raise SpecError("width, d_in, d_out and head_dim must be positive")
        if self.nonlinearity not in _ACT:
            raise SpecError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.weight_tied and self.d_in != self.d_out:
            raise SpecError("weight tying requires d_in == d_out")


@dataclass(frozen=True)
class SwitchEvent:
    step: int
    role: Role
    c: Fraction

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "c", frac(self.c))


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    eta: float = 1e-2
    lam: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    grad_clip: Optional[float] = None
    switch_events: Tuple[SwitchEvent, ...] = ()
    frozen_roles: FrozenSet[Role] = frozenset()
    trace_stride: Optional[int] = None
    trace: bool = False
    eval_size: int = 512
    optimizer: Optional[Optimizer] = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise SpecError("steps must be >= 0 and batch_size >= 1")
        if self.eta <= 0 or self.lam < 0 or self.eps <= 0:
            raise SpecError("eta and eps must be positive, lambda non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise SpecError("Adam betas must lie in [0, 1)")
        check_schedule(self.schedule)
        events = tuple(self.switch_events)
        if [e.step for e in events] != sorted(e.step for e in events):
            raise SpecError("switch_events must be sorted by step")
        if any(e.step < 0 or (self.steps and e.step >= self.steps) for e in events):
            raise SpecError("switch_events must fall inside [0, steps)")
        object.__setattr__(self, "frozen_roles", frozenset(Role(r) for r in self.frozen_roles))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "teacher_student_regression"
    d_in: int = 16
    d_out: int = 4
    size: int = 4096
    noise_std: float = 0.0
    seed: int = 0
    teacher_width: int = 2048
    teacher_nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("teacher_student_regression", "synthetic_classification"):
            raise SpecError(f"unknown task kind {self.kind!r}")
        if self.teacher_nonlinearity not in _ACT:
            raise SpecError(f"unknown teacher nonlinearity {self.teacher_nonlinearity!r}")


# ---------------------------------------------------------------- schedule


def check_schedule(fractions: Sequence[float]) -> None:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise SpecError("schedule needs three non-negative fractions (warmup, stable, decay)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"schedule fractions must sum to 1, got {sum(fractions)}")


def lr_schedule(t: int, T: int, fractions: Sequence[float]) -> float:
    """Warmup-stable-decay multiplier at step t of T."""
    warm, _, decay = fractions
    W, D = warm * T, decay * T
    if W > 0 and t < W:
        return t / W
    if D > 0 and t > T - D:
        return max(0.0, (T - t) / D)
    return 1.0


# ---------------------------------------------------------------- network


def _identity(x):
    return x


_ACT = {
    "identity": (_identity, lambda x: np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(x.dtype)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
}


@dataclass
class NetworkState:
    spec: ParamSpec
    net: NetworkConfig
    params: Dict[str, np.ndarray]
    mult: Dict[str, float]
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    c_override: Dict[Role, Fraction] = field(default_factory=dict)
    updates: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.spec, self.net,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.mult),
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            dict(self.c_override), self.updates,
        )


def init_network(spec: ParamSpec, net: NetworkConfig) -> NetworkState:
    """Sample weights as keyed standard normals times n^-b."""
    if spec.weight_tied != net.weight_tied:
        raise SpecError("spec and network disagree on weight tying")
    if net.attention_probe and spec.attn_exponent is None:
        raise SpecError("attention probe needs an attn_exponent in the spec")
    if net.layernorm and Role.LAYERNORM not in spec.layers:
        raise SpecError("LayerNorm enabled but the spec has no LayerNorm exponent")
    n = net.width
    shapes = {"U": (n, net.d_in), "W": (n, n)}
    if not net.weight_tied:
        shapes["V"] = (net.d_out, n)
    params, mult = {}, {}
    for name, shape in shapes.items():
        hp = resolve(spec, PARAM_ROLE[name], n)
        base = keyed_rng(net.seed, _INIT, _LAYER_ID[name]).standard_normal(shape)
        params[name] = base * hp.init_std
        mult[name] = hp.multiplier
    mult["V"] = resolve(spec, Role.OUTPUT, n).multiplier
    if net.layernorm:
        for tag in ("ln_h", "ln_z"):
            params[f"{tag}.gain"] = np.ones(n)
            params[f"{tag}.bias"] = np.zeros(n)
    return NetworkState(spec, net, params, mult)


def out_matrix(state: NetworkState) -> np.ndarray:
    return state.params["U"].T if state.net.weight_tied else state.params["V"]


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _ln_backward(dy, gain, cache):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def forward(state: NetworkState, x: np.ndarray):
    """Returns (h, z, f, cache) for a batch x of shape (B, d_in)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != state.net.d_in:
        raise SpecError(f"input dimension {x.shape[1]} != d_in {state.net.d_in}")
    P, m = state.params, state.mult
    act, _ = _ACT[state.net.nonlinearity]
    h = m["U"] * (x @ P["U"].T)
    if state.net.layernorm:
        a1, ln1 = _ln_forward(h, P["ln_h.gain"], P["ln_h.bias"])
    else:
        a1, ln1 = h, None
    p = act(a1)
    z = m["W"] * (p @ P["W"].T)
    if state.net.layernorm:
        a2, ln2 = _ln_forward(z, P["ln_z.gain"], P["ln_z.bias"])
    else:
        a2, ln2 = z, None
    f = m["V"] * (a2 @ out_matrix(state).T)
    cache = {"x": x, "h": h, "a1": a1, "p": p, "z": z, "a2": a2, "ln1": ln1, "ln2": ln2}
    return h, z, f, cache


def backward(state: NetworkState, cache: dict, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients given dLoss/df for the batch (already batch-averaged)."""
    P, m = state.params, state.mult
    _, dact = _ACT[state.net.nonlinearity]
    df = np.atleast_2d(loss_grad)
    Vm = out_matrix(state)
    g = {}
    gV = m["V"] * (df.T @ cache["a2"])
    da2 = m["V"] * (df @ Vm)
    if state.net.layernorm:
        dz, g["ln_z.gain"], g["ln_z.bias"] = _ln_backward(da2, P["ln_z.gain"], cache["ln2"])
    else:
        dz = da2
    g["W"] = m["W"] * (dz.T @ cache["p"])
    da1 = (m["W"] * (dz @ P["W"])) * dact(cache["a1"])
    if state.net.layernorm:
        dh, g["ln_h.gain"], g["ln_h.bias"] = _ln_backward(da1, P["ln_h.gain"], cache["ln1"])
    else:
        dh = da1
    g["U"] = m["U"] * (dh.T @ cache["x"])
    if state.net.weight_tied:
        g["U"] = g["U"] + gV.T
    else:
        g["V"] = gV
    return g


def layer_exponent_c(state: NetworkState, role: Role) -> Fraction:
    if role in state.c_override:
        return state.c_override[role]
    src = Role.INPUT if (role is Role.OUTPUT and state.spec.weight_tied) else role
    return state.spec[src].c


def layer_lr(state: NetworkState, role: Role, eta: float) -> float:
    """eta * n^-c for the role, honouring switch overrides."""
    return eta * float(state.net.width) ** (-float(layer_exponent_c(state, role)))


def layer_wd(state: NetworkState, role: Role, lam: float) -> float:
    if role is Role.LAYERNORM:
        return 0.0
    return resolve(state.spec, role, state.net.width, lam=lam).wd


def step(state: NetworkState, grads: Dict[str, np.ndarray], t: int, cfg: TrainConfig,
         inplace: bool = False) -> NetworkState:
    """One optimizer update with decoupled weight decay.

    Returns a new state unless inplace is set, in which case `state` is updated and returned.
    """
    new = state if inplace else state.copy()
    for ev in cfg.switch_events:
        if ev.step <= t:
            new.c_override[ev.role] = ev.c
    if cfg.grad_clip is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / total) for k, g in grads.items()}
    sched = lr_schedule(t, cfg.steps, cfg.schedule) if cfg.steps else 1.0
    adam = state.spec.optimizer is Optimizer.ADAM
    k = new.updates + 1
    for name, g in grads.items():
        role = PARAM_ROLE[name]
        if role in cfg.frozen_roles:
            continue
        lr = sched * layer_lr(new, role, cfg.eta)
        wd = layer_wd(new, role, cfg.lam)
        theta = new.params[name]
        if adam:
            if name not in new.moments:
                new.moments[name] = (np.zeros_like(g), np.zeros_like(g))
            m, v = new.moments[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * (g * g)
            denom = np.sqrt(v / (1 - cfg.beta2 ** k))
            denom += cfg.eps
            upd = m / denom
            upd *= 1.0 / (1 - cfg.beta1 ** k)
        else:
            upd = g
        if wd:
            theta *= 1.0 - lr * wd
        theta -= lr * upd
    new.updates = k
    return new


# ---------------------------------------------------------------- task


class Task:
    """Teacher-student regression or classification with inputs of unit Euclidean norm on average."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        rng = keyed_rng(spec.seed, _TEACHER)
        m = spec.teacher_width
        self.T1 = rng.standard_normal((m, spec.d_in))
        self.T2 = rng.standard_normal((spec.d_out, m)) / math.sqrt(m)
        self.act = _ACT[spec.teacher_nonlinearity][0]
        self.pool_x, self.pool_y = self.sample(spec.size, keyed_rng(spec.seed, _POOL))

    def inputs(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.spec.d_in)) / math.sqrt(self.spec.d_in)

    def targets(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        y = self.act(x @ self.T1.T) @ self.T2.T
        if self.spec.kind == "synthetic_classification":
            return np.argmax(y, axis=1)
        if self.spec.noise_std > 0 and rng is not None:
            y = y + self.spec.noise_std * rng.standard_normal(y.shape)
        return y

    def sample(self, count: int, rng: np.random.Generator):
        x = self.inputs(count, rng)
        return x, self.targets(x, rng)

    def loss_and_grad(self, f: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        """Batch-mean loss and dLoss/df."""
        B = f.shape[0]
        if self.spec.kind == "synthetic_classification":
            s = f - f.max(axis=1, keepdims=True)
            logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
            loss = -float(np.mean(logp[np.arange(B), y]))
            grad = np.exp(logp)
            grad[np.arange(B), y] -= 1.0
            return loss, grad / B
        r = f - y
        return 0.5 * float(np.mean(np.sum(r * r, axis=1))), r / B


# ---------------------------------------------------------------- tracing


def rms(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _ratio(num, a, b) -> float:
    den = rms(a) * rms(b)
    return rms(num) / den if den > 0 else float("nan")


@dataclass
class NormTrace:
    rows: List[Tuple[int, str, str, float]] = field(default_factory=list)

    def add(self, step_: int, quantity: str, role: Role, value: float) -> None:
        self.rows.append((step_, quantity, Role(role).value, float(value)))

    def get(self, step_: int, quantity: str, role) -> float:
        role = Role(role).value
        for s, q, r, v in self.rows:
            if s == step_ and q == quantity and r == role:
                return v
        raise KeyError((step_, quantity, role))

    def steps(self) -> List[int]:
        return sorted({r[0] for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "quantity", "role", "value"])
        for s, q, r, v in self.rows:
            w.writerow([s, q, r, repr(v)])
        return buf.getvalue()


def record_init(trace: NormTrace, state: NetworkState, x: np.ndarray) -> None:
    h, z, f, _ = forward(state, x)
    for name in ("U", "W", "V"):
        if name in state.params:
            trace.add(0, "weight", PARAM_ROLE[name], rms(state.params[name]))
    trace.add(0, "act", Role.INPUT, rms(h))
    trace.add(0, "act", Role.HIDDEN, rms(z))
    trace.add(0, "act", Role.OUTPUT, rms(f))


def record_update(trace: NormTrace, t: int, prev: NetworkState, cur: NetworkState, x: np.ndarray) -> None:
    """Norms, three-term decompositions and alignment ratios of step t on batch x.

    Matrices act on the column-stacked batch, so each ratio is a pooled RMS ratio.
    """
    h0, z0, f0, c0 = forward(prev, x)
    h1, z1, f1, c1 = forward(cur, x)
    W0, dW = prev.params["W"], cur.params["W"] - prev.params["W"]
    V0 = out_matrix(prev)
    dV = out_matrix(cur) - V0
    p0, dp = c0["p"].T, (c1["p"] - c0["p"]).T
    q0, dq = c0["a2"].T, (c1["a2"] - c0["a2"]).T
    mw, mv = prev.mult["W"], prev.mult["V"]
    for name in ("U", "W", "V"):
        if name in cur.params:
            trace.add(t, "weight", PARAM_ROLE[name], rms(cur.params[name]))
            trace.add(t, "weight_update", PARAM_ROLE[name], rms(cur.params[name] - prev.params[name]))
    trace.add(t, "act", Role.INPUT, rms(h1))
    trace.add(t, "act", Role.HIDDEN, rms(z1))
    trace.add(t, "act", Role.OUTPUT, rms(f1))
    trace.add(t, "act_update", Role.INPUT, rms(h1 - h0))
    trace.add(t, "act_update", Role.HIDDEN, rms(z1 - z0))
    trace.add(t, "act_update", Role.OUTPUT, rms(f1 - f0))
    for role, M0, dM, a0, da, m in ((Role.HIDDEN, W0, dW, p0, dp, mw), (Role.OUTPUT, V0, dV, q0, dq, mv)):
        wu, au, so = dM @ a0, M0 @ da, dM @ da
        trace.add(t, "term_weight", role, m * rms(wu))
        trace.add(t, "term_act", role, m * rms(au))
        trace.add(t, "term_second", role, m * rms(so))
        trace.add(t, "align_rho", role, _ratio(wu, dM, a0))
        trace.add(t, "align_omega", role, _ratio(au, M0, da))
        trace.add(t, "align_sigma", role, _ratio(so, dM, da))


def trace_steps(cfg: TrainConfig) -> FrozenSet[int]:
    if not cfg.trace:
        return frozenset()
    stride = cfg.trace_stride or max(1, cfg.steps // 100)
    return frozenset({0, 1} | set(range(0, cfg.steps + 1, stride)))


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    losses: List[float]
    final_loss: float
    steps_run: int
    diverged: bool
    trace: NormTrace
    metadata: Dict[str, object]
    state: Optional[NetworkState] = None


def train(spec: ParamSpec, net: NetworkConfig, task: TaskSpec, cfg: TrainConfig,
          keep_state: bool = False) -> RunResult:
    """Deterministic training run; diverged runs end with final_loss = +inf."""
    if cfg.optimizer is not None and Optimizer(cfg.optimizer) is not spec.optimizer:
        raise SpecError("train config optimizer differs from the spec's optimizer")
    if net.d_in != task.d_in or net.d_out != task.d_out:
        raise SpecError("network and task dimensions disagree")
    if task.kind == "synthetic_classification" and task.d_out < 2:
        raise SpecError("classification needs d_out >= 2")
    data = _task_cache(task)
    state = init_network(spec, net)
    batch_rng = keyed_rng(net.seed, _BATCH)
    eval_x, eval_y = data.sample(cfg.eval_size, keyed_rng(task.seed, _EVAL))
    recorded = trace_steps(cfg)
    trace = NormTrace()
    losses: List[float] = []
    diverged = False
    t_run = 0
    if 0 in recorded and cfg.steps == 0:
        record_init(trace, state, data.pool_x[: cfg.batch_size])
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(cfg.steps):
            idx = batch_rng.integers(0, task.size, cfg.batch_size)
            x, y = data.pool_x[idx], data.pool_y[idx]
            if t == 0 and 0 in recorded:
                record_init(trace, state, x)
            _, _, f, cache = forward(state, x)
            loss, dl = data.loss_and_grad(f, y)
            losses.append(loss)
            if not math.isfinite(loss):
                diverged = True
                break
            grads = backward(state, cache, dl)
            if (t + 1) in recorded:
                nxt = step(state, grads, t, cfg)
                record_update(trace, t + 1, state, nxt, x)
                state = nxt
            else:
                state = step(state, grads, t, cfg, inplace=True)
            t_run = t + 1
        if not diverged:
            _, _, f, _ = forward(state, eval_x)
            final, _ = data.loss_and_grad(f, eval_y)
            if not math.isfinite(final):
                diverged = True
    final_loss = math.inf if diverged else final
    meta = {"ln_placement": LN_PLACEMENT if net.layernorm else "none",
            "optimizer": spec.optimizer.value, "spec": spec.name, "width": net.width}
    return RunResult(losses, final_loss, t_run, diverged, trace, meta, state if keep_state else None)


_TASKS: Dict[TaskSpec, Task] = {}


def _task_cache(spec: TaskSpec) -> Task:
    task = _TASKS.get(spec)
    if task is None:
        if len(_TASKS) > 8:
            _TASKS.clear()
        task = _TASKS[spec] = Task(spec)
    return task


# ---------------------------------------------------------------- attention probe


def measure_attention_logit_ratio(d: int, seed: int = 0, tokens: int = 8, aligned: bool = False) -> float:
    """RMS(Q K^T) / (RMS(Q) RMS(K)) for random rows; K = Q when aligned."""
    if d < 1:
        raise SpecError("head_dim must be >= 1")
    rng = keyed_rng(seed, _ATTN, d)

    def unit_rows(a):
        return a / np.sqrt(np.mean(a * a, axis=1, keepdims=True))

    Q = unit_rows(rng.standard_normal((tokens, d)))
    K = Q if aligned else unit_rows(rng.standard_normal((tokens, d)))
    return _ratio(Q @ K.T, Q, K)
