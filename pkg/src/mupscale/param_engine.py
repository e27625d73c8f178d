"""Width-parameterization algebra.

Every layer carries four exponents (a, b, c, d): forward multiplier n^-a,
init std n^-b, learning rate eta * n^-c and weight decay lambda * n^-d.
All algebra is done with exact fractions; floats only appear in `resolve`.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

Number = Union[int, Fraction]


class Optimizer(str, Enum):
    SGD = "SGD"
    ADAM = "Adam"


class Role(str, Enum):
    INPUT = "Input"
    HIDDEN = "Hidden"
    OUTPUT = "Output"
    LAYERNORM = "LayerNorm"
    ATTENTION = "AttentionScale"


MATRIX_ROLES = (Role.INPUT, Role.HIDDEN, Role.OUTPUT)
LAYER_ORDER = (Role.INPUT, Role.HIDDEN, Role.OUTPUT, Role.LAYERNORM)


class SpecError(ValueError):
    """Raised for malformed or inconsistent parameterizations."""


def frac(x) -> Fraction:
    """Coerce ints, strings like '1/2', (num, den) pairs and Fractions."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (list, tuple)):
        if len(x) != 2:
            raise SpecError(f"expected [num, den], got {x!r}")
        return Fraction(int(x[0]), int(x[1]))
    if isinstance(x, bool):
        raise SpecError(f"not a rational: {x!r}")
    if isinstance(x, (int, str)):
        return Fraction(x)
    if isinstance(x, float):
        # only exactly representable small rationals make sense here
        return Fraction(x).limit_denominator(1 << 20)
    raise SpecError(f"not a rational: {x!r}")


@dataclass(frozen=True)
class Exponents:
    """Exponents of one layer role. Inapplicable fields stay None."""

    a: Optional[Fraction] = None
    b: Optional[Fraction] = None
    c: Optional[Fraction] = None
    d: Optional[Fraction] = None

    def __post_init__(self):
        for name in "abcd":
            v = getattr(self, name)
            if v is not None and not isinstance(v, Fraction):
                object.__setattr__(self, name, frac(v))

    @classmethod
    def full(cls, a: Number, b: Number, c: Number, d: Number) -> "Exponents":
        return cls(frac(a), frac(b), frac(c), frac(d))

    @property
    def complete(self) -> bool:
        return None not in (self.a, self.b, self.c, self.d)

    def items(self) -> Iterator[Tuple[str, Fraction]]:
        for name in "abcd":
            v = getattr(self, name)
            if v is not None:
                yield name, v


@dataclass(frozen=True)
class ParamSpec:
    name: str
    optimizer: Optimizer
    layers: Mapping[Role, Exponents]
    attn_exponent: Optional[Fraction] = None
    weight_tied: bool = False

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        layers = {Role(r): e for r, e in self.layers.items()}
        object.__setattr__(self, "layers", layers)
        if self.attn_exponent is not None and not isinstance(self.attn_exponent, Fraction):
            object.__setattr__(self, "attn_exponent", frac(self.attn_exponent))
        _validate(self)

    def __getitem__(self, role: Union[Role, str]) -> Exponents:
        role = Role(role)
        if role not in self.layers:
            raise SpecError(f"role {role.value} is absent from spec {self.name!r}")
        return self.layers[role]

    def exponents_key(self) -> tuple:
        """Everything except the name; used for equality of parameterizations."""
        rows = tuple((r.value, tuple(self.layers[r].items())) for r in LAYER_ORDER if r in self.layers)
        return (self.optimizer.value, self.weight_tied, rows, self.attn_exponent)

    def __eq__(self, other):
        if not isinstance(other, ParamSpec):
            return NotImplemented
        return self.name == other.name and self.exponents_key() == other.exponents_key()

    def __hash__(self):
        return hash((self.name, self.exponents_key()))

    def same_exponents(self, other: "ParamSpec") -> bool:
        return self.exponents_key() == other.exponents_key()

    def with_layer(self, role: Role, **changes) -> "ParamSpec":
        layers = dict(self.layers)
        layers[role] = replace(layers[role], **{k: frac(v) for k, v in changes.items()})
        return replace(self, layers=layers)

    def renamed(self, name: str) -> "ParamSpec":
        return replace(self, name=name)


def _validate(spec: ParamSpec) -> None:
    for role in (Role.INPUT, Role.HIDDEN):
        if role not in spec.layers or not spec.layers[role].complete:
            raise SpecError(f"{spec.name}: role {role.value} needs all of a, b, c, d")
    if Role.OUTPUT not in spec.layers:
        raise SpecError(f"{spec.name}: missing Output role")
    out = spec.layers[Role.OUTPUT]
    if spec.weight_tied:
        if out.a is None or any(v is not None for v in (out.b, out.c, out.d)):
            raise SpecError(f"{spec.name}: tied Output carries only its own multiplier exponent a")
    elif not out.complete:
        raise SpecError(f"{spec.name}: role Output needs all of a, b, c, d")
    ln = spec.layers.get(Role.LAYERNORM)
    if ln is not None and (ln.c is None or any(v is not None for v in (ln.a, ln.b, ln.d))):
        raise SpecError(f"{spec.name}: LayerNorm carries only a learning-rate exponent c")
    if Role.ATTENTION in spec.layers:
        raise SpecError(f"{spec.name}: attention scale is stored in attn_exponent, not in layers")


def _table(rows: Mapping[Role, tuple], ln_c: Number, attn: Number, name: str,
           optimizer: Optimizer) -> ParamSpec:
    layers = {role: Exponents.full(*row) for role, row in rows.items()}
    layers[Role.LAYERNORM] = Exponents(c=frac(ln_c))
    return ParamSpec(name=name, optimizer=optimizer, layers=layers, attn_exponent=frac(attn))


H = Fraction(1, 2)

# Adam, SP and muP in the a=0 gauge.
_ADAM_SP = {Role.INPUT: (0, 0, 1, -1), Role.HIDDEN: (0, H, 1, -1), Role.OUTPUT: (0, H, 1, -1)}
_ADAM_MUP = {Role.INPUT: (0, 0, 0, 0), Role.HIDDEN: (0, H, 1, -1), Role.OUTPUT: (0, 1, 1, -1)}
# SGD muP, no-multiplier gauge. SGD SP is muP with the four SP choices applied.
_SGD_MUP = {Role.INPUT: (0, 0, -1, 1), Role.HIDDEN: (0, H, 0, 0), Role.OUTPUT: (0, 1, 1, -1)}
_SGD_SP = {Role.INPUT: (0, 0, 0, 0), Role.HIDDEN: (0, H, 0, 0), Role.OUTPUT: (0, H, 1, -1)}

# Equivalent muP implementations, (a, b, c, d) per layer.
MUP_GAUGES: Dict[Optimizer, Dict[str, Dict[Role, tuple]]] = {
    Optimizer.SGD: {
        "No multipliers": _SGD_MUP,
        "No LR scaling": {Role.INPUT: (-H, H, 0, 0), Role.HIDDEN: (0, H, 0, 0), Role.OUTPUT: (H, H, 0, 0)},
        "Canonical": {Role.INPUT: (-H, H, 0, 0), Role.HIDDEN: (0, H, 0, 0), Role.OUTPUT: (H, H, 0, 0)},
        "CompleteP": {Role.INPUT: (0, 0, -1, 1), Role.HIDDEN: (0, H, 0, 0), Role.OUTPUT: (1, 0, -1, 1)},
    },
    Optimizer.ADAM: {
        "No multipliers": _ADAM_MUP,
        "No LR scaling": {Role.INPUT: (0, 0, 0, 0), Role.HIDDEN: (1, -H, 0, 0), Role.OUTPUT: (1, 0, 0, 0)},
        "Canonical": {Role.INPUT: (-H, H, H, -H), Role.HIDDEN: (0, H, 1, -1), Role.OUTPUT: (H, H, H, -H)},
        "CompleteP": {Role.INPUT: (0, 0, 0, 0), Role.HIDDEN: (0, H, 1, -1), Role.OUTPUT: (1, 0, 0, 0)},
    },
}

SP_NAME = "SP"
MUP_NAME = "muP"


def base_spec(kind: str, optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> ParamSpec:
    """Canonical SP or muP table. SGD muP uses the no-multiplier gauge."""
    optimizer = Optimizer(optimizer)
    k = kind.lower().replace("μ", "mu")
    if k == "sp":
        rows = _ADAM_SP if optimizer is Optimizer.ADAM else _SGD_SP
        return _table(rows, 1, H, SP_NAME, optimizer)
    if k == "mup":
        rows = _ADAM_MUP if optimizer is Optimizer.ADAM else _SGD_MUP
        return _table(rows, 0, 1, MUP_NAME, optimizer)
    raise SpecError(f"unknown base parameterization {kind!r} (expected SP or muP)")


def mup_gauge(variant: str, optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> ParamSpec:
    """One of the equivalent muP implementations (LayerNorm c=0, attention 1/d)."""
    optimizer = Optimizer(optimizer)
    try:
        rows = MUP_GAUGES[optimizer][variant]
    except KeyError:
        raise SpecError(f"unknown muP variant {variant!r}; known: {sorted(MUP_GAUGES[optimizer])}")
    return _table(rows, 0, 1, f"{MUP_NAME} ({variant})", optimizer)


@dataclass(frozen=True)
class AblationFlags:
    embd: bool = False
    last: bool = False
    ln: bool = False
    attn: bool = False

    LABELS = ("Embd", "Last", "LN", "Attn")

    def as_tuple(self) -> Tuple[bool, bool, bool, bool]:
        return (self.embd, self.last, self.ln, self.attn)

    @classmethod
    def all(cls) -> List["AblationFlags"]:
        return [cls(*bits) for bits in itertools.product((False, True), repeat=4)]


def flags_name(flags: AblationFlags) -> str:
    bits = flags.as_tuple()
    on = [lab for lab, b in zip(AblationFlags.LABELS, bits) if b]
    off = [lab for lab, b in zip(AblationFlags.LABELS, bits) if not b]
    if not on:
        return SP_NAME
    if not off:
        return MUP_NAME
    if len(off) == 1:
        return f"{MUP_NAME}-{off[0]}"
    return SP_NAME + "".join("+" + lab for lab in on)


def ablate(flags: AblationFlags, optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> ParamSpec:
    """SP with the selected muP choices swapped in."""
    sp, mup = base_spec("SP", optimizer), base_spec("muP", optimizer)
    spec = sp
    if flags.embd:
        mu = mup[Role.INPUT]
        spec = spec.with_layer(Role.INPUT, c=mu.c, d=mu.d)
    if flags.last:
        spec = spec.with_layer(Role.OUTPUT, b=mup[Role.OUTPUT].b)
    if flags.ln:
        spec = spec.with_layer(Role.LAYERNORM, c=mup[Role.LAYERNORM].c)
    if flags.attn:
        spec = replace(spec, attn_exponent=mup.attn_exponent)
    return spec.renamed(flags_name(flags))


def all_ablations(optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> List[ParamSpec]:
    return [ablate(f, optimizer) for f in AblationFlags.all()]


def flags_of(spec: ParamSpec) -> Optional[AblationFlags]:
    """Ablation flags whose spec has these exact exponents, if any."""
    if spec.weight_tied:
        return None
    for f in AblationFlags.all():
        if ablate(f, spec.optimizer).same_exponents(spec):
            return f
    return None


def spec_name(spec: ParamSpec) -> str:
    """'+'/'-' name for members of the ablation lattice; the stored name otherwise."""
    f = flags_of(spec)
    return flags_name(f) if f is not None else spec.name


def lookup_spec(name: str, optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> ParamSpec:
    """Resolve a name like 'SP+Embd', 'muP-Attn' or 'μP' to its spec."""
    key = name.strip().replace("μ", "mu").lower()
    for spec in all_ablations(optimizer):
        if spec.name.lower() == key:
            return spec
    for variant in MUP_GAUGES[Optimizer(optimizer)]:
        if f"{MUP_NAME} ({variant})".lower() == key:
            return mup_gauge(variant, optimizer)
    if key in ("mup-tied", "tied"):
        return weight_tied_spec(optimizer)
    raise SpecError(f"unknown spec name {name!r}")


@dataclass(frozen=True)
class ResolvedLayerHP:
    multiplier: float
    init_std: float
    lr: float
    wd: float


def _pow(n: float, e: Optional[Fraction]) -> float:
    return 1.0 if e is None else float(n) ** (-float(e))


def resolve(spec: ParamSpec, role: Union[Role, str], width: int, head_dim: int = 1,
            eta: float = 1.0, lam: float = 0.0) -> ResolvedLayerHP:
    """Numeric hyperparameters of one role at width n (tied Output inherits Input's b, c, d)."""
    role = Role(role)
    if width < 1 or head_dim < 1:
        raise SpecError("width and head_dim must be >= 1")
    if role is Role.ATTENTION:
        if spec.attn_exponent is None:
            raise SpecError(f"role {role.value} is absent from spec {spec.name!r}")
        return ResolvedLayerHP(_pow(head_dim, spec.attn_exponent), 1.0, 0.0, 0.0)
    e = spec[role]
    if role is Role.OUTPUT and spec.weight_tied:
        u = spec[Role.INPUT]
        e = Exponents(a=e.a, b=u.b, c=u.c, d=u.d)
    if role is Role.LAYERNORM:
        return ResolvedLayerHP(1.0, 0.0, eta * _pow(width, e.c), 0.0)
    return ResolvedLayerHP(_pow(width, e.a), _pow(width, e.b), eta * _pow(width, e.c), lam * _pow(width, e.d))


def gauge_transform(spec: ParamSpec, role: Union[Role, str], delta: Number) -> ParamSpec:
    """Shift one layer along its symmetry direction.

    SGD: (a+D, b-D, c-2D, d+2D); Adam: (a+D, b-D, c-D, d+D).
    """
    role = Role(role)
    delta = frac(delta)
    if spec.weight_tied:
        raise SpecError("gauge shifts are per-layer; a tied spec shares b and c across layers")
    e = spec.layers.get(role)
    if e is None or not e.complete:
        raise SpecError(f"role {role.value} lacks a full (a, b, c, d) set; no gauge direction")
    k = 2 if spec.optimizer is Optimizer.SGD else 1
    return spec.with_layer(role, a=e.a + delta, b=e.b - delta, c=e.c - k * delta, d=e.d + k * delta)


def weight_tied_spec(optimizer: Union[Optimizer, str] = Optimizer.ADAM) -> ParamSpec:
    """Tied-embedding muP with a_u = 0; the output takes a 1/n multiplier."""
    optimizer = Optimizer(optimizer)
    if optimizer is Optimizer.ADAM:
        u, w = (0, 0, 0, 0), (0, H, 1, -1)
    else:
        u, w = (0, 0, -1, 1), (0, H, 0, 0)
    layers = {
        Role.INPUT: Exponents.full(*u),
        Role.HIDDEN: Exponents.full(*w),
        Role.OUTPUT: Exponents(a=Fraction(1)),
        Role.LAYERNORM: Exponents(c=Fraction(0)),
    }
    return ParamSpec(name=f"{MUP_NAME}-tied", optimizer=optimizer, layers=layers,
                     attn_exponent=Fraction(1), weight_tied=True)


# ---------------------------------------------------------------- stability


@dataclass(frozen=True)
class Alignment:
    """First-step alignment exponents of the hidden and output layers."""

    rho_w: Fraction
    omega_w: Fraction
    sigma_w: Fraction
    rho_v: Fraction
    omega_v: Fraction
    sigma_v: Fraction
    label: str = "custom"

    @classmethod
    def init(cls) -> "Alignment":
        return cls(H, H, H, H, H, H, "Init")

    @classmethod
    def full(cls) -> "Alignment":
        one = Fraction(1)
        return cls(one, H, one, one, one, one, "Full")

    @classmethod
    def parse(cls, value: Union["Alignment", str]) -> "Alignment":
        if isinstance(value, Alignment):
            return value
        key = str(value).lower()
        if key == "init":
            return cls.init()
        if key == "full":
            return cls.full()
        raise SpecError(f"unknown alignment assumption {value!r} (expected Init or Full)")


@dataclass(frozen=True)
class Condition:
    cid: str
    role: Role
    relation: str
    satisfied: bool
    residual: Fraction


@dataclass(frozen=True)
class StabilityReport:
    alignment: str
    conditions: Tuple[Condition, ...]

    @property
    def ok(self) -> bool:
        return all(c.satisfied for c in self.conditions)

    def failed(self) -> List[Condition]:
        return [c for c in self.conditions if not c.satisfied]

    def by_id(self) -> Dict[str, Condition]:
        return {c.cid: c for c in self.conditions}


def _eq(cid, role, relation, lhs, rhs) -> Condition:
    r = lhs - rhs
    return Condition(cid, role, relation, r == 0, r)


def _ge(cid, role, relation, lhs, rhs) -> Condition:
    r = min(Fraction(0), lhs - rhs)
    return Condition(cid, role, relation, r == 0, r)


def update_terms(spec: ParamSpec, al: Alignment) -> Dict[str, tuple]:
    """Per-term exponents behind r_u, r_w, r_v as written in the stability tables.

    These assume the stable-init conditions; the general first-step
    predictions live in scalecheck.
    """
    u, w = spec[Role.INPUT], spec[Role.HIDDEN]
    if spec.weight_tied:
        v = Exponents(a=spec[Role.OUTPUT].a, b=u.b, c=u.c, d=u.d)
    else:
        v = spec[Role.OUTPUT]
    sgd = spec.optimizer is Optimizer.SGD
    if sgd:
        back = v.a + (u.b if spec.weight_tied else v.b)  # width factor of the backward signal into z
        if spec.weight_tied:
            ru = (u.a + u.c + v.a,)
        else:
            ru = (2 * u.a + u.c + back,)
        rw = (al.rho_w - 2 * w.a - w.c - back, al.omega_w - H, al.sigma_w - 2 * w.a - w.c - back)
        rv = (al.rho_v - 2 * v.a - v.c, al.omega_v - v.a - v.b, al.sigma_v - 2 * v.a - v.c)
    else:
        ru = (u.a + u.c,)
        rw = (al.rho_w - w.a - w.c, al.omega_w - H, al.sigma_w - w.a - w.c)
        rv = (al.rho_v - v.a - v.c, al.omega_v - v.a - v.b, al.sigma_v - v.a - v.c)
    return {"u": ru, "w": rw, "v": rv}


def check_stability(spec: ParamSpec, alignment: Union[Alignment, str] = "Full") -> StabilityReport:
    """Evaluate the stable-init, stable-update and weight-decay conditions exactly.

    Equalities report residual lhs - rhs; the output init inequality reports
    its shortfall (0 when met).
    """
    al = Alignment.parse(alignment)
    u, w, out = spec[Role.INPUT], spec[Role.HIDDEN], spec[Role.OUTPUT]
    b_out = u.b if spec.weight_tied else out.b
    terms = update_terms(spec, al)
    tag = "b_u" if spec.weight_tied else "b_v"
    conds = [
        _eq("init.input", Role.INPUT, "a_u + b_u = 0", u.a + u.b, 0),
        _eq("init.hidden", Role.HIDDEN, "a_w + b_w = 1/2", w.a + w.b, H),
        _ge("init.output", Role.OUTPUT, f"a_v + {tag} >= 1/2", out.a + b_out, H),
        _eq("update.input", Role.INPUT, "r_u = 0", max(terms["u"]), 0),
        _eq("update.hidden", Role.HIDDEN, "r_w = max(rho, omega, sigma terms) = 0", max(terms["w"]), 0),
        _eq("update.output", Role.OUTPUT, "r_v = max(rho, omega, sigma terms) = 0", max(terms["v"]), 0),
        _eq("wd.input", Role.INPUT, "c_u + d_u = 0", u.c + u.d, 0),
        _eq("wd.hidden", Role.HIDDEN, "c_w + d_w = 0", w.c + w.d, 0),
    ]
    if not spec.weight_tied:
        conds.append(_eq("wd.output", Role.OUTPUT, "c_v + d_v = 0", out.c + out.d, 0))
    return StabilityReport(al.label, tuple(conds))


# ---------------------------------------------------------------- JSON


def _pair(x: Fraction) -> List[int]:
    return [x.numerator, x.denominator]


def spec_to_dict(spec: ParamSpec) -> dict:
    layers = {}
    for role in LAYER_ORDER:
        if role in spec.layers:
            layers[role.value] = {k: _pair(v) for k, v in spec.layers[role].items()}
    return {
        "name": spec.name,
        "optimizer": spec.optimizer.value,
        "weight_tied": spec.weight_tied,
        "layers": layers,
        "attn_exponent": None if spec.attn_exponent is None else _pair(spec.attn_exponent),
    }


def spec_from_dict(doc: Mapping) -> ParamSpec:
    try:
        layers = {}
        for role_name, fields in doc["layers"].items():
            unknown = set(fields) - set("abcd")
            if unknown:
                raise SpecError(f"layer {role_name}: unknown exponent fields {sorted(unknown)}")
            layers[Role(role_name)] = Exponents(**{k: frac(v) for k, v in fields.items()})
        attn = doc.get("attn_exponent")
        return ParamSpec(
            name=str(doc["name"]),
            optimizer=Optimizer(doc["optimizer"]),
            layers=layers,
            attn_exponent=None if attn is None else frac(attn),
            weight_tied=bool(doc.get("weight_tied", False)),
        )
    except KeyError as exc:
        raise SpecError(f"spec document missing field {exc}") from None
    except ValueError as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(str(exc)) from None


def spec_to_json(spec: ParamSpec) -> str:
    return json.dumps(spec_to_dict(spec), ensure_ascii=False) + "\n"


def spec_from_json(text: str) -> ParamSpec:
    return spec_from_dict(json.loads(text))
