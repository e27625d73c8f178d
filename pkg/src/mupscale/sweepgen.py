"""Width x learning-rate x weight-decay sweeps with a resumable JSON-lines store."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .microtrain import NetworkConfig, TaskSpec, TrainConfig, train
from .param_engine import Optimizer, ParamSpec, SpecError, lookup_spec, spec_from_dict, spec_to_dict

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_VERSION = 1
RECORD_KEYS = ("spec_name", "width", "nu", "lambda", "regime", "final_loss", "steps_run", "seed", "schema_version")
WD_SCALINGS = ("constant_eta_lambda", "inverse_width_squared")


class ConfigError(ValueError):
    """Invalid sweep configuration; the message names the offending field."""


class StoreError(OSError):
    """Record store could not be read or written."""


# ---------------------------------------------------------------- regimes


@dataclass(frozen=True)
class FixedSteps:
    T: int

    def __post_init__(self):
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError("regime.T: must be a positive integer")

    def steps(self, width: int, net: NetworkConfig) -> int:
        return self.T

    def lam(self, lam: float, width: int, n_ref: int) -> float:
        return lam

    @property
    def tag(self) -> str:
        return f"steps:{self.T}"


@dataclass(frozen=True)
class FixedTPP:
    tpp: float
    tokens_per_step: int
    wd_scaling: str = "constant_eta_lambda"

    def __post_init__(self):
        if not (self.tpp > 0 and math.isfinite(self.tpp)):
            raise ConfigError("regime.tpp: must be a positive real")
        if not isinstance(self.tokens_per_step, int) or self.tokens_per_step < 1:
            raise ConfigError("regime.tokens_per_step: must be a positive integer")
        if self.wd_scaling not in WD_SCALINGS:
            raise ConfigError(f"regime.wd_scaling: must be one of {WD_SCALINGS}")

    def steps(self, width: int, net: NetworkConfig) -> int:
        return math.ceil(self.tpp * param_count(width, net) / self.tokens_per_step)

    def lam(self, lam: float, width: int, n_ref: int) -> float:
        if self.wd_scaling == "inverse_width_squared":
            return lam * (n_ref / width) ** 2
        return lam

    @property
    def tag(self) -> str:
        return f"tpp:{self.tpp:g}/{self.tokens_per_step}/{self.wd_scaling}"


Regime = Union[FixedSteps, FixedTPP]


def param_count(width: int, net: NetworkConfig) -> int:
    """Trainable parameters of the three-layer network at the given width."""
    n = width
    total = net.d_in * n + n * n + (0 if net.weight_tied else n * net.d_out)
    if net.layernorm:
        total += 2 * n + 2 * n  # gain and bias on h and z
    return total


# ---------------------------------------------------------------- config and records


@dataclass(frozen=True)
class RunKey:
    spec_name: str
    width: int
    nu: float
    lam: float
    regime: str
    seed: int


@dataclass(frozen=True)
class RunRecord:
    spec_name: str
    width: int
    nu: float
    lam: float
    regime: str
    final_loss: float
    steps_run: int
    seed: int
    schema_version: int = SCHEMA_VERSION

    @property
    def key(self) -> RunKey:
        return RunKey(self.spec_name, self.width, self.nu, self.lam, self.regime, self.seed)

    def to_json(self) -> str:
        loss = self.final_loss if math.isfinite(self.final_loss) else "inf"
        doc = {"spec_name": self.spec_name, "width": self.width, "nu": self.nu, "lambda": self.lam,
               "regime": self.regime, "final_loss": loss, "steps_run": self.steps_run,
               "seed": self.seed, "schema_version": self.schema_version}
        return json.dumps(doc, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        doc = json.loads(line)
        if set(doc) != set(RECORD_KEYS):
            raise ValueError(f"record keys {sorted(doc)} differ from {sorted(RECORD_KEYS)}")
        loss = doc["final_loss"]
        loss = math.inf if loss == "inf" else float(loss)
        return cls(doc["spec_name"], int(doc["width"]), float(doc["nu"]), float(doc["lambda"]),
                   doc["regime"], loss, int(doc["steps_run"]), int(doc["seed"]), int(doc["schema_version"]))

    # dict-style access used by transferfit.filter_runs
    def get(self, k):
        return self.lam if k == "lambda" else getattr(self, k)


@dataclass(frozen=True)
class SweepConfig:
    specs: Tuple[ParamSpec, ...]
    widths: Tuple[int, ...]
    nu_grid: Tuple[float, ...]
    lambda_grid: Tuple[float, ...]
    regime: Regime
    net: Mapping = field(default_factory=dict)
    task: Mapping = field(default_factory=dict)
    train: Mapping = field(default_factory=dict)
    seed: int = 0
    n_seeds: int = 1

    def __post_init__(self):
        if not self.specs:
            raise ConfigError("specs: at least one spec is required")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigError("specs: names must be unique")
        _increasing("widths", self.widths)
        if any(not isinstance(w, int) or w < 1 for w in self.widths):
            raise ConfigError("widths: must be positive integers")
        _increasing("nu_grid", self.nu_grid)
        if not self.lambda_grid or any(not (l >= 0 and math.isfinite(l)) for l in self.lambda_grid):
            raise ConfigError("lambda_grid: non-empty list of non-negative reals")
        if self.n_seeds < 1:
            raise ConfigError("seeds: must be >= 1")
        opts = {s.optimizer for s in self.specs}
        if len(opts) != 1:
            raise ConfigError("specs: all specs must share one optimizer")
        try:
            self.network(self.widths[0], self.seed)
            self.task_spec()
            self.train_config(1, 1.0, 0.0)
        except (SpecError, TypeError) as exc:
            raise ConfigError(f"net/task/train: {exc}") from None

    @property
    def optimizer(self) -> Optimizer:
        return self.specs[0].optimizer

    @property
    def seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def network(self, width: int, seed: int) -> NetworkConfig:
        t = self.task_spec()
        return NetworkConfig(width=width, d_in=t.d_in, d_out=t.d_out, seed=seed, **dict(self.net))

    def task_spec(self) -> TaskSpec:
        return TaskSpec(**dict(self.task))

    def train_config(self, steps: int, eta: float, lam: float) -> TrainConfig:
        kw = dict(self.train)
        if "schedule" in kw:
            kw["schedule"] = tuple(kw["schedule"])
        return TrainConfig(steps=steps, eta=eta, lam=lam, **kw)


def _increasing(name, xs):
    if len(xs) == 0:
        raise ConfigError(f"{name}: must be non-empty")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ConfigError(f"{name}: must be strictly increasing")


def _regime_from(doc) -> Regime:
    if not isinstance(doc, Mapping) or "kind" not in doc:
        raise ConfigError("regime: object with a 'kind' field is required")
    kind = doc["kind"]
    rest = {k: v for k, v in doc.items() if k != "kind"}
    try:
        if kind == "FixedSteps":
            return FixedSteps(**rest)
        if kind == "FixedTPP":
            return FixedTPP(**rest)
    except TypeError as exc:
        raise ConfigError(f"regime: {exc}") from None
    raise ConfigError(f"regime.kind: unknown regime {kind!r}")


def _spec_from(item, optimizer) -> ParamSpec:
    try:
        if isinstance(item, str):
            return lookup_spec(item, optimizer)
        return spec_from_dict(item)
    except SpecError as exc:
        raise ConfigError(f"specs: {exc}") from None


def config_from_dict(doc: Mapping, seed_override: Optional[int] = None) -> SweepConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config: top level must be a JSON object")
    if "version" not in doc:
        raise ConfigError("version: required top-level field")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {doc['version']!r}")
    known = {"version", "specs", "optimizer", "widths", "nu_grid", "lambda_grid", "regime",
             "net", "task", "train", "seed", "seeds"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown field")
    for k in ("specs", "widths", "nu_grid", "regime"):
        if k not in doc:
            raise ConfigError(f"{k}: required field")
    try:
        opt = Optimizer(doc.get("optimizer", "Adam"))
    except ValueError:
        raise ConfigError(f"optimizer: unknown optimizer {doc.get('optimizer')!r}") from None
    seed = int(doc.get("seed", 0)) if seed_override is None else int(seed_override)
    try:
        return SweepConfig(
            specs=tuple(_spec_from(s, opt) for s in doc["specs"]),
            widths=tuple(doc["widths"]),
            nu_grid=tuple(float(v) for v in doc["nu_grid"]),
            lambda_grid=tuple(float(v) for v in doc.get("lambda_grid", [0.0])),
            regime=_regime_from(doc["regime"]),
            net=dict(doc.get("net", {})), task=dict(doc.get("task", {})), train=dict(doc.get("train", {})),
            seed=seed, n_seeds=int(doc.get("seeds", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config: {exc}") from None


def config_to_dict(cfg: SweepConfig) -> dict:
    reg = asdict(cfg.regime)
    reg["kind"] = type(cfg.regime).__name__
    return {"version": CONFIG_VERSION, "optimizer": cfg.optimizer.value,
            "specs": [spec_to_dict(s) for s in cfg.specs], "widths": list(cfg.widths),
            "nu_grid": list(cfg.nu_grid), "lambda_grid": list(cfg.lambda_grid), "regime": reg,
            "net": dict(cfg.net), "task": dict(cfg.task), "train": dict(cfg.train),
            "seed": cfg.seed, "seeds": cfg.n_seeds}


# ---------------------------------------------------------------- store


def read_store(path: Union[str, os.PathLike]) -> List[RunRecord]:
    """All records in the store; a truncated last line from a crash is ignored."""
    if not os.path.exists(path):
        return []
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise StoreError(f"cannot read record store {path}: {exc}") from exc
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(RunRecord.from_json(line))
        except (ValueError, KeyError) as exc:
            if i == len(lines) - 1:
                log.warning("ignoring truncated final record in %s", path)
                continue
            raise StoreError(f"{path}:{i + 1}: malformed record ({exc})") from None
    return out


def plan(cfg: SweepConfig, existing: Iterable[RunRecord] = ()) -> List[RunKey]:
    """Cross product of specs, widths, nu, lambda and seeds minus keys already stored."""
    done = {r.key for r in existing}
    tag = cfg.regime.tag
    keys = []
    for spec in cfg.specs:
        for n in cfg.widths:
            for nu in cfg.nu_grid:
                for lam in cfg.lambda_grid:
                    for seed in cfg.seeds:
                        k = RunKey(spec.name, n, nu, lam, tag, seed)
                        if k not in done:
                            keys.append(k)
    return keys


def planned_steps(cfg: SweepConfig, width: int) -> int:
    return cfg.regime.steps(width, cfg.network(width, cfg.seed))


def _run_one(args) -> RunRecord:
    cfg, key = args
    spec = next(s for s in cfg.specs if s.name == key.spec_name)
    net = cfg.network(key.width, key.seed)
    T = cfg.regime.steps(key.width, net)
    lam = cfg.regime.lam(key.lam, key.width, cfg.widths[0])
    res = train(spec, net, cfg.task_spec(), cfg.train_config(T, 2.0 ** key.nu, lam))
    return RunRecord(key.spec_name, key.width, key.nu, key.lam, key.regime,
                     float(res.final_loss), int(res.steps_run), key.seed)


def execute(cfg: SweepConfig, store: Union[str, os.PathLike], parallelism: int = 1,
            progress=None) -> List[RunRecord]:
    """Run every planned key and append its record; results are written in plan order."""
    if parallelism < 1:
        raise ConfigError("parallelism: must be >= 1")
    keys = plan(cfg, read_store(store))
    if progress:
        progress(f"{len(keys)} planned")
    if not keys:
        return []
    jobs = [(cfg, k) for k in keys]
    written: List[RunRecord] = []
    try:
        fh = open(store, "a", encoding="utf-8")
    except OSError as exc:
        raise StoreError(f"cannot open record store {store}: {exc}") from exc
    with fh:
        if parallelism == 1:
            results: Iterator[RunRecord] = map(_run_one, jobs)
            _drain(results, fh, keys, written, progress)
        else:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                _drain(pool.map(_run_one, jobs), fh, keys, written, progress)
    return written


def _drain(results, fh, keys, written, progress):
    for i, rec in enumerate(results):
        try:
            fh.write(rec.to_json() + "\n")
            fh.flush()
        except OSError as exc:
            raise StoreError(f"writing record for {keys[i]}: {exc}") from exc
        written.append(rec)
        if progress:
            progress(f"[{i + 1}/{len(keys)}] {rec.spec_name} n={rec.width} nu={rec.nu:g} "
                     f"lambda={rec.lam:g} loss={rec.final_loss:.6g}")
