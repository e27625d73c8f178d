"""mupscale command line: sweep, fit, check, ablate-report, plot."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from . import report as rp
from . import scalecheck as sc
from . import sweepgen as sg
from . import transferfit as tf
from .param_engine import Optimizer, SpecError, all_ablations, lookup_spec

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4
SEED_ENV = "MUPSCALE_SEED"

log = logging.getLogger("mupscale")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _err(msg: str) -> None:
    print(f"mupscale: {msg}", file=sys.stderr)


def _env_seed() -> Optional[int]:
    v = os.environ.get(SEED_ENV)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{SEED_ENV}: not an integer: {v!r}") from None


def _load_config(path: Optional[str], required: bool = False) -> Dict:
    if path is None:
        if required:
            raise CliError(EXIT_CONFIG, "--config: required for this subcommand")
        return {"version": sg.CONFIG_VERSION}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise CliError(EXIT_CONFIG, f"{path}: version: required top-level field")
    if doc["version"] != sg.CONFIG_VERSION:
        raise CliError(EXIT_CONFIG, f"{path}: version: unsupported config version {doc['version']!r}")
    return doc


def _widths(csv: Optional[str]) -> Optional[List[int]]:
    if csv is None:
        return None
    try:
        ws = [int(x) for x in csv.split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--widths: expected comma-separated integers, got {csv!r}") from None
    if not ws or any(w < 1 for w in ws):
        raise CliError(EXIT_CONFIG, "--widths: must be positive integers")
    return ws


def _options(doc: Dict, keys: Sequence[str], where: str) -> None:
    extra = set(doc) - set(keys) - {"version"}
    if extra:
        raise CliError(EXIT_CONFIG, f"{where}: {sorted(extra)[0]}: unknown field")


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        return
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def _read_store(path: str):
    if not os.path.exists(path):
        raise CliError(EXIT_DATA, f"record store not found: {path}")
    try:
        return sg.read_store(path)
    except sg.StoreError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


# ---------------------------------------------------------------- subcommands


def cmd_sweep(args) -> int:
    doc = _load_config(args.config, required=True)
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out: record store path is required")
    if args.widths:
        doc["widths"] = _widths(args.widths)
    if args.seeds is not None:
        doc["seeds"] = args.seeds
    try:
        cfg = sg.config_from_dict(doc, seed_override=_env_seed())
    except sg.ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    try:
        recs = sg.execute(cfg, args.out, parallelism=args.parallelism,
                          progress=lambda m: print(m, file=sys.stderr if args.json else sys.stdout, flush=True))
    except sg.StoreError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    if args.json:
        print(json.dumps({"store": args.out, "written": len(recs)}))
    return EXIT_OK


def _fit_settings(args, doc):
    _options(doc, ("f", "s", "restarts", "seed"), "fit config")
    f = args.f if args.f is not None else float(doc.get("f", tf.DEFAULT_F))
    s = args.s if args.s is not None else float(doc.get("s", tf.DEFAULT_S))
    restarts = int(doc.get("restarts", tf.DEFAULT_RESTARTS))
    env = _env_seed()
    seed = env if env is not None else int(doc.get("seed", 0))
    if not f > 1:
        raise CliError(EXIT_CONFIG, "f: filter factor must exceed 1")
    if not s > 0:
        raise CliError(EXIT_CONFIG, "s: smoothing factor must be positive")
    if restarts < 1:
        raise CliError(EXIT_CONFIG, "restarts: must be >= 1")
    return f, s, restarts, seed


def _fit(args, specs) -> dict:
    doc = _load_config(args.config)
    f, s, restarts, seed = _fit_settings(args, doc)
    if not args.inputs:
        raise CliError(EXIT_DATA, "no record store given")
    records = []
    for p in args.inputs:
        records.extend(_read_store(p))
    if not records:
        raise CliError(EXIT_DATA, "record store is empty")
    fits, failures = rp.fit_store(records, specs, f=f, s=s, restarts=restarts, seed=seed,
                                  on_error=lambda n, l, e: _err(f"{n} (lambda={l:g}): {e}"))
    if not fits:
        names = "; ".join(fl["error"] for fl in failures) or "no matching spec"
        raise CliError(EXIT_DATA, f"insufficient data: {names}")
    return rp.build_report(fits, f, s, restarts, seed, failures)


def cmd_fit(args) -> int:
    rep = _fit(args, [args.spec] if args.spec else None)
    _write(args.out, rp.dumps(rep))
    if args.json:
        sys.stdout.write(json.dumps({"f": rep["f"], "s": rep["s"], "metrics": rp.metrics_rows(rep),
                                     "failures": rep["failures"]}, sort_keys=True) + "\n")
    else:
        print(f"f = {rep['f']:g}, s = {rep['s']:g}")
        print(rp.metrics_table(rep))
    return EXIT_DATA if rep["failures"] and args.spec else EXIT_OK


def cmd_ablate_report(args) -> int:
    opt = Optimizer(args.optimizer)
    names = [s.name for s in all_ablations(opt)]
    rep = _fit(args, names)
    fitted = {e["name"] for e in rep["specs"]}
    missing = [n for n in names if n not in fitted]
    _write(args.out, rp.metrics_csv(rep))
    if args.json:
        sys.stdout.write(json.dumps({"rows": rp.metrics_rows(rep), "missing": missing}, sort_keys=True) + "\n")
    else:
        print(rp.metrics_table(rep))
        for n in missing:
            print(f"{n:<24} no data")
    return EXIT_OK if not missing else EXIT_DATA


def cmd_check(args) -> int:
    doc = _load_config(args.config)
    _options(doc, ("widths", "seeds", "eta", "batch_size", "d_in", "d_out", "optimizer", "tolerances"), "check config")
    try:
        spec = lookup_spec(args.spec or "muP", doc.get("optimizer", args.optimizer))
    except (SpecError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"--spec: {exc}") from None
    widths = _widths(args.widths) or doc.get("widths", [64, 128, 256, 512, 1024])
    if len(widths) < 4:
        raise CliError(EXIT_CONFIG, "widths: slope regression needs at least 4 widths")
    seeds = args.seeds if args.seeds is not None else int(doc.get("seeds", 8))
    env = _env_seed()
    setup = sc.ProbeSetup(**{k: doc[k] for k in ("eta", "batch_size", "d_in", "d_out") if k in doc})
    tols = dict(sc.DEFAULT_TOLERANCES)
    tols.update(doc.get("tolerances", {}))
    if args.tol is not None:
        tols = {k: args.tol for k in tols}
    try:
        ms = sc.measure(spec, widths, n_seeds=seeds, setup=setup, seed_offset=env or 0)
        ms.append(sc.measure_attention([16, 32, 64, 128, 256, 512], n_seeds=seeds))
        rep = sc.verify(spec, ms, tolerances=tols)
    except SpecError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _write(args.out, json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.json:
        sys.stdout.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    else:
        print(f"{spec.name} / {spec.optimizer.value}, widths {widths}, {seeds} seeds")
        print(rep.table())
        print("exponents: " + ("PASS" if rep.ok else "FAIL") +
              "; alignment (informational): " + ("PASS" if rep.alignment_ok else "FAIL"))
    return EXIT_OK if rep.ok else 1


def cmd_plot(args) -> int:
    from .svgplot import write_panels

    if not args.inputs:
        raise CliError(EXIT_DATA, "no fit report given")
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out: output directory is required")
    written = []
    for p in args.inputs:
        if not os.path.exists(p):
            raise CliError(EXIT_DATA, f"fit report not found: {p}")
        try:
            rep = rp.load(p)
        except (ValueError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        except OSError as exc:
            raise CliError(EXIT_IO, f"{p}: {exc}") from None
        if args.spec and not any(e["name"] == args.spec for e in rep["specs"]):
            raise CliError(EXIT_DATA, f"spec {args.spec!r} not in report {p}")
        try:
            written += write_panels(rep, args.out, [args.spec] if args.spec else None)
        except OSError as exc:
            raise CliError(EXIT_IO, f"writing panels: {exc}") from None
    if args.json:
        print(json.dumps({"written": written}))
    else:
        for w in written:
            print(w)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mupscale", description="Learning-rate transfer sweeps, fits and checks.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inputs: Optional[str] = None):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="PATH")
        sp.add_argument("--json", action="store_true", help="machine-readable output on stdout")
        if inputs:
            sp.add_argument("inputs", nargs="*", metavar=inputs)
        return sp

    def positive(v):
        i = int(v)
        if i < 1:
            raise argparse.ArgumentTypeError("must be a positive integer")
        return i

    s = common(sub.add_parser("sweep", help="run a sweep into a JSON-lines record store"))
    s.add_argument("--parallelism", type=positive, default=1)
    s.add_argument("--seeds", type=positive)
    s.add_argument("--widths", metavar="CSV")
    s.set_defaults(func=cmd_sweep)

    for name, func, hlp in (("fit", cmd_fit, "fit transfer metrics from record stores"),
                            ("ablate-report", cmd_ablate_report, "metrics table over the 16 ablations")):
        f = common(sub.add_parser(name, help=hlp), inputs="STORE")
        f.add_argument("--f", type=float, help="filter factor (default 1.35)")
        f.add_argument("--s", type=float, help="spline smoothing factor (default 0.1)")
        if name == "fit":
            f.add_argument("--spec", metavar="NAME")
        else:
            f.add_argument("--optimizer", default="Adam", choices=[o.value for o in Optimizer])
        f.set_defaults(func=func)

    c = common(sub.add_parser("check", help="verify first-step scaling exponents"))
    c.add_argument("--spec", metavar="NAME")
    c.add_argument("--optimizer", default="Adam", choices=[o.value for o in Optimizer])
    c.add_argument("--seeds", type=positive)
    c.add_argument("--widths", metavar="CSV")
    c.add_argument("--tol", type=float)
    c.set_defaults(func=cmd_check)

    pl = common(sub.add_parser("plot", help="render SVG panels from a fit report"), inputs="REPORT")
    pl.add_argument("--spec", metavar="NAME")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except sg.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
