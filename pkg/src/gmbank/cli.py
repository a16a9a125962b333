"""Command-line front end: ``gmbank {simulate,filter,sweep,probe,bench}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import stats
from .filters import FilterError, FilterKind, ReductionScheme, run_filter

log = logging.getLogger("gmbank")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

SIMULATE_COLUMNS = ("t", "x_true", "v_true", "z", "label_i", "label_j")
FILTER_COLUMNS = ("t", "xhat", "P00", "P01", "P11", "max_mu", "fallback_flag")
SWEEP_COLUMNS = ("model", "c", "kl", "filter", "rmse", "rmse_lo", "rmse_hi",
                 "cep", "cep_lo", "cep_hi", "fallback_steps", "excluded_runs",
                 "ks_ammse_gsf", "ks_ammse_truth", "ab_ammse_gsf")

# keys accepted in a --config file, mapped to argparse destinations
CONFIG_KEYS = {"scenario", "c", "seed", "steps", "runs", "filter", "scheme", "out", "threads",
               "input", "c_grid", "model", "sizes", "batch", "repeats", "prior_var",
               "kl_samples", "fallback_budget", "deltas"}


class ConfigError(ValueError):
    pass


class MissingDataError(ValueError):
    pass


# --------------------------------------------------------------------------- helpers


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_csv(path: Path, columns, rows, digest: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# gmbank config_hash={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path: Path) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise ConfigError(f"{path} has no header")
    rows = list(reader)
    cols = {}
    for name in reader.fieldnames:
        try:
            cols[name.strip()] = np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError):
            raise ConfigError(f"column {name!r} in {path} is not numeric") from None
    return cols


def write_manifest(path: Path, command: str, cfg: dict, digest: str, **extra) -> None:
    doc = {"command": command, "config_hash": digest, "config": cfg, **extra}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def write_plot_data(path: Path, series: dict[str, tuple[np.ndarray, np.ndarray]], x_name: str,
                    digest: str) -> None:
    """Gnuplot-style blocks, one per series, separated by two blank lines."""
    with open(path, "w") as fh:
        fh.write(f"# gmbank config_hash={digest}\n")
        for name, (x, y) in series.items():
            fh.write(f"# series: {name}\n# {x_name} value\n")
            for xi, yi in zip(x, y):
                fh.write(f"{fmt(xi)} {fmt(yi)}\n")
            fh.write("\n\n")


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def load_scenario_config(ref: str) -> dict:
    """A preset name, or a path to a JSON file with inline preset parameters."""
    if ref.endswith(".json") or Path(ref).is_file():
        try:
            return json.loads(Path(ref).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load scenario {ref!r}: {exc}") from None
    try:
        return ex.load_preset_config(ref)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_scenario(args, horizon: int = 1) -> tuple[ex.Scenario, dict]:
    if not args.scenario:
        raise ConfigError("--scenario is required")
    cfg = load_scenario_config(args.scenario)
    try:
        sc = ex.scenario_from_config(cfg, c=args.c, horizon=horizon, seed=args.seed,
                                     prior_var=args.prior_var)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid scenario {args.scenario!r}: {exc}") from None
    return sc, cfg


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bank_sizes(text: str) -> list[tuple[int, int]]:
    """``"1,4,25"`` (square banks) or ``"1x1,2x3"``."""
    out = []
    for tok in (t.strip() for t in text.split(",") if t.strip()):
        if "x" in tok:
            a, b = tok.split("x")
            out.append((int(a), int(b)))
        else:
            k = int(tok)
            root = math.isqrt(k)
            if root * root != k:
                raise argparse.ArgumentTypeError(f"bank size {k} is not square; use CvxCw")
            out.append((root, root))
    return out


def _filters(args) -> list:
    if not args.filter:
        return list(ex.ALL_FILTERS)
    specs = []
    for label in args.filter.split(","):
        try:
            kind, scheme = ex.parse_filter(label.strip())
        except ValueError as exc:
            raise ConfigError(f"bad --filter {label!r}: {exc}") from None
        if args.scheme and kind in (FilterKind.GSF, FilterKind.AMMSE) and "-" not in label:
            scheme = ReductionScheme(args.scheme)
        specs.append((kind, scheme))
    return specs


def _resolved(args, command: str, **extra) -> dict:
    # worker count never changes results, so it stays out of the hash
    keys = {k: v for k, v in vars(args).items()
            if k in CONFIG_KEYS and k not in ("out", "threads")}
    return {"command": command, **keys, **extra}


# --------------------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    if args.steps is None or args.steps < 1:
        raise ConfigError("--steps must be at least 1")
    out = _require_out(args)
    sc, scfg = build_scenario(args, horizon=args.steps)
    cfg = _resolved(args, "simulate", scenario_config=scfg)
    digest = config_hash(cfg)
    traj = ex.generate_trajectory(sc, ex.run_rng(args.seed, 0))
    t = sc.sys.dt * np.arange(1, args.steps + 1)
    rows = zip(t, traj.states[:, 0], traj.states[:, 1], traj.measurements[:, 0],
               traj.labels[:, 0], traj.labels[:, 1])
    write_csv(out, SIMULATE_COLUMNS, rows, digest)
    write_manifest(out.with_suffix(out.suffix + ".json"), "simulate", cfg, digest,
                   rows=args.steps)
    return EXIT_OK


def _step_sizes(t: np.ndarray, dt: float):
    if t.size < 2:
        return None
    d = np.diff(t)
    if np.allclose(d, dt, rtol=0, atol=1e-9):
        return None
    if np.any(d <= 0):
        raise ConfigError("column t must be strictly increasing")
    return np.concatenate([[dt], d])


def cmd_filter(args) -> int:
    if not args.input:
        raise ConfigError("--input is required")
    out = _require_out(args)
    cols = read_csv(Path(args.input))
    for required in ("t", "z"):
        if required not in cols:
            raise ConfigError(f"input is missing column {required!r}")
    if cols["z"].size == 0:
        raise ConfigError("input has no data rows")
    if args.filter and "," in args.filter:
        raise ConfigError("filter takes a single --filter")
    sc, scfg = build_scenario(args, horizon=cols["z"].size)
    (kind, scheme), = _filters(argparse.Namespace(filter=args.filter or "ammse",
                                                  scheme=args.scheme))
    labels = None
    if "label_i" in cols and "label_j" in cols:
        labels = np.stack([cols["label_i"], cols["label_j"]], axis=-1).astype(int)
    if kind is FilterKind.MATCHED and labels is None:
        raise MissingDataError("the matched filter needs label_i/label_j columns")
    dts = _step_sizes(cols["t"], sc.sys.dt)
    cfg = _resolved(args, "filter", scenario_config=scfg, filter_label=ex.filter_label(kind, scheme))
    digest = config_hash(cfg)
    res = run_filter(kind, scheme, sc.sys, sc.noise, cols["z"], labels=labels,
                     prior=sc.prior(), dts=dts)
    budget = args.fallback_budget
    if budget is not None and res.n_fallback > budget:
        raise FilterError(f"{res.n_fallback} gain fallbacks exceed the budget of {budget}")
    rows = zip(cols["t"], res.means[:, 0], res.covs[:, 0, 0], res.covs[:, 0, 1],
               res.covs[:, 1, 1], res.max_mu, res.fallback)
    write_csv(out, FILTER_COLUMNS, rows, digest)
    extra = {"rows": int(cols["z"].size), "fallback_steps": res.n_fallback}
    if "x_true" in cols:
        err = res.means[:, 0] - cols["x_true"]
        extra.update(rmse=stats.rmse(err), cep=stats.cep(err))
    write_manifest(out.with_suffix(out.suffix + ".json"), "filter", cfg, digest, **extra)
    if "rmse" in extra:
        print(f"{ex.filter_label(kind, scheme)}: rmse={extra['rmse']:.6g} cep={extra['cep']:.6g}")
    return EXIT_OK


def _sweep_model(args) -> int:
    if args.model is not None:
        return args.model
    name = (args.scenario or "").lower()
    if name in ("model1", "model2", "model3"):
        return int(name[-1])
    raise ConfigError("sweep needs --model 1|2|3 or --scenario model1|model2|model3")


def cmd_sweep(args) -> int:
    out = _require_out(args)
    model = _sweep_model(args)
    grid = args.c_grid or [0.0, 0.05, 0.2, 0.5, 1.0, 2.0, 3.0, 10.0]
    if args.runs < 2:
        raise ConfigError("--runs must be at least 2")
    steps = args.steps if args.steps is not None else ex.DEFAULT_HORIZON
    if steps < 1:
        raise ConfigError("--steps must be at least 1")
    filters = _filters(args)
    cfg = _resolved(args, "sweep", model=model, c_grid=grid, steps=steps,
                    filters=[ex.filter_label(*f) for f in filters])
    digest = config_hash(cfg)
    res = ex.separation_sweep(model, grid, filters, runs=args.runs, seed=args.seed,
                              kl_samples=args.kl_samples, horizon=steps,
                              prior_var=args.prior_var, threads=args.threads)
    rows = []
    for p in res.points:
        tests = [("" if t is None else int(t.accepted))
                 for t in (p.ks_ammse_gsf, p.ks_ammse_truth, p.ab_ammse_gsf)]
        for r in p.metrics:
            rows.append([model, p.c, p.kl, r["filter"], r["rmse"], r["rmse_lo"], r["rmse_hi"],
                         r["cep"], r["cep_lo"], r["cep_hi"], r["fallback_steps"],
                         r["excluded_runs"], *tests])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows, digest)
    long_rows = [[r[0], r[1], r[2], r[3], metric, r[4 + 3 * m], r[5 + 3 * m], r[6 + 3 * m]]
                 for r in rows for m, metric in enumerate(("rmse", "cep"))]
    write_csv(out / "sweep_long.csv", ("model", "c", "kl", "filter", "metric", "value", "lo", "hi"),
              long_rows, digest)
    kl = np.array([p.kl for p in res.points])
    labels = [r["filter"] for r in res.points[0].metrics]
    for metric in ("rmse", "cep"):
        write_plot_data(out / f"{metric}_vs_kl.dat",
                        {lab: (kl, res.series(lab, metric)) for lab in labels}, "kl", digest)
    write_manifest(out / "manifest.json", "sweep", cfg, digest, rows=len(rows),
                   fallback_steps=sum(p.fallback_steps for p in res.points),
                   excluded_runs=sum(p.excluded_runs for p in res.points))
    return EXIT_OK


def cmd_probe(args) -> int:
    out = _require_out(args)
    model = _sweep_model(args) if (args.model or args.scenario) else 1
    cfg = _resolved(args, "probe", model=model)
    digest = config_hash(cfg)
    kw = {"deltas": args.deltas} if args.deltas else {}
    a = ex.coincidence_ladder(model, **kw)
    b = ex.separation_ladder(model, **({"c_grid": args.c_grid} if args.c_grid else {}))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "probe_a.csv", ("delta", "gain_gap", "estimate_gap"),
              [[r["delta"], r["gain_gap"], r["estimate_gap"]] for r in a], digest)
    b_cols = ("c", "separation_sigma", "min_max_mu", "gap_gsf_merge", "gap_gsf_remove",
              "gap_ammse_merge", "gap_ammse_remove")
    write_csv(out / "probe_b.csv", b_cols, [[r[k] for k in b_cols] for r in b], digest)
    write_plot_data(out / "probe_a.dat",
                    {"gain_gap": ([r["delta"] for r in a], [r["gain_gap"] for r in a])},
                    "delta", digest)
    write_manifest(out / "manifest.json", "probe", cfg, digest, rows_a=len(a), rows_b=len(b))
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _require_out(args)
    sizes = args.sizes or [(1, 1), (2, 2), (3, 3), (5, 5)]
    cfg = _resolved(args, "bench", sizes=sizes)
    digest = config_hash(cfg)
    res = ex.complexity_bench(sizes, batch=args.batch, repeats=args.repeats, seed=args.seed)
    labels = [f"{k}-{s}" for k, s in ex.VARIANTS]
    table = {}
    for r in res["rows"]:
        table.setdefault((r["n_proc"], r["n_meas"]), {})[r["filter"]] = r["seconds"]
    rows = [[cv, cw, cv * cw, *[t[lab] for lab in labels]] for (cv, cw), t in table.items()]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bench.csv", ("n_proc", "n_meas", "bank", *labels), rows, digest)
    write_csv(out / "bench_fit.csv", ("filter", "slope", "intercept", "r2", "exponent"),
              [[lab, *(res["fits"][lab][k] for k in ("slope", "intercept", "r2", "exponent"))]
               for lab in labels], digest)
    bank = [r[2] for r in rows]
    write_plot_data(out / "bench.dat", {lab: (bank, [r[3 + i] for r in rows])
                                        for i, lab in enumerate(labels)}, "bank", digest)
    # timings are machine-dependent, so the manifest records them but not in the hash
    write_manifest(out / "manifest.json", "bench", cfg, digest, rows=len(rows))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values (unknown keys rejected)")
    common.add_argument("--scenario", help="preset name or path to a preset JSON file")
    common.add_argument("--c", type=float, default=None, help="separation multiplier (models 1-3)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--steps", type=int, default=None)
    common.add_argument("--runs", type=int, default=200)
    common.add_argument("--filter", default=None,
                        help="kalman|matched|gsf|ammse, optionally with -merge/-remove; "
                             "comma-separated for sweeps")
    common.add_argument("--scheme", choices=[s.value for s in ReductionScheme], default=None)
    common.add_argument("--out", default=None, help="output file (simulate/filter) or directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--prior-var", dest="prior_var", type=float, default=ex.DEFAULT_PRIOR_VAR)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gmbank", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write a labelled trajectory CSV")

    f = sub.add_parser("filter", parents=[common], help="filter a measurement CSV")
    f.add_argument("--input", help="CSV with t and z columns (labels optional)")
    f.add_argument("--fallback-budget", dest="fallback_budget", type=int, default=None,
                   help="fail with exit 4 if more steps than this fall back to GSF gains")

    s = sub.add_parser("sweep", parents=[common], help="Monte-Carlo sweep over separation c")
    s.add_argument("--model", type=int, choices=(1, 2, 3))
    s.add_argument("--c-grid", dest="c_grid", type=_float_list)
    s.add_argument("--kl-samples", dest="kl_samples", type=int, default=ex.KL_SAMPLES)

    pr = sub.add_parser("probe", parents=[common], help="limit-case convergence ladders")
    pr.add_argument("--model", type=int, choices=(1, 2, 3))
    pr.add_argument("--deltas", type=_float_list)
    pr.add_argument("--c-grid", dest="c_grid", type=_float_list)

    b = sub.add_parser("bench", parents=[common], help="update-stage timing vs bank size")
    b.add_argument("--sizes", type=_bank_sizes, help="e.g. 1,4,25 or 1x1,2x3")
    b.add_argument("--batch", type=int, default=4096)
    b.add_argument("--repeats", type=int, default=15)
    return p


def apply_config_file(args, parser) -> None:
    if not getattr(args, "config", None):
        return
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in doc.items():
        if not hasattr(args, key):
            raise ConfigError(f"option {key!r} does not apply to {args.command}")
        setattr(args, key, value)
    if isinstance(args.c_grid if hasattr(args, "c_grid") else None, str):
        args.c_grid = _float_list(args.c_grid)
    if hasattr(args, "sizes") and isinstance(args.sizes, str):
        args.sizes = _bank_sizes(args.sizes)


COMMANDS = {"simulate": cmd_simulate, "filter": cmd_filter, "sweep": cmd_sweep,
            "probe": cmd_probe, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_config_file(args, parser)
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        return COMMANDS[args.command](args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"gmbank: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDataError as exc:
        print(f"gmbank: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FilterError, ex.SweepError, np.linalg.LinAlgError) as exc:
        print(f"gmbank: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
