"""Command-line front end: ``vhempc simulate | sweep | table1``.

Experiments are described by an INI file with an ``[experiment]`` section and
optional ``[sweep]`` and ``[table1]`` sections; see ``vhempc --help`` for the
keys and defaults.  Every numeric CSV field is written with 17 significant
digits so that re-reading a file reproduces the values bit for bit.

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 initialization error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import statistics
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .controller import (CHECK_DESCRIPTIONS, ClosedLoopResult, ControllerConfig,
                         initial_horizon_table, run_closed_loop)
from .errors import (ConfigError, ContractViolation, InitializationError,
                     InternalInvariantError, VhempcError)
from .filters import KINDS, FilterSpec, HorizonSchedule
from .plants import B_GRID, PLANT_DEFAULTS, TABLE1_X0, build_benchmark
from .terminal import DEFAULT_SEED

log = logging.getLogger("vhempc")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_INIT = 0, 1, 2, 3
SEED_ENV = "VHEMPC_SEED"
TIMING_RHO = 0.8

CONFIG_HELP = """\
configuration file (INI):

  [experiment]
  plant = cstr | scalar                    (required)
  filter = Pi1 | Pi2 | Pi3                 (default Pi3)
  kappa = 0.5                              filter weight in (0, 1]
  lambda, d, b                             auxiliary cost (default: plant values)
  psi_fraction = 0.01                      X_psi level as a fraction of alpha
  x0 = 5.5, 380.0                          initial state, physical units (default: plant value)
  N0 =                                     initial horizon (default: smallest admissible)
  max_steps = 200
  terminal_steps = 20                      steps kept after the local law latches
  upsilon = 1.0                            constant or comma list (cycled)
  sigma = 0                                constant or comma list (cycled)
  repeat = 5                               timing repeats (one extra warm-up run is discarded)
  seed = 12648430                          sampling seed; env VHEMPC_SEED overrides
  record_all_filters = false               log all three filters side by side
  average_window =                         steps in the reported average (default: full run)

  [sweep]
  settings = 0:0, 1:0, 0.5:0, 1:2          (upsilon:sigma) pairs, one run each

  [table1]
  b_grid = 0.03, 0.025, 0.02, 0.015, 0.01, 0.005   (default: plant grid)
  x0 = 1.0, 340.0                          (default: plant value)
"""


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ExperimentConfig:
    plant: str
    filter_kind: str = "Pi3"
    kappa: float = 0.5
    lam: Optional[float] = None
    d: Optional[float] = None
    b: Optional[float] = None
    psi_fraction: float = 0.01
    x0: Optional[Tuple[float, ...]] = None
    N0: Optional[int] = None
    max_steps: int = 200
    terminal_steps: int = 20
    upsilon: Tuple[float, ...] = (1.0,)
    sigma: Tuple[int, ...] = (0,)
    repeat: int = 5
    seed: int = DEFAULT_SEED
    record_all_filters: bool = False
    average_window: Optional[int] = None
    settings: Tuple[Tuple[float, int], ...] = ((0.0, 0), (1.0, 0), (0.5, 0), (1.0, 2))
    b_grid: Optional[Tuple[float, ...]] = None
    table_x0: Optional[Tuple[float, ...]] = None

    def echo(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = [list(t) if isinstance(t, tuple) else t for t in v] if isinstance(v, tuple) else v
        return out


def _floats(text: str, key: str) -> Tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {text!r}")
    if not vals:
        raise ConfigError(f"{key}: empty list")
    return vals


def _ints(text: str, key: str) -> Tuple[int, ...]:
    vals = _floats(text, key)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"{key}: expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}")
    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    sec = parser["experiment"]
    known = {"plant", "filter", "kappa", "lambda", "d", "b", "psi_fraction", "x0", "n0",
             "max_steps", "terminal_steps", "upsilon", "sigma", "repeat", "seed",
             "record_all_filters", "average_window"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown [experiment] keys: {sorted(unknown)}")

    def get(key, conv, default=None):
        raw = sec.get(key, "").strip()
        if not raw:
            return default
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}")

    plant = get("plant", str)
    if plant not in PLANT_DEFAULTS:
        raise ConfigError(f"plant must be one of {sorted(PLANT_DEFAULTS)}, got {plant!r}")
    try:
        record_all = sec.getboolean("record_all_filters", fallback=False)
    except ValueError:
        raise ConfigError("record_all_filters must be a boolean")
    cfg = ExperimentConfig(
        plant=plant,
        filter_kind=get("filter", str, "Pi3"),
        kappa=get("kappa", float, 0.5),
        lam=get("lambda", float),
        d=get("d", float),
        b=get("b", float),
        psi_fraction=get("psi_fraction", float, 0.01),
        x0=get("x0", lambda t: _floats(t, "x0")),
        N0=get("n0", int),
        max_steps=get("max_steps", int, 200),
        terminal_steps=get("terminal_steps", int, 20),
        upsilon=get("upsilon", lambda t: _floats(t, "upsilon"), (1.0,)),
        sigma=get("sigma", lambda t: _ints(t, "sigma"), (0,)),
        repeat=get("repeat", int, 5),
        seed=get("seed", int, DEFAULT_SEED),
        record_all_filters=record_all,
        average_window=get("average_window", int),
    )
    if parser.has_section("sweep") and parser["sweep"].get("settings", "").strip():
        pairs = []
        for item in parser["sweep"]["settings"].split(","):
            try:
                u, s = item.split(":")
                pairs.append((float(u), int(s)))
            except ValueError:
                raise ConfigError(f"sweep settings: expected upsilon:sigma pairs, got {item!r}")
        cfg = replace(cfg, settings=tuple(pairs))
    if parser.has_section("table1"):
        t = parser["table1"]
        if t.get("b_grid", "").strip():
            cfg = replace(cfg, b_grid=_floats(t["b_grid"], "b_grid"))
        if t.get("x0", "").strip():
            cfg = replace(cfg, table_x0=_floats(t["x0"], "table1 x0"))
    if SEED_ENV in os.environ:
        try:
            cfg = replace(cfg, seed=int(os.environ[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Range checks; raises ConfigError."""
    try:
        FilterSpec(cfg.filter_kind, cfg.kappa)
        HorizonSchedule(cfg.upsilon, cfg.sigma)
        for u, s in cfg.settings:
            HorizonSchedule((u,), (s,))
    except ContractViolation as exc:
        raise ConfigError(str(exc))
    n = len(PLANT_DEFAULTS[cfg.plant]["x0"])
    for key, x in (("x0", cfg.x0), ("table1 x0", cfg.table_x0)):
        if x is not None and len(x) != n:
            raise ConfigError(f"{key} must have {n} components for plant {cfg.plant}")
    checks = [
        (cfg.lam is None or cfg.lam >= 1, "lambda must be >= 1"),
        (cfg.d is None or cfg.d > 0, "d must be positive"),
        (cfg.b is None or cfg.b >= 0, "b must be nonnegative"),
        (0 < cfg.psi_fraction <= 1, "psi_fraction must lie in (0, 1]"),
        (cfg.N0 is None or cfg.N0 >= 1, "N0 must be positive"),
        (cfg.max_steps >= 1, "max_steps must be positive"),
        (cfg.terminal_steps >= 1, "terminal_steps must be positive"),
        (cfg.repeat >= 1, "repeat must be positive"),
        (cfg.average_window is None or cfg.average_window >= 1, "average_window must be positive"),
        (cfg.b_grid is None or all(b >= 0 for b in cfg.b_grid), "b_grid entries must be nonnegative"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


# ------------------------------------------------------------------ running

def _setup(cfg: ExperimentConfig):
    bench = build_benchmark(cfg.plant, psi_fraction=cfg.psi_fraction, seed=cfg.seed)
    aux = bench.aux(d=cfg.d, b=cfg.b, lam=cfg.lam)
    return bench, aux


def run_experiment(cfg: ExperimentConfig, upsilon=None, sigma=None) -> ClosedLoopResult:
    """One closed loop; step solve times are medians over ``cfg.repeat`` timed runs."""
    bench, aux = _setup(cfg)
    x0 = bench.to_deviation(cfg.x0 if cfg.x0 is not None else bench.defaults["x0"])
    schedule = HorizonSchedule(cfg.upsilon if upsilon is None else (upsilon,),
                               cfg.sigma if sigma is None else (sigma,))
    config = ControllerConfig(filter=FilterSpec(cfg.filter_kind, cfg.kappa), schedule=schedule,
                              N0=cfg.N0, max_steps=cfg.max_steps,
                              terminal_steps=cfg.terminal_steps,
                              record_all_filters=cfg.record_all_filters)
    runs = []
    for _ in range(cfg.repeat + 1):     # first run warms caches and is discarded
        runs.append(run_closed_loop(bench.model, bench.econ, aux, config, x0,
                                    steady_Le=bench.steady_value))
    runs = runs[1:]
    result = runs[0]
    for j, step in enumerate(result.steps):
        times = [r.steps[j].solve_time for r in runs if len(r.steps) > j]
        step.solve_time = statistics.median(times)
    return result


def trace_rows(result: ClosedLoopResult, cfg: ExperimentConfig) -> Tuple[List[str], List[list]]:
    bench, _ = _setup(cfg)
    m = bench.original
    header = (["k", "N_k", "Ntilde", "pi", "Vae", "Le", "Le_running_avg", "solve_time_ms", "case_tag"]
              + [f"x_{n}" for n in m.state_names] + [f"u_{n}" for n in m.input_names])
    rows = []
    total = 0.0
    for s in result.steps:
        total += s.Le
        x = bench.from_deviation(s.x)
        u = np.asarray(s.u) + bench.steady_state.u_s
        rows.append([s.k, s.N, s.N_tilde, s.pi, s.Vae, s.Le, total / (s.k + 1), 1e3 * s.solve_time,
                     s.case] + [float(v) for v in x] + [float(v) for v in u])
    return header, rows


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return "" if v is None else str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def parse_trace(path) -> Dict[str, list]:
    """Columns of a trace CSV converted back to numbers (``case_tag`` stays text)."""
    header, rows = read_csv(path)
    cols = {h: [row[i] for row in rows] for i, h in enumerate(header)}
    out = {}
    for h, vals in cols.items():
        if h == "case_tag":
            out[h] = vals
        elif h in ("k", "N_k", "Ntilde"):
            out[h] = [int(v) for v in vals]
        else:
            out[h] = [float(v) for v in vals]
    return out


def certificate_payload(result: ClosedLoopResult, cfg: ExperimentConfig) -> dict:
    cert = result.certificate
    payload = cert.to_dict()
    payload["passed"] = cert.passed
    payload["violations"] = {name: {"step": k, "inequality": CHECK_DESCRIPTIONS[name]}
                             for name, k in cert.violations.items()}
    payload["steps"] = len(result.steps)
    payload["config"] = cfg.echo()
    return payload


def diagnostics(result: ClosedLoopResult) -> List[str]:
    return [f"invariant violated: {CHECK_DESCRIPTIONS[name]} [{name}] at step {k}"
            for name, k in result.certificate.violations.items()]


def _running_average(result: ClosedLoopResult, window: Optional[int]) -> float:
    le = [s.Le for s in result.steps]
    if window is not None:
        le = le[:window]
    return float(np.mean(le))


def _timing_bins(result: ClosedLoopResult) -> Dict[int, List[float]]:
    bins: Dict[int, List[float]] = {}
    for s in result.steps:
        if not s.terminal:
            bins.setdefault(s.N, []).append(1e3 * s.solve_time)
    return bins


# ----------------------------------------------------------------- commands

def simulate(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg)
    header, rows = trace_rows(result, cfg)
    write_csv(out / "trace.csv", header, rows)
    with open(out / "certificate.json", "w") as fh:
        json.dump(certificate_payload(result, cfg), fh, indent=2)
    if cfg.record_all_filters:
        write_csv(out / "filters.csv", ["k", "N_common"] + [f"{k}_N_tilde" for k in KINDS]
                  + [f"{k}_value" for k in KINDS],
                  [[s.k, s.filters[KINDS[0]]["N_common"]]
                   + [s.filters[k]["N_tilde"] for k in KINDS] + [s.filters[k]["value"] for k in KINDS]
                   for s in result.steps if s.filters])
    for line in diagnostics(result):
        print(line, file=sys.stderr)
    return EXIT_OK if result.certificate.passed else EXIT_INVARIANT


def _label(upsilon: float, sigma: int) -> str:
    return f"u{upsilon:g}_s{sigma:d}"


def _sweep_worker(job):
    cfg, upsilon, sigma, out = job
    label = _label(upsilon, sigma)
    run_dir = Path(out) / label
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run_experiment(cfg, upsilon, sigma)
    except InitializationError as exc:
        return {"label": label, "upsilon": upsilon, "sigma": sigma, "code": EXIT_INIT, "error": str(exc)}
    except InternalInvariantError as exc:
        return {"label": label, "upsilon": upsilon, "sigma": sigma, "code": EXIT_INVARIANT, "error": str(exc)}
    header, rows = trace_rows(result, cfg)
    write_csv(run_dir / "trace.csv", header, rows)
    with open(run_dir / "certificate.json", "w") as fh:
        json.dump(certificate_payload(result, cfg), fh, indent=2)
    bins = _timing_bins(result)
    return {
        "label": label, "upsilon": upsilon, "sigma": sigma,
        "code": EXIT_OK if result.certificate.passed else EXIT_INVARIANT,
        "error": "; ".join(diagnostics(result)),
        "steps_to_psi": result.certificate.steps_to_psi,
        "average_Le": _running_average(result, cfg.average_window),
        "trace": (header, rows),
        "bins": {N: statistics.median(v) for N, v in bins.items()},
        "bin_samples": bins,
    }


def timing_trend(bins: Dict[int, List[float]]) -> Tuple[float, Dict[int, float]]:
    """Spearman correlation between horizon length and median solve time."""
    medians = {N: statistics.median(v) for N, v in sorted(bins.items())}
    if len(medians) < 3:
        return float("nan"), medians
    rho = spearmanr(list(medians), list(medians.values())).statistic
    return float(rho), medians


def _panel(results, column: str) -> Tuple[List[str], List[list]]:
    labels = [r["label"] for r in results]
    traces = []
    for r in results:
        header, rows = r["trace"]
        traces.append([row[header.index(column)] for row in rows])
    length = max(len(t) for t in traces)
    rows = [[k] + [t[k] if k < len(t) else None for t in traces] for k in range(length)]
    return ["k"] + [f"{column}_{lab}" for lab in labels], rows


def sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    work = [(cfg, u, s, str(out)) for u, s in cfg.settings]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, work))
    else:
        results = [_sweep_worker(w) for w in work]

    ok = [r for r in results if "trace" in r]
    pooled: Dict[int, List[float]] = {}
    for r in ok:
        for N, v in r["bin_samples"].items():
            pooled.setdefault(N, []).extend(v)
    rho, medians = timing_trend(pooled)
    write_csv(out / "summary.csv",
              ["setting", "upsilon", "sigma", "exit_code", "steps_to_psi", "final_running_avg_Le",
               "median_solve_ms_by_horizon", "error"],
              [[r["label"], r["upsilon"], r["sigma"], r["code"], r.get("steps_to_psi"),
                r.get("average_Le"),
                ";".join(f"{N}:{_fmt(v)}" for N, v in sorted(r.get("bins", {}).items())),
                r.get("error", "")] for r in results])
    if ok:
        for name, column in (("panel_horizon.csv", "N_k"), ("panel_filter.csv", "pi"),
                             ("panel_stage_cost.csv", "Le"), ("panel_average.csv", "Le_running_avg"),
                             ("panel_solve_time.csv", "solve_time_ms")):
            write_csv(out / name, *_panel(ok, column))
        write_csv(out / "timing_by_horizon.csv", ["N", "median_solve_ms", "n_samples"],
                  [[N, medians[N], len(pooled[N])] for N in medians])
    with open(out / "timing.json", "w") as fh:
        json.dump({"spearman_rho": None if math.isnan(rho) else rho, "threshold": TIMING_RHO,
                   "medians_ms": {str(N): v for N, v in medians.items()}}, fh, indent=2)
    if not rho >= TIMING_RHO:
        warnings.warn(f"solve time vs horizon: Spearman rho = {rho:.3f} < {TIMING_RHO}")
    for r in results:
        if r["code"] != EXIT_OK:
            print(f"setting {r['label']}: exit {r['code']}: {r.get('error', '')}", file=sys.stderr)
    return max(r["code"] for r in results)


def table1(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    bench, aux = _setup(cfg)
    grid = cfg.b_grid if cfg.b_grid is not None else B_GRID[cfg.plant]
    x0 = bench.to_deviation(cfg.table_x0 if cfg.table_x0 is not None else TABLE1_X0[cfg.plant])
    code = EXIT_OK
    try:
        table = initial_horizon_table(bench.model, bench.econ, aux, x0, grid)
        rows = [[r.b, r.N0, r.N_bar, r.reference_Ja, ""] for r in table]
    except InitializationError as exc:
        # fall back to independent cells so that one failure does not hide the rest
        rows = []
        for b in grid:
            try:
                r = initial_horizon_table(bench.model, bench.econ, aux, x0, [b])[0]
                rows.append([r.b, r.N0, r.N_bar, r.reference_Ja, ""])
            except InitializationError as cell_exc:
                rows.append([b, None, None, None, str(cell_exc)])
                code = EXIT_INIT
        log.warning("table1: chained computation failed (%s); cells computed independently", exc)
    write_csv(out / "table1.csv", ["b", "N0", "N_bar", "reference_Ja", "error"], rows)
    ordered = sorted((r for r in rows if r[1] is not None), key=lambda r: -r[0])
    N0s = [r[1] for r in ordered]
    if any(a < b for a, b in zip(N0s, N0s[1:])):
        print("table1: N0 increases as b decreases", file=sys.stderr)
        code = max(code, EXIT_INVARIANT)
    return code


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vhempc", description="Variable-horizon economic MPC experiments.",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "run one closed loop"),
                       ("sweep", "one closed loop per (upsilon, sigma) setting"),
                       ("table1", "minimal initial horizon over a grid of b")):
        p = sub.add_parser(name, help=text, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--out", required=True, help="output directory")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        if args.command == "simulate":
            return simulate(cfg, out)
        if args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs must be positive")
            return sweep(cfg, out, args.jobs)
        return table1(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InitializationError as exc:
        print(f"initialization error: {exc}", file=sys.stderr)
        return EXIT_INIT
    except InternalInvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except VhempcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
