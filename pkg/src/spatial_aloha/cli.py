"""Command-line interface: configuration, dispatch and serialization."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, experiments, fluid, protocol, stability
from .graph import Graph, GraphError, build_graph, spectral_report

log = logging.getLogger(__name__)

MODES = ("spectral", "classify", "simulate", "fluid", "stable-points", "sweep",
         "convergence", "boundary", "rates")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# Mode-independent defaults; per-mode overrides below.
DEFAULTS = {
    "arrivals": "poisson",
    "seed": 0,
    "out": "out",
    "format": "json",
    "reps": 20,
    "thinning": 1,
    "horizon": 10.0,
    "step_tol": 1e-6,
    "zero_tol": 1e-6,
    "starts": 64,
    "tol": 1e-10,
}
MODE_DEFAULTS = {
    "simulate": {"slots": 10_000},
    "sweep": {"slots": 100_000, "reps": 4},
    "convergence": {"scales": [1e2, 1e3, 1e4], "horizon": 5.0},
    "boundary": {"horizon": 5.0, "eps": [0.05, 0.1, 0.2]},
    "rates": {"checkpoints": [100, 1000, 10_000], "reps": 2000},
}
NEEDS_LAMBDA = {"classify", "simulate", "fluid", "stable-points", "convergence", "boundary", "rates"}


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2."""


def load_schema(name: str) -> dict:
    text = resources.files("spatial_aloha.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _registry():
    from referencing import Registry, Resource

    schemas = {f"spatial_aloha/{n}.schema.json": load_schema(n)
               for n in ("config", "result", "trace_line", "metadata")}
    return Registry().with_resources(
        (uri, Resource.from_contents(s)) for uri, s in schemas.items()
    )


def validate(instance, name: str) -> None:
    """Validate against a published schema; raise ConfigError with the field path."""
    schema = load_schema(name)
    validator = jsonschema.Draft202012Validator(schema, registry=_registry())
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(f"{name}{path or ''}: {err.message}")


@dataclass
class RunConfig:
    mode: str
    graph_spec: str
    graph: Graph
    lam: list[float] | None
    arrivals: str
    seed: int | None
    out: Path
    format: str
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def lam_value(self):
        """Scalar when all rates agree, else the full vector."""
        if self.lam is None:
            return None
        if len(set(self.lam)) == 1:
            return self.lam[0]
        return list(self.lam)

    def arrival_model(self) -> protocol.ArrivalModel:
        return protocol.ArrivalModel.of(self.arrivals, self.lam, self.graph.node_count)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _lambda(text: str):
    vals = _floats(text)
    return vals[0] if len(vals) == 1 else vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--graph", help="cycle:K | complete:K | torus:MxN | random_regular:K,d[,seed] | edge-list file")
    common.add_argument("--lambda", dest="lambda", type=_lambda, help="arrival rate x or x1,...,xK")
    common.add_argument("--arrivals", choices=protocol.FAMILIES)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--slots", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("--thinning", type=int)
    common.add_argument("--initial", type=_floats, help="initial state x1,...,xK")
    common.add_argument("--horizon", type=float)
    common.add_argument("--step-tol", dest="step_tol", type=float)
    common.add_argument("--zero-tol", dest="zero_tol", type=float)
    common.add_argument("--starts", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--grid", type=_floats, help="lambda grid for sweep")
    common.add_argument("--scales", type=_floats)
    common.add_argument("--checkpoints", type=_ints)
    common.add_argument("--eps", type=_floats)
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    parser = _Parser(prog="spatial-aloha", description="Spatial slotted ALOHA analysis toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    helps = {
        "spectral": "eigenvalues, spectral gap and stability thresholds",
        "classify": "fluid stability verdict and diagonal local stability",
        "simulate": "simulate the workload chain",
        "fluid": "integrate the fluid ODE (plus drain/growth checks)",
        "stable-points": "fixed points of the projected dynamics",
        "sweep": "empirical stability indicators over a lambda grid",
        "convergence": "fluid-limit convergence across scales",
        "boundary": "boundary repulsion of ODE trajectories",
        "rates": "total-variation convergence probe",
    }
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=helps[mode], argument_default=argparse.SUPPRESS)
    return parser


def parse_config(argv=None) -> RunConfig:
    """Merge a config file with flags (flags win), validate strictly and build the graph."""
    args = vars(build_parser().parse_args(argv))
    verbose = args.pop("verbose", False)
    if verbose:
        logging.basicConfig(level=logging.INFO)
    merged: dict = {}
    cfg_path = args.pop("config", None)
    if cfg_path is not None:
        try:
            merged = json.loads(Path(cfg_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {cfg_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {cfg_path} is not valid JSON: {exc}") from None
        if not isinstance(merged, dict):
            raise ConfigError("config: top level must be an object")
    merged.update(args)
    if "graph" not in merged:
        raise ConfigError("config.graph: a graph is required")
    validate(merged, "config")
    mode = merged["mode"]
    eff = {**DEFAULTS, **MODE_DEFAULTS.get(mode, {}), **merged}

    try:
        g = build_graph(eff["graph"])
    except GraphError as exc:
        raise ConfigError(f"config.graph: {exc}") from None
    k = g.node_count

    lam = eff.get("lambda")
    if lam is not None:
        lam = [float(lam)] * k if not isinstance(lam, list) else [float(x) for x in lam]
        if len(lam) == 1:
            lam = lam * k
        if len(lam) != k:
            raise ConfigError(f"config.lambda: expected 1 or {k} values, got {len(lam)}")
    if mode in NEEDS_LAMBDA and lam is None:
        raise ConfigError(f"config.lambda: required for mode {mode}")
    if mode == "sweep" and "grid" not in eff:
        raise ConfigError("config.grid: required for mode sweep")
    if lam is not None:
        zero_ok = mode == "simulate" and eff["arrivals"] == "zero"
        if not zero_ok and any(x <= 0 for x in lam):
            raise ConfigError("config.lambda: lambda_i > 0 required")
    if mode == "sweep" and any(x <= 0 for x in eff["grid"]):
        raise ConfigError("config.grid: lambda_i > 0 required")
    if "initial" in eff and len(eff["initial"]) != k:
        raise ConfigError(f"config.initial: expected {k} values")
    if mode == "simulate" and "initial" in eff and any(x != int(x) for x in eff["initial"]):
        raise ConfigError("config.initial: simulation needs integer counts")

    cfg = RunConfig(mode, eff["graph"], g, lam, eff["arrivals"], eff["seed"], Path(eff["out"]),
                    eff["format"], options=eff, raw=eff)
    if lam is not None and mode in ("simulate", "rates"):
        try:
            cfg.arrival_model()
        except ValueError as exc:
            raise ConfigError(f"config.arrivals: {exc}") from None
    return cfg


def _clean(obj):
    """JSON-safe copy: numpy types to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return [_clean(obj.real), _clean(obj.imag)]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(_clean(v)) if isinstance(v, (list, dict)) else v
                             for k, v in row.items()})


def _kv_rows(result: dict) -> list[dict]:
    return [{"key": k, "value": v} for k, v in sorted(result.items())]


# --- dispatch ---------------------------------------------------------------

def _spectral(cfg):
    rep = spectral_report(cfg.graph, cfg.lam_value() if cfg.lam else None)
    res = rep.to_dict()
    lines = [
        f"eigenvalues    {', '.join(f'{x:.6g}' for x in rep.eigenvalues)}",
        f"spectral gap   {rep.spectral_gap:.12g}",
        f"e^-1/V         {rep.global_threshold}",
        f"local thresh.  {rep.local_threshold}",
    ]
    if rep.note:
        lines.append(f"note           {rep.note}")
    return res, [{"index": i, "eigenvalue": v} for i, v in enumerate(rep.eigenvalues)], lines


def _classify(cfg):
    verdict = stability.classify(cfg.graph, cfg.lam_value())
    res = verdict.to_dict()
    lam = cfg.lam_value()
    if verdict.diagonal_locally_stable is not None:
        res["diagonal_spectrum"] = stability.diagonal_spectrum(cfg.graph, lam).to_dict()
    else:
        wit = stability.stolyar_search(cfg.graph, cfg.lam, seed=cfg.seed)
        res["stolyar_witness"] = wit.to_dict() if wit is not None else None
    diag = verdict.diagonal_locally_stable
    diag_word = {"stable": "stable", "unstable": "unstable", "critical": "critical", None: "n/a"}[diag]
    lines = [
        f"fluid_stable={str(verdict.fluid_stable).lower()}  diagonal={diag_word}",
        f"thresholds     e^-1/V = {verdict.global_threshold:.10g}"
        + (f"   local = {verdict.local_threshold:.10g}" if verdict.local_threshold is not None else ""),
    ]
    lines += [f"note           {n}" for n in verdict.notes]
    if "stolyar_witness" in res:
        wit = res["stolyar_witness"]
        lines.append("witness        " + ("not found within budget" if wit is None
                                         else f"p = {np.round(wit['p'], 4).tolist()}, margin {wit['margin']:.4g}"))
    return res, _kv_rows(res), lines


def _simulate(cfg):
    o = cfg.options
    arr = cfg.arrival_model()
    initial = None if "initial" not in o else np.asarray(o["initial"], dtype=np.int64)
    trace = protocol.simulate(cfg.graph, arr, o["slots"], seed=cfg.seed, initial=initial,
                              thinning=o["thinning"])
    return _trace_result(cfg, trace)


def _trace_result(cfg, trace, partial=False):
    res = trace.summary()
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "simulate.trace.jsonl"
    trace.to_jsonl(path)
    res["trace_file"] = path.name
    lines = [
        f"slots          {trace.n_slots}" + ("  (aborted: count overflow)" if partial else ""),
        f"time-avg |W|   {trace.time_avg_total:.6g}",
        f"throughput     {', '.join(f'{x:.4g}' for x in trace.throughput)}",
        f"returns to |W|<=K: {len(trace.return_times)}   final W = {res['final_state']}",
    ]
    return res, _kv_rows(res), lines


def _fluid(cfg):
    o = cfg.options
    g, k = cfg.graph, cfg.graph.node_count
    z0 = np.asarray(o["initial"], float) if "initial" in o else np.full(k, 1.0 / k)
    params = fluid.FluidParams(g, np.asarray(cfg.lam), horizon=o["horizon"],
                               step_tol=o["step_tol"], zero_tol=o["zero_tol"])
    traj = fluid.integrate(z0, params)
    res = {
        "event": traj.event,
        "event_time": traj.event_time,
        "t": traj.t,
        "z": traj.z,
        "sum_sq": traj.sum_sq,
        "empty_neighborhood_hit": traj.empty_neighborhood_hit,
        "steps": traj.metadata,
    }
    lines = [
        f"event          {traj.event} at t = {traj.event_time:.6g}",
        f"final z        {', '.join(f'{x:.6g}' for x in traj.final)}",
    ]
    lam = cfg.lam_value()
    if g.is_regular and not isinstance(lam, list):
        thr = spectral_report(g).global_threshold
        if not math.isclose(lam, thr, rel_tol=1e-12):
            chk = experiments.drain_growth_check(g, lam, [z0])
            res["drain_growth"] = chk.to_dict()
            rec = chk.records[0]
            if chk.regime == "subcritical":
                lines.append(f"drain check    drained at {rec.drain_time} (bound {rec.drain_bound:.4g}), ok={rec.ok}")
            else:
                lines.append(f"growth check   z(T)/T rel. error {rec.growth_rel_error:.3g}, "
                             f"phi error {rec.phi_error:.3g}, asserted={rec.asserted}, ok={rec.ok}")
    return res, list(traj.rows()), lines


def _stable_points(cfg):
    o = cfg.options
    search = stability.find_stable_points(cfg.graph, cfg.lam_value(), starts=o["starts"],
                                          seed=cfg.seed, tol=o["tol"])
    res = search.to_dict()
    lines = [f"{len(search.points)} fixed points (ansatz={search.symmetric_ansatz}, "
             f"failed starts {search.failed_starts}/{search.starts})"]
    for p in search.points:
        lines.append(f"  y = ({', '.join(f'{x:.6f}' for x in p.y)})  {p.classification}")
    rows = [{"y": p.y, "residual": p.residual, "classification": p.classification}
            for p in search.points]
    return res, rows or _kv_rows(res), lines


def _sweep(cfg):
    o = cfg.options
    initial = None if "initial" not in o else np.asarray(o["initial"], dtype=np.int64)
    sw = experiments.lambda_sweep(cfg.graph, o["grid"], slots=o["slots"], reps=o["reps"],
                                  seed=cfg.seed, initial=initial, arrivals=cfg.arrivals)
    res = sw.to_dict()
    lines = [f"e^-1/V = {sw.global_threshold:.6g}   local = {sw.local_threshold:.6g}",
             "lambda     slope        return  label"]
    for row in zip(sw.lam_grid, sw.slope, sw.return_fraction, sw.labels):
        lines.append(f"{row[0]:<10.4g} {row[1]:<12.4g} {row[2]:<7.2f} {row[3]}")
    rows = [dict(zip(("lambda", "time_avg_total", "slope", "slope_se", "return_fraction", "label"), r))
            for r in zip(sw.lam_grid, sw.time_avg_total, sw.slope, sw.slope_se,
                         sw.return_fraction, sw.labels)]
    return res, rows, lines


def _convergence(cfg):
    o = cfg.options
    k = cfg.graph.node_count
    direction = np.asarray(o["initial"], float) if "initial" in o else np.full(k, 1.0 / k)
    rec = experiments.fluid_limit_convergence(cfg.graph, cfg.lam, direction, scales=o["scales"],
                                              T=o["horizon"], reps=o["reps"], seed=cfg.seed,
                                              arrivals=cfg.arrivals)
    res = rec.to_dict()
    lines = ["scale      median sup L1 gap   flagged"]
    lines += [f"{s:<10.4g} {d:<19.4g} {f}" for s, d, f in zip(rec.scales, rec.median_distance, rec.flagged)]
    lines.append(f"decreasing: {rec.decreasing()}")
    rows = [{"scale": s, "norm": n, "median_distance": d, "flagged": f}
            for s, n, d, f in zip(rec.scales, rec.norms, rec.median_distance, rec.flagged)]
    return res, rows, lines


def _boundary(cfg):
    o = cfg.options
    starts = [o["initial"]] if "initial" in o else None
    rep = experiments.boundary_repulsion_check(cfg.graph, cfg.lam, starts=starts, T=o["horizon"],
                                               eps_values=o["eps"])
    res = rep.to_dict()
    lines = [f"K1 = {rep.K1:.4g}  K2 = {rep.K2:.4g}  c = {rep.c:.4g}  all positive: {rep.all_positive}"]
    for r in rep.records:
        lines.append(f"  start {r.start}: min at first sample {r.first_sample_min:.3g}, "
                     f"dominated-neighbour violations {r.lemma_violations}/{r.lemma_checks}")
    rows = [{"start": r.start, "first_sample_min": r.first_sample_min, "min_over_run": r.min_over_run,
             "lemma_violations": r.lemma_violations, "lemma_checks": r.lemma_checks}
            for r in rep.records]
    return res, rows, lines


def _rates(cfg):
    o = cfg.options
    initial = None if "initial" not in o else np.asarray(o["initial"], dtype=np.int64)
    rep = experiments.convergence_rate_probe(cfg.graph, cfg.arrival_model(), checkpoints=o["checkpoints"],
                                             reps=o["reps"], seed=cfg.seed, initial=initial)
    res = rep.to_dict()
    lines = ["slot       TV        se"]
    lines += [f"{c:<10} {t:<9.4f} {s:.4f}" for c, t, s in zip(rep.checkpoints, rep.tv, rep.tv_se)]
    lines.append(f"noise floor {rep.noise_floor:.4f}  non-increasing: {rep.non_increasing}  "
                 f"Kendall tau {rep.kendall_tau:.3f}")
    lines += [f"warning: {w}" for w in rep.warnings]
    rows = [{"checkpoint": c, "tv": t, "tv_se": s} for c, t, s in zip(rep.checkpoints, rep.tv, rep.tv_se)]
    return res, rows, lines


DISPATCH = {
    "spectral": _spectral, "classify": _classify, "simulate": _simulate, "fluid": _fluid,
    "stable-points": _stable_points, "sweep": _sweep, "convergence": _convergence,
    "boundary": _boundary, "rates": _rates,
}


def _stem(mode: str) -> str:
    return mode.replace("-", "_")


def run(cfg: RunConfig, argv=None) -> int:
    """Dispatch, write ``<mode>.json`` (+ CSV) and a metadata sidecar, print a summary."""
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    cfg.out.mkdir(parents=True, exist_ok=True)
    stem = _stem(cfg.mode)
    partial, error, code = False, None, EXIT_OK
    try:
        result, rows, lines = DISPATCH[cfg.mode](cfg)
    except protocol.CountOverflowError as exc:
        partial, error, code = True, str(exc), EXIT_RUNTIME
        if exc.trace is not None:
            result, rows, lines = _trace_result(cfg, exc.trace, partial=True)
        else:
            result, rows, lines = {}, [], []
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        partial, error, code = True, f"{type(exc).__name__}: {exc}", EXIT_RUNTIME
        result, rows, lines = {}, [], []

    doc = {
        "mode": cfg.mode,
        # the output location is run-specific; it lives in the metadata sidecar
        "config": {k: v for k, v in cfg.raw.items() if k != "out"},
        "graph": {"name": cfg.graph.name, "node_count": cfg.graph.node_count,
                  "edges": [list(e) for e in cfg.graph.edges()]},
        "result": result,
        "partial": partial,
    }
    if error:
        doc["error"] = error
    doc = json.loads(dumps(doc))
    validate(doc, "result")
    artifacts = []
    path = cfg.out / f"{stem}.json"
    path.write_text(dumps(doc))
    artifacts.append(path.name)
    if cfg.format == "csv" and rows:
        cpath = cfg.out / f"{stem}.csv"
        _write_rows(cpath, rows)
        artifacts.append(cpath.name)
    if "trace_file" in result:
        artifacts.append(result["trace_file"])
    meta = {
        "started": started,
        "elapsed_seconds": time.perf_counter() - t0,
        "version": __version__,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "exit_code": code,
        "out": str(cfg.out),
        "artifacts": artifacts,
    }
    validate(meta, "metadata")
    (cfg.out / f"{stem}.meta.json").write_text(dumps(meta))

    header = f"[{cfg.mode}] graph {cfg.graph.name} (K={cfg.graph.node_count})"
    if cfg.lam is not None:
        header += f"  lambda={cfg.lam_value()}"
    print(header)
    for line in lines:
        print(line)
    if error:
        print(f"error: {error}  (partial outputs flagged in {path})", file=sys.stderr)
    print(f"wrote {', '.join(str(cfg.out / a) for a in artifacts)}")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, argv)


if __name__ == "__main__":
    sys.exit(main())
