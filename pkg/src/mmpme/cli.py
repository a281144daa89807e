"""Command-line driver: ``run`` a single simulation or ``converge`` over mesh sizes.

Every option can also be given in a flat ``key = value`` file passed with
``--config``; options on the command line take precedence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from . import io
from .metric import METRIC_TYPES, build_metric
from .problems import problem_ids
from .study import (ConvergenceReport, ConvergenceRow, RunConfig, converge, mesh_width,
                    simulate)

log = logging.getLogger("mmpme")

# option name -> (RunConfig field, parser)
_FLOAT_LIST = lambda s: tuple(float(v) for v in str(s).split(",") if v.strip())
_INT_LIST = lambda s: [int(v) for v in str(s).split(",") if v.strip()]
_BOOL = lambda s: str(s).strip().lower() in ("1", "true", "yes", "on")
OPTIONS = {
    "problem": ("problem", str),
    "metric": ("metric", str),
    "n": ("n", int),
    "pattern": ("pattern", str),
    "tau": ("tau", float),
    "dtmax": ("dt_max", float),
    "rtol": ("rtol", float),
    "atol": ("atol", float),
    "t-end": ("t_end", float),
    "snapshots": ("snapshots", _FLOAT_LIST),
    "smoothing": ("smoothing", int),
    "theta": ("theta", float),
    "p": ("p", float),
    "initial-adapt": ("initial_adapt", int),
    "xi-interval": ("xi_interval", str),
    "out": ("out", str),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "serial-verify": ("serial_verify", _BOOL),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "dt-max":
            key = "dtmax"
        out[key] = value
    return out


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; command-line flags win")
    p.add_argument("--problem", choices=problem_ids())
    p.add_argument("--metric", choices=METRIC_TYPES)
    p.add_argument("--tau", type=float, help="mesh response time")
    p.add_argument("--dtmax", type=float, help="largest time step")
    p.add_argument("--out", help="output directory")
    p.add_argument("--pattern", choices=("right", "crisscross"),
                   help="structured mesh: right (2n^2 elements) or crisscross (4n^2)")
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--t-end", type=float, help="override the final time")
    p.add_argument("--smoothing", type=int, help="metric smoothing passes")
    p.add_argument("--theta", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--initial-adapt", type=int, help="mesh relaxations on u0 before stepping")
    p.add_argument("--xi-interval", choices=("previous", "trial"),
                   help="mesh relaxation interval: previous accepted step or trial step")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmpme", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one simulation")
    _add_common(run)
    run.add_argument("--n", type=int, help="cells per side")
    run.add_argument("--snapshots", type=_FLOAT_LIST, help="comma-separated snapshot times")
    run.add_argument("--serial-verify", action="store_const", const=True, default=None,
                     help="single process, deterministic reductions")
    conv = sub.add_parser("converge", help="convergence study over mesh sizes")
    _add_common(conv)
    conv.add_argument("--n-list", type=_INT_LIST, help="comma-separated cells per side")
    return parser


def make_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key == "n-list":
                continue
            if key not in OPTIONS:
                raise ValueError(f"unknown config key {key!r}")
            name, parse = OPTIONS[key]
            values[name] = parse(raw)
    for key, (name, _) in OPTIONS.items():
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            values[name] = v
    return RunConfig(**values)


def _n_list(args) -> list:
    if args.n_list:
        return args.n_list
    if args.config:
        raw = read_config_file(args.config).get("n-list")
        if raw:
            return _INT_LIST(raw)
    return [10, 20, 40]


def _snapshot_name(t: float) -> str:
    return f"snapshot_t{t:.6g}.vtk"


def cmd_run(cfg: RunConfig, out: Path) -> int:
    res = simulate(cfg)
    for t_req, (t_act, mesh, U) in sorted(res.snapshots.items()):
        M = build_metric(mesh, U, cfg.metric, cfg.smoothing) if cfg.metric != "uniform" else None
        io.write_vtk(out / _snapshot_name(t_req), mesh, U, metric=M, title=f"{cfg.problem} t={t_act!r}")
    io.write_vtk(out / "final.vtk", res.mesh, res.U, title=f"{cfg.problem} t={res.t!r}")
    io.write_step_log(out / "steps.csv", res.steps)
    summary = {
        "problem": cfg.problem, "metric": cfg.metric, "N": res.n_elements, "t_end": res.t,
        "steps": len(res.steps), "rejected": sum(s.rejected for s in res.steps),
        "seconds": res.seconds, "min_det": res.min_det,
        "max_boundary_deviation": res.max_boundary_deviation,
    }
    if res.problem.exact is not None:
        summary.update(l2l2=res.l2l2, l1l1=res.l1l1)
        io.write_rows(out / "errors.csv", ("N", "h", "l2l2", "l1l1"),
                      [(res.n_elements, mesh_width(res.n_elements), res.l2l2, res.l1l1)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _run_row(cfg: RunConfig) -> ConvergenceRow:
    res = simulate(cfg)
    return ConvergenceRow(res.n_elements, mesh_width(res.n_elements), res.l2l2, res.l1l1,
                          res.seconds, res.min_det, res.max_boundary_deviation)


def cmd_converge(cfg: RunConfig, n_list, out: Path) -> int:
    if cfg.threads > 1 and not cfg.serial_verify:
        report = ConvergenceReport(cfg.problem, cfg.metric, cfg.tau)
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            report.rows = list(pool.map(_run_row, [replace(cfg, n=n) for n in n_list]))
    else:
        report = converge(cfg, n_list)
    io.write_convergence(out / "convergence.csv", report)
    summary = {"problem": cfg.problem, "metric": cfg.metric, "tau": cfg.tau,
               "rows": [asdict(r) for r in report.rows]}
    if len(report.rows) >= 2:
        summary.update(slope_l2=report.slope_l2, slope_l1=report.slope_l1)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for r in report.rows:
        print(f"N={r.N:7d}  l2l2={r.l2l2:.4e}  l1l1={r.l1l1:.4e}  {r.seconds:8.1f}s")
    if len(report.rows) >= 2:
        print(f"slope (L2) = {report.slope_l2:.3f}   slope (L1) = {report.slope_l1:.3f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
    except (ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mmpme: error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "run":
            return cmd_run(cfg, out)
        return cmd_converge(cfg, _n_list(args), out)
    except Exception as exc:  # report and leave a diagnostics file behind
        (out / "diagnostics.txt").write_text(
            f"config: {asdict(cfg)}\n\n{traceback.format_exc()}")
        print(f"mmpme: run failed: {exc} (see {out / 'diagnostics.txt'})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
