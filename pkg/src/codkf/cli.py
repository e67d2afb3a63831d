"""Command line: ``codkf run`` for Monte Carlo batches, ``codkf certify`` for one fusion instance."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from . import fusion as fz
from .config import ConfigError, ExperimentConfig, load_config
from .report import write_aggregate, write_per_step, write_plots, write_summary
from .sim import monte_carlo

log = logging.getLogger("codkf")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _filters(text: str) -> list[str]:
    return [f.strip() for f in text.split(",") if f.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codkf", description="Certified distributed Kalman filter simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment and write CSV/JSON/SVG outputs")
    run.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    run.add_argument("--experiment", type=int, choices=(1, 2))
    run.add_argument("--seed", type=int)
    run.add_argument("--runs", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--nodes", type=int)
    run.add_argument("--out-dir", dest="out_dir")
    run.add_argument("--plots", action="store_true", help="also write SVG plots")
    run.add_argument("--filters", type=_filters, help="comma-separated families, e.g. codkf,cdkf,ckf")
    run.add_argument("--paper-A", dest="paper_a", action="store_true", help="use the transition matrix exactly as printed")
    run.add_argument("--workers", type=int, help="worker processes for independent runs")
    run.add_argument("--tol-rank", dest="tol_rank", type=float)
    run.add_argument("--tol-rho", dest="tol_rho", type=float)
    run.add_argument("--backend", choices=fz.BACKENDS)

    cert = sub.add_parser("certify", help="fuse and certify one instance file")
    cert.add_argument("instance", type=Path, help='JSON file: {"ellipsoids": [{"S": [[...]], "s": [...]}, ...]}')
    cert.add_argument("--tol-rank", dest="tol_rank", type=float, default=fz.TOL_RANK)
    cert.add_argument("--tol-rho", dest="tol_rho", type=float, default=fz.TOL_RHO)
    cert.add_argument("--backend", choices=fz.BACKENDS, default="barrier")
    cert.add_argument("--dump", type=Path, help="write the instance and its solution as JSON")
    return parser


def parse_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "experiment": args.experiment,
        "seed": args.seed,
        "runs": args.runs,
        "steps": args.steps,
        "nodes": args.nodes,
        "out_dir": args.out_dir,
        "filters": args.filters,
        "workers": args.workers,
        "tol_rank": args.tol_rank,
        "tol_rho": args.tol_rho,
        "backend": args.backend,
        "a_variant": "paper" if args.paper_a else None,
    }
    return load_config(args.config, **overrides)


def ensure_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir, prefix=".probe-"):
            pass
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def cmd_run(config: ExperimentConfig, plots: bool = False) -> int:
    out_dir = Path(config.out_dir)
    ensure_writable(out_dir)
    res = monte_carlo(config)
    rows = write_per_step(out_dir / "per_step.csv", res)
    write_aggregate(out_dir / "aggregate.csv", res)
    data = write_summary(out_dir / "summary.json", res)
    if plots:
        write_plots(out_dir, res)
    print(f"runs: {config.runs}  steps: {config.steps}  nodes: {config.nodes}  wall clock: {res.wall_clock:.1f} s")
    if "cert_rate" in data:
        print(f"certified: {data['cert_rate']:.4%}  rank one: {data['rank_one_rate']:.4%}")
    for fam, rate in data["success_rate"].items():
        print(f"{fam}: success {rate:.0%}  steady-state MSE {data['steady_state_mse'].get(fam)}")
    print(f"wrote {rows} per-step rows to {out_dir}")
    return EXIT_OK


def cmd_certify(path: Path, tol_rank: float, tol_rho: float, backend: str = "barrier", dump: Path | None = None) -> int:
    ellipsoids = fz.load_instance(path.read_text())
    out = fz.fuse_and_certify(ellipsoids, backend, tol_rank, tol_rho)
    f, c, r = out.fusion, out.certificate, out.record
    print(f"ellipsoids: {len(ellipsoids)}  dimension: {ellipsoids[0].n}")
    print("lambda*: " + " ".join(f"{v:.6f}" for v in f.lam))
    print(f"Tr(S*): {f.objective:.9g}")
    print(f"Tr(X*): {c.trace_X:.9g}")
    print(f"rank(X*): {r.rank}")
    print(f"rho: {r.rho:.9f}" + ("  (anomaly: raw value above 1)" if r.anomaly else ""))
    print(f"certified: {'yes' if r.certified else 'no'}")
    if dump is not None:
        dump.write_text(fz.dump_instance(ellipsoids, out) + "\n")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(parse_config(args), args.plots)
        return cmd_certify(args.instance, args.tol_rank, args.tol_rho, args.backend, args.dump)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fz.NotPositiveDefiniteError as exc:
        print(f"not positive definite: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError, fz.FusionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
