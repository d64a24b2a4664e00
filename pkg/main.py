import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

import bench
import equivalence
from errors import ConfigError
from metrics import init_metrics
from models import ControllerSpec, ExperimentConfig

load_dotenv()

logger = logging.getLogger("ddpc")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3


def load_config(path: Optional[str], full_scale: bool) -> ExperimentConfig:
    """File values over scale defaults, environment over file"""
    if path:
        config = ExperimentConfig.from_file(path, full_scale=full_scale)
    else:
        config = ExperimentConfig.full_scale() if full_scale else ExperimentConfig.desk_scale()
    return config.with_env_overrides()


def _apply_flags(config: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "jobs", None):
        updates["jobs"] = args.jobs
    if not updates:
        return config
    try:
        return ExperimentConfig(**{**config.model_dump(), **updates})
    except ValueError as e:
        raise ConfigError(f"invalid command-line override: {e}") from e


def _start_metrics(args):
    port = args.metrics_port or os.getenv("DDPC_METRICS_PORT")
    if port:
        init_metrics(port=int(port))


def cmd_bench(args) -> int:
    config = _apply_flags(load_config(args.config, args.full_scale), args)
    _start_metrics(args)
    results = bench.run_sweep(config, progress=not args.no_progress)
    bench.aggregate_and_plot(results, config.output_dir)

    trends = bench.trend_report(bench.summarize(results))
    for claim, holds in trends.items():
        marker = "➖" if holds is None else ("✅" if holds else "❌")
        print(f"{marker} {claim}: {holds}")

    infeasible = sum(not (r.ok or r.skipped) for r in results)
    if infeasible:
        logger.warning("⚠️ %d of %d cells did not reach an optimal solution", infeasible, len(results))
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = args.suite or list(equivalence.SUITES)
    reports = []
    for suite in suites:
        reports.extend(equivalence.run_suite(suite, args.instances, seed=args.seed, jobs=args.jobs))
    if args.out:
        equivalence.write_reports(reports, args.out)
        logger.info("💾 Wrote %d reports to %s", len(reports), args.out)
    else:
        for report in reports:
            print(report.model_dump_json())
    return EXIT_OK if equivalence.all_passed(reports) else EXIT_FAILED


def cmd_demo(args) -> int:
    config = load_config(args.config, full_scale=False)
    total_samples = args.total_samples or max(config.total_samples_grid)
    train_seed = bench.train_seed_for(config, total_samples, 0)
    noise_seed = bench.noise_seed_for(config, total_samples, 0, 0)
    ctx = bench.prepare_training(config, total_samples, train_seed)
    print(f"N_bar = {total_samples}, N = {ctx.dims.columns}, rank(Sigma_Delta) = {ctx.rank_delta}")

    specs: List[ControllerSpec] = [ControllerSpec(kind="oracle")] + config.controller_specs()
    for spec in specs:
        r = bench.run_single(config, spec, total_samples, train_seed, noise_seed, context=ctx)
        if r.ok:
            print(f"{spec.label:>22}  J* = {r.j_star:10.5f}   J_o = {r.j_oracle_dist:10.5f}   slack_ms = {r.slack_ms:.3e}")
        else:
            print(f"{spec.label:>22}  {r.status}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddpc", description="Data-driven predictive control: equivalence checks and benchmark")
    sub = p.add_subparsers(dest="cmd", required=True)

    pb = sub.add_parser("bench", help="Run the Monte-Carlo sweep and write CSV tables and SVG figures")
    pb.add_argument("--config", type=str, default=None, help="key = value experiment file")
    pb.add_argument("--out", type=str, default=None, help="output directory")
    pb.add_argument("--paper-scale", "--full-scale", dest="full_scale", action="store_true", help="full grid and 200 x 30 realizations")
    pb.add_argument("--jobs", type=int, default=None)
    pb.add_argument("--metrics-port", type=int, default=None, help="expose prometheus metrics on this port")
    pb.add_argument("--no-progress", action="store_true")
    pb.set_defaults(func=cmd_bench)

    pv = sub.add_parser("verify", help="Run the equivalence suites")
    pv.add_argument("--instances", type=int, default=50)
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--jobs", type=int, default=1)
    pv.add_argument("--suite", action="append", choices=equivalence.SUITES, help="repeatable; default all")
    pv.add_argument("--out", type=str, default=None, help="JSON-lines report file")
    pv.set_defaults(func=cmd_verify)

    pd = sub.add_parser("demo", help="Solve one instance with every configured controller")
    pd.add_argument("--config", type=str, default=None)
    pd.add_argument("--total-samples", type=int, default=None)
    pd.set_defaults(func=cmd_demo)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("DDPC_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("❌ %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
