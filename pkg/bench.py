"""
Monte-Carlo experiment: slack usage and control quality against training length.

For every training length N_bar and training realization, one dataset is
generated and fitted once; every configured controller is then solved
open-loop from noisy null initial conditions and evaluated on the noise-free
plant against the oracle.
"""

import csv
import logging
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from tqdm import tqdm

import numkit
from controllers import ControlProblem, Solution, solve_indirect, solve_oracle, solve_spc
from errors import DdpcError, InfeasibleProblemError, PreconditionError
from estimation import PredictorModel, check_assumption1, fit_causal, fit_least_squares
from metrics import SWEEP_CELL_COUNTER
from models import ControllerSpec, ExperimentConfig, RunResult, SummaryRow
from sysdata import (
    ArxPlant,
    Dimensions,
    RegressorBundle,
    TrainingRecord,
    build_bundle,
    derive_seed,
    generate_training,
    past_window,
    simulate,
)

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"


@dataclass(eq=False)
class TrainingContext:
    """Everything shared by the cells that use one training realization"""

    plant: ArxPlant
    dims: Dimensions
    record: TrainingRecord
    bundle: RegressorBundle
    model: PredictorModel
    causal_model: PredictorModel

    @property
    def rank_delta(self) -> int:
        return self.model.rank_delta


def plant_from_config(config: ExperimentConfig) -> ArxPlant:
    return ArxPlant.siso(config.plant_a, config.plant_b)


def train_seed_for(config: ExperimentConfig, total_samples: int, realization: int) -> int:
    return derive_seed(config.base_seed, 1, total_samples, realization)


def noise_seed_for(config: ExperimentConfig, total_samples: int, realization: int, draw: int) -> int:
    return derive_seed(config.base_seed, 2, total_samples, realization, draw)


def prepare_training(config: ExperimentConfig, total_samples: int, train_seed: int) -> TrainingContext:
    """Generate one training record and fit both predictors on it"""
    plant = plant_from_config(config)
    dims = Dimensions.from_total_samples(config.past_horizon, config.future_horizon, 1, 1, total_samples)
    record = generate_training(
        plant,
        dims,
        input_std=config.input_std,
        input_bounds=(config.input_lower, config.input_upper),
        noise_std=config.noise_std,
        seed=train_seed,
    )
    bundle = build_bundle(record, dims)
    return TrainingContext(plant, dims, record, bundle, fit_least_squares(bundle), fit_causal(bundle))


def initial_problem(config: ExperimentConfig, noise_seed: int) -> ControlProblem:
    """Null true initial conditions: past inputs are zero, measured past outputs are pure noise"""
    rho = config.past_horizon
    rng = np.random.default_rng(noise_seed)
    past_y = rng.normal(0.0, config.noise_std, size=(rho, 1))
    z = past_window(np.zeros((rho, 1)), past_y)
    return ControlProblem.tracking(
        z,
        config.future_horizon,
        config.setpoint,
        q=config.q,
        r=config.r,
        input_box=(config.input_lower, config.input_upper),
    )


def solve_controller(spec: ControllerSpec, problem: ControlProblem, ctx: TrainingContext) -> Solution:
    """Dispatch one controller; DeePC variants are solved through their indirect equivalent"""
    if spec.kind == "oracle":
        lag = max(ctx.plant.lag, ctx.dims.past_horizon)
        return solve_oracle(problem, ctx.plant, np.zeros((lag, 1)), np.zeros((lag, 1)))
    if spec.kind == "spc":
        return solve_spc(problem, ctx.model)
    if spec.kind == "cspc":
        return solve_spc(problem, ctx.causal_model)
    if spec.kind == "gamma_ddpc" and not check_assumption1(ctx.model)[0]:
        raise PreconditionError(f"Sigma_Delta or Sigma_phi is singular at N_bar={ctx.dims.total_samples}")
    lam1, lam2, causal = spec.indirect_weights()
    return solve_indirect(problem, ctx.causal_model if causal else ctx.model, lam1, lam2)


def open_loop_response(plant: ArxPlant, u: np.ndarray) -> np.ndarray:
    """Noise-free plant output under u from rest"""
    clean, _ = simulate(plant, np.asarray(u).reshape(-1, plant.n_u))
    return clean.reshape(-1)


def _failed(spec, total_samples, train_seed, noise_seed, rank_delta, status) -> RunResult:
    return RunResult(
        controller=spec.label,
        kind=spec.kind,
        total_samples=total_samples,
        lambda2=spec.slack_weight,
        train_seed=train_seed,
        noise_seed=noise_seed,
        rank_delta=rank_delta,
        status=status,
    )


def run_single(
    config: ExperimentConfig,
    controller: ControllerSpec,
    total_samples: int,
    train_seed: int,
    noise_seed: int,
    context: Optional[TrainingContext] = None,
    oracle: Optional[Solution] = None,
) -> RunResult:
    """
    One open-loop evaluation.

    J*  = ||y~(u*) - y_ref||_Q^2 + ||u*||_R^2
    J_o = ||y~(u*) - y_o||_Q^2 + ||u* - u_o||_R^2

    with y~ the noise-free plant response. Controller failures are recorded in
    the status field, never raised.
    """
    ctx = context or prepare_training(config, total_samples, train_seed)
    problem = initial_problem(config, noise_seed)
    if oracle is None:
        oracle = solve_controller(ControllerSpec(kind="oracle"), problem, ctx)

    try:
        sol = solve_controller(controller, problem, ctx)
        y_tilde = open_loop_response(ctx.plant, sol.u)
    except InfeasibleProblemError as e:
        logger.debug("Cell %s N_bar=%d infeasible: %s", controller.label, total_samples, e)
        return _failed(controller, total_samples, train_seed, noise_seed, ctx.rank_delta, e.status)
    except PreconditionError as e:
        logger.debug("Cell %s N_bar=%d skipped: %s", controller.label, total_samples, e)
        return _failed(controller, total_samples, train_seed, noise_seed, ctx.rank_delta, "precondition")
    except DdpcError as e:
        logger.warning("⚠️ Cell %s N_bar=%d failed: %s", controller.label, total_samples, e)
        return _failed(controller, total_samples, train_seed, noise_seed, ctx.rank_delta, "error")

    j_star = problem.cost(sol.u, y_tilde)
    j_oracle = numkit.weighted_sqnorm(y_tilde - oracle.y_hat, problem.Q) + numkit.weighted_sqnorm(sol.u - oracle.u, problem.R)
    return RunResult(
        controller=controller.label,
        kind=controller.kind,
        total_samples=total_samples,
        lambda2=controller.slack_weight,
        train_seed=train_seed,
        noise_seed=noise_seed,
        j_star=j_star,
        j_oracle_dist=j_oracle,
        slack_ms=sol.slack_ms,
        rank_delta=ctx.rank_delta,
        status=sol.status,
    )


def _run_training_set(task: Tuple[Dict, int, int]) -> List[RunResult]:
    """All controllers and noise draws for one training realization"""
    config_data, total_samples, realization = task
    config = ExperimentConfig(**config_data)
    specs = config.controller_specs()
    train_seed = train_seed_for(config, total_samples, realization)
    noise_seeds = [noise_seed_for(config, total_samples, realization, k) for k in range(config.n_noise)]

    try:
        ctx = prepare_training(config, total_samples, train_seed)
    except DdpcError as e:
        logger.warning("⚠️ Training set N_bar=%d r=%d failed: %s", total_samples, realization, e)
        return [_failed(s, total_samples, train_seed, ns, 0, "error") for ns in noise_seeds for s in specs]

    results = []
    for noise_seed in noise_seeds:
        problem = initial_problem(config, noise_seed)
        oracle = solve_controller(ControllerSpec(kind="oracle"), problem, ctx)
        for spec in specs:
            results.append(run_single(config, spec, total_samples, train_seed, noise_seed, ctx, oracle))
    return results


class ResultWriter:
    """Serializes result rows from any number of producers into one CSV file"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.lock = threading.Lock()
        self.count = 0
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(RunResult.csv_header())

    def write(self, results: Iterable[RunResult]):
        with self.lock:
            for result in results:
                self._writer.writerow(result.to_csv_row())
                self.count += 1
            self._fh.flush()

    def close(self):
        with self.lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_sweep(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = True,
) -> List[RunResult]:
    """
    Full factorial sweep. Results are written to <out_dir>/results.csv in task
    order, so the file does not depend on how the pool schedules the work.
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_data = config.model_dump()
    tasks = [(config_data, n_bar, r) for n_bar in config.total_samples_grid for r in range(config.n_train)]
    logger.info(
        "📊 Sweep: %d training sets x %d controllers x %d noise draws, %d job(s)",
        len(tasks),
        len(config.controller_specs()),
        config.n_noise,
        config.jobs,
    )

    results: List[RunResult] = []
    bar = tqdm(total=len(tasks), desc="training sets", disable=not progress)
    with ResultWriter(out / RESULTS_FILE) as writer:
        if config.jobs > 1:
            with ProcessPoolExecutor(max_workers=config.jobs) as ex:
                batches = ex.map(_run_training_set, tasks)
                for batch in batches:
                    _collect(batch, writer, results)
                    bar.update()
        else:
            for task in tasks:
                _collect(_run_training_set(task), writer, results)
                bar.update()
    bar.close()

    failed = sum(not r.ok for r in results)
    marker = "✅" if failed == 0 else "⚠️"
    logger.info("%s Sweep finished: %d cells, %d not optimal -> %s", marker, len(results), failed, out / RESULTS_FILE)
    return results


def _collect(batch: List[RunResult], writer: ResultWriter, results: List[RunResult]):
    writer.write(batch)
    results.extend(batch)
    for r in batch:
        SWEEP_CELL_COUNTER.labels(controller=r.kind, status=r.status).inc()


def read_results(path: Union[str, Path]) -> List[RunResult]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RunResult(**{k: (v if v != "" else None) for k, v in row.items()}) for row in rows]


def _quartiles(values: Sequence[float]) -> Tuple[float, float, float]:
    q25, q50, q75 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q50), float(q25), float(q75)


def summarize(results: Iterable[RunResult]) -> List[SummaryRow]:
    """Median and interquartile range per (controller, N_bar)"""
    groups: Dict[Tuple, List[RunResult]] = {}
    for r in results:
        if r.ok:
            groups.setdefault((r.controller, r.kind, r.total_samples, r.lambda2), []).append(r)

    rows = []
    for (controller, kind, n_bar, lam2), group in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][2])):
        j = _quartiles([r.j_star for r in group])
        o = _quartiles([r.j_oracle_dist for r in group])
        s = _quartiles([r.slack_ms for r in group])
        rows.append(
            SummaryRow(
                controller=controller,
                kind=kind,
                total_samples=n_bar,
                lambda2=lam2,
                count=len(group),
                j_star_median=j[0],
                j_star_q25=j[1],
                j_star_q75=j[2],
                j_oracle_median=o[0],
                j_oracle_q25=o[1],
                j_oracle_q75=o[2],
                slack_ms_median=s[0],
                slack_ms_q25=s[1],
                slack_ms_q75=s[2],
            )
        )
    return rows


def _series(summary: List[SummaryRow]) -> Dict[str, List[SummaryRow]]:
    series: Dict[str, List[SummaryRow]] = {}
    for row in summary:
        series.setdefault(row.controller, []).append(row)
    for rows in series.values():
        rows.sort(key=lambda r: r.total_samples)
    return series


_REFERENCE_STYLE = {"spc": ("black", ":"), "cspc": ("red", "-."), "oracle": ("grey", "--")}


def _plot(summary: List[SummaryRow], field: str, ylabel: str, title: str, path: Path, references: bool) -> Path:
    series = _series(summary)
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.subplots()
    table = [f"controller,total_samples,{field}_median,{field}_q25,{field}_q75"]
    for name, rows in series.items():
        kind = rows[0].kind
        if kind in _REFERENCE_STYLE and not references:
            continue
        x = [r.total_samples for r in rows]
        med = [getattr(r, f"{field}_median") for r in rows]
        lo = [getattr(r, f"{field}_q25") for r in rows]
        hi = [getattr(r, f"{field}_q75") for r in rows]
        if kind in _REFERENCE_STYLE:
            color, style = _REFERENCE_STYLE[kind]
            ax.plot(x, med, linestyle=style, color=color, label=name)
        else:
            line = ax.plot(x, med, marker="o", label=name)[0]
            ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.15)
        table += [f"{name},{r.total_samples},{m:.6g},{a:.6g},{b:.6g}" for r, m, a, b in zip(rows, med, lo, hi)]

    ax.set_xscale("log")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("N_bar (training samples)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    # data table travels inside the SVG metadata
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": "\n".join(table)})
    return path


def write_summary(summary: List[SummaryRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    fields = list(SummaryRow.model_fields)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in summary:
            writer.writerow(
                ["" if v is None else (format(v, ".17g") if isinstance(v, float) else str(v)) for v in (getattr(row, f) for f in fields)]
            )
    return path


def aggregate_and_plot(results: Sequence[RunResult], out_dir: Union[str, Path]) -> List[Path]:
    """summary.csv plus slack, cost and oracle-distance figures"""
    if not results:
        raise ValueError("no results to aggregate")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(results)
    matplotlib.rcParams["svg.hashsalt"] = "ddpc"

    paths = [write_summary(summary, out / SUMMARY_FILE)]
    paths.append(_plot(summary, "slack_ms", "mean squared slack", "Slack usage", out / "fig_slack.svg", references=False))
    paths.append(_plot(summary, "j_star", "J*", "Cost criterion", out / "fig_cost.svg", references=True))
    paths.append(_plot(summary, "j_oracle", "J_o", "Dissimilarity from the oracle", out / "fig_oracle.svg", references=True))
    logger.info("📊 Wrote %s", ", ".join(p.name for p in paths))
    return paths


def trend_report(summary: List[SummaryRow]) -> Dict[str, Optional[bool]]:
    """
    Directional claims on the summary medians; None when the needed series
    are not part of the run.
    """
    series = _series(summary)
    slack_series = {name: rows for name, rows in series.items() if rows[0].kind in ("deepc_proj", "deepc_l2", "gamma_ddpc")}
    report: Dict[str, Optional[bool]] = {
        "slack_increasing_small_lambda": None,
        "slack_zero_at_smallest_n": None,
        "cost_order_at_largest_n": None,
        "cspc_closer_to_oracle_at_smallest_n": None,
    }

    if slack_series:
        present = {rows[0].kind for rows in slack_series.values()}
        kind = next(k for k in ("deepc_proj", "deepc_l2", "gamma_ddpc") if k in present)
        family = {rows[0].lambda2: rows for rows in slack_series.values() if rows[0].kind == kind}
        small, large = family[min(family)], family[max(family)]
        slack = [r.slack_ms_median for r in small]
        report["slack_increasing_small_lambda"] = all(b > a for a, b in zip(slack, slack[1:]))
        report["slack_zero_at_smallest_n"] = slack[0] == 0.0
        if "SPC" in series and len(family) > 1:
            spc = series["SPC"][-1]
            report["cost_order_at_largest_n"] = small[-1].j_star_median > large[-1].j_star_median >= spc.j_star_median

    if "SPC" in series and "C-SPC" in series:
        report["cspc_closer_to_oracle_at_smallest_n"] = series["C-SPC"][0].j_oracle_median <= series["SPC"][0].j_oracle_median
    return report
