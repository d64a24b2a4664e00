"""
Numerical certification that direct and indirect formulations agree.

Each check solves two formulations of the same instance and reports the gaps
in (u, y_hat, objective). Internal variables (g, gamma) are never compared:
they need not be unique.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

import numkit
from controllers import (
    ControlProblem,
    reduced_tracking_weight,
    solve_deepc,
    solve_gddpc,
    solve_indirect,
    solve_unconstrained_closed_form,
    theorem_weights,
)
from errors import DdpcError, InfeasibleProblemError, PreconditionError
from estimation import PredictorModel, check_assumption1, fit_least_squares
from metrics import EQUIVALENCE_COUNTER
from models import EquivalenceReport, IdentityReport
from sysdata import Dimensions, RegressorBundle, benchmark_plant, build_bundle, derive_seed, generate_training

logger = logging.getLogger(__name__)

DECISION_TOL = 1e-5
OBJECTIVE_TOL = 1e-7
CLOSED_FORM_TOL = 1e-6
IDENTITY_TOL = 1e-8
PINV_NORM_TOL = 1e-9
PINV_NORM_PAIRS = 20

SUITES = ("theorem1_l2", "theorem1_proj", "gamma", "gamma1_invariance", "corollary1", "identities")
BETAS = (0.1, 10.0, 1000.0)


def _scaled_gap(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_inf / (1 + ||a||_inf)"""
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(a))))


def _objective_gap(a: float, b: float) -> float:
    return abs(a - b) / (1.0 + abs(a))


def _record(report):
    check = report.check if isinstance(report, EquivalenceReport) else "identities"
    EQUIVALENCE_COUNTER.labels(check=check, verdict=report.verdict).inc()
    if report.verdict == "fail":
        logger.warning("❌ %s instance %d failed: %s", check, report.instance_id, report.detail or "gap above tolerance")
    return report


def _compare(check: str, first, second, tolerance: float, objective_tolerance: Optional[float], **fields):
    return EquivalenceReport.judge(
        check,
        u_gap=_scaled_gap(first.u, second.u),
        yhat_gap=_scaled_gap(first.y_hat, second.y_hat),
        objective_gap=None if objective_tolerance is None else _objective_gap(first.objective, second.objective),
        tolerance=tolerance,
        objective_tolerance=objective_tolerance,
        **fields,
    )


def check_theorem1(
    bundle: RegressorBundle,
    problem: ControlProblem,
    beta: float,
    regularizer: str,
    instance_id: int = 0,
    descriptor: Optional[Dict] = None,
    tolerance: float = DECISION_TOL,
) -> EquivalenceReport:
    """DeePC with h = ||g||^2 or ||(I - Pi) g||^2 against the indirect problem under the matching weights"""
    check = f"theorem1_{regularizer}"
    fields = dict(instance_id=instance_id, descriptor=dict(descriptor or {}, beta=beta, regularizer=regularizer))
    model = fit_least_squares(bundle)
    fields["assumption1"] = check_assumption1(model)[0]

    try:
        direct = solve_deepc(problem, bundle, regularizer, beta)
    except InfeasibleProblemError as e:
        return _record(EquivalenceReport.skipped(check, f"direct problem infeasible: {e}", tolerance, **fields))

    lam1, lam2 = theorem_weights(regularizer, beta)
    try:
        indirect = solve_indirect(problem, model, lam1, lam2)
    except DdpcError as e:
        return _record(
            EquivalenceReport(check=check, verdict="fail", tolerance=tolerance, detail=f"indirect problem failed: {e}", **fields)
        )
    return _record(_compare(check, direct, indirect, tolerance, OBJECTIVE_TOL, **fields))


def check_gamma_equivalence(
    bundle: RegressorBundle,
    problem: ControlProblem,
    beta2: float,
    beta3: float,
    instance_id: int = 0,
    descriptor: Optional[Dict] = None,
    tolerance: float = DECISION_TOL,
) -> EquivalenceReport:
    """LQ-parameterized DeePC against the indirect problem with lam1 = beta2, lam2 = beta3"""
    check = "gamma"
    fields = dict(instance_id=instance_id, descriptor=dict(descriptor or {}, beta2=beta2, beta3=beta3))
    model = fit_least_squares(bundle)
    holds, rank_delta, rank_phi = check_assumption1(model)
    fields["assumption1"] = holds
    if not holds:
        reason = f"covariances are singular (rank Sigma_Delta {rank_delta}, rank Sigma_phi {rank_phi})"
        return _record(EquivalenceReport.skipped(check, reason, tolerance, **fields))

    try:
        lq = numkit.lq_decompose(bundle.Z, bundle.U, bundle.Y)
        direct = solve_gddpc(problem, lq, beta2, beta3, include_gamma1_penalty=True)
    except (PreconditionError, InfeasibleProblemError) as e:
        return _record(EquivalenceReport.skipped(check, str(e), tolerance, **fields))
    try:
        indirect = solve_indirect(problem, model, beta2, beta3)
    except DdpcError as e:
        return _record(
            EquivalenceReport(check=check, verdict="fail", tolerance=tolerance, detail=f"indirect problem failed: {e}", **fields)
        )
    return _record(_compare(check, direct, indirect, tolerance, OBJECTIVE_TOL, **fields))


def check_gamma1_invariance(
    bundle: RegressorBundle,
    problem: ControlProblem,
    beta2: float,
    beta3: float,
    instance_id: int = 0,
    descriptor: Optional[Dict] = None,
    tolerance: float = DECISION_TOL,
) -> EquivalenceReport:
    """Adding the constant beta2 ||gamma_1||^2 must leave (u, y_hat) unchanged"""
    check = "gamma1_invariance"
    fields = dict(instance_id=instance_id, descriptor=dict(descriptor or {}, beta2=beta2, beta3=beta3))
    lq = numkit.lq_decompose(bundle.Z, bundle.U, bundle.Y)
    fields["assumption1"] = not lq.degenerate
    try:
        plain = solve_gddpc(problem, lq, beta2, beta3)
        penalized = solve_gddpc(problem, lq, beta2, beta3, include_gamma1_penalty=True)
    except (PreconditionError, InfeasibleProblemError) as e:
        return _record(EquivalenceReport.skipped(check, str(e), tolerance, **fields))

    report = _compare(check, plain, penalized, tolerance, None, **fields)
    gamma1 = plain.gamma[0]
    # objectives differ by exactly the added constant
    offset_gap = _objective_gap(plain.objective, penalized.objective - beta2 * float(gamma1 @ gamma1))
    return _record(report.model_copy(update={"objective_gap": offset_gap}))


def check_corollary1(
    model: PredictorModel,
    problem: ControlProblem,
    lam1: float,
    lam2: float,
    instance_id: int = 0,
    descriptor: Optional[Dict] = None,
    tolerance: float = CLOSED_FORM_TOL,
) -> EquivalenceReport:
    """Closed form through Q_tilde against the box-free indirect QP, plus Q_tilde <= Q"""
    check = "corollary1"
    fields = dict(instance_id=instance_id, descriptor=dict(descriptor or {}, lam1=lam1, lam2=lam2))
    free = problem.unconstrained()
    fields["assumption1"] = check_assumption1(model)[0]
    try:
        closed = solve_unconstrained_closed_form(free, model, lam1, lam2)
    except PreconditionError as e:
        return _record(EquivalenceReport.skipped(check, str(e), tolerance, **fields))
    qp = solve_indirect(free, model, lam1, lam2)

    Q_tilde = reduced_tracking_weight(free.Q, model.sigma_delta, lam2, model.N)
    margin = numkit.min_eigenvalue(free.Q - Q_tilde)
    report = EquivalenceReport.judge(
        check,
        u_gap=_scaled_gap(closed.u, qp.u),
        yhat_gap=_scaled_gap(closed.y_hat, qp.y_hat),
        objective_gap=_objective_gap(closed.objective, qp.objective),
        tolerance=tolerance,
        objective_tolerance=OBJECTIVE_TOL,
        detail=f"min eig(Q - Q_tilde) = {margin:.3e}",
        **fields,
    )
    if margin < -1e-9:
        report = report.model_copy(update={"verdict": "fail"})
    return _record(report)


def _range_pairs(rng: np.random.Generator, count: int):
    """Random (M, v) pairs with M of random shape and rank"""
    for _ in range(count):
        rows, cols = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        rank = int(rng.integers(1, min(rows, cols) + 1))
        M = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
        yield M, rng.standard_normal(cols)


def pinv_norm_gap(M: np.ndarray, x: np.ndarray) -> float:
    """Relative gap between ||M^+ x||^2 and x^T (M M^T)^+ x"""
    lhs = float(np.sum((numkit.pinv(M) @ x) ** 2))
    # x^T (M M^T)^+ x from the factors of M; forming M M^T squares cond(M)
    f = numkit.svd(M)
    rhs = float(np.sum((f.range_basis.T @ x / f.leading) ** 2))
    return abs(lhs - rhs) / max(abs(lhs), np.finfo(float).tiny)


def range_residual(M: np.ndarray, x: np.ndarray) -> float:
    """||x - M M^+ x|| / ||x||; zero iff x lies in range(M)"""
    return float(np.linalg.norm(x - M @ (numkit.pinv(M) @ x)) / max(np.linalg.norm(x), np.finfo(float).tiny))


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def check_identities(bundle: RegressorBundle, seed: int = 0, instance_id: int = 0, descriptor: Optional[Dict] = None) -> IdentityReport:
    """
    L33 L33^T = N Sigma_Delta and M1 M1^T = N Sigma_phi on the bundle, and the
    pseudo-inverse norm identity on random (M, x in range(M)) pairs.

    The negative control builds x orthogonal to range(M): the range premise then
    fails (residual 1), which is what is reported, not the identity itself.
    """
    rng = np.random.default_rng(derive_seed(seed, instance_id, 7))
    norm_errors = [pinv_norm_gap(M, M @ v) for M, v in _range_pairs(rng, PINV_NORM_PAIRS)]

    M = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 4))
    outside = numkit.null_space(M.T) @ rng.standard_normal(4)
    negative = range_residual(M, outside)

    fields = dict(
        instance_id=instance_id,
        descriptor=dict(descriptor or {}),
        pinv_norm_max_rel_error=max(norm_errors),
        negative_control_range_residual=negative,
        tolerance=IDENTITY_TOL,
        pinv_norm_tolerance=PINV_NORM_TOL,
    )
    norm_ok = fields["pinv_norm_max_rel_error"] <= PINV_NORM_TOL and negative > 0.5

    rows = bundle.phi.shape[0] + bundle.Y.shape[0]
    if bundle.N < rows:
        verdict = "pass" if norm_ok else "fail"
        return _record(IdentityReport(verdict=verdict, detail=f"N = {bundle.N} < {rows} rows, LQ identities not checked", **fields))

    lq = numkit.lq_decompose(bundle.Z, bundle.U, bundle.Y)
    model = fit_least_squares(bundle)
    N = bundle.N
    delta_err = _relative_error(lq.L33 @ lq.L33.T, N * model.sigma_delta)
    phi_err = _relative_error(lq.M1 @ lq.M1.T, N * model.sigma_phi)
    passed = norm_ok and delta_err <= IDENTITY_TOL and phi_err <= IDENTITY_TOL
    return _record(
        IdentityReport(lq_delta_rel_error=delta_err, lq_phi_rel_error=phi_err, verdict="pass" if passed else "fail", **fields)
    )


@dataclass(frozen=True)
class Instance:
    """Random equivalence instance; reproducible from (seed, instance_id, regime)"""

    bundle: RegressorBundle
    problem: ControlProblem
    descriptor: Dict


def random_instance(seed: int, instance_id: int, regime: int) -> Instance:
    """
    Noisy benchmark-plant data with rho in [2, 6], T in [3, 8] and N chosen by regime:
    0 -> N <= n_phi (Sigma_Delta = 0), 1 -> n_phi < N < n_phi + T (rank deficient),
    2 -> N >= n_phi + T (both covariances full rank almost surely).
    """
    rng = np.random.default_rng(derive_seed(seed, instance_id))
    rho, T = int(rng.integers(2, 7)), int(rng.integers(3, 9))
    n_z, n_phi = 2 * rho, 2 * rho + T
    if regime == 0:
        N = int(rng.integers(n_z, n_phi + 1))
    elif regime == 1:
        N = int(rng.integers(n_phi + 1, n_phi + T))
    else:
        N = int(rng.integers(n_phi + T + 5, n_phi + T + 60))

    dims = Dimensions(rho, T, 1, 1, N)
    data_seed = derive_seed(seed, instance_id, 1)
    record = generate_training(benchmark_plant(), dims, input_std=0.6, noise_std=0.1, seed=data_seed)
    bundle = build_bundle(record, dims)

    column = int(rng.integers(0, N))
    setpoint = float(rng.uniform(-1.5, 1.5))
    problem = ControlProblem.tracking(bundle.Z[:, column], T, setpoint, q=1.0, r=0.1)
    descriptor = dict(seed=seed, instance_id=instance_id, regime=regime, rho=rho, T=T, N=N, column=column, setpoint=setpoint)
    return Instance(bundle, problem, descriptor)


def _run_instance(args):
    kind, seed, instance_id = args
    beta = BETAS[instance_id % len(BETAS)]
    if kind in ("theorem1_l2", "theorem1_proj"):
        inst = random_instance(seed, instance_id, regime=instance_id % 3)
        return check_theorem1(inst.bundle, inst.problem, beta, kind.split("_")[1], instance_id, inst.descriptor)

    if kind == "identities":
        inst = random_instance(seed, instance_id, regime=2)
        return check_identities(inst.bundle, seed, instance_id, inst.descriptor)

    inst = random_instance(seed, instance_id, regime=2)
    lam1 = BETAS[(instance_id // len(BETAS)) % len(BETAS)]
    if kind == "gamma":
        return check_gamma_equivalence(inst.bundle, inst.problem, lam1, beta, instance_id, inst.descriptor)
    if kind == "gamma1_invariance":
        return check_gamma1_invariance(inst.bundle, inst.problem, lam1, beta, instance_id, inst.descriptor)
    model = fit_least_squares(inst.bundle)
    return check_corollary1(model, inst.problem, lam1, beta, instance_id, inst.descriptor)


def run_suite(kind: str, n: int, seed: int = 0, jobs: int = 1) -> List[Union[EquivalenceReport, IdentityReport]]:
    """n random instances of one check, ordered by instance id whatever the scheduling"""
    if kind not in SUITES:
        raise ValueError(f"unknown suite {kind!r}; expected one of {SUITES}")
    tasks = [(kind, seed, i) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_instance, tasks))
        # counters incremented in workers do not reach this process
        for report in reports:
            EQUIVALENCE_COUNTER.labels(check=kind, verdict=report.verdict).inc()
    else:
        reports = [_run_instance(t) for t in tasks]

    summary = {v: sum(r.verdict == v for r in reports) for v in ("pass", "fail", "skipped")}
    marker = "✅" if summary["fail"] == 0 else "❌"
    logger.info("%s %s: %d pass, %d fail, %d skipped", marker, kind, summary["pass"], summary["fail"], summary["skipped"])
    return sorted(reports, key=lambda r: r.instance_id)


def write_reports(reports: Iterable, path: Union[str, Path]) -> Path:
    """One JSON object per line"""
    path = Path(path)
    with path.open("w") as fh:
        for report in reports:
            fh.write(report.model_dump_json() + "\n")
    return path


def read_reports(path: Union[str, Path]) -> List[Dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def all_passed(reports: Iterable) -> bool:
    """True when no report failed; skipped instances do not count against the suite"""
    return all(r.verdict != "fail" for r in reports)
