"""
Predictive-control formulations.

Every controller reduces to one QP over the future inputs u and predictions
y_hat with the tracking cost

    J(u, y_hat) = ||y_hat - y_ref||_Q^2 + ||u - u_ref||_R^2

plus a formulation-specific penalty. Indirect controllers predict
y_hat = Theta_z z + Theta_u u + Delta_y_hat; direct controllers express the
same quantities through the data (g for DeePC, gamma for the LQ variant).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

import numkit
from errors import InfeasibleProblemError, InvalidInputError, PreconditionError
from estimation import PredictorModel, check_assumption1, theta_from_lq
from numkit import LqBlocks
from qpcore import QuadProgram, solve_qp
from sysdata import ArxPlant, RegressorBundle, free_response, impulse_response_matrix

logger = logging.getLogger(__name__)

RANGE_TOL = 1e-7


def _tile_box(box, n_channels: int, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    if box is None:
        n = n_channels * horizon
        return np.full(n, -np.inf), np.full(n, np.inf)
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n_channels,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n_channels,))
    return np.tile(lo, horizon), np.tile(hi, horizon)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """
    One open-loop tracking problem over a horizon of `horizon` steps.

    Boxes are per channel, (lower, upper), and repeat over the horizon.
    """

    z: np.ndarray
    u_ref: np.ndarray
    y_ref: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    n_u: int = 1
    n_y: int = 1
    input_box: Optional[Tuple] = None
    output_box: Optional[Tuple] = None

    @classmethod
    def tracking(
        cls,
        z,
        horizon: int,
        setpoint: float,
        q: float = 1.0,
        r: float = 0.1,
        n_u: int = 1,
        n_y: int = 1,
        input_box: Optional[Tuple] = (-1.0, 1.0),
    ) -> "ControlProblem":
        """Constant setpoint, zero input reference, Q = q I and R = r I"""
        problem = cls(
            z=numkit.as_vector(z, "z"),
            u_ref=np.zeros(horizon * n_u),
            y_ref=np.full(horizon * n_y, float(setpoint)),
            Q=q * np.eye(horizon * n_y),
            R=r * np.eye(horizon * n_u),
            horizon=horizon,
            n_u=n_u,
            n_y=n_y,
            input_box=input_box,
        )
        problem.validate()
        return problem

    def validate(self) -> None:
        if self.u_ref.shape != (self.horizon * self.n_u,) or self.y_ref.shape != (self.horizon * self.n_y,):
            raise InvalidInputError("reference lengths must be T*n_u and T*n_y")
        for name, W, size in (("Q", self.Q, self.horizon * self.n_y), ("R", self.R, self.horizon * self.n_u)):
            if W.shape != (size, size):
                raise InvalidInputError(f"{name} must be {size}x{size}, got {W.shape}")
            if not numkit.is_symmetric(W):
                raise InvalidInputError(f"{name} must be symmetric")
            if numkit.min_eigenvalue(W) <= 0:
                raise InvalidInputError(f"{name} must be positive definite")
        for box in (self.input_box, self.output_box):
            if box is not None and np.any(np.asarray(box[0]) > np.asarray(box[1])):
                raise InvalidInputError("box lower bound exceeds upper bound")

    @property
    def constrained(self) -> bool:
        return self.input_box is not None or self.output_box is not None

    def input_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return _tile_box(self.input_box, self.n_u, self.horizon)

    def output_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return _tile_box(self.output_box, self.n_y, self.horizon)

    def cost(self, u, y) -> float:
        """J(u, y)"""
        return numkit.weighted_sqnorm(np.ravel(y) - self.y_ref, self.Q) + numkit.weighted_sqnorm(
            np.ravel(u) - self.u_ref, self.R
        )

    def unconstrained(self) -> "ControlProblem":
        return ControlProblem(self.z, self.u_ref, self.y_ref, self.Q, self.R, self.horizon, self.n_u, self.n_y)

    def _reference_constant(self) -> float:
        return float(self.y_ref @ self.Q @ self.y_ref + self.u_ref @ self.R @ self.u_ref)


@dataclass(frozen=True, eq=False)
class Solution:
    u: np.ndarray
    y_hat: np.ndarray
    slack: np.ndarray
    objective: float
    formulation: str
    status: str = "optimal"
    iterations: int = 0
    primal_residual: float = 0.0
    decision_dim: int = 0
    g: Optional[np.ndarray] = None
    gamma: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    @property
    def slack_ms(self) -> float:
        return float(np.mean(self.slack**2)) if self.slack.size else 0.0


def theorem_weights(regularizer: str, beta: float) -> Tuple[float, float]:
    """(lambda_1, lambda_2) of the indirect problem matching DeePC with this regularizer"""
    if beta < 0:
        raise InvalidInputError("beta must be nonnegative")
    if regularizer == "l2":
        return beta, beta
    if regularizer == "proj":
        return 0.0, beta
    raise InvalidInputError(f"unknown regularizer {regularizer!r}, expected 'l2' or 'proj'")


def reduced_tracking_weight(Q: np.ndarray, sigma_delta: np.ndarray, lam2: float, N: int) -> np.ndarray:
    """Q_tilde = Q - Q (Q + (lam2/N) Sigma_Delta^{-1})^{-1} Q"""
    if lam2 < 0:
        raise InvalidInputError("lambda_2 must be nonnegative")
    if lam2 == 0:
        return np.zeros_like(Q)
    try:
        factor = scipy.linalg.cho_factor(sigma_delta)
    except np.linalg.LinAlgError as e:
        raise PreconditionError("Sigma_Delta must be positive definite for the closed form") from e
    S = (lam2 / N) * scipy.linalg.cho_solve(factor, np.eye(sigma_delta.shape[0]))
    return numkit.symmetrize(Q - Q @ np.linalg.solve(Q + S, Q))


def _check_solution(sol, formulation: str) -> None:
    if not sol.ok:
        raise InfeasibleProblemError(
            f"{formulation} QP ended with status {sol.status} after {sol.iterations} iterations "
            f"(primal residual {sol.primal_residual:.3g})",
            status=sol.status,
        )


def _solve_affine_predictive(
    problem: ControlProblem,
    offset: np.ndarray,
    gain: np.ndarray,
    formulation: str,
    slack_basis: Optional[np.ndarray] = None,
    slack_weights: Optional[np.ndarray] = None,
    u_quad: Optional[np.ndarray] = None,
    u_lin: Optional[np.ndarray] = None,
    constant: float = 0.0,
    u_equality: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Solution:
    """
    QP over x = (u, alpha, y_hat) with y_hat = offset + gain u + B alpha.

    The slack penalty is alpha^T diag(slack_weights) alpha; u_quad / u_lin /
    constant carry any additional quadratic penalty on u.
    """
    problem.validate()
    nu_tot, ny_tot = problem.R.shape[0], problem.Q.shape[0]
    B = np.zeros((ny_tot, 0)) if slack_basis is None else slack_basis
    k = B.shape[1]
    n = nu_tot + k + ny_tot
    su, sa, sy = slice(0, nu_tot), slice(nu_tot, nu_tot + k), slice(nu_tot + k, n)

    H = np.zeros((n, n))
    H[su, su] = 2.0 * (problem.R + (0.0 if u_quad is None else u_quad))
    if k:
        H[sa, sa] = 2.0 * np.diag(slack_weights)
    H[sy, sy] = 2.0 * problem.Q
    H = numkit.symmetrize(H)

    f = np.zeros(n)
    f[su] = -2.0 * problem.R @ problem.u_ref + (0.0 if u_lin is None else u_lin)
    f[sy] = -2.0 * problem.Q @ problem.y_ref

    A_rows = [np.hstack([-gain, -B, np.eye(ny_tot)])]
    b_rows = [offset]
    if u_equality is not None and u_equality[0].shape[0]:
        A_u, b_u = u_equality
        A_rows.append(np.hstack([A_u, np.zeros((A_u.shape[0], k + ny_tot))]))
        b_rows.append(b_u)

    lower, upper = np.full(n, -np.inf), np.full(n, np.inf)
    lower[su], upper[su] = problem.input_bounds()
    lower[sy], upper[sy] = problem.output_bounds()

    qp = QuadProgram.build(H, f, np.vstack(A_rows), np.concatenate(b_rows), lower, upper)
    sol = solve_qp(qp, formulation=formulation)
    _check_solution(sol, formulation)

    x = sol.x
    return Solution(
        u=x[su].copy(),
        y_hat=x[sy].copy(),
        slack=B @ x[sa] if k else np.zeros(0),
        objective=sol.objective + problem._reference_constant() + constant,
        formulation=formulation,
        status=sol.status,
        iterations=sol.iterations,
        primal_residual=sol.primal_residual,
        decision_dim=nu_tot + k,
    )


def _phi_penalty(model: PredictorModel, z: np.ndarray, lam1: float):
    """(W_uu, linear term, constant) of (lam1/N) ||(z, u)||^2_{Sigma_phi^+}"""
    if lam1 == 0:
        return None, None, 0.0
    nz = model.dims.n_z
    W = numkit.symmetrize((lam1 / model.N) * model.sigma_phi_pinv())
    W_zz, W_zu, W_uu = W[:nz, :nz], W[:nz, nz:], W[nz:, nz:]
    return W_uu, 2.0 * W_zu.T @ z, float(z @ W_zz @ z)


def _phi_range_equality(model: PredictorModel, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rows E u = e expressing (z, u) in range(Sigma_phi).
    Raises InfeasibleProblemError when no u can satisfy them for this z.
    """
    nz = model.dims.n_z
    complement = numkit.null_space(model.phi_range_basis.T) if model.rank_phi else np.eye(model.dims.n_phi)
    K_z, K_u = complement[:nz].T, complement[nz:].T
    rhs = -K_z @ z
    # complement is orthonormal, so rank is judged on an absolute scale
    basis = numkit.svd(K_u, scale=1.0).range_basis
    residual = rhs - basis @ (basis.T @ rhs)
    if np.linalg.norm(residual) > RANGE_TOL * max(1.0, float(np.linalg.norm(z))):
        raise InfeasibleProblemError(
            "past window z puts phi outside range(Sigma_phi) for every u; "
            "pass relax_phi_range=True to drop the range constraint"
        )
    return basis.T @ K_u, basis.T @ rhs


def solve_indirect(
    problem: ControlProblem,
    model: PredictorModel,
    lam1: float,
    lam2: float,
    relax_phi_range: bool = False,
    with_slack: bool = True,
) -> Solution:
    """
    Unified indirect formulation:

        min  J(u, y_hat) + (lam1/N) ||phi||^2_{Sigma_phi^+} + (lam2/N) ||dy||^2_{Sigma_Delta^+}
        s.t. y_hat = Theta phi(z, u) + dy,  dy in range(Sigma_Delta),  phi in range(Sigma_phi)

    The slack is parameterized as dy = B_Delta alpha, which makes the
    pseudo-inverse penalty the diagonal alpha^T diag(1/s) alpha.
    with_slack=False forces dy = 0 (SPC).
    """
    if lam1 < 0 or lam2 < 0:
        raise InvalidInputError("lambda_1 and lambda_2 must be nonnegative")
    z = numkit.as_vector(problem.z, "z")
    if z.size != model.dims.n_z:
        raise InvalidInputError(f"z has length {z.size}, the predictor expects {model.dims.n_z}")

    u_equality = None
    if model.rank_phi < model.dims.n_phi and not relax_phi_range:
        u_equality = _phi_range_equality(model, z)

    u_quad, u_lin, constant = _phi_penalty(model, z, lam1)
    slack_basis = slack_weights = None
    if with_slack:
        slack_basis = model.delta_range_basis
        slack_weights = (lam2 / model.N) / model.delta_weights

    formulation = "indirect" if with_slack else ("cspc" if model.causal else "spc")
    return _solve_affine_predictive(
        problem,
        offset=model.theta_z @ z,
        gain=model.theta_u,
        formulation=formulation,
        slack_basis=slack_basis,
        slack_weights=slack_weights,
        u_quad=u_quad,
        u_lin=u_lin,
        constant=constant,
        u_equality=u_equality,
    )


def solve_spc(problem: ControlProblem, model: PredictorModel) -> Solution:
    """SPC (or C-SPC with a causal model): y_hat = Theta phi(z, u), no slack, QP over u alone"""
    return solve_indirect(problem, model, 0.0, 0.0, relax_phi_range=True, with_slack=False)


def solve_deepc(problem: ControlProblem, bundle: RegressorBundle, regularizer: str, beta: float) -> Solution:
    """
    DeePC over the combination vector g:

        min  J(u, y_hat) + beta h(g)
        s.t. Z g = z,  U g = u,  Y g = y_hat,  u in the input box

    with h(g) = ||g||^2 ("l2") or ||(I - Phi^+ Phi) g||^2 ("proj").
    """
    theorem_weights(regularizer, beta)
    problem.validate()
    z = numkit.as_vector(problem.z, "z")
    Z, U, Y, N = bundle.Z, bundle.U, bundle.Y, bundle.N
    if z.size != Z.shape[0]:
        raise InvalidInputError(f"z has length {z.size}, the data has {Z.shape[0]} past rows")

    z_range = numkit.svd(Z).range_basis
    if np.linalg.norm(z - z_range @ (z_range.T @ z)) > RANGE_TOL * max(1.0, float(np.linalg.norm(z))):
        raise InfeasibleProblemError("past window z is not in the range of Z, so no g reproduces it")

    nu_tot, ny_tot = U.shape[0], Y.shape[0]
    n = N + nu_tot + ny_tot
    sg, su, sy = slice(0, N), slice(N, N + nu_tot), slice(N + nu_tot, n)

    if regularizer == "l2":
        P_g = np.eye(N)
    else:
        P_g = np.eye(N) - numkit.range_projector(bundle.phi)[0]

    H = np.zeros((n, n))
    H[sg, sg] = 2.0 * beta * P_g
    H[su, su] = 2.0 * problem.R
    H[sy, sy] = 2.0 * problem.Q
    H = numkit.symmetrize(H)
    f = np.zeros(n)
    f[su] = -2.0 * problem.R @ problem.u_ref
    f[sy] = -2.0 * problem.Q @ problem.y_ref

    A_eq = np.block(
        [
            [Z, np.zeros((Z.shape[0], nu_tot + ny_tot))],
            [U, -np.eye(nu_tot), np.zeros((nu_tot, ny_tot))],
            [Y, np.zeros((ny_tot, nu_tot)), -np.eye(ny_tot)],
        ]
    )
    b_eq = np.concatenate([z, np.zeros(nu_tot + ny_tot)])
    lower, upper = np.full(n, -np.inf), np.full(n, np.inf)
    lower[su], upper[su] = problem.input_bounds()
    lower[sy], upper[sy] = problem.output_bounds()

    sol = solve_qp(QuadProgram.build(H, f, A_eq, b_eq, lower, upper), formulation="deepc")
    _check_solution(sol, f"DeePC ({regularizer})")

    g, u, y_hat = sol.x[sg], sol.x[su], sol.x[sy]
    theta = Y @ numkit.pinv(bundle.phi)
    return Solution(
        u=u.copy(),
        y_hat=y_hat.copy(),
        slack=y_hat - theta @ np.concatenate([z, u]),
        objective=sol.objective + problem._reference_constant(),
        formulation=f"deepc_{regularizer}",
        status=sol.status,
        iterations=sol.iterations,
        primal_residual=sol.primal_residual,
        decision_dim=N,
        g=g.copy(),
    )


def solve_gddpc(
    problem: ControlProblem,
    lq: LqBlocks,
    beta2: float,
    beta3: float,
    include_gamma1_penalty: bool = False,
) -> Solution:
    """
    LQ-parameterized direct method:

        min  J(u, y_hat) + beta2 ||gamma_2||^2 + beta3 ||gamma_3||^2
        s.t. u = L21 gamma_1 + L22 gamma_2,  y_hat = L31 gamma_1 + L32 gamma_2 + L33 gamma_3

    with gamma_1 = L11^{-1} z fixed. include_gamma1_penalty adds the constant
    beta2 ||gamma_1||^2, which makes the objective match the indirect one.
    """
    if beta2 < 0 or beta3 < 0:
        raise InvalidInputError("beta2 and beta3 must be nonnegative")
    if lq.degenerate:
        raise PreconditionError("Sigma_Delta and Sigma_phi must be positive definite (LQ factor is singular)")
    problem.validate()
    z = numkit.as_vector(problem.z, "z")
    if z.size != lq.block_sizes[0]:
        raise InvalidInputError(f"z has length {z.size}, the LQ factor expects {lq.block_sizes[0]}")

    gamma1 = scipy.linalg.solve_triangular(lq.L11, z, lower=True)
    n2, n3 = lq.block_sizes[1], lq.block_sizes[2]
    n = n2 + n3 + n2 + n3
    s2, s3 = slice(0, n2), slice(n2, n2 + n3)
    su, sy = slice(n2 + n3, 2 * n2 + n3), slice(2 * n2 + n3, n)

    H = np.zeros((n, n))
    H[s2, s2] = 2.0 * beta2 * np.eye(n2)
    H[s3, s3] = 2.0 * beta3 * np.eye(n3)
    H[su, su] = 2.0 * problem.R
    H[sy, sy] = 2.0 * problem.Q
    H = numkit.symmetrize(H)
    f = np.zeros(n)
    f[su] = -2.0 * problem.R @ problem.u_ref
    f[sy] = -2.0 * problem.Q @ problem.y_ref

    A_eq = np.block(
        [
            [-lq.L22, np.zeros((n2, n3)), np.eye(n2), np.zeros((n2, n3))],
            [-lq.L32, -lq.L33, np.zeros((n3, n2)), np.eye(n3)],
        ]
    )
    b_eq = np.concatenate([lq.L21 @ gamma1, lq.L31 @ gamma1])
    lower, upper = np.full(n, -np.inf), np.full(n, np.inf)
    lower[su], upper[su] = problem.input_bounds()
    lower[sy], upper[sy] = problem.output_bounds()

    sol = solve_qp(QuadProgram.build(H, f, A_eq, b_eq, lower, upper), formulation="gamma_ddpc")
    _check_solution(sol, "gamma-DDPC")

    gamma2, gamma3 = sol.x[s2].copy(), sol.x[s3].copy()
    constant = problem._reference_constant()
    if include_gamma1_penalty:
        constant += beta2 * float(gamma1 @ gamma1)
    return Solution(
        u=sol.x[su].copy(),
        y_hat=sol.x[sy].copy(),
        slack=lq.L33 @ gamma3,
        objective=sol.objective + constant,
        formulation="gamma_ddpc",
        status=sol.status,
        iterations=sol.iterations,
        primal_residual=sol.primal_residual,
        decision_dim=n2 + n3,
        gamma=(gamma1, gamma2, gamma3),
    )


def solve_unconstrained_closed_form(problem: ControlProblem, model: PredictorModel, lam1: float, lam2: float) -> Solution:
    """
    Box-free indirect problem by one linear solve.

    Eliminating the slack leaves ||y_ref - Theta phi||^2_{Q_tilde} + ||u_ref - u||^2_R
    + (lam1/N) ||phi||^2_{Sigma_phi^{-1}}, whose minimizer is then mapped back to
    dy = (Q + (lam2/N) Sigma_Delta^{-1})^{-1} Q (y_ref - Theta phi).
    """
    holds, rank_delta, rank_phi = check_assumption1(model)
    if not holds:
        raise PreconditionError(
            f"closed form needs Sigma_Delta and Sigma_phi positive definite (ranks {rank_delta}, {rank_phi})"
        )
    problem.validate()
    z = numkit.as_vector(problem.z, "z")
    Q, R = problem.Q, problem.R
    Q_tilde = reduced_tracking_weight(Q, model.sigma_delta, lam2, model.N)
    Th_z, Th_u = model.theta_z, model.theta_u

    nz = model.dims.n_z
    W = (lam1 / model.N) * np.linalg.inv(model.sigma_phi) if lam1 > 0 else np.zeros((model.dims.n_phi,) * 2)
    W = numkit.symmetrize(W)
    W_zu, W_uu = W[:nz, nz:], W[nz:, nz:]

    lhs = Th_u.T @ Q_tilde @ Th_u + R + W_uu
    rhs = Th_u.T @ Q_tilde @ (problem.y_ref - Th_z @ z) + R @ problem.u_ref - W_zu.T @ z
    u = scipy.linalg.solve(numkit.symmetrize(lhs), rhs, assume_a="sym")

    prediction = Th_z @ z + Th_u @ u
    if lam2 > 0:
        S = (lam2 / model.N) * np.linalg.inv(model.sigma_delta)
        slack = np.linalg.solve(Q + S, Q @ (problem.y_ref - prediction))
        slack_penalty = float(slack @ S @ slack)
    else:
        slack = problem.y_ref - prediction
        slack_penalty = 0.0
    y_hat = prediction + slack
    phi = np.concatenate([z, u])
    objective = problem.cost(u, y_hat) + float(phi @ W @ phi) + slack_penalty
    return Solution(
        u=u,
        y_hat=y_hat,
        slack=slack,
        objective=objective,
        formulation="closed_form",
        decision_dim=u.size,
    )


def solve_oracle(problem: ControlProblem, plant: ArxPlant, past_u, past_y) -> Solution:
    """
    Model-based reference: y_hat = free response from the true past + G u,
    G being the block Toeplitz impulse-response matrix of the plant.
    """
    offset = free_response(plant, past_u, past_y, problem.horizon)
    gain = impulse_response_matrix(plant, problem.horizon)
    return _solve_affine_predictive(problem, offset=offset, gain=gain, formulation="oracle")
