"""
Convex QP solver for

    minimize  1/2 x^T H x + f^T x
    s.t.      A_eq x = b_eq,   lower <= x <= upper

Equalities are eliminated first through an orthonormal null-space basis,
leaving a problem with general two-sided constraints C v in [lo, hi]. That
problem is solved with an operator-splitting iteration (fixed penalty,
over-relaxation, Ruiz equilibration) and its iterates are polished by solving
the KKT system of the identified active set.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

import numkit
from errors import InvalidInputError
from metrics import QP_LATENCY, QP_SOLVE_COUNTER

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass(frozen=True, eq=False)
class QuadProgram:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def build(cls, H, f, A_eq=None, b_eq=None, lower=None, upper=None) -> "QuadProgram":
        H = numkit.as_matrix(H, "H")
        n = H.shape[0]
        f = numkit.as_vector(f, "f")
        A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=np.float64).reshape(-1, n)
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64).reshape(-1)
        lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64).reshape(-1)
        upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64).reshape(-1)
        return cls(H, f, A_eq, b_eq, lower, upper)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.H.shape != (n, n):
            raise InvalidInputError(f"H must be square, got {self.H.shape}")
        if self.f.shape != (n,) or self.lower.shape != (n,) or self.upper.shape != (n,):
            raise InvalidInputError("f, lower and upper must have one entry per variable")
        if self.A_eq.shape[1] != n or self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise InvalidInputError("A_eq / b_eq dimensions are inconsistent")
        for name in ("H", "f", "A_eq", "b_eq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} contains non-finite entries")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise InvalidInputError("bounds contain NaN")
        if np.any(self.lower > self.upper):
            raise InvalidInputError("lower bound exceeds upper bound")
        if not numkit.is_symmetric(self.H):
            raise InvalidInputError("H must be symmetric")
        h_norm = float(np.linalg.norm(self.H, 2)) if n else 0.0
        if n and numkit.min_eigenvalue(self.H) < -1e-8 * max(h_norm, 1.0):
            raise InvalidInputError("H must be positive semidefinite")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass(frozen=True, eq=False)
class QpSolution:
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class _Reduced:
    """min 1/2 v^T P v + q^T v  s.t.  lo <= C v <= hi"""

    P: np.ndarray
    q: np.ndarray
    C: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _reduce(p: QuadProgram, tol: float) -> Tuple[Optional[_Reduced], np.ndarray, np.ndarray, bool]:
    """Null-space elimination; returns (reduced, x_particular, basis, feasible)"""
    n = p.n
    if p.A_eq.shape[0]:
        x_p = numkit.pinv(p.A_eq) @ p.b_eq
        scale = max(1.0, float(np.max(np.abs(p.b_eq), initial=0.0)), float(np.max(np.abs(p.A_eq))) * float(np.max(np.abs(x_p), initial=0.0)))
        if np.max(np.abs(p.A_eq @ x_p - p.b_eq)) > 1e3 * tol * scale:
            return None, x_p, np.zeros((n, 0)), False
        basis = numkit.null_space(p.A_eq)
    else:
        x_p = np.zeros(n)
        basis = np.eye(n)

    P = numkit.symmetrize(basis.T @ p.H @ basis)
    q = basis.T @ (p.H @ x_p + p.f)

    bounded = np.isfinite(p.lower) | np.isfinite(p.upper)
    C = basis[bounded]
    lo = p.lower[bounded] - x_p[bounded]
    hi = p.upper[bounded] - x_p[bounded]

    # rows fixed by the equalities carry no freedom; they only test feasibility
    fixed = np.max(np.abs(C), axis=1, initial=0.0) <= 1e-12
    if np.any(fixed):
        slack = 1e3 * tol * np.maximum(1.0, np.abs(x_p[bounded][fixed]))
        if np.any(lo[fixed] > slack) or np.any(hi[fixed] < -slack):
            return None, x_p, basis, False
        C, lo, hi = C[~fixed], lo[~fixed], hi[~fixed]

    return _Reduced(P, q, C, lo, hi), x_p, basis, True


def _ruiz(P: np.ndarray, C: np.ndarray, q: np.ndarray, iterations: int = 15):
    """Diagonal equilibration of the KKT matrix; returns (D, E, c)"""
    n, m = P.shape[0], C.shape[0]
    D, E = np.ones(n), np.ones(m)
    for _ in range(iterations):
        Ps = D[:, None] * P * D[None, :]
        Cs = E[:, None] * C * D[None, :]
        col = np.maximum(np.max(np.abs(Ps), axis=0, initial=0.0), np.max(np.abs(Cs), axis=0, initial=0.0))
        col = np.where(col < 1e-6, 1.0, col)
        row = np.max(np.abs(Cs), axis=1, initial=0.0)
        row = np.where(row < 1e-6, 1.0, row)
        D = D / np.sqrt(col)
        E = E / np.sqrt(row)
    Ps = D[:, None] * P * D[None, :]
    mean_col = float(np.mean(np.max(np.abs(Ps), axis=0, initial=0.0))) if n else 1.0
    q_norm = float(np.max(np.abs(D * q), initial=0.0))
    c = 1.0 / np.clip(max(mean_col, q_norm), 1e-4, 1e4)
    return D, E, c


def _kkt_check(red: _Reduced, v: np.ndarray, y: np.ndarray, tol: float) -> Tuple[float, float, bool]:
    """Primal and dual residuals of (v, y) and whether they meet tol relative to the data scale"""
    Cv = red.C @ v
    viol = np.maximum(red.lo - Cv, 0.0) + np.maximum(Cv - red.hi, 0.0)
    r_prim = float(np.max(viol, initial=0.0))
    grad = red.P @ v + red.q
    r_dual = float(np.max(np.abs(grad + red.C.T @ y), initial=0.0))

    finite_bounds = np.concatenate([red.lo[np.isfinite(red.lo)], red.hi[np.isfinite(red.hi)]])
    prim_scale = max(1.0, float(np.max(np.abs(Cv), initial=0.0)), float(np.max(np.abs(finite_bounds), initial=0.0)))
    dual_scale = max(1.0, float(np.max(np.abs(red.P @ v), initial=0.0)), float(np.max(np.abs(red.q), initial=0.0)))
    ok = r_prim <= tol * prim_scale and r_dual <= tol * dual_scale
    return r_prim, r_dual, ok


def _polish(red: _Reduced, lower_active: np.ndarray, upper_active: np.ndarray, tol: float, max_rounds: int = 25):
    """
    Primal-dual active-set refinement from a guessed active set.
    Returns (v, y) meeting the KKT conditions, or None.
    """
    n = red.P.shape[0]
    lower_active = lower_active & np.isfinite(red.lo)
    upper_active = upper_active & np.isfinite(red.hi) & ~lower_active
    for _ in range(max_rounds):
        active = np.flatnonzero(lower_active | upper_active)
        target = np.where(lower_active, red.lo, red.hi)[active]
        Ca = red.C[active]
        K = np.block([[red.P, Ca.T], [Ca, np.zeros((active.size, active.size))]])
        rhs = np.concatenate([-red.q, target])
        sol = scipy.linalg.lstsq(K, rhs, lapack_driver="gelsd")[0]
        v = sol[:n]
        y = np.zeros(red.C.shape[0])
        y[active] = sol[n:]

        Cv = red.C @ v
        # multipliers: negative on an active lower bound, positive on an active upper bound
        new_lower = (y + (Cv - red.lo) < 0) & np.isfinite(red.lo)
        new_upper = (y + (Cv - red.hi) > 0) & np.isfinite(red.hi) & ~new_lower
        if np.array_equal(new_lower, lower_active) and np.array_equal(new_upper, upper_active):
            _, _, ok = _kkt_check(red, v, y, tol)
            sign_ok = np.all(y[lower_active] <= tol) and np.all(y[upper_active] >= -tol)
            return (v, y) if ok and sign_ok else None
        lower_active, upper_active = new_lower, new_upper
    return None


def _admm(red: _Reduced, tol: float, max_iter: int, rho: float, sigma: float, alpha: float, check_every: int):
    """Returns (v, y, iterations, status, polished)"""
    n, m = red.P.shape[0], red.C.shape[0]
    D, E, c = _ruiz(red.P, red.C, red.q)
    P = c * D[:, None] * red.P * D[None, :]
    q = c * D * red.q
    A = E[:, None] * red.C * D[None, :]
    lo, hi = E * red.lo, E * red.hi

    rho_vec = np.where(np.abs(hi - lo) < 1e-8, 1e3 * rho, rho)
    factor = scipy.linalg.cho_factor(P + sigma * np.eye(n) + A.T @ (rho_vec[:, None] * A))

    x, z, y = np.zeros(n), np.clip(np.zeros(m), lo, hi), np.zeros(m)

    def unscale(xs, ys):
        return D * xs, E * ys / c

    for k in range(1, max_iter + 1):
        x_tilde = scipy.linalg.cho_solve(factor, sigma * x - q + A.T @ (rho_vec * z - y))
        z_tilde = A @ x_tilde
        x_new = alpha * x_tilde + (1 - alpha) * x
        z_relaxed = alpha * z_tilde + (1 - alpha) * z
        z_new = np.clip(z_relaxed + y / rho_vec, lo, hi)
        y_new = y + rho_vec * (z_relaxed - z_new)
        delta_y = y_new - y
        x, z, y = x_new, z_new, y_new

        if k % check_every and k != max_iter:
            continue

        v, yy = unscale(x, y)
        _, _, converged = _kkt_check(red, v, yy, tol)
        zz = z / E
        polished = _polish(red, zz - red.lo < -yy, red.hi - zz < yy, tol)
        if polished is not None:
            return polished[0], polished[1], k, OPTIMAL, True
        if converged:
            return v, yy, k, OPTIMAL, False

        # primal infeasibility certificate on the scaled problem
        dy_norm = float(np.max(np.abs(delta_y), initial=0.0))
        if dy_norm > 1e-12:
            eps = 1e-6 * dy_norm
            pos, neg = np.maximum(delta_y, 0.0), np.minimum(delta_y, 0.0)
            with np.errstate(invalid="ignore"):
                support = np.sum(np.where(pos > 0, hi * pos, 0.0)) + np.sum(np.where(neg < 0, lo * neg, 0.0))
            if np.max(np.abs(A.T @ delta_y), initial=0.0) <= eps and support < -eps:
                return v, yy, k, INFEASIBLE, False

    v, yy = unscale(x, y)
    return v, yy, max_iter, MAX_ITER, False


def solve_qp(
    p: QuadProgram,
    tol: float = 1e-9,
    max_iter: int = 50_000,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 25,
    formulation: str = "generic",
) -> QpSolution:
    """
    Solve p to KKT residuals below tol.

    Infeasibility and the iteration cap are reported through `status`, never
    raised. With H only semidefinite the least-norm optimizer of the reduced
    problem is returned when no bounds are present.
    """
    started = time.perf_counter()
    p.validate()

    red, x_p, basis, feasible = _reduce(p, tol)
    if not feasible:
        solution = _finish(p, x_p, 0, INFEASIBLE, False, 0.0)
    elif basis.shape[1] == 0:
        solution = _finish(p, x_p, 0, OPTIMAL, False, 0.0)
    elif red.C.shape[0] == 0:
        v = -scipy.linalg.lstsq(red.P, red.q, lapack_driver="gelsd")[0]
        _, r_dual, ok = _kkt_check(red, v, np.zeros(0), tol)
        if not ok:
            raise InvalidInputError(f"QP objective is unbounded below (stationarity residual {r_dual:.3g})")
        solution = _finish(p, x_p + basis @ v, 0, OPTIMAL, True, r_dual)
    else:
        v, y, iters, status, polished = _admm(red, tol, max_iter, rho, sigma, alpha, check_every)
        _, r_dual, _ = _kkt_check(red, v, y, tol)
        solution = _finish(p, x_p + basis @ v, iters, status, polished, r_dual)

    QP_SOLVE_COUNTER.labels(status=solution.status).inc()
    QP_LATENCY.labels(formulation=formulation).observe(time.perf_counter() - started)
    if solution.status != OPTIMAL:
        logger.debug("QP %s finished with status %s after %d iterations", formulation, solution.status, solution.iterations)
    return solution


def _finish(p: QuadProgram, x: np.ndarray, iterations: int, status: str, polished: bool, dual_residual: float) -> QpSolution:
    eq_res = float(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0))
    box_res = float(np.max(np.maximum(p.lower - x, 0.0) + np.maximum(x - p.upper, 0.0), initial=0.0))
    return QpSolution(
        x=x,
        objective=p.objective(x),
        primal_residual=max(eq_res, box_res),
        dual_residual=dual_residual,
        iterations=iterations,
        status=status,
        polished=polished,
    )
