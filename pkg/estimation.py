"""
Multi-step predictor estimation.

Fits Theta_hat = Y Phi^+ (unstructured) or a causality-constrained Theta_hat,
and attaches the residual covariance Sigma_Delta, the regressor covariance
Sigma_phi and their range factorizations.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

import numkit
from models import PredictorExport
from numkit import LqBlocks
from sysdata import Dimensions, RegressorBundle, TrainingRecord, build_bundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PredictorModel:
    """
    Fitted multi-step predictor y_hat = theta @ phi with its covariances.

    Sigma_Delta^+ is carried as (delta_range_basis, delta_weights):
    Sigma_Delta = B diag(s) B^T on its range. Same for Sigma_phi.
    """

    theta: np.ndarray
    sigma_delta: np.ndarray
    sigma_phi: np.ndarray
    delta_range_basis: np.ndarray
    delta_weights: np.ndarray
    phi_range_basis: np.ndarray
    phi_weights: np.ndarray
    N: int
    dims: Dimensions
    causal: bool = False

    @property
    def theta_z(self) -> np.ndarray:
        return self.theta[:, : self.dims.n_z]

    @property
    def theta_u(self) -> np.ndarray:
        return self.theta[:, self.dims.n_z :]

    @property
    def rank_delta(self) -> int:
        return self.delta_weights.size

    @property
    def rank_phi(self) -> int:
        return self.phi_weights.size

    def sigma_phi_pinv(self) -> np.ndarray:
        B = self.phi_range_basis
        return (B / self.phi_weights) @ B.T

    def sigma_delta_pinv(self) -> np.ndarray:
        B = self.delta_range_basis
        return (B / self.delta_weights) @ B.T

    def predict(self, z, u) -> np.ndarray:
        return self.theta @ np.concatenate([np.ravel(z), np.ravel(u)])


def _model_from_theta(
    theta: np.ndarray, bundle: RegressorBundle, causal: bool, rank_tol: Optional[float]
) -> PredictorModel:
    N = bundle.N
    Phi, Y = bundle.phi, bundle.Y
    scaled_residual = (Y - theta @ Phi) / np.sqrt(N)
    scaled_phi = Phi / np.sqrt(N)

    # Residual rank is judged against the output data scale, not against the
    # residual itself: an exact fit leaves only round-off.
    y_scale = float(np.linalg.norm(Y, 2)) / np.sqrt(N)
    delta = numkit.svd(scaled_residual, rank_tol, scale=y_scale)
    phi = numkit.svd(scaled_phi, rank_tol)

    sigma_delta = numkit.symmetrize(scaled_residual @ scaled_residual.T)
    sigma_phi = numkit.symmetrize(scaled_phi @ scaled_phi.T)

    return PredictorModel(
        theta=theta,
        sigma_delta=sigma_delta,
        sigma_phi=sigma_phi,
        delta_range_basis=delta.range_basis,
        delta_weights=delta.leading**2,
        phi_range_basis=phi.range_basis,
        phi_weights=phi.leading**2,
        N=N,
        dims=bundle.dims,
        causal=causal,
    )


def fit_least_squares(bundle: RegressorBundle, rank_tol: Optional[float] = None) -> PredictorModel:
    """Minimum Frobenius-norm minimizer of trace(Sigma_Delta): Theta_hat = Y Phi^+"""
    theta = bundle.Y @ numkit.pinv(bundle.phi, rank_tol)
    model = _model_from_theta(theta, bundle, causal=False, rank_tol=rank_tol)
    logger.debug(
        "Fitted unstructured predictor: N=%d, rank(Sigma_Delta)=%d, rank(Sigma_phi)=%d",
        model.N,
        model.rank_delta,
        model.rank_phi,
    )
    return model


def fit_causal(bundle: RegressorBundle, rank_tol: Optional[float] = None) -> PredictorModel:
    """
    Causal predictor: y_{t+k} is regressed on (z, u_t .. u_{t+k}) only.

    Each prediction step is an independent least-squares fit on its admissible
    regressors, so Theta_u is block lower-triangular.
    """
    d = bundle.dims
    theta = np.zeros((d.n_future_y, d.n_phi))
    for k in range(d.future_horizon):
        rows = slice(k * d.n_y, (k + 1) * d.n_y)
        n_cols = d.n_z + (k + 1) * d.n_u
        theta[rows, :n_cols] = bundle.Y[rows] @ numkit.pinv(bundle.phi[:n_cols], rank_tol)
    return _model_from_theta(theta, bundle, causal=True, rank_tol=rank_tol)


def check_assumption1(model: PredictorModel) -> Tuple[bool, int, int]:
    """Sigma_Delta and Sigma_phi both positive definite -> (holds, rank_delta, rank_phi)"""
    d = model.dims
    holds = model.rank_delta == d.n_future_y and model.rank_phi == d.n_phi
    return holds, model.rank_delta, model.rank_phi


def theta_from_lq(lq: LqBlocks) -> np.ndarray:
    """[L31 L32] M1^{-1}; equals Y Phi^+ when Phi has full row rank"""
    n = lq.block_sizes[0] + lq.block_sizes[1]
    L3 = lq.L[n:, :n]
    return np.linalg.solve(lq.M1.T, L3.T).T


def residual_trace_profile(
    record: TrainingRecord, rhos: Sequence[int], horizon: int, rank_tol: Optional[float] = None
) -> Dict[int, float]:
    """
    trace(Sigma_Delta) on one fixed record as the past horizon grows.

    The record length is fixed, so each rho gets N = len(record) - rho - T + 1
    columns; once N <= n_phi the fit interpolates and the trace vanishes.
    """
    n_u, n_y = record.inputs.shape[1], record.measured_outputs.shape[1]
    profile = {}
    for rho in rhos:
        dims = Dimensions.from_total_samples(rho, horizon, n_u, n_y, len(record))
        bundle = build_bundle(record, dims)
        profile[int(rho)] = float(np.trace(fit_least_squares(bundle, rank_tol).sigma_delta))
    return profile


def export_predictor(model: PredictorModel, path: Union[str, Path]) -> Path:
    """JSON export of Theta_hat and the covariances for inspection"""
    d = model.dims
    export = PredictorExport(
        past_horizon=d.past_horizon,
        future_horizon=d.future_horizon,
        n_u=d.n_u,
        n_y=d.n_y,
        columns=model.N,
        causal=model.causal,
        rank_delta=model.rank_delta,
        rank_phi=model.rank_phi,
        theta=model.theta.tolist(),
        sigma_delta=model.sigma_delta.tolist(),
        sigma_phi=model.sigma_phi.tolist(),
    )
    path = Path(path)
    path.write_text(export.model_dump_json(indent=2))
    return path
