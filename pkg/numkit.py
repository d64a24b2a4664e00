"""
Dense linear-algebra primitives.

Rank-revealing SVD, Moore-Penrose pseudo-inverse, orthogonal projectors,
LQ block decomposition of stacked data matrices and weighted quadratic forms.
Everything is float64 and side-effect free.
"""

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from errors import InvalidInputError


def default_rank_tol(shape: Tuple[int, ...]) -> float:
    """Relative singular-value threshold used when the caller gives none; DDPC_RANK_TOL replaces the 1e-10 factor"""
    factor = float(os.getenv("DDPC_RANK_TOL") or 1e-10)
    return factor * max(max(shape), 1)


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array"""
    M = np.asarray(A, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return M


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Economy SVD with the numerical rank attached"""

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray  # columns, i.e. V not V^T
    numerical_rank: int

    @property
    def range_basis(self) -> np.ndarray:
        return self.left_vectors[:, : self.numerical_rank]

    @property
    def corange_basis(self) -> np.ndarray:
        return self.right_vectors[:, : self.numerical_rank]

    @property
    def leading(self) -> np.ndarray:
        return self.singular_values[: self.numerical_rank]


def svd(A, rank_tol: Optional[float] = None, scale: Optional[float] = None) -> SvdFactors:
    """
    Rank-revealing SVD.

    numerical_rank counts singular values above rank_tol * scale, where scale
    defaults to the largest singular value. Passing an external scale lets
    callers judge a residual matrix against the data it came from.
    """
    M = as_matrix(A)
    tol = default_rank_tol(M.shape) if rank_tol is None else float(rank_tol)
    if tol <= 0:
        raise InvalidInputError("rank_tol must be positive")

    if M.size == 0:
        rows, cols = M.shape
        return SvdFactors(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)), 0)

    U, s, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
    reference = s[0] if scale is None else float(scale)
    rank = int(np.count_nonzero(s > tol * reference)) if reference > 0 else 0
    return SvdFactors(U, s, Vt.T, rank)


def pinv(A, rank_tol: Optional[float] = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via truncated SVD"""
    f = svd(A, rank_tol)
    r = f.numerical_rank
    return (f.right_vectors[:, :r] / f.singular_values[:r]) @ f.left_vectors[:, :r].T


def range_projector(A, rank_tol: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (A^+ A, basis of range(A)).

    The projector acts on the column space of A^T (the row space), which is
    what Pi_M = M^+ M denotes; the basis spans range(A).
    """
    f = svd(A, rank_tol)
    V = f.corange_basis
    return V @ V.T, f.range_basis


def null_space(A, rank_tol: Optional[float] = None) -> np.ndarray:
    """Orthonormal basis of null(A), consistent with the rank convention of svd()"""
    M = as_matrix(A)
    rows, cols = M.shape
    if rows == 0:
        return np.eye(cols)
    tol = default_rank_tol(M.shape) if rank_tol is None else rank_tol
    _, s, Vt = scipy.linalg.svd(M, full_matrices=True, lapack_driver="gesvd")
    rank = int(np.count_nonzero(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return Vt[rank:].T.copy()


def is_symmetric(W: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(1.0, float(np.max(np.abs(W)))) if W.size else 1.0
    return bool(np.max(np.abs(W - W.T), initial=0.0) <= rtol * scale)


def symmetrize(W: np.ndarray) -> np.ndarray:
    return 0.5 * (W + W.T)


def min_eigenvalue(W: np.ndarray) -> float:
    if W.size == 0:
        return np.inf
    return float(scipy.linalg.eigvalsh(symmetrize(W), subset_by_index=[0, 0])[0])


def weighted_sqnorm(x, W) -> float:
    """x^T W x for a symmetric PSD weight"""
    v = as_vector(x, "x")
    M = as_matrix(W, "W")
    if M.shape != (v.size, v.size):
        raise InvalidInputError(f"weight shape {M.shape} does not match vector length {v.size}")
    if not is_symmetric(M):
        raise InvalidInputError("weight matrix must be symmetric")
    return max(float(v @ M @ v), 0.0)


@dataclass(frozen=True, eq=False)
class LqBlocks:
    """
    [Z; U; Y] = L Q with L lower block-triangular.

    Row blocks of L and Q follow (rho*(n_u+n_y), T*n_u, T*n_y). When the data
    has fewer columns than rows, or a diagonal block is numerically singular,
    `degenerate` is set and the missing rows of Q are zero.
    """

    L: np.ndarray
    Q: np.ndarray
    block_sizes: Tuple[int, int, int]
    degenerate: bool

    def _cut(self, i: int) -> slice:
        start = sum(self.block_sizes[:i])
        return slice(start, start + self.block_sizes[i])

    def block(self, i: int, j: int) -> np.ndarray:
        """L_ij with 1-based indices as in the block notation"""
        return self.L[self._cut(i - 1), self._cut(j - 1)]

    def q_block(self, i: int) -> np.ndarray:
        return self.Q[self._cut(i - 1)]

    @property
    def L11(self):
        return self.block(1, 1)

    @property
    def L21(self):
        return self.block(2, 1)

    @property
    def L22(self):
        return self.block(2, 2)

    @property
    def L31(self):
        return self.block(3, 1)

    @property
    def L32(self):
        return self.block(3, 2)

    @property
    def L33(self):
        return self.block(3, 3)

    @property
    def M1(self) -> np.ndarray:
        """[[L11, 0], [L21, L22]], the factor of Phi = M1 [Q1; Q2]"""
        n = self.block_sizes[0] + self.block_sizes[1]
        return self.L[:n, :n]


def lq_decompose(Z, U, Y, rank_tol: Optional[float] = None) -> LqBlocks:
    """
    LQ decomposition of the stacked data [Z; U; Y].

    Computed as the QR factorization of the transpose, then sign-normalized so
    that diag(L) >= 0.
    """
    Zm, Um, Ym = as_matrix(Z, "Z"), as_matrix(U, "U"), as_matrix(Y, "Y")
    if not (Zm.shape[1] == Um.shape[1] == Ym.shape[1]):
        raise InvalidInputError("Z, U and Y must have the same number of columns")

    S = np.vstack([Zm, Um, Ym])
    m, N = S.shape
    Qt, R = scipy.linalg.qr(S.T, mode="economic")
    k = R.shape[0]

    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    L = R.T * signs
    Q = Qt.T * signs[:, None]

    if k < m:
        L = np.hstack([L, np.zeros((m, m - k))])
        Q = np.vstack([Q, np.zeros((m - k, N))])

    diag = np.diag(L)
    tol = default_rank_tol((m, N)) if rank_tol is None else rank_tol
    scale = float(np.max(np.abs(diag))) if diag.size else 0.0
    degenerate = bool(k < m or scale == 0.0 or np.any(diag <= tol * scale))

    return LqBlocks(L=L, Q=Q, block_sizes=(Zm.shape[0], Um.shape[0], Ym.shape[0]), degenerate=degenerate)
