"""
Universal representation learning: a joint nonnegative factorization
A ~ U V, B ~ W V whose shared coefficients V are tied to the pairwise
structure of A and B through a Jensen-Shannon term, followed by orthogonal
projections of both spaces into V and nearest-prototype prediction.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from app.core.errors import InvalidArgumentError, NumericError, ShapeError
from app.schemas.url import Factorization, Projection, Projections

logger = logging.getLogger(__name__)

FLOOR = 1e-12
MAX_V_HALVINGS = 30


# ============================================
# Pairwise distributions
# ============================================

def _offdiag_normalize(G: np.ndarray) -> Tuple[np.ndarray, bool]:
    n = G.shape[0]
    G = G.copy()
    np.fill_diagonal(G, 0.0)
    total = G.sum()
    if total <= 0:
        uniform = np.full((n, n), 1.0 / (n * (n - 1)))
        np.fill_diagonal(uniform, 0.0)
        return uniform, False
    return G / total, True


def pairwise_affinity(X: np.ndarray) -> np.ndarray:
    """
    Symmetrized cross-entropy affinities between the L1-normalized columns of X,
    normalized to sum to 1 over ordered pairs i != j.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise InvalidArgumentError(f"need a matrix with at least 2 columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)) or X.min() < 0:
        raise InvalidArgumentError("data matrix must be finite and non-negative")
    sums = X.sum(axis=0)
    if np.any(sums <= 0):
        raise InvalidArgumentError(f"column {int(np.argmax(sums <= 0))} is all zero")

    Xn = X / sums
    H = -Xn.T @ np.log(np.maximum(Xn, FLOOR))  # H[i, j] = cross-entropy of column j under column i
    P, ok = _offdiag_normalize(0.5 * (H + H.T))
    if not ok:
        logger.warning("Pairwise affinity has zero mass; using the uniform distribution")
    return P


def _student_kernel(V: np.ndarray) -> np.ndarray:
    sq = np.sum(V * V, axis=0)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (V.T @ V), 0.0)
    K = 1.0 / (1.0 + d2)
    np.fill_diagonal(K, 0.0)
    return K


def q_matrix(V: np.ndarray) -> np.ndarray:
    """Student-t similarities between the columns of V over ordered pairs."""
    V = np.asarray(V, dtype=np.float64)
    if V.shape[1] < 2:
        raise InvalidArgumentError("need at least 2 samples")
    K = _student_kernel(V)
    return K / K.sum()


def _kl_terms(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * (np.log(P[mask]) - np.log(np.maximum(Q[mask], FLOOR)))))


def jsd(P_A: np.ndarray, P_B: np.ndarray, Q: np.ndarray) -> float:
    """1/2 KL(P_A || Q) + 1/2 KL(P_B || Q) with 0 log 0 = 0 and Q floored."""
    return 0.5 * _kl_terms(P_A, Q) + 0.5 * _kl_terms(P_B, Q)


def js_divergence_midpoint(P: np.ndarray, Q: np.ndarray) -> float:
    """Jensen-Shannon divergence against the midpoint M = (P + Q) / 2; bounded by ln 2."""
    M = 0.5 * (P + Q)
    return 0.5 * _kl_terms(P, M) + 0.5 * _kl_terms(Q, M)


# ============================================
# Objective and multiplicative updates
# ============================================

def reconstruction_error(A, B, U, W, V) -> float:
    return float(np.sum((A - U @ V) ** 2) + np.sum((B - W @ V) ** 2))


def objective(A, B, U, W, V, eta: float, P_A=None, P_B=None) -> Tuple[float, float, float]:
    """(total, reconstruction, JSD) of ||A-UV||^2 + ||B-WV||^2 + eta * JSD."""
    recon = reconstruction_error(A, B, U, W, V)
    div = 0.0
    if eta > 0:
        div = jsd(P_A, P_B, q_matrix(V))
    return recon + eta * div, recon, div


def update_u(A: np.ndarray, U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """U <- U * (A V^T) / (U V V^T)."""
    return U * (A @ V.T) / (U @ (V @ V.T) + FLOOR)


def update_w(B: np.ndarray, W: np.ndarray, V: np.ndarray) -> np.ndarray:
    """W <- W * (B V^T) / (W V V^T)."""
    return update_u(B, W, V)


def update_v(
    A: np.ndarray,
    B: np.ndarray,
    U: np.ndarray,
    W: np.ndarray,
    V: np.ndarray,
    eta: float,
    P_A: Optional[np.ndarray] = None,
    P_B: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    V <- V * (U^T A + W^T B + Upsilon) / (U^T U V + W^T W V + Gamma).

    With K_jk = (1 + |v_j - v_k|^2)^-1 and S = P_A + P_B:
        Upsilon_ij = eta * sum_k (S_jk V_ik + 2 q_jk V_ij) K_jk
        Gamma_ij   = eta * sum_k (S_jk V_ij + 2 q_jk V_ik) K_jk
    """
    numer = U.T @ A + W.T @ B
    denom = U.T @ U @ V + W.T @ W @ V
    if eta > 0:
        K = _student_kernel(V)
        Q = K / K.sum()
        SK = (P_A + P_B) * K
        QK = Q * K
        numer = numer + eta * (V @ SK.T + 2.0 * V * QK.sum(axis=1))
        denom = denom + eta * (V * SK.sum(axis=1) + 2.0 * V @ QK.T)
    return V * numer / (denom + FLOOR)


# ============================================
# Fitting
# ============================================

class UniversalRepresentationLearner:
    """
    Fits the JSD-constrained joint factorization with multiplicative updates.
    A fitted learner is immutable; fit() returns a new Factorization.
    """

    def __init__(self, dim: int, eta: float = 0.0, max_iter: int = 1000, tol: float = 1e-6, seed: int = 0):
        if eta < 0:
            raise InvalidArgumentError(f"eta must be non-negative, got {eta}")
        self.dim = dim
        self.eta = eta
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def _validate(self, A: np.ndarray, B: np.ndarray):
        for name, X in (("A", A), ("B", B)):
            if X.ndim != 2 or not np.all(np.isfinite(X)) or X.min() < 0:
                raise InvalidArgumentError(f"{name} must be a finite non-negative matrix")
        if A.shape[1] != B.shape[1]:
            raise ShapeError(f"A has {A.shape[1]} samples but B has {B.shape[1]}")
        (m1, n), (m2, _) = A.shape, B.shape
        if not (1 <= self.dim < min(m1, n) and self.dim < min(m2, n)):
            raise InvalidArgumentError(f"D={self.dim} must be below min(M1, N)={min(m1, n)} and min(M2, N)={min(m2, n)}")

    def _safeguarded_v(self, A, B, U, W, V, P_A, P_B, current: float) -> Tuple[np.ndarray, float]:
        candidate = update_v(A, B, U, W, V, self.eta, P_A, P_B)
        value = objective(A, B, U, W, candidate, self.eta, P_A, P_B)[0]
        if value <= current or self.eta == 0:
            return candidate, value
        # Back off along the segment towards the current V
        t = 1.0
        for _ in range(MAX_V_HALVINGS):
            t *= 0.5
            trial = V + t * (candidate - V)
            value = objective(A, B, U, W, trial, self.eta, P_A, P_B)[0]
            if value <= current:
                return trial, value
        return V, current

    def fit(self, A: np.ndarray, B: np.ndarray) -> Factorization:
        """
        Initialize U, W, V uniformly in [0, 1), then alternate the U, W and V
        updates until the relative objective change drops below tol or
        max_iter iterations have run.
        """
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        self._validate(A, B)

        rng = np.random.default_rng(self.seed)
        U = rng.random((A.shape[0], self.dim))
        W = rng.random((B.shape[0], self.dim))
        V = rng.random((self.dim, A.shape[1]))

        P_A = P_B = None
        if self.eta > 0:
            P_A = pairwise_affinity(A)
            P_B = pairwise_affinity(B)

        current, _, div = objective(A, B, U, W, V, self.eta, P_A, P_B)
        trace = [current]
        converged = False
        iteration = 0
        for iteration in range(1, self.max_iter + 1):
            U = update_u(A, U, V)
            W = update_w(B, W, V)
            before_v = reconstruction_error(A, B, U, W, V) + self.eta * div
            V, current = self._safeguarded_v(A, B, U, W, V, P_A, P_B, before_v)
            if self.eta > 0:
                div = jsd(P_A, P_B, q_matrix(V))
            if not np.isfinite(current):
                raise NumericError(f"objective became non-finite at iteration {iteration}")

            previous = trace[-1]
            trace.append(current)
            if abs(previous - current) <= self.tol * max(abs(previous), FLOOR):
                converged = True
                break

        logger.info(
            f"URL fit: D={self.dim}, eta={self.eta}, {iteration} iterations, "
            f"objective {trace[-1]:.6g} ({'converged' if converged else 'iteration limit'})"
        )
        return Factorization(U=U, W=W, V=V, eta=self.eta, objective_trace=trace, iterations=iteration, converged=converged)


def fit(A, B, D: int, eta: float, max_iter: int = 1000, tol: float = 1e-6, seed: int = 0) -> Factorization:
    return UniversalRepresentationLearner(D, eta, max_iter, tol, seed).fit(A, B)


# ============================================
# Projections and prediction
# ============================================

def procrustes(X: np.ndarray, V: np.ndarray) -> Projection:
    """
    Rows-orthonormal P (D x M) minimizing ||P X - V||_F, from the thin SVD
    X V^T = U_s S W_s^T as P = W_s U_s^T.
    """
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if X.shape[1] != V.shape[1]:
        raise ShapeError(f"X has {X.shape[1]} samples but V has {V.shape[1]}")
    if V.shape[0] > X.shape[0]:
        raise InvalidArgumentError(f"D={V.shape[0]} exceeds the feature dimension M={X.shape[0]}")

    Us, s, Wt = linalg.svd(X @ V.T, full_matrices=False)
    P = Wt.T @ Us.T
    rank_deficient = bool(s.size and s[-1] <= s[0] * 1e-10)
    if rank_deficient:
        logger.warning(f"Procrustes: X V^T is rank deficient (singular values {s}); SVD fixes the null directions")
    return Projection(matrix=P, singular_values=s, rank_deficient=rank_deficient)


def learn_projections(A: np.ndarray, B: np.ndarray, fact: Factorization) -> Projections:
    P_A = procrustes(A, fact.V)
    P_B = procrustes(B, fact.V)
    diagnostics = [f"{name} rank deficient" for name, p in (("P_A", P_A), ("P_B", P_B)) if p.rank_deficient]
    return Projections(P_A=P_A, P_B=P_B, diagnostics=diagnostics)


def project_prototypes(P_B: Projection, B_unseen: np.ndarray) -> np.ndarray:
    """Project class-level semantic embeddings (M2 x K) into the shared space (D x K)."""
    B_unseen = np.asarray(B_unseen, dtype=np.float64)
    if B_unseen.shape[0] != P_B.matrix.shape[1]:
        raise ShapeError(f"embeddings have {B_unseen.shape[0]} rows, projection expects {P_B.matrix.shape[1]}")
    return P_B.apply(B_unseen)


def predict(test: np.ndarray, prototypes: np.ndarray, projection: Optional[Projection] = None) -> int:
    """
    Index of the nearest prototype column to the (optionally projected) test
    embedding; ties go to the lowest index.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[1] == 0:
        raise InvalidArgumentError("prototype set is empty")
    z = np.asarray(test, dtype=np.float64).ravel()
    if projection is not None:
        z = projection.apply(z)
    if z.shape[0] != prototypes.shape[0]:
        raise ShapeError(f"embedding has dimension {z.shape[0]}, prototypes have {prototypes.shape[0]}")
    distances = np.sum((prototypes - z[:, None]) ** 2, axis=0)
    return int(np.argmin(distances))


def predict_many(tests: np.ndarray, prototypes: np.ndarray, projection: Optional[Projection] = None) -> np.ndarray:
    """predict() applied to every column of tests."""
    tests = np.asarray(tests, dtype=np.float64)
    return np.array([predict(tests[:, i], prototypes, projection) for i in range(tests.shape[1])], dtype=np.int64)
