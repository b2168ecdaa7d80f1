"""Steady-state Kalman design and closed-loop spectral analysis.

The estimator bank downstream diagonalises the fixed-gain error dynamics
x_err(k+1) = (A - K C A) x_err(k) + noise, so this module computes the
steady Kalman gain K (Riccati fixed point), the eigendecomposition
A - K C A = V diag(Pi) V^-1 with a deterministic eigenvalue order and
eigenvector normalisation, and the characteristic polynomial of A.  The
whole construction requires the closed-loop eigenvalues to be pairwise
distinct, strictly inside the unit circle, and disjoint from the spectrum
of A; ``closed_loop_eigendecomposition`` reports that flag and the caller
decides whether to proceed.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import SystemModel, observability_structure

RICCATI_TOL = 1e-12
RICCATI_MAX_ITER = 100000
EIG_RTOL = 1e-8          # eigen-residual and diagonalizability threshold
EIG_SEPARATION = 1e-6    # pairwise / cross-spectrum separation for the flag


class RiccatiDivergenceError(RuntimeError):
    """Riccati recursion failed to converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclasses.dataclass(frozen=True)
class SpectralDesign:
    """Converged filter design plus the closed-loop eigenstructure.

    charpoly stores the coefficients a_0 .. a_n of det(xI - A) in ascending
    order with a_n = 1.  Pi holds the eigenvalues of A - K C A sorted by
    (real, imaginary) part; V holds the matching unit-norm eigenvectors.
    """

    P: np.ndarray
    P_plus: np.ndarray
    K: np.ndarray
    charpoly: np.ndarray
    V: np.ndarray
    Pi: np.ndarray
    riccati_residual: float
    assumption1_ok: bool


def steady_state_kalman(model: SystemModel, tol: float = RICCATI_TOL,
                        max_iter: int = RICCATI_MAX_ITER):
    """Iterate the measurement-update Riccati recursion to its fixed point.

    Starts from the prior covariance Sigma and stops when successive
    filtered covariances differ by at most tol in max-abs norm.  Returns
    (P, P_plus, K, residual) where P_plus = A P A' + Q and K are recomputed
    from the converged P, so those two defining equations hold to machine
    precision and the reported residual measures only the remaining
    fixed-point gap ||(I - K C) P_plus - P||_maxabs.
    """
    A, C, Q, R = model.A, model.C, model.Q, model.R
    n = model.n
    I = np.eye(n)

    def half_step(P):
        P_plus = A @ P @ A.T + Q
        S = C @ P_plus @ C.T + R
        K = np.linalg.solve(S, C @ P_plus).T
        P_new = (I - K @ C) @ P_plus
        return 0.5 * (P_new + P_new.T), P_plus, K

    # P(0 | -1) = Sigma: apply the measurement update first
    S0 = C @ model.Sigma @ C.T + R
    K0 = np.linalg.solve(S0, C @ model.Sigma).T
    P = (I - K0 @ C) @ model.Sigma
    P = 0.5 * (P + P.T)

    diff = np.inf
    for _ in range(max_iter):
        P_next, _, _ = half_step(P)
        diff = float(np.abs(P_next - P).max())
        P = P_next
        if diff <= tol:
            break
    else:
        raise RiccatiDivergenceError(
            f"Riccati recursion did not converge within {max_iter} iterations "
            f"(last residual {diff:.3e})", diff)

    P_plus = A @ P @ A.T + Q
    S = C @ P_plus @ C.T + R
    # C-contiguous copy: a transpose view picks a different BLAS path,
    # so serialized designs would not reproduce traces bit for bit
    K = np.ascontiguousarray(np.linalg.solve(S, C @ P_plus).T)
    residual = float(np.abs((I - K @ C) @ P_plus - P).max())
    return P, P_plus, K, residual


def characteristic_polynomial(A: np.ndarray) -> np.ndarray:
    """Coefficients a_0 .. a_n of det(xI - A), ascending, with a_n = 1.

    A must be in Jordan form so the eigenvalues can be read off the
    diagonal; the expansion is then a plain polynomial product.
    """
    coeffs = np.atleast_1d(np.poly(np.diag(np.asarray(A, dtype=float))))
    return coeffs[::-1].astype(float)


def closed_loop_eigendecomposition(A: np.ndarray, K: np.ndarray, C: np.ndarray,
                                   eig_rtol: float = EIG_RTOL,
                                   separation: float = EIG_SEPARATION):
    """Eigendecomposition of A - K C A with deterministic order and phase.

    Eigenvalues are sorted by (real part, imaginary part); each eigenvector
    is scaled to unit 2-norm with its first significant entry rotated to the
    positive real axis, which makes conjugate eigenvalue pairs carry exactly
    conjugate eigenvector columns.  Returns (V, Pi, assumption1_ok) where the
    flag certifies: pairwise distinct eigenvalues, none within ``separation``
    of an eigenvalue of A, and all strictly inside the unit circle.
    """
    E = A - K @ C @ A
    eigvals, vecs = np.linalg.eig(E)
    order = np.lexsort((eigvals.imag, eigvals.real))
    Pi = eigvals[order]
    V = vecs[:, order].astype(complex)

    for j in range(V.shape[1]):
        col = V[:, j]
        col = col / np.linalg.norm(col)
        nz = np.flatnonzero(np.abs(col) > 1e-9)
        if nz.size:
            lead = col[nz[0]]
            col = col * (np.conj(lead) / np.abs(lead))
        V[:, j] = col

    cond_V = float(np.linalg.cond(V))
    if not np.isfinite(cond_V) or cond_V > 1.0 / eig_rtol:
        raise ValueError(
            "Assumption 1 violated: not diagonalizable "
            f"(eigenvector condition number {cond_V:.3e})")

    residual = float(np.abs(E @ V - V * Pi).max())
    scale = max(1.0, float(np.abs(E).max()))
    assert residual <= eig_rtol * scale, f"eigen-residual {residual:.3e}"

    distinct = True
    for a in range(len(Pi)):
        for b in range(a + 1, len(Pi)):
            if abs(Pi[a] - Pi[b]) <= separation:
                distinct = False
    lam_A = np.linalg.eigvals(A)
    disjoint = bool(np.abs(Pi[:, None] - lam_A[None, :]).min() > separation)
    stable = bool(np.abs(Pi).max() < 1.0)
    return V, Pi, distinct and disjoint and stable


def fixed_gain_kalman_step(x_hat: np.ndarray, y: np.ndarray, u: np.ndarray,
                           design: SpectralDesign, model: SystemModel) -> np.ndarray:
    """One fixed-gain filter update driven by the next measurement.

    x_hat_next = (A - K C A) x_hat + K y + (I - K C) B u.
    """
    A, C, K = model.A, model.C, design.K
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x_hat.shape[0] != model.n:
        raise ValueError(f"state estimate has length {x_hat.shape[0]}, expected {model.n}")
    if y.shape[0] != model.m:
        raise ValueError(f"measurement has length {y.shape[0]}, expected {model.m}")
    B = model.input_matrix()
    if u.shape[0] != B.shape[1]:
        raise ValueError(f"input has length {u.shape[0]}, expected {B.shape[1]}")
    KC = K @ C
    return (A - KC @ A) @ x_hat + K @ y + (B - KC @ B) @ u


def spectral_design(model: SystemModel, tol: float = RICCATI_TOL,
                    max_iter: int = RICCATI_MAX_ITER,
                    eig_rtol: float = EIG_RTOL,
                    separation: float = EIG_SEPARATION) -> SpectralDesign:
    """Full spectral design for a validated model.

    Refuses unobservable sensor sets up front (the recursion may silently
    converge to a useless fixed point when unobservable modes are stable).
    """
    structure = observability_structure(model)
    if not structure.observable:
        raise ValueError("(A, C) is unobservable: some state is covered by no sensor")
    P, P_plus, K, residual = steady_state_kalman(model, tol, max_iter)
    V, Pi, ok = closed_loop_eigendecomposition(model.A, K, model.C,
                                               eig_rtol, separation)
    return SpectralDesign(P=P, P_plus=P_plus, K=K,
                          charpoly=characteristic_polynomial(model.A),
                          V=V, Pi=Pi, riccati_residual=residual,
                          assumption1_ok=bool(ok))
