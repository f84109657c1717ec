"""Continuous-time LQR via Newton-Kleinman on the algebraic Riccati equation.

The iteration needs a stabilizing starting gain, obtained with the Bass
shifted-Lyapunov construction. If that fails (for example an uncontrollable
pair) the matrix sign function of the Hamiltonian is tried instead. Sizes here
are tiny (n <= 4), so Lyapunov equations are solved through the Kronecker form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .controllers import ControllerSpec, gain_names
from .plants import PlantModel, linearize

RESIDUAL_TOL = 1e-9
MAX_NEWTON = 100


class UnstabilizableError(RuntimeError):
    """The Riccati solve failed or produced a non-stabilizing gain."""


@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or Q.shape != (n, n) or B.shape[1] != 1:
            raise ValueError("expected A n×n, B n×1, Q n×n")
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if not float(self.R) > 0:
            raise ValueError("R must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", float(self.R))


@dataclass(frozen=True)
class LqrResult:
    P: np.ndarray
    K: np.ndarray  # shape (n,)
    closed_loop_eigs: np.ndarray
    residual: float
    method: str


def solve_lyapunov(F: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Solve F X + X F^T = M for X."""
    n = F.shape[0]
    I = np.eye(n)
    L = np.kron(I, F) + np.kron(F, I)
    x = np.linalg.solve(L, M.reshape(-1, order="F"))
    X = x.reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def care_residual(p: LqrProblem, P: np.ndarray) -> float:
    A, B, Q, R = p.A, p.B, p.Q, p.R
    PB = P @ B
    terms = (A.T @ P, P @ A, PB @ PB.T / R, Q)
    res = terms[0] + terms[1] - terms[2] + terms[3]
    scale = sum(np.linalg.norm(t) for t in terms)
    return float(np.linalg.norm(res) / max(scale, np.finfo(float).tiny))


def _bass_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    if np.max(np.linalg.eigvals(A).real) < 0:
        return np.zeros((1, n))
    beta = 1.0 + np.max(np.abs(np.linalg.eigvals(A)))
    F = A + beta * np.eye(n)
    Z = solve_lyapunov(F, 2.0 * B @ B.T)
    if np.linalg.cond(Z) > 1e12:
        raise np.linalg.LinAlgError("shifted controllability gramian is singular")
    return B.T @ np.linalg.inv(Z)


def _newton_kleinman(p: LqrProblem, K: np.ndarray) -> np.ndarray:
    A, B, Q, R = p.A, p.B, p.Q, p.R
    P_prev = None
    for _ in range(MAX_NEWTON):
        Ak = A - B @ K
        P = solve_lyapunov(Ak.T, -(Q + R * K.T @ K))
        K = (B.T @ P) / R
        if P_prev is not None and np.linalg.norm(P - P_prev) <= 1e-14 * max(1.0, np.linalg.norm(P)):
            break
        P_prev = P
    return P


def _sign_function(p: LqrProblem) -> np.ndarray:
    A, B, Q, R = p.A, p.B, p.Q, p.R
    n = A.shape[0]
    H = np.block([[A, -B @ B.T / R], [-Q, -A.T]])
    W = H.copy()
    for _ in range(200):
        Wi = np.linalg.inv(W)
        c = abs(np.linalg.det(W)) ** (-1.0 / (2 * n))
        W_new = 0.5 * (c * W + Wi / c)
        if np.linalg.norm(W_new - W, 1) <= 1e-13 * np.linalg.norm(W_new, 1):
            W = W_new
            break
        W = W_new
    W11, W12, W21, W22 = W[:n, :n], W[:n, n:], W[n:, :n], W[n:, n:]
    lhs = np.vstack([W12, W22 + np.eye(n)])
    rhs = -np.vstack([W11 + np.eye(n), W21])
    P = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return 0.5 * (P + P.T)


def solve_care(p: LqrProblem) -> LqrResult:
    """Stabilizing solution of A'P + PA - PBR^-1B'P + Q = 0 and K = R^-1 B'P."""
    method = "newton-kleinman"
    try:
        K0 = _bass_gain(p.A, p.B)
        if np.max(np.linalg.eigvals(p.A - p.B @ K0).real) >= 0:
            raise np.linalg.LinAlgError("seed gain not stabilizing")
        P = _newton_kleinman(p, K0)
    except np.linalg.LinAlgError:
        method = "sign-function"
        try:
            P = _sign_function(p)
        except np.linalg.LinAlgError as exc:
            raise UnstabilizableError(f"Riccati solve failed: {exc}") from None
        # polish with Newton steps from the sign-function estimate when possible
        K = (p.B.T @ P) / p.R
        if np.all(np.isfinite(P)) and np.max(np.linalg.eigvals(p.A - p.B @ K).real) < 0:
            P = _newton_kleinman(p, K)

    if not np.all(np.isfinite(P)):
        raise UnstabilizableError("Riccati solve produced non-finite values")
    P = 0.5 * (P + P.T)
    K = ((p.B.T @ P) / p.R).reshape(-1)
    eigs = np.linalg.eigvals(p.A - p.B @ K.reshape(1, -1))
    res = care_residual(p, P)
    if np.max(eigs.real) >= 0:
        raise UnstabilizableError(f"closed loop not stable (spectral abscissa {np.max(eigs.real):.3g})")
    if res > RESIDUAL_TOL:
        raise UnstabilizableError(f"Riccati residual {res:.3g} above tolerance")
    if np.linalg.eigvalsh(P).min() < -1e-10 * max(1.0, np.linalg.norm(P)):
        raise UnstabilizableError("Riccati solution is not positive semidefinite")
    return LqrResult(P, K, eigs, res, method)


def lqr_gains(plant: PlantModel, q_diag: Sequence[float], r: float) -> Tuple[ControllerSpec, LqrResult]:
    """State-feedback spec from LQR on the plant linearization.

    ``q_diag`` and the returned gains follow the plant's feedback ordering.
    """
    A, B = linearize(plant)
    order = list(plant.feedback_order)
    # permute into feedback coordinates so Q and K line up with K1..Kn
    Af = A[np.ix_(order, order)]
    Bf = B[order]
    q = np.asarray(q_diag, dtype=float)
    if q.shape != (len(order),):
        raise ValueError(f"Q diagonal needs {len(order)} entries")
    res = solve_care(LqrProblem(Af, Bf, np.diag(q), r))
    names = gain_names("FSF", plant)
    spec = ControllerSpec("FSF", {n: float(k) for n, k in zip(names, res.K)})
    return spec, res
