"""Local discrete-time models and the backward Riccati contraction metric."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from pfo_fdir.dynamics import ClosedLoopField, rk4_step
from pfo_fdir.errors import ArgumentError, NumericError
from pfo_fdir.util import project_psd, sym

log = logging.getLogger(__name__)

PSD_TOL = 1e-10


def discrete_step(field, x, u, t, dt, substeps=1):
    """RK4 step of the closed loop with a constant recovery correction per row of u."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    stepped = ClosedLoopField(field.base, field.fault, lambda _x, _t: u)
    h = dt / substeps
    for j in range(substeps):
        x = rk4_step(stepped, x, t + j * h, h)
    return x


def linearize_step(field, x_bar, u_bar, t, dt, rel_step=1e-5, substeps=1):
    """(A, B, c) of the one-step map about (x_bar, u_bar) by central differences.

    `field` is a ClosedLoopField (stepped with RK4 and u as recovery
    correction) or any callable step(x, u, t, dt) on batches.
    All 2 (n + m) perturbed points are evaluated as one batch.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.atleast_1d(np.asarray(u_bar, dtype=float))
    n, m = len(x_bar), len(u_bar)
    if isinstance(field, ClosedLoopField):
        def step(x, u):
            return discrete_step(field, x, u, t, dt, substeps)
    else:
        def step(x, u):
            return np.asarray(field(x, u, t, dt), dtype=float)

    hx = rel_step * np.maximum(1.0, np.abs(x_bar))
    hu = rel_step * np.maximum(1.0, np.abs(u_bar))
    X = np.repeat(x_bar[None], 2 * (n + m) + 1, axis=0)
    U = np.repeat(u_bar[None], 2 * (n + m) + 1, axis=0)
    X[1:n + 1] += np.diag(hx)
    X[n + 1:2 * n + 1] -= np.diag(hx)
    U[2 * n + 1:2 * n + m + 1] += np.diag(hu)
    U[2 * n + m + 1:] -= np.diag(hu)
    Y = step(X, U)
    A = ((Y[1:n + 1] - Y[n + 1:2 * n + 1]) / (2 * hx)[:, None]).T
    B = ((Y[2 * n + 1:2 * n + m + 1] - Y[2 * n + m + 1:]) / (2 * hu)[:, None]).T
    c = Y[0] - A @ x_bar - B @ u_bar
    return A, B, c


@dataclass
class ContractionMetricSequence:
    P: np.ndarray   # (N + 1, n, n)
    S: np.ndarray   # (N, m, m)

    def __len__(self):
        return len(self.S)


def _per_step(M, N, name):
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return np.repeat(M[None], N, axis=0)
    if len(M) != N:
        raise ArgumentError(f"{name} has {len(M)} steps, expected {N}")
    return M


def riccati_backward(A, B, Q, R, lambda_T, N):
    """P_N = lambda_T Q_{N-1};  P_l = Q_l + A^T P A - A^T P B S^-1 B^T P A,  S = R + B^T P B.

    A, B, Q, R are either one matrix or a per-step stack of length N.
    """
    if N < 1:
        raise ArgumentError(f"horizon must be >= 1, got {N}")
    A, B, Q, R = (_per_step(M, N, k) for M, k in ((A, "A"), (B, "B"), (Q, "Q"), (R, "R")))
    n, m = B.shape[1], B.shape[2]
    P = np.empty((N + 1, n, n))
    S = np.empty((N, m, m))
    P[N] = lambda_T * Q[N - 1]
    for l in range(N - 1, -1, -1):
        PB = P[l + 1] @ B[l]
        S[l] = sym(R[l] + B[l].T @ PB)
        try:
            c = cho_factor(S[l], lower=True)
        except LinAlgError:
            raise NumericError(f"Riccati S is not positive definite at step {l}", term="riccati", index=l) from None
        PA = P[l + 1] @ A[l]
        Pl = sym(Q[l] + A[l].T @ PA - PA.T @ B[l] @ cho_solve(c, B[l].T @ PA))
        low = np.min(np.linalg.eigvalsh(Pl))
        if low < -PSD_TOL * max(1.0, np.abs(Pl).max()):
            log.warning(f"Riccati P has eigenvalue {low:.3e} at step {l}; projected to PSD")
        P[l] = project_psd(Pl) if low < 0 else Pl
    return ContractionMetricSequence(P, S)
