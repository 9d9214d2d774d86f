"""Trajectory errors against the noise-free nominal, improvement factors and density distance series."""
import numpy as np

from pfo_fdir.density_transport import mmd2, wasserstein2
from pfo_fdir.errors import ArgumentError


def state_errors(traj, reference):
    """Full-state error |x_k - x_k^nom| per step."""
    traj, reference = np.asarray(traj, dtype=float), np.asarray(reference, dtype=float)
    if traj.shape != reference.shape:
        raise ArgumentError(f"trajectory {traj.shape} and reference {reference.shape} differ in shape")
    return np.linalg.norm(traj - reference, axis=-1)


def improvement(baseline, recovered):
    """baseline / recovered; 1 when both vanish."""
    if baseline < 0 or recovered < 0:
        raise ArgumentError("errors must be >= 0")
    if recovered == 0.0:
        return 1.0 if baseline == 0.0 else float("inf")
    return float(baseline / recovered)


def fault_error(w_hat, w_true):
    return float(np.linalg.norm(np.asarray(w_hat, dtype=float) - np.asarray(w_true, dtype=float)))


def distance_series(ensembles_a, ensembles_b, kind="w2", unbiased=False):
    """W2 or MMD^2 between index-matched ensemble sequences."""
    if len(ensembles_a) != len(ensembles_b):
        raise ArgumentError(f"series lengths differ: {len(ensembles_a)} and {len(ensembles_b)}")
    if kind == "w2":
        return np.array([wasserstein2(a, b)[0] for a, b in zip(ensembles_a, ensembles_b)])
    if kind == "mmd2":
        return np.array([mmd2(a, b, unbiased=unbiased) for a, b in zip(ensembles_a, ensembles_b)])
    raise ArgumentError(f"unknown distance {kind!r}, expected 'w2' or 'mmd2'")


def summarize(baseline, recovered, reference, w_hat=None, w_true=None):
    """Terminal and mean full-state errors of both runs and their improvement factors."""
    e_b, e_r = state_errors(baseline, reference), state_errors(recovered, reference)
    out = {
        "terminal_error_baseline": float(e_b[-1]),
        "terminal_error_recovered": float(e_r[-1]),
        "mean_error_baseline": float(e_b.mean()),
        "mean_error_recovered": float(e_r.mean()),
    }
    out["terminal_improvement"] = improvement(out["terminal_error_baseline"], out["terminal_error_recovered"])
    out["mean_improvement"] = improvement(out["mean_error_baseline"], out["mean_error_recovered"])
    if w_hat is not None and w_true is not None:
        out["fault_error"] = fault_error(w_hat, w_true)
    return out
