"""Continuous fault estimation by rollout-residual maximum likelihood over the fault box."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import qmc

from pfo_fdir.dynamics import FaultProfile, rk4_step
from pfo_fdir.errors import ArgumentError, NumericError
from pfo_fdir.inference.propagators import RowFaultField
from pfo_fdir.learning.training import apply_operator

log = logging.getLogger(__name__)

# stands in for +inf inside the quasi-Newton solver
DIVERGED = 1e20


@dataclass
class MLEConfig:
    n_starts: int = 8
    max_iter: int = 200
    fd_step: float = 1e-4
    window: Optional[int] = None
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_starts < 1 or self.max_iter < 1 or self.fd_step <= 0:
            raise ArgumentError("n_starts, max_iter must be >= 1 and fd_step > 0")
        if self.window is not None and self.window < 1:
            raise ArgumentError(f"window must be >= 1, got {self.window}")

    @classmethod
    def from_config(cls, conf, seed=None):
        kw = {k: conf[k] for k in cls.__dataclass_fields__ if k in conf}
        if seed is not None:
            kw["seed"] = seed
        return cls(**kw)


@dataclass
class ContinuousFaultEstimate:
    w: np.ndarray
    objective: float
    trace: List[dict] = field(default_factory=list)
    n_evaluations: int = 0


def rollout_states(system, x0, W, t0, dt, steps, substeps=1, corrections=None):
    """Deterministic RK4 rollouts of one initial state under each row of W, (steps + 1, B, n).

    Rows that diverge are filled with NaN from the divergence onward.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    x = np.repeat(np.asarray(x0, dtype=float)[None], len(W), axis=0)
    out = np.full((steps + 1,) + x.shape, np.nan)
    out[0] = x
    alive = np.ones(len(W), dtype=bool)
    h = dt / substeps
    for k in range(steps):
        u = None if corrections is None else corrections[k]
        field = RowFaultField(system, W[alive], u)
        xa = x[alive]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for j in range(substeps):
                    xa = rk4_step(field, xa, t0 + k * dt + j * h, h)
        except NumericError:
            xa = _rowwise_steps(system, xa, W[alive], t0 + k * dt, h, substeps, u)
        ok = np.all(np.isfinite(xa), axis=1) & (np.max(np.abs(xa), axis=1, initial=0.0) < 1e12)
        idx = np.flatnonzero(alive)
        x[idx[ok]] = xa[ok]
        alive[idx[~ok]] = False
        out[k + 1, alive] = x[alive]
        if not alive.any():
            break
    return out


def _rowwise_steps(system, x, W, t, h, substeps, u):
    out = np.full_like(x, np.nan)
    for i in range(len(x)):
        try:
            xi = x[i:i + 1]
            for j in range(substeps):
                xi = rk4_step(RowFaultField(system, W[i:i + 1], u), xi, t + j * h, h)
            out[i] = xi[0]
        except NumericError:
            pass
    return out


def mle_objective(system, ys, x0, t0, dt, R, W, window=None, substeps=1, corrections=None):
    """sum_l 1/2 |h(x_l(w)) - y_l|^2_{R^-1} per candidate row of W; +inf for diverged rollouts."""
    ys = np.asarray(ys, dtype=float)
    steps = len(ys) - 1
    traj = rollout_states(system, x0, W, t0, dt, steps, substeps, corrections)
    start = 0 if window is None else max(0, len(ys) - window)
    c = cho_factor(np.atleast_2d(R), lower=True)
    costs = np.zeros(len(traj[0]))
    for l in range(start, len(ys)):
        x = traj[l]
        bad = ~np.all(np.isfinite(x), axis=1)
        r = np.zeros((len(x), ys.shape[1]))
        if (~bad).any():
            r[~bad] = system.h(x[~bad]) - ys[l]
        costs += 0.5 * np.sum(r * cho_solve(c, r.T).T, axis=1)
        costs[bad] = np.inf
    return costs


def fit_continuous_fault(ys, system, x0, t0, dt, R, config=None, box=None, corrections=None):
    """Multi-start projected L-BFGS-B over the fault box with central-difference gradients.

    All 2p + 1 candidates of one gradient evaluation are rolled out together.
    Starts come from a seeded Latin hypercube; the best start wins.
    """
    config = config or MLEConfig()
    p = system.fault_dim
    lo, hi = (np.zeros(p), np.ones(p)) if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    if np.any(hi < lo):
        raise ArgumentError("fault box has an upper bound below its lower bound")
    n_eval = 0

    def batch(W):
        nonlocal n_eval
        n_eval += len(W)
        return mle_objective(system, ys, x0, t0, dt, R, W, config.window, config.substeps, corrections)

    def fun_and_grad(w):
        w = np.clip(w, lo, hi)
        h = config.fd_step
        plus = np.minimum(w + h * np.eye(p), hi)
        minus = np.maximum(w - h * np.eye(p), lo)
        vals = batch(np.vstack([w[None], plus, minus]))
        f0, fp, fm = vals[0], vals[1:p + 1], vals[p + 1:]
        span = np.diag(plus - minus)
        grad = np.where(np.isfinite(fp) & np.isfinite(fm) & (span > 0), (fp - fm) / np.maximum(span, 1e-300), 0.0)
        return (f0 if np.isfinite(f0) else DIVERGED), grad

    starts = lo + (hi - lo) * qmc.LatinHypercube(d=p, seed=config.seed).random(config.n_starts)
    best, trace = None, []
    for i, w0 in enumerate(starts):
        res = minimize(fun_and_grad, w0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": config.max_iter, "ftol": 1e-15, "gtol": 1e-12})
        w = np.clip(res.x, lo, hi)
        f = float(batch(w[None])[0])
        trace.append({"start": i, "w0": w0.tolist(), "w": w.tolist(), "objective": f, "iterations": int(res.nit),
                      "status": int(res.status)})
        log.debug(f"MLE start {i}: objective {f:.6g} at w={w}")
        if best is None or f < best[1]:
            best = (w, f)
    log.info(f"MLE fault estimate {best[0]} (objective {best[1]:.6g}, {n_eval} rollouts)")
    return ContinuousFaultEstimate(best[0], best[1], trace, n_eval)


def reachable_family(ensemble, faults, s, t, model):
    """Learned-operator prediction of `ensemble` for every queried fault parameter."""
    out = []
    for w in faults:
        w = w.w if isinstance(w, FaultProfile) else np.asarray(w, dtype=float)
        out.append(apply_operator(model, ensemble, s, t, w))
    return out
