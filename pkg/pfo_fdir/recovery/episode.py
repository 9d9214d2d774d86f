"""Receding-horizon recovery: planning cycles and the matched-noise closed-loop episode."""
import logging
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np
import pandas as pd

from pfo_fdir.bench.metrics import summarize
from pfo_fdir.density_transport import (GaussianMixture, ParticleEnsemble, matched_gmm_pair,
                                        mixture_from_responsibilities, mmd2, wasserstein2)
from pfo_fdir.dynamics import ClosedLoopField, FaultProfile, step_sde
from pfo_fdir.errors import ArgumentError, ConfigurationError
from pfo_fdir.inference.bank import HypothesisBank, predict_bank, update_posterior
from pfo_fdir.inference.mle import MLEConfig, fit_continuous_fault
from pfo_fdir.inference.propagators import TrueFlowPropagator, make_propagator
from pfo_fdir.recovery.ocp import (RecoveryProblem, RecoveryWeights, blend_first_step, blend_planned_step,
                                   blend_weights, gmm_surrogate_error, propagate_recovery_densities,
                                   solve_component_ocp, surrogate_bound)
from pfo_fdir.recovery.riccati import ContractionMetricSequence, linearize_step, riccati_backward
from pfo_fdir.util import project_psd, spawn_rngs, sym

log = logging.getLogger(__name__)

ESTIMATORS = ("mle", "fixed")


@dataclass
class EpisodeConfig:
    steps: int = 500
    dt: float = 0.02
    t0: float = 0.0
    substeps: int = 1
    n_particles: int = 256
    initial_cov_scale: float = 1e-4
    measurement_std: float = 1e-3
    prediction: str = "true-flow"
    estimate: str = "mle"
    mle_every: int = 25
    mle_window: int = 50
    recover: bool = True
    mmd_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.n_particles < 2 or self.substeps < 1:
            raise ArgumentError("steps, substeps must be >= 1 and n_particles >= 2")
        if self.dt <= 0 or self.measurement_std <= 0 or self.initial_cov_scale < 0:
            raise ArgumentError("dt and measurement_std must be positive, initial_cov_scale >= 0")
        if self.estimate not in ESTIMATORS:
            raise ConfigurationError(f"unknown fault estimator {self.estimate!r}, expected one of {ESTIMATORS}")
        if self.mle_every < 1 or self.mle_window < 1 or self.mmd_every < 1:
            raise ArgumentError("mle_every, mle_window and mmd_every must be >= 1")

    @classmethod
    def from_config(cls, conf, seed=None):
        kw = {k: conf[k] for k in cls.__dataclass_fields__ if k in conf}
        if seed is not None:
            kw["seed"] = seed
        return cls(**kw)


@dataclass
class RecoveryPlan:
    """Policies of one replanning cycle.

    `mixture` holds the fault components at the planning time, pulled back
    from the horizon fit by particle index; policies[i] is None for
    components that were not retained.
    """

    step: int
    t: float
    policies: List
    beta: np.ndarray
    mixture: GaussianMixture
    fault_target: GaussianMixture
    nominal_target: GaussianMixture
    metric: ContractionMetricSequence
    retained: np.ndarray
    eps_f: float = float("nan")

    def correction(self, x, j, gamma_min=1e-3):
        if j == 0:
            return blend_first_step(self.policies, self.mixture, x, gamma_min)
        return blend_planned_step(self.policies, self.beta, x, j, gamma_min)


def residual_covariance(x_now, x_next, weights, A, c):
    """Weighted covariance of x_next - (A x_now + c), projected to PSD."""
    total = weights.sum()
    if total <= 0:
        return np.zeros((x_now.shape[1],) * 2)
    wt = weights / total
    r = x_next - (x_now @ A.T + c)
    d = r - wt @ r
    return project_psd(sym((d * wt[:, None]).T @ d))


def reference_segment(reference, k, N):
    """reference[k : k + N + 1], held at its last state past the end."""
    idx = np.minimum(np.arange(k, k + N + 1), len(reference) - 1)
    return reference[idx]


def plan_recovery(ensemble, system, propagator, w_hat, t_k, dt, reference, x, weights=None, gmm_config=None,
                  rng=None, substeps=1, step=0):
    """One replanning cycle from the filtered ensemble at t_k.

    Args:
        reference: (N + 1, n) noise-free nominal states over the horizon
        x: current state estimate, used for component retention
    """
    weights = weights or RecoveryWeights()
    N, M = weights.horizon, min(weights.n_components, ensemble.size)
    n, m = system.state_dim, system.control_dim
    if len(reference) != N + 1:
        raise ArgumentError(f"reference has {len(reference)} states, expected {N + 1}")

    fault, nominal = propagate_recovery_densities(ensemble, propagator, w_hat, t_k, dt, N, rng)
    f_target, n_target = matched_gmm_pair(fault[N], nominal[N], M, gmm_config)
    resp = f_target.assignment
    f_mom = [mixture_from_responsibilities(e.points, e.weights, resp, 0.0) for e in fault]
    n_mom = [mixture_from_responsibilities(e.points, e.weights, resp, 0.0) for e in nominal]

    fault_field = ClosedLoopField(system, FaultProfile(w_hat))
    A, B = np.empty((M, N, n, n)), np.empty((M, N, n, m))
    c, W = np.empty((M, N, n)), np.empty((M, N, n, n))
    u0 = np.zeros(m)
    for l in range(N):
        t = t_k + l * dt
        for i in range(M):
            A[i, l], B[i, l], c[i, l] = linearize_step(fault_field, f_mom[l].means[i], u0, t, dt, substeps=substeps)
            W[i, l] = residual_covariance(fault[l].points, fault[l + 1].points, fault[l].weights * resp[:, i],
                                          A[i, l], c[i, l])

    nominal_field = ClosedLoopField(system, FaultProfile.nominal(system.fault_dim))
    lin = [linearize_step(nominal_field, reference[l], u0, t_k + l * dt, dt, substeps=substeps) for l in range(N)]
    metric = riccati_backward(np.stack([a for a, _, _ in lin]), np.stack([b for _, b, _ in lin]),
                              weights.riccati_q * np.eye(n), weights.riccati_r * np.eye(m), weights.lam_T, N)

    current = f_mom[0]
    _, keep = blend_weights(current, x, weights.gamma_min)
    problem = RecoveryProblem(
        N, current.weights, current.means, current.covs, A, B, c, W,
        np.stack([mom.means for mom in n_mom[1:]], axis=1), np.stack([mom.covs for mom in n_mom[1:]], axis=1),
        np.asarray(reference, dtype=float), metric.P, weights)
    policies = [solve_component_ocp(problem, i) if i in keep else None for i in range(M)]
    for i in keep:
        if policies[i].status != "converged":
            log.warning(f"Component {i} OCP ended with status {policies[i].status}")
    eps_f = gmm_surrogate_error(f_target, fault[N], resp, rng) if rng is not None else float("nan")
    log.debug(f"Planned recovery at t={t_k:.3f}: retained {keep.tolist()} of {M}, eps_f={eps_f:.4g}")
    return RecoveryPlan(step, t_k, policies, current.weights, current, f_target, n_target, metric, keep, eps_f)


@dataclass
class EpisodeLog:
    times: np.ndarray
    reference: np.ndarray
    baseline: np.ndarray
    recovered: np.ndarray
    u_cl: np.ndarray
    u_rec: np.ndarray
    w_hat: np.ndarray
    mmd2: np.ndarray
    noise: np.ndarray
    plans: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_frame(self):
        """One row per step: t, recovered state, commands, errors to nominal and the estimation traces."""
        n, m = self.recovered.shape[1], self.u_rec.shape[1]
        cols = {"t": self.times}
        for j in range(n):
            cols[f"x{j}"] = self.recovered[:, j]
        # commands act over [t_k, t_k+1); the terminal row repeats the last one
        u_cl = np.vstack([self.u_cl, self.u_cl[-1:]])
        u_rec = np.vstack([self.u_rec, self.u_rec[-1:]])
        for j in range(m):
            cols[f"u_cl{j}"] = u_cl[:, j]
        for j in range(m):
            cols[f"u_rec{j}"] = u_rec[:, j]
        cols["error_recovered"] = np.linalg.norm(self.recovered - self.reference, axis=1)
        cols["error_baseline"] = np.linalg.norm(self.baseline - self.reference, axis=1)
        for j in range(self.w_hat.shape[1]):
            cols[f"w_hat{j}"] = self.w_hat[:, j]
        cols["mmd2"] = self.mmd2
        return pd.DataFrame(cols)


def closed_loop_step(system, fault, x, t, dt, noise, u_rec=None):
    """Euler-Maruyama over len(noise) sub-steps with the correction u_rec held constant."""
    correction = None if u_rec is None else (lambda _x, _t: u_rec)
    field_ = ClosedLoopField(system, fault, correction)
    h = dt / len(noise)
    for j, z in enumerate(noise):
        x = step_sde(field_, x, t + j * h, h, noise=z[None])
    return x


def run_recovery(system, true_fault, reference, config=None, weights=None, model=None, w_hat=None,
                 mle_config=None, gmm_config=None, cert=None, box=None):
    """Faulted closed loop with and without recovery on one shared noise realisation.

    The filter is a single-hypothesis particle ensemble under the current fault
    estimate, predicted with the true flow and the applied correction. The
    fault estimate is either fixed (`w_hat`) or refit by windowed MLE every
    `mle_every` steps; recovery starts once an estimate exists.
    """
    config = config or EpisodeConfig()
    weights = weights or RecoveryWeights()
    mle_config = mle_config or MLEConfig()
    K, S, dt = config.steps, config.substeps, config.dt
    n, m, p = system.state_dim, system.control_dim, system.fault_dim
    reference = np.asarray(reference, dtype=float)
    if len(reference) < K + 1:
        raise ArgumentError(f"reference has {len(reference)} states, the episode needs {K + 1}")
    reference = reference[:K + 1]
    if config.estimate == "fixed" and w_hat is None:
        raise ConfigurationError("a fixed fault estimate needs w_hat")
    w_est = np.zeros(p) if config.estimate == "mle" else np.asarray(w_hat, dtype=float)

    rng_init, rng_proc, rng_meas, rng_filter, rng_truth, rng_plan = spawn_rngs(config.seed, 6)
    x0 = reference[0] + np.sqrt(config.initial_cov_scale) * rng_init.standard_normal(n)
    noise = rng_proc.standard_normal((K, S, system.noise_dim))

    baseline = np.empty((K + 1, n))
    baseline[0] = x0
    for k in range(K):
        baseline[k + 1] = closed_loop_step(system, true_fault, baseline[k], config.t0 + k * dt, dt, noise[k])

    n_y = system.h(x0[None]).shape[1]
    R = config.measurement_std ** 2 * np.eye(n_y)
    spread = np.sqrt(config.initial_cov_scale)
    ens0 = ParticleEnsemble(reference[0] + spread * rng_filter.standard_normal((config.n_particles, n)),
                            timestamp=config.t0)
    bank = HypothesisBank.from_library([FaultProfile(w_est)], ens0, R, system.h)
    truth = ens0
    propagator = make_propagator(config.prediction, system, model, S)
    true_flow = TrueFlowPropagator(system, S)

    def measure(x):
        return system.h(x[None])[0] + config.measurement_std * rng_meas.standard_normal(n_y)

    x = x0.copy()
    ys = [measure(x)]
    bank = update_posterior(bank, ys[0], config.t0, rng_filter)
    recovered, u_cl, u_rec = [x0], np.zeros((K, m)), np.zeros((K, m))
    means, w_trace = [bank.hypotheses[0].ensemble.mean()], [w_est.copy()]
    mmd = np.full(K + 1, np.nan)
    mmd[0] = mmd2(bank.hypotheses[0].ensemble, truth, unbiased=False)
    plan, plan_log = None, []

    for k in range(K):
        t = config.t0 + k * dt
        x_hat = means[-1]
        if config.estimate == "mle" and k >= config.mle_every and k % config.mle_every == 0:
            start = max(0, k - config.mle_window)
            est = fit_continuous_fault(np.asarray(ys[start:k + 1]), system, means[start], config.t0 + start * dt,
                                       dt, R, replace(mle_config, substeps=S), box, list(u_rec[start:k]))
            w_est = est.w
            bank = replace(bank, hypotheses=[replace(h, fault=FaultProfile(w_est)) for h in bank.hypotheses])
            log.info(f"Step {k}: fault estimate {np.round(w_est, 4)}")
        active = config.recover and (config.estimate == "fixed" or k >= config.mle_every)
        if active and (plan is None or k - plan.step >= weights.replan_every):
            plan = plan_recovery(bank.hypotheses[0].ensemble, system, propagator, w_est, t, dt,
                                 reference_segment(reference, k, weights.horizon), x_hat, weights, gmm_config,
                                 rng_plan, S, step=k)
            entry = {"step": k, "t": t, "retained": plan.retained.tolist(), "eps_f": plan.eps_f,
                     "status": [pol.status for pol in plan.policies if pol is not None]}
            if cert is not None and np.isfinite(plan.eps_f):
                gap = wasserstein2(bank.hypotheses[0].ensemble, truth)[0]
                entry["filter_gap"] = gap
                entry["surrogate_bound"] = surrogate_bound(cert, gap, plan.eps_f)
            plan_log.append(entry)
        u = plan.correction(x_hat, k - plan.step, weights.gamma_min) if active else None
        u_cl[k] = system.u_cl(x[None], t)[0]
        if u is not None:
            u_rec[k] = u
        x = closed_loop_step(system, true_fault, x, t, dt, noise[k], u)
        recovered.append(x)
        ys.append(measure(x))

        bank = predict_bank(bank, system, t, t + dt, rng=rng_filter, substeps=S, correction=u)
        bank = update_posterior(bank, ys[-1], t + dt, rng_filter)
        truth = true_flow(truth, true_fault.w, t, t + dt, rng_truth, u)
        means.append(bank.hypotheses[0].ensemble.mean())
        w_trace.append(w_est.copy())
        if (k + 1) % config.mmd_every == 0 or k + 1 == K:
            mmd[k + 1] = mmd2(bank.hypotheses[0].ensemble, truth, unbiased=False)

    recovered = np.asarray(recovered)
    times = config.t0 + dt * np.arange(K + 1)
    summary = summarize(baseline, recovered, reference, w_est, true_fault.w)
    summary.update({
        "w_hat": w_est.tolist(),
        "replans": len(plan_log),
        "max_correction": float(np.max(np.abs(u_rec), initial=0.0)),
        "mmd2_terminal": float(mmd[-1]),
    })
    bounds = [e["surrogate_bound"] for e in plan_log if "surrogate_bound" in e]
    if bounds:
        summary["surrogate_bound"] = float(max(bounds))
    log.info(f"Episode done: terminal error {summary['terminal_error_baseline']:.4g} -> "
             f"{summary['terminal_error_recovered']:.4g} ({summary['terminal_improvement']:.2f}x)")
    return EpisodeLog(times, reference, baseline, recovered, u_cl, u_rec, np.asarray(w_trace), mmd, noise,
                      plan_log, summary)
