"""Workflows behind the CLI subcommands and the named reproduction experiments.

Every experiment returns a Report: a JSON summary, pass/fail checks against
`experiment.thresholds` and CSV plot data. Nothing here reads the wall clock,
so reruns with one seed write identical files.
"""
import logging
import pathlib
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch
from omegaconf import OmegaConf

from pfo_fdir import __version__
from pfo_fdir.bench.systems import build_benchmark
from pfo_fdir.certificates import (DetectabilityInputs, composed_operator_bound, detectability_certificate,
                                   estimate_score_gap, fmm_residual_bound, interpolant_velocity_samples,
                                   log_norm_rate, measure_certificate, sampled_sup_norm)
from pfo_fdir.density_transport import GMMConfig, ParticleEnsemble, wasserstein2
from pfo_fdir.dynamics import ClosedLoopField, FaultProfile, generate_dataset, simulate
from pfo_fdir.errors import ArgumentError, ConfigurationError
from pfo_fdir.inference.bank import HypothesisBank, log_predictive_likelihood, predict_bank, update_posterior
from pfo_fdir.inference.mle import MLEConfig, fit_continuous_fault
from pfo_fdir.learning.callbacks import BestLossCallback, PerformanceCallback
from pfo_fdir.learning.interpolants import InterpolantSchedule
from pfo_fdir.learning.loggers import ConsoleLogger, JSONLinesLogger, LoggerCollection
from pfo_fdir.learning.losses import LossSample, contraction_samples
from pfo_fdir.learning.networks import FlowMapModel, MetricModel
from pfo_fdir.learning.training import (TrainConfig, apply_operator, endpoint_residual, load_checkpoint,
                                        make_pair_batch, train)
from pfo_fdir.recovery.episode import EpisodeConfig, run_recovery
from pfo_fdir.recovery.ocp import RecoveryWeights
from pfo_fdir.serialization import write_json
from pfo_fdir.util import config_hash, spawn_rngs

log = logging.getLogger(__name__)

EXPERIMENTS = ("ood_single", "ood_sweep", "separation", "operator_gap")


@dataclass
class Report:
    name: str
    summary: dict
    checks: dict = field(default_factory=dict)
    frames: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.checks.values())

    def write(self, out_dir, conf_hash=None, seed=None):
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for stem, frame in self.frames.items():
            frame.to_csv(out / f"{self.name}_{stem}.csv", index=False, float_format="%.10g")
        write_json(out / f"{self.name}.json", {
            "experiment": self.name, "summary": self.summary, "checks": self.checks, "passed": self.passed,
            "config_hash": conf_hash, "seed": seed, "version": __version__})
        log.info(f"{self.name}: {'PASS' if self.passed else 'FAIL'} {self.checks}")


def checkpoint_path(conf):
    return pathlib.Path(conf.output.checkpoint or pathlib.Path(conf.output.dir) / "checkpoint.pt")


def make_dataset(bench, conf):
    return generate_dataset(bench.system, bench.library, bench.dataset_config(conf.dataset, conf.seed))


def train_operator(bench, dataset, conf, out_dir=None):
    """Build the flow map and metric from the config, train them and write the checkpoint."""
    n, p = bench.system.state_dim, bench.system.fault_dim
    model = FlowMapModel(n, p, **OmegaConf.to_container(conf.model, resolve=True))
    metric = MetricModel(n, p, **OmegaConf.to_container(conf.metric, resolve=True))
    scale = float(np.mean(np.concatenate([dataset.x_s, dataset.x_t]).std(0)))
    schedule = InterpolantSchedule.from_config(conf.schedule, state_scale=scale)
    config = TrainConfig.from_config(conf.train, seed=conf.seed)
    out_dir = pathlib.Path(out_dir or conf.output.dir)
    logger = LoggerCollection([ConsoleLogger(), JSONLinesLogger(out_dir)])
    callbacks = [BestLossCallback(logger, interval=config.log_interval),
                 PerformanceCallback(logger, config.batch_size)]
    model, metric, history = train(model, metric, dataset, schedule, config, logger, callbacks,
                                   checkpoint_path(conf), config_hash(conf))
    return model, metric, schedule, history


def simulate_measurements(bench, fault, steps, measurement_std, seed):
    """One SDE rollout from rho_0 and its noisy measurements; returns (times, states, ys)."""
    rng_init, rng_proc, rng_meas = spawn_rngs(seed, 3)
    x0 = bench.sample_initial(rng_init, 1)[0]
    states = simulate(ClosedLoopField(bench.system, fault), x0, 0.0, bench.dt, steps, rng=rng_proc)[:, 0]
    clean = bench.system.h(states)
    ys = clean + measurement_std * rng_meas.standard_normal(clean.shape)
    return bench.dt * np.arange(steps + 1), states, ys


def _initial_estimate(bench, ys):
    return ys[0] if bench.system.obs_dim == bench.system.state_dim else bench.x0


def run_inference(bench, times, ys, conf, model=None, true_fault=None):
    """Library posterior over a measurement log plus periodic continuous MLE refits.

    Returns (per-step DataFrame, summary dict).
    """
    ic = conf.inference
    p, n_y = bench.system.fault_dim, ys.shape[1]
    (rng,) = spawn_rngs(conf.seed, 1)
    R = ic.measurement_std ** 2 * np.eye(n_y)
    bank = HypothesisBank.from_library(bench.library, ParticleEnsemble(bench.sample_initial(rng, ic.n_particles)),
                                       R, bench.system.h)
    mle_conf = MLEConfig.from_config(conf.mle, conf.seed)
    w_hat, concentrated = np.full(p, np.nan), None
    rows = []

    def record(k, log_like):
        row = {"t": times[k], "map": bank.map_index(), "fallback": bank.fallback}
        row.update({f"posterior{j}": v for j, v in enumerate(bank.weights)})
        row.update({f"loglik{j}": v for j, v in enumerate(log_like)})
        row.update({f"w_hat{i}": v for i, v in enumerate(w_hat)})
        rows.append(row)

    for k in range(len(ys)):
        if k > 0:
            bank = predict_bank(bank, bench.system, times[k - 1], times[k], ic.prediction, model, rng, ic.substeps,
                                ic.process_noise)
        log_like = [log_predictive_likelihood(h.ensemble, ys[k], bank.observation, R) for h in bank.hypotheses]
        bank = update_posterior(bank, ys[k], times[k], rng, ic.resample)
        if ic.mle_every and k > 0 and (k % ic.mle_every == 0 or k == len(ys) - 1):
            w_hat = fit_continuous_fault(ys[:k + 1], bench.system, _initial_estimate(bench, ys), times[0],
                                         bench.dt, R, mle_conf, bench.box).w
        if concentrated is None and np.max(bank.weights) > 0.95:
            concentrated = k
        record(k, log_like)

    summary = {"map_index": bank.map_index(), "map_fault": bench.library[bank.map_index()].w.tolist(),
               "posterior_max": float(np.max(bank.weights)), "concentration_step": concentrated,
               "w_hat": w_hat.tolist()}
    if true_fault is not None and np.all(np.isfinite(w_hat)):
        summary["fault_error"] = float(np.linalg.norm(w_hat - true_fault.w))
    return pd.DataFrame(rows), summary


def certify_operator(bench, conf, model, metric, schedule, dataset):
    """Sampled contraction certificate of a trained checkpoint plus the FMM residual bound."""
    cc = conf.certify
    rng = np.random.default_rng(conf.seed)
    perm = rng.permutation(len(dataset))
    n_hold = max(1, int(cc.holdout_fraction * len(dataset)))
    holdout, reference = dataset.subset(perm[:n_hold]), dataset.subset(perm[n_hold:])
    if len(reference) == 0:
        raise ArgumentError("dataset too small to hold out certificate samples")
    g = torch.Generator().manual_seed(int(conf.seed))
    pairs = make_pair_batch(model, holdout)
    idx = torch.randint(len(pairs), (cc.n_samples,), generator=g)
    x, tau, cond = contraction_samples(pairs[idx], schedule, LossSample.draw(cc.n_samples, model.state_dim, g))
    gap = interpolant_velocity_samples(model, reference, holdout, schedule, cc.n_samples, cc.k, conf.seed)
    cert = measure_certificate(metric, model, x.detach(), tau, cond, gap)
    residual = endpoint_residual(model, holdout, schedule, seed=conf.seed)
    table = {
        "certificate": cert.to_dict(),
        "endpoint_residual": residual,
        "fmm_residual_bound": fmm_residual_bound(residual, conf.train.omega0_lower),
        "certificate_physical": cert.in_physical_time(bench.dt).to_dict(),
    }
    return cert, table


def episode_config(bench, conf):
    ec = conf.recovery.episode
    return EpisodeConfig(steps=ec.steps or bench.horizon_steps, dt=bench.dt, substeps=ec.substeps,
                         n_particles=ec.n_particles, initial_cov_scale=bench.initial_cov_scale,
                         measurement_std=ec.measurement_std, prediction=ec.prediction, estimate=ec.estimate,
                         mle_every=ec.mle_every, mle_window=ec.mle_window, mmd_every=ec.mmd_every, seed=conf.seed)


def recover_episode(bench, conf, model=None, cert=None, fault=None, w_hat=None):
    fault = fault or bench.ood_fault
    config = episode_config(bench, conf)
    if w_hat is not None:
        w_hat = np.asarray(OmegaConf.to_container(w_hat) if OmegaConf.is_config(w_hat) else w_hat, dtype=float)
        config = replace(config, estimate="fixed")
    return run_recovery(bench.system, fault, bench.reference(config.steps), config,
                        RecoveryWeights.from_config(conf.recovery), model, w_hat,
                        MLEConfig.from_config(conf.mle, conf.seed), GMMConfig.from_config(conf.gmm), cert, bench.box)


def ood_single(bench, conf, model=None, cert=None):
    """Continuous inference and matched-noise recovery for the benchmark's OOD fault."""
    thr = conf.experiment.thresholds
    fault = bench.ood_fault
    episode = recover_episode(bench, conf, model, cert, fault, conf.recovery.w_hat)
    times, _, ys = simulate_measurements(bench, fault, episode.times.size - 1, conf.inference.measurement_std,
                                         conf.seed)
    R = conf.inference.measurement_std ** 2 * np.eye(ys.shape[1])
    est = fit_continuous_fault(ys, bench.system, _initial_estimate(bench, ys), 0.0, bench.dt, R,
                               MLEConfig.from_config(conf.mle, conf.seed), bench.box)
    inference_error = float(np.linalg.norm(est.w - fault.w))
    summary = {"true_fault": fault.w.tolist(), "w_hat": est.w.tolist(), "inference_error": inference_error,
               "episode": episode.summary, "replans": episode.plans}
    checks = {
        "inference_error": inference_error <= thr.fault_error,
        "terminal_improvement": episode.summary["terminal_improvement"] >= thr.terminal_improvement,
        "mean_improvement": episode.summary["mean_improvement"] >= thr.mean_improvement,
    }
    frame = episode.to_frame()
    frame["fault_error"] = np.linalg.norm(episode.w_hat - fault.w, axis=1)
    return Report("ood_single", summary, checks, {"trajectory": frame})


def ood_sweep(bench, conf, model=None, cert=None):
    """Continuous MLE over uniformly drawn faults in the parameter box."""
    ec = conf.experiment
    steps = ec.sweep_steps or bench.horizon_steps
    rng = np.random.default_rng(conf.seed)
    lo, hi = bench.box
    faults = lo + (hi - lo) * rng.uniform(size=(ec.sweep_faults, bench.system.fault_dim))
    mle_conf = MLEConfig.from_config(conf.mle, conf.seed)
    rows = []
    for j, w in enumerate(faults):
        _, _, ys = simulate_measurements(bench, bench.fault(w), steps, conf.inference.measurement_std,
                                         conf.seed + 1 + j)
        R = conf.inference.measurement_std ** 2 * np.eye(ys.shape[1])
        est = fit_continuous_fault(ys, bench.system, _initial_estimate(bench, ys), 0.0, bench.dt, R, mle_conf,
                                   bench.box)
        row = {f"w_true{i}": v for i, v in enumerate(w)}
        row.update({f"w_hat{i}": v for i, v in enumerate(est.w)})
        row.update(error=float(np.linalg.norm(est.w - w)), objective=est.objective)
        rows.append(row)
        log.info(f"Sweep fault {j}: error {row['error']:.4g}")
    frame = pd.DataFrame(rows)
    summary = {"n_faults": len(faults), "mean_error": float(frame.error.mean()), "max_error": float(frame.error.max()),
               "steps": steps}
    return Report("ood_sweep", summary, {"mean_error": summary["mean_error"] <= ec.thresholds.sweep_fault_error},
                  {"faults": frame})


def separation(bench, conf, model=None, cert=None):
    """One-step W2 separation of nominal and OOD densities against the detectability certificate."""
    ec = conf.experiment
    system, dt = bench.system, bench.dt
    nominal, fault = FaultProfile.nominal(system.fault_dim), bench.ood_fault
    rows = []
    for r, rng in enumerate(spawn_rngs(conf.seed, ec.separation_rollouts)):
        x = bench.sample_initial(rng, ec.separation_particles)
        # common noise for both flows
        noise = rng.standard_normal((len(x), 1, system.noise_dim))
        flow_i = simulate(ClosedLoopField(system, nominal), x, 0.0, dt, 1, noise=noise)
        flow_j = simulate(ClosedLoopField(system, fault), x, 0.0, dt, 1, noise=noise)
        sep = wasserstein2(ParticleEnsemble(flow_i[-1]), ParticleEnsemble(flow_j[-1]), conf.transport.mode)[0]
        samples = np.concatenate([flow_i[0], flow_i[1], flow_j[1]])
        u = system.saturate(system.u_cl(samples, 0.0))
        gap = estimate_score_gap([ParticleEnsemble(e) for e in flow_i], [ParticleEnsemble(e) for e in flow_j])
        inputs = DetectabilityInputs(
            psi_bar=sampled_sup_norm(system.psi(samples, 0.0, u)),
            sigma_bar=sampled_sup_norm(system.Sigma(samples, 0.0)),
            score_gap=gap.value, fault_gap=float(np.linalg.norm(fault.w - nominal.w)),
            alpha=log_norm_rate(ClosedLoopField(system, nominal), samples))
        report = detectability_certificate(inputs, dt, ec.separation_eps)
        rows.append({"rollout": r, "separation": sep, "bound": report.bound, "d_bar": report.d_bar,
                     "alpha": inputs.alpha, "score_gap": gap.value, "regularized": gap.regularized})
    frame = pd.DataFrame(rows)
    holds = bool(np.all(frame.separation <= frame.bound))
    summary = {"median_separation": float(frame.separation.median()), "median_bound": float(frame.bound.median()),
               "fraction_within_bound": float(np.mean(frame.separation <= frame.bound)), "dt": dt}
    return Report("separation", summary, {"within_bound": holds}, {"rollouts": frame})


def operator_gap(bench, conf, model=None, cert=None):
    """W2 between the composed learned operator and the true SDE marginal, against the composed bound."""
    if model is None or cert is None:
        raise ConfigurationError("operator_gap needs a trained checkpoint and its certificate")
    ec = conf.experiment
    K, fault = ec.gap_steps, bench.ood_fault
    rng_init, rng_proc = spawn_rngs(conf.seed, 2)
    x0 = bench.sample_initial(rng_init, ec.gap_particles)
    truth = simulate(ClosedLoopField(bench.system, fault), x0, 0.0, bench.dt, K, rng=rng_proc)
    ens, rows = ParticleEnsemble(x0), []
    for k in range(K):
        ens = apply_operator(model, ens, k * bench.dt, (k + 1) * bench.dt, fault.w)
        w2 = wasserstein2(ens, ParticleEnsemble(truth[k + 1]), conf.transport.mode)[0]
        rows.append({"t": (k + 1) * bench.dt, "w2": w2,
                     "bound": composed_operator_bound(cert, k + 1)})
    frame = pd.DataFrame(rows)
    summary = {"terminal_gap": float(frame.w2.iloc[-1]), "composed_bound": float(frame.bound.iloc[-1]),
               "delta_w": cert.delta_w, "steps": K}
    return Report("operator_gap", summary, {"within_bound": summary["terminal_gap"] <= summary["composed_bound"]},
                  {"series": frame})


def reproduce(name, conf, out_dir=None):
    """Run a named experiment (or "all"), write its files and return the reports."""
    names = EXPERIMENTS if name == "all" else (name,)
    unknown = [n for n in names if n not in EXPERIMENTS]
    if unknown:
        raise ConfigurationError(f"unknown experiment {unknown[0]!r}, expected one of {EXPERIMENTS} or 'all'")
    out_dir = pathlib.Path(out_dir or conf.output.dir)
    bench = build_benchmark(conf.system)
    needs_model = "operator_gap" in names or (
        "ood_single" in names and conf.recovery.episode.prediction == "learned-operator")
    model = cert = None
    if needs_model:
        model, metric, schedule, _ = load_checkpoint(checkpoint_path(conf))
        if "operator_gap" in names:
            cert, table = certify_operator(bench, conf, model, metric, schedule, make_dataset(bench, conf))
            write_json(out_dir / "certificate.json", {**table, "config_hash": config_hash(conf)})
    runners = {"ood_single": ood_single, "ood_sweep": ood_sweep, "separation": separation,
               "operator_gap": operator_gap}
    reports = []
    for n in names:
        report = runners[n](bench, conf, model, cert)
        report.write(out_dir, config_hash(conf), conf.seed)
        reports.append(report)
    return reports
