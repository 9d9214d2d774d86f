"""Multiple-hypothesis particle bank over a library of fault profiles."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from pfo_fdir.density_transport import ParticleEnsemble
from pfo_fdir.dynamics import FaultProfile
from pfo_fdir.errors import ArgumentError
from pfo_fdir.inference.propagators import make_propagator

log = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    fault: FaultProfile
    ensemble: ParticleEnsemble
    log_weight: float


@dataclass
class HypothesisBank:
    """Per-hypothesis filtered ensembles plus a posterior over the library.

    `observation` maps a (N, n) state batch to (N, n_y); identity by default.
    `fallback` records whether the last update hit the uniform fallback.
    """

    hypotheses: List[Hypothesis]
    R: np.ndarray
    observation: Optional[Callable] = None
    history: List[tuple] = field(default_factory=list)
    fallback: bool = False

    def __post_init__(self):
        if not self.hypotheses:
            raise ArgumentError("hypothesis bank needs at least one fault profile")
        sizes = {h.ensemble.size for h in self.hypotheses}
        if len(sizes) != 1:
            raise ArgumentError(f"hypothesis ensembles differ in size: {sorted(sizes)}")
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        _cholesky(self.R)
        if self.observation is None:
            self.observation = lambda x: x

    @classmethod
    def from_library(cls, library, ensemble, R, observation=None):
        lw = -np.log(len(library))
        return cls([Hypothesis(f, ensemble, lw) for f in library], R, observation)

    @property
    def log_weights(self):
        return np.array([h.log_weight for h in self.hypotheses])

    @property
    def weights(self):
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    @property
    def faults(self):
        return np.stack([h.fault.w for h in self.hypotheses])

    def map_index(self):
        return int(np.argmax(self.log_weights))


def _cholesky(R):
    if R.shape[0] != R.shape[1] or not np.allclose(R, R.T):
        raise ArgumentError("measurement covariance R must be square and symmetric")
    try:
        return cho_factor(R, lower=True)
    except LinAlgError:
        raise ArgumentError("measurement covariance R is not positive definite") from None


def particle_log_likelihoods(ensemble, y, h, R):
    """-1/2 |h(x_i) - y|^2_{R^-1} per particle."""
    c = _cholesky(np.atleast_2d(np.asarray(R, dtype=float)))
    r = np.asarray(h(ensemble.points), dtype=float) - np.asarray(y, dtype=float)
    return -0.5 * np.sum(r * cho_solve(c, r.T).T, axis=1)


def log_predictive_likelihood(ensemble, y, h, R):
    return float(logsumexp(particle_log_likelihoods(ensemble, y, h, R), b=ensemble.weights))


def predictive_likelihood(ensemble, y, h, R):
    """Unnormalised sum_i w_i exp(-1/2 |h(x_i) - y|^2_{R^-1}), computed in the log domain."""
    return float(np.exp(log_predictive_likelihood(ensemble, y, h, R)))


def predict_bank(bank, system, t_k, t_next, mode="true-flow", model=None, rng=None, substeps=1,
                 process_noise=True, correction=None):
    """Push every hypothesis ensemble from t_k to t_next under its own fault.

    `correction` is the recovery command held over the interval (true-flow mode only).
    """
    propagate = make_propagator(mode, system, model, substeps, process_noise)
    hyps = [replace(h, ensemble=propagate(h.ensemble, h.fault.w, t_k, t_next, rng, correction))
            for h in bank.hypotheses]
    return replace(bank, hypotheses=hyps, history=list(bank.history))


def update_posterior(bank, y, t=None, rng=None, resample=True):
    """Bayes update of the library posterior and of each hypothesis' particle weights.

    Particles are resampled systematically when their effective sample size
    drops below half the ensemble size and an rng is given. If every
    likelihood underflows the posterior falls back to uniform.
    """
    y = np.asarray(y, dtype=float)
    hyps, log_like = [], []
    for h in bank.hypotheses:
        ll = particle_log_likelihoods(h.ensemble, y, bank.observation, bank.R)
        total = logsumexp(ll, b=h.ensemble.weights)
        log_like.append(total)
        ens = h.ensemble
        if np.isfinite(total):
            lw = np.log(np.maximum(ens.weights, 1e-300)) + ll
            ens = ParticleEnsemble(ens.points, np.exp(lw - logsumexp(lw)), ens.timestamp)
            if resample and rng is not None and ens.ess() < ens.size / 2:
                ens = ens.resample(rng)
        hyps.append(replace(h, ensemble=ens))
    lw = bank.log_weights + np.asarray(log_like)
    fallback = not np.any(np.isfinite(lw))
    if fallback:
        log.warning(f"All hypothesis likelihoods vanished at t={t}; posterior reset to uniform")
        lw = np.zeros(len(hyps))
    lw = lw - logsumexp(lw)
    for h, v in zip(hyps, lw):
        h.log_weight = float(v)
    return replace(bank, hypotheses=hyps, history=bank.history + [(t, y)], fallback=fallback)
