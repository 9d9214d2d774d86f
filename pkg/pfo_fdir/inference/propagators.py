"""One-step density propagators used by the hypothesis bank and the MLE rollouts."""
from dataclasses import dataclass

import numpy as np
from opt_einsum import contract as einsum

from pfo_fdir.density_transport import pushforward
from pfo_fdir.dynamics import ClosedLoopField, FaultProfile, SystemModel, rk4_step
from pfo_fdir.errors import ConfigurationError, NumericError
from pfo_fdir.learning.training import apply_operator

MODES = ("true-flow", "learned-operator")


class RowFaultField:
    """Closed-loop field whose fault parameters differ per batch row.

    Args:
        w: (B, p) fault parameters, row i used for state row i
        correction: optional constant recovery correction (m,) or (B, m)
    """

    def __init__(self, system, w, correction=None):
        self.system = system
        self.w = np.atleast_2d(np.asarray(w, dtype=float))
        correction = None if correction is None else np.asarray(correction, dtype=float)
        self.field = ClosedLoopField(system, FaultProfile.nominal(system.fault_dim),
                                     None if correction is None else (lambda x, t: correction))

    def __call__(self, x, t):
        return self.field.evaluate(x, t, self.w)


@dataclass
class TrueFlowPropagator:
    """Particles pushed by the fault-indexed system itself.

    With `process_noise` (and an rng at call time) each step is Euler-Maruyama
    on `substeps` sub-intervals; otherwise the deterministic RK4 flow is used.
    """

    system: SystemModel
    substeps: int = 1
    process_noise: bool = True

    def __call__(self, ensemble, w, s, t, rng=None, correction=None):
        W = np.broadcast_to(np.asarray(w, dtype=float), (ensemble.size, self.system.fault_dim))
        field = RowFaultField(self.system, W, correction)
        h = (t - s) / self.substeps

        def step(x):
            for j in range(self.substeps):
                tj = s + j * h
                if self.process_noise and rng is not None:
                    x = x + field(x, tj) * h + np.sqrt(h) * einsum(
                        "nij,nj->ni", self.system.sigma(x, tj), rng.standard_normal((len(x), self.system.noise_dim)))
                else:
                    x = rk4_step(field, x, tj, h)
            if not np.all(np.isfinite(x)):
                raise NumericError("true-flow prediction diverged", term="predict")
            return x

        return pushforward(ensemble, step, timestamp=t)


@dataclass
class LearnedOperatorPropagator:
    """Learned flow map; the recovery correction is not an input of the operator."""

    model: object

    def __call__(self, ensemble, w, s, t, rng=None, correction=None):
        return apply_operator(self.model, ensemble, s, t, w)


def make_propagator(mode, system=None, model=None, substeps=1, process_noise=True):
    if mode == "true-flow":
        if system is None:
            raise ConfigurationError("true-flow prediction needs the system model")
        return TrueFlowPropagator(system, substeps, process_noise)
    if mode == "learned-operator":
        if model is None:
            raise ConfigurationError("learned-operator prediction needs a trained checkpoint")
        return LearnedOperatorPropagator(model)
    raise ConfigurationError(f"unknown prediction mode {mode!r}, expected one of {MODES}")
