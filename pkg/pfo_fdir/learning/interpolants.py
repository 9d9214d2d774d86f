"""Stochastic interpolants I_tau = alpha x_s + beta x_t + gamma z between paired samples."""
import math
from dataclasses import dataclass

import numpy as np
import torch

from pfo_fdir.errors import ArgumentError


def _xp(tau):
    return torch if torch.is_tensor(tau) else np


@dataclass
class InterpolantSchedule:
    """Schedules with alpha_0 = beta_1 = 1, alpha_1 = beta_0 = 0 and gamma_0 = gamma_1 = 0.

    kind "linear": alpha = 1 - tau, beta = tau
    kind "trig":   alpha = cos(pi tau / 2), beta = sin(pi tau / 2)
    gamma_tau = gamma0 sin(pi tau) in both cases.
    """

    gamma0: float = 0.0
    kind: str = "linear"

    def __post_init__(self):
        if self.gamma0 < 0:
            raise ArgumentError(f"gamma0 must be >= 0, got {self.gamma0}")
        if self.kind not in ("linear", "trig"):
            raise ArgumentError(f"unknown interpolant schedule {self.kind!r}")

    @classmethod
    def from_config(cls, conf, state_scale=1.0):
        return cls(gamma0=float(conf.gamma0_rel) * state_scale, kind=conf.get("kind", "linear"))

    def alpha(self, tau):
        xp = _xp(tau)
        return 1 - tau if self.kind == "linear" else xp.cos(0.5 * math.pi * tau)

    def beta(self, tau):
        xp = _xp(tau)
        return tau if self.kind == "linear" else xp.sin(0.5 * math.pi * tau)

    def gamma(self, tau):
        return self.gamma0 * _xp(tau).sin(math.pi * tau)

    def alpha_dot(self, tau):
        xp = _xp(tau)
        return -xp.ones_like(tau) if self.kind == "linear" else -0.5 * math.pi * xp.sin(0.5 * math.pi * tau)

    def beta_dot(self, tau):
        xp = _xp(tau)
        return xp.ones_like(tau) if self.kind == "linear" else 0.5 * math.pi * xp.cos(0.5 * math.pi * tau)

    def gamma_dot(self, tau):
        return self.gamma0 * math.pi * _xp(tau).cos(math.pi * tau)

    def interpolate(self, x_s, x_t, tau, z=None):
        """Returns (I_tau, dI_tau/dtau); tau broadcasts against the state batch."""
        I = self.alpha(tau) * x_s + self.beta(tau) * x_t
        dI = self.alpha_dot(tau) * x_s + self.beta_dot(tau) * x_t
        if z is not None and self.gamma0 > 0:
            I = I + self.gamma(tau) * z
            dI = dI + self.gamma_dot(tau) * z
        return I, dI


def sample_interpolant(pair, tau, z, schedule):
    """(I_tau, dI_tau) for a single TrajectoryPair."""
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError(f"tau must lie in [0, 1], got {tau}")
    tau = np.float64(tau)
    z = None if z is None else np.asarray(z, dtype=float)
    return schedule.interpolate(np.asarray(pair.x_s, dtype=float), np.asarray(pair.x_t, dtype=float), tau, z)
