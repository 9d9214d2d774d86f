"""Low-dimensional testbeds: the 2D contracting linear toy and an affine system with a closed-form certificate."""
from dataclasses import dataclass, field

import numpy as np

from pfo_fdir.certificates import ContractionCertificate
from pfo_fdir.dynamics import FaultProfile, linear_system

TOY_A = [[-1.0, 0.8], [-0.8, -1.0]]
TOY_PSI = [[1.0], [0.5]]


@dataclass
class ToyParams:
    A: np.ndarray = field(default_factory=lambda: np.array(TOY_A))
    psi: np.ndarray = field(default_factory=lambda: np.array(TOY_PSI))
    noise: float = 0.1
    dt: float = 0.05
    horizon_steps: int = 40
    initial_mean: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.5]))
    initial_cov_scale: float = 1e-2

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        self.initial_mean = np.asarray(self.initial_mean, dtype=float)

    @classmethod
    def from_config(cls, conf):
        return cls(**{k: conf[k] for k in cls.__dataclass_fields__ if k in conf and conf[k] is not None})


def build_toy(params=None):
    """dx = (A x + u + psi w) dt + noise dW, fully actuated, no nominal feedback."""
    p = params or ToyParams()
    n = p.A.shape[0]
    return linear_system(p.A, np.eye(n), p.psi, p.noise, name="toy")


def toy_library(values=((0.0,), (1.0,))):
    return [FaultProfile(w, label=j) for j, w in enumerate(values)]


@dataclass
class AffineTestbed:
    """dx = (-a x + psi w) dt + noise dW on R^n.

    Under the identity metric every pair of flows contracts at rate a, and two
    faults differ by the constant drift psi (w_i - w_j), so the contraction
    certificate is known exactly.
    """

    a: float = 1.0
    n: int = 2
    psi: np.ndarray = None
    noise: float = 0.1

    def __post_init__(self):
        if self.psi is None:
            self.psi = np.ones((self.n, 1))
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))

    def system(self):
        return linear_system(-self.a * np.eye(self.n), np.eye(self.n), self.psi, self.noise, name="affine")

    def certificate(self, w_i, w_j):
        gap = np.linalg.norm(self.psi @ (np.atleast_1d(w_i) - np.atleast_1d(w_j)))
        return ContractionCertificate(alpha=-self.a, d_bar=float(gap), time_unit="physical")

    def mean(self, m0, w, t):
        """Mean of the marginal at time t started from mean m0."""
        decay = np.exp(-self.a * t)
        return decay * np.asarray(m0, dtype=float) + (1.0 - decay) / self.a * (self.psi @ np.atleast_1d(w))

    def cov(self, S0, t):
        decay = np.exp(-2.0 * self.a * t)
        return decay * np.asarray(S0, dtype=float) + self.noise ** 2 * (1.0 - decay) / (2.0 * self.a) * np.eye(self.n)
