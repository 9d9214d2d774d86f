"""10-state spacecraft attitude benchmark with four tetrahedral reaction wheels.

State x = [theta (3), omega (3), omega_w (4)] with small-angle kinematics
theta_dot = omega. Wheel loss of effectiveness alpha enters the additive fault
channel as psi(x, t, u) alpha = -g(x, t) diag(alpha) u.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from opt_einsum import contract as einsum

from pfo_fdir.dynamics import ClosedLoopField, FaultProfile, SystemModel, simulate
from pfo_fdir.errors import ConfigurationError

log = logging.getLogger(__name__)

N_STATE, N_WHEEL = 10, 4
THETA, OMEGA, WHEELS = slice(0, 3), slice(3, 6), slice(6, 10)


def tetrahedral_allocation():
    """Spin axes of four wheels along the vertices of a regular tetrahedron."""
    return np.array([[1, 1, -1, -1],
                     [1, -1, 1, -1],
                     [1, -1, -1, 1]], dtype=float) / np.sqrt(3.0)


@dataclass
class SpacecraftParams:
    inertia: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 0.8]))
    wheel_inertia: float = 0.01
    kp: np.ndarray = field(default_factory=lambda: np.array([22.5, 18.0, 15.0]))
    kd: np.ndarray = field(default_factory=lambda: np.array([12.0, 9.0, 7.5]))
    torque_limit: float = 0.14
    dt: float = 0.02
    horizon_steps: int = 500
    noise_rate: float = 0.02
    noise_wheel: float = 0.02
    initial_cov_scale: float = 1e-4
    allocation: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.kp = np.asarray(self.kp, dtype=float)
        self.kd = np.asarray(self.kd, dtype=float)
        if self.allocation is None:
            self.allocation = tetrahedral_allocation()
        self.allocation = np.asarray(self.allocation, dtype=float)
        if np.any(self.inertia <= 0) or self.wheel_inertia <= 0:
            raise ConfigurationError("inertias must be positive")
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ConfigurationError("PD gains must be positive")
        if self.allocation.shape != (3, N_WHEEL):
            raise ConfigurationError(f"allocation must be 3x4, got {self.allocation.shape}")
        if not np.allclose(np.linalg.norm(self.allocation, axis=0), 1.0, atol=1e-12):
            raise ConfigurationError("allocation columns must be unit vectors")

    @classmethod
    def from_config(cls, conf):
        kw = {k: (np.asarray(v) if isinstance(v, (list, tuple)) else v) for k, v in dict(conf).items()
              if k in cls.__dataclass_fields__ and v is not None}
        return cls(**kw)

    @property
    def allocation_pinv(self):
        return np.linalg.pinv(self.allocation)

    @property
    def horizon(self):
        return self.dt * self.horizon_steps


def desired_attitude(t):
    t = np.asarray(t, dtype=float)
    w = 0.2 * np.pi
    return np.stack([0.05 * np.sin(w * t), 0.05 * np.cos(w * t), np.pi / 250 * t], axis=-1)


def desired_rate(t):
    t = np.asarray(t, dtype=float)
    w = 0.2 * np.pi
    return np.stack([0.05 * w * np.cos(w * t), -0.05 * w * np.sin(w * t), np.full_like(t, np.pi / 250)], axis=-1)


def nominal_initial_state(t0=0.0):
    x = np.zeros(N_STATE)
    x[THETA] = desired_attitude(t0)
    x[OMEGA] = desired_rate(t0)
    return x


def build_spacecraft(params=None, check_dims=True):
    p = params or SpacecraftParams()
    I = p.inertia
    A = p.allocation
    A_pinv = p.allocation_pinv
    Jw = p.wheel_inertia

    G = np.zeros((N_STATE, N_WHEEL))
    G[OMEGA] = A / I[:, None]
    G[WHEELS] = np.eye(N_WHEEL) / Jw

    def drift(x, t):
        omega, omega_w = x[:, OMEGA], x[:, WHEELS]
        h = omega * I + Jw * einsum("ij,nj->ni", A, omega_w)
        out = np.zeros_like(x)
        out[:, THETA] = omega
        out[:, OMEGA] = -np.cross(omega, h) / I
        return out

    def control_gain(x, t):
        return np.broadcast_to(G, (len(x), N_STATE, N_WHEEL))

    def nominal_feedback(x, t):
        u_nom = -p.kp * (x[:, THETA] - desired_attitude(t)) - p.kd * x[:, OMEGA]
        return np.clip(einsum("ij,nj->ni", A_pinv, u_nom), -p.torque_limit, p.torque_limit)

    def fault_channel(x, t, u):
        return -G[None, :, :] * u[:, None, :]

    c = np.zeros(N_STATE)
    c[OMEGA] = p.noise_rate
    c[WHEELS] = p.noise_wheel

    def diffusion(x, t):
        d = c * np.abs(x)
        return d[:, :, None] * np.eye(N_STATE)[None]

    def diffusion_divergence(x, t):
        # Sigma_ii = c_i^2 x_i^2
        return 2.0 * c ** 2 * x

    model = SystemModel(
        state_dim=N_STATE, control_dim=N_WHEEL, fault_dim=N_WHEEL, noise_dim=N_STATE,
        drift=drift, control_gain=control_gain, fault_channel=fault_channel,
        diffusion=diffusion, nominal_feedback=nominal_feedback,
        diffusion_divergence=diffusion_divergence, input_limit=p.torque_limit,
        check_dims=check_dims, name="spacecraft",
    )
    log.debug(f"Built spacecraft model, I={I}, J_w={Jw}, dt={p.dt}")
    return model


def nominal_trajectory(model, params, steps=None, t0=0.0, x0=None):
    """Noise-free zero-fault closed-loop reference, (steps + 1, n)."""
    steps = params.horizon_steps if steps is None else steps
    x0 = nominal_initial_state(t0) if x0 is None else x0
    field_ = ClosedLoopField(model, FaultProfile.nominal(model.fault_dim))
    return simulate(field_, x0, t0, params.dt, steps, deterministic=True)[:, 0]


def loss_of_effectiveness(alpha, label=None):
    return FaultProfile(alpha, label=label, bounded=True)
