"""Control-affine fault systems, closed-loop fields and integrators.

All maps are vectorised over a leading batch axis: states are (N, n) arrays and
every SystemModel callable returns the batched value, e.g. control_gain gives
(N, n, m). Single points (n,) are accepted by the public operations and
returned in the same shape.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from opt_einsum import contract as einsum

from pfo_fdir.errors import ArgumentError, ConfigurationError, NumericError
from pfo_fdir.util import as_batch, check_finite, spawn_rngs

log = logging.getLogger(__name__)


@dataclass
class FaultProfile:
    """Fault parameters w; the nominal profile is w = 0 exactly."""

    w: np.ndarray
    label: Optional[int] = None
    bounded: bool = False

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        assert self.w.ndim == 1, "fault parameters must be a vector"
        check_finite(self.w, "fault parameters")
        if self.bounded and (np.any(self.w < 0.0) or np.any(self.w > 1.0)):
            raise ArgumentError(f"fault parameters {self.w} outside [0, 1]")

    @classmethod
    def nominal(cls, p, bounded=False):
        return cls(np.zeros(p), label=0, bounded=bounded)

    @property
    def is_nominal(self):
        return not np.any(self.w)


@dataclass
class SystemModel:
    """Closed-loop fault-indexed stochastic system

        dx = [f + g (u_cl + u_rec) + psi w] dt + sigma dW,  y = h(x).

    fault_channel receives the applied control as a third argument so that
    control-dependent channels (actuator loss of effectiveness) fit the
    additive form; channels that do not need it ignore it.
    """

    state_dim: int
    control_dim: int
    fault_dim: int
    noise_dim: int
    drift: Callable
    control_gain: Callable
    fault_channel: Callable
    diffusion: Callable
    nominal_feedback: Callable
    observation: Optional[Callable] = None
    obs_dim: Optional[int] = None
    diffusion_divergence: Optional[Callable] = None
    input_limit: Optional[float] = None
    check_dims: bool = True
    name: str = "system"

    def __post_init__(self):
        for k in ("state_dim", "control_dim", "fault_dim", "noise_dim"):
            if getattr(self, k) < 0 or (k == "state_dim" and self.state_dim < 1):
                raise ConfigurationError(f"{self.name}: invalid {k}={getattr(self, k)}")
        if self.observation is None:
            self.observation = lambda x: x
            self.obs_dim = self.state_dim
        elif self.obs_dim is None:
            raise ConfigurationError(f"{self.name}: obs_dim required with a custom observation map")

    def _checked(self, term, value, shape):
        value = np.asarray(value, dtype=float)
        if self.check_dims and value.shape != shape:
            raise ConfigurationError(f"{self.name}: {term} has shape {value.shape}, expected {shape}")
        check_finite(value, term)
        return value

    def f(self, x, t):
        return self._checked("drift", self.drift(x, t), x.shape)

    def g(self, x, t):
        return self._checked("control_gain", self.control_gain(x, t), (len(x), self.state_dim, self.control_dim))

    def psi(self, x, t, u):
        return self._checked("fault_channel", self.fault_channel(x, t, u), (len(x), self.state_dim, self.fault_dim))

    def sigma(self, x, t):
        return self._checked("diffusion", self.diffusion(x, t), (len(x), self.state_dim, self.noise_dim))

    def u_cl(self, x, t):
        return self._checked("nominal_feedback", self.nominal_feedback(x, t), (len(x), self.control_dim))

    def h(self, x):
        return self._checked("observation", self.observation(x), (len(x), self.obs_dim))

    def Sigma(self, x, t):
        s = self.sigma(x, t)
        return einsum("nij,nkj->nik", s, s)

    def sigma_divergence(self, x, t, eps=1e-6):
        """Row divergence [div Sigma]_i = sum_j d Sigma_ij / d x_j."""
        if self.diffusion_divergence is not None:
            return self._checked("diffusion_divergence", self.diffusion_divergence(x, t), x.shape)
        div = np.zeros_like(x)
        for j in range(self.state_dim):
            h = eps * np.maximum(1.0, np.abs(x[:, j]))
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            dS = (self.Sigma(xp, t) - self.Sigma(xm, t)) / (2 * h)[:, None, None]
            div += dS[:, :, j]
        return div

    def saturate(self, u):
        if self.input_limit is None:
            return u
        return np.clip(u, -self.input_limit, self.input_limit)


@dataclass
class ClosedLoopField:
    """F_w(x, t) for a fixed fault profile and optional recovery correction.

    `w` may be overridden per batch row (shape (N, p)) by `evaluate`, which is
    how candidate faults are rolled out together.
    """

    base: SystemModel
    fault: FaultProfile
    recovery_correction: Optional[Callable] = None

    def __post_init__(self):
        if self.fault.w.shape != (self.base.fault_dim,):
            raise ConfigurationError(
                f"fault has {self.fault.w.shape[0]} parameters, {self.base.name} expects {self.base.fault_dim}")

    def control(self, x, t):
        u = self.base.u_cl(x, t)
        if self.recovery_correction is not None:
            u_rec = np.asarray(self.recovery_correction(x, t), dtype=float)
            u = u + np.broadcast_to(u_rec, u.shape)
        # saturation is applied to the blended command
        return self.base.saturate(u)

    def evaluate(self, x, t, w=None):
        w = self.fault.w if w is None else np.asarray(w, dtype=float)
        u = self.control(x, t)
        out = self.base.f(x, t) + einsum("nij,nj->ni", self.base.g(x, t), u)
        if np.any(w):
            w = np.broadcast_to(w, (len(x), self.base.fault_dim))
            out = out + einsum("nij,nj->ni", self.base.psi(x, t, u), w)
        check_finite(out, "closed-loop field")
        return out

    def __call__(self, x, t):
        return self.evaluate(x, t)


def eval_closed_loop(field, x, t):
    """f + g (u_cl + u_rec) + psi w at (x, t); accepts (n,) or (N, n)."""
    xb, single = as_batch(x)
    check_finite(xb, "state")
    out = field.evaluate(xb, float(t))
    return out[0] if single else out


def step_sde(field, x, t, dt, rng=None, noise=None, diffusion=None):
    """One Euler-Maruyama step x + F dt + sigma sqrt(dt) z.

    Args:
        field: ClosedLoopField
        x: (n,) or (N, n) state
        rng: generator used when `noise` is not given
        noise: explicit standard normals z of shape (N, q)
        diffusion: overrides field.base.sigma
    """
    if dt <= 0:
        raise ArgumentError(f"dt must be positive, got {dt}")
    xb, single = as_batch(x)
    sigma = (diffusion or field.base.sigma)(xb, t)
    if noise is None:
        assert rng is not None, "step_sde needs an rng or explicit noise"
        noise = rng.standard_normal((len(xb), sigma.shape[-1]))
    noise = np.asarray(noise, dtype=float).reshape(len(xb), sigma.shape[-1])
    out = xb + field.evaluate(xb, t) * dt + np.sqrt(dt) * einsum("nij,nj->ni", sigma, noise)
    check_finite(out, "sde step")
    return out[0] if single else out


def rk4_step(field, x, t, h):
    k1 = field(x, t)
    k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def flow_map(field, x, s, t, steps=1):
    """RK4 two-time flow map Phi_{s,t}(x) of a deterministic field(x, t)."""
    if t < s:
        raise ArgumentError(f"flow map needs s <= t, got s={s}, t={t}")
    if steps < 1:
        raise ArgumentError(f"steps must be >= 1, got {steps}")
    xb, single = as_batch(x)
    if t == s:
        return np.array(x, dtype=float, copy=True)
    h = (t - s) / steps
    for k in range(steps):
        xb = rk4_step(field, xb, s + k * h, h)
        if not np.all(np.isfinite(xb)):
            raise NumericError(f"flow map diverged at step {k}", term="flow_map", index=k)
    return xb[0] if single else xb


@dataclass
class ProbabilityFlowField:
    """v_w = F_w - 1/2 [div Sigma + Sigma s]."""

    closed_loop: ClosedLoopField
    score_estimator: Optional[Callable] = None
    divergence_of_sigma: Optional[Callable] = None

    def __call__(self, x, t):
        return probability_flow_field(self, x, t)


def probability_flow_field(pf, x, t):
    if pf.score_estimator is None:
        raise ConfigurationError("probability flow field needs a score estimator")
    xb, single = as_batch(x)
    model = pf.closed_loop.base
    F = pf.closed_loop.evaluate(xb, t)
    div = pf.divergence_of_sigma(xb, t) if pf.divergence_of_sigma is not None else model.sigma_divergence(xb, t)
    score = np.asarray(pf.score_estimator(xb, t), dtype=float).reshape(xb.shape)
    out = F - 0.5 * (div + einsum("nij,nj->ni", model.Sigma(xb, t), score))
    check_finite(out, "probability flow field")
    return out[0] if single else out


def gaussian_score(points, weights=None, floor=1e-10):
    """Score of the Gaussian fitted to a particle cloud, s(x) = -Sigma^{-1}(x - mu)."""
    points = np.asarray(points, dtype=float)
    mu = np.average(points, axis=0, weights=weights)
    cov = np.atleast_2d(np.cov(points, rowvar=False, aweights=weights, bias=True))
    scale = max(np.trace(cov) / len(cov), 1.0)
    prec = np.linalg.inv(cov + floor * scale * np.eye(len(cov)))

    def score(x, t=None):
        return -(np.asarray(x) - mu) @ prec

    return score


def probability_flow_map(closed_loop, points, s, t, steps=1):
    """Push particles through the probability flow with a per-step Gaussian score fit."""
    x = np.asarray(points, dtype=float)
    h = (t - s) / steps
    for k in range(steps):
        pf = ProbabilityFlowField(closed_loop, score_estimator=gaussian_score(x))
        x = rk4_step(pf, x, s + k * h, h)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"probability flow diverged at step {k}", term="probability_flow", index=k)
    return x


def simulate(field, x0, t0, dt, steps, noise=None, rng=None, substeps=1, deterministic=False):
    """Roll a batch forward with Euler-Maruyama (or RK4 if deterministic).

    Args:
        noise: (N, steps * substeps, q) standard normals; drawn from rng if None
    Returns:
        (steps + 1, N, n) state history on the coarse grid
    """
    x = np.array(as_batch(x0)[0], dtype=float)
    h = dt / substeps
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    if not deterministic and noise is None:
        assert rng is not None, "simulate needs noise or an rng"
        noise = rng.standard_normal((len(x), steps * substeps, field.base.noise_dim))
    for k in range(steps):
        for j in range(substeps):
            t = t0 + k * dt + j * h
            if deterministic:
                x = rk4_step(field, x, t, h)
            else:
                x = step_sde(field, x, t, h, noise=noise[:, k * substeps + j])
            if not np.all(np.isfinite(x)):
                raise NumericError(f"rollout diverged at step {k}", term="simulate", index=k)
        out[k + 1] = x
    return out


@dataclass
class TrajectoryPair:
    x_s: np.ndarray
    x_t: np.ndarray
    s: float
    t: float
    fault: FaultProfile
    seed: int

    def __post_init__(self):
        if not self.s < self.t:
            raise ArgumentError(f"pair needs s < t, got s={self.s}, t={self.t}")
        check_finite(self.x_s, "x_s")
        check_finite(self.x_t, "x_t")


@dataclass
class PairDataset:
    """Columnar store of trajectory pairs; indexing yields TrajectoryPair."""

    x_s: np.ndarray
    x_t: np.ndarray
    s: np.ndarray
    t: np.ndarray
    w: np.ndarray
    seed: np.ndarray
    root_seed: int = 0
    control_dim: int = 0

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i):
        return TrajectoryPair(self.x_s[i], self.x_t[i], float(self.s[i]), float(self.t[i]),
                              FaultProfile(self.w[i]), int(self.seed[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def state_dim(self):
        return self.x_s.shape[1]

    @property
    def fault_dim(self):
        return self.w.shape[1]

    def subset(self, idx):
        return PairDataset(self.x_s[idx], self.x_t[idx], self.s[idx], self.t[idx], self.w[idx],
                           self.seed[idx], self.root_seed, self.control_dim)

    def faults(self):
        return np.unique(self.w, axis=0)


@dataclass
class DatasetConfig:
    n_trajectories: int = 64
    horizon_steps: int = 50
    dt: float = 0.02
    substeps: int = 1
    pair_gaps: Sequence[int] = (1,)
    stride: int = 1
    t0: float = 0.0
    seed: int = 0
    initial_mean: Optional[np.ndarray] = None
    initial_cov: Optional[np.ndarray] = None
    initial_sampler: Optional[Callable] = None

    def sample_initial(self, rng, n, state_dim):
        if self.initial_sampler is not None:
            return np.asarray(self.initial_sampler(rng, n), dtype=float)
        mean = np.zeros(state_dim) if self.initial_mean is None else np.asarray(self.initial_mean, dtype=float)
        cov = np.eye(state_dim) if self.initial_cov is None else np.asarray(self.initial_cov, dtype=float)
        return rng.multivariate_normal(mean, cov, size=n, method="cholesky")


def generate_dataset(model, library, config):
    """Seeded SDE rollouts for each library fault, cut into (x_s, x_t) pairs.

    Trajectory k of the whole dataset draws its initial state and noise from
    stream k of the root seed, so the result does not depend on batching.
    """
    if len(library) == 0:
        raise ArgumentError("fault library is empty")
    n, q = model.state_dim, model.noise_dim
    K = config.horizon_steps * config.substeps
    rngs = spawn_rngs(config.seed, len(library) * config.n_trajectories)
    cols = {k: [] for k in ("x_s", "x_t", "s", "t", "w", "seed")}
    for j, fault in enumerate(library):
        if config.n_trajectories == 0:
            break
        streams = rngs[j * config.n_trajectories:(j + 1) * config.n_trajectories]
        x0 = np.stack([config.sample_initial(r, 1, n)[0] for r in streams])
        noise = np.stack([r.standard_normal((K, q)) for r in streams])
        traj = simulate(ClosedLoopField(model, fault), x0, config.t0, config.dt, config.horizon_steps,
                        noise=noise, substeps=config.substeps)
        times = config.t0 + config.dt * np.arange(config.horizon_steps + 1)
        ids = j * config.n_trajectories + np.arange(config.n_trajectories)
        for gap in config.pair_gaps:
            for a in range(0, config.horizon_steps - gap + 1, config.stride):
                cols["x_s"].append(traj[a])
                cols["x_t"].append(traj[a + gap])
                cols["s"].append(np.full(len(ids), times[a]))
                cols["t"].append(np.full(len(ids), times[a + gap]))
                cols["w"].append(np.repeat(fault.w[None], len(ids), axis=0))
                cols["seed"].append(ids)
        log.info(f"Generated {config.n_trajectories} rollouts for fault {j} (w={fault.w})")
    p = library[0].w.shape[0]
    if not cols["s"]:
        return PairDataset(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0), np.zeros((0, p)),
                           np.zeros(0, dtype=int), config.seed, model.control_dim)
    return PairDataset(np.concatenate(cols["x_s"]), np.concatenate(cols["x_t"]), np.concatenate(cols["s"]),
                       np.concatenate(cols["t"]), np.concatenate(cols["w"]), np.concatenate(cols["seed"]),
                       config.seed, model.control_dim)


def linear_system(A, G=None, Psi=None, noise=0.0, K=None, name="linear"):
    """LTI test system dx = (A x + G u + Psi w) dt + noise dW with u_cl = K x (0 if None)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    G = np.eye(n) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    Psi = np.eye(n) if Psi is None else np.atleast_2d(np.asarray(Psi, dtype=float))
    S = np.asarray(noise, dtype=float) * np.eye(n) if np.ndim(noise) == 0 else np.asarray(noise, dtype=float)
    m, p, q = G.shape[1], Psi.shape[1], S.shape[1]
    Kmat = np.zeros((m, n)) if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    return SystemModel(
        state_dim=n, control_dim=m, fault_dim=p, noise_dim=q,
        drift=lambda x, t: x @ A.T,
        control_gain=lambda x, t: np.broadcast_to(G, (len(x), n, m)),
        fault_channel=lambda x, t, u: np.broadcast_to(Psi, (len(x), n, p)),
        diffusion=lambda x, t: np.broadcast_to(S, (len(x), n, q)),
        nominal_feedback=lambda x, t: x @ Kmat.T,
        diffusion_divergence=lambda x, t: np.zeros_like(x),
        name=name,
    )
