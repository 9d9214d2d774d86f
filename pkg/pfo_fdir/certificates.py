"""Closed-form Wasserstein bounds, detectability certificates and their sampled inputs.

Every supremum is estimated as a maximum over a finite sample set and is
reported together with the sample count. Learned-operator quantities live in
interpolant time tau in [0, 1]; `ContractionCertificate.in_physical_time`
rescales them for a step of length dt.
"""
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from scipy.spatial import cKDTree

from pfo_fdir.errors import ArgumentError
from pfo_fdir.learning.losses import contraction_residual, psd_part_sq_norm
from pfo_fdir.learning.networks import DTYPE

log = logging.getLogger(__name__)


def _nonnegative(**kw):
    for k, v in kw.items():
        if not np.isfinite(v) or v < 0:
            raise ArgumentError(f"{k} must be finite and >= 0, got {v}")


def _accumulated(kappa, d_bar, alpha, t):
    # kappa d_bar int_0^t e^{alpha (t - r)} dr
    if alpha == 0.0:
        return kappa * d_bar * t
    return kappa * d_bar * np.expm1(alpha * t) / alpha


@dataclass(frozen=True)
class ContractionCertificate:
    alpha: float
    m_lower: float = 1.0
    m_upper: float = 1.0
    d_bar: float = 0.0
    eps_ctr: float = 0.0
    n_samples: int = 0
    time_unit: str = "tau"

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ArgumentError(f"rate must be finite, got {self.alpha}")
        if not (np.isfinite(self.m_lower) and self.m_lower > 0):
            raise ArgumentError(f"m_lower must be positive, got {self.m_lower}")
        if not (np.isfinite(self.m_upper) and self.m_upper >= self.m_lower):
            raise ArgumentError(f"m_upper={self.m_upper} must be finite and >= m_lower={self.m_lower}")
        _nonnegative(d_bar=self.d_bar, eps_ctr=self.eps_ctr)

    @property
    def kappa(self):
        return float(np.sqrt(self.m_upper / self.m_lower))

    @property
    def alpha_tilde(self):
        return self.alpha + self.eps_ctr / (2.0 * self.m_lower)

    @property
    def delta_w(self):
        """Terminal bias of the learned operator, the tau = 1 value of the approximate bias."""
        return terminal_bias(self)

    def in_physical_time(self, dt):
        """Rates and velocity gaps for one operator application spanning dt."""
        return replace(self, alpha=self.alpha / dt, d_bar=self.d_bar / dt, eps_ctr=self.eps_ctr / dt,
                       time_unit="physical")

    def to_dict(self):
        out = asdict(self)
        out.update(kappa=self.kappa, alpha_tilde=self.alpha_tilde, delta_w=self.delta_w)
        return out


def contraction_bound(cert, w2_initial, t):
    """kappa e^{alpha t} W2_0 + kappa d_bar int_0^t e^{alpha (t - r)} dr."""
    _nonnegative(w2_initial=w2_initial, t=t)
    return cert.kappa * np.exp(cert.alpha * t) * w2_initial + _accumulated(cert.kappa, cert.d_bar, cert.alpha, t)


def approx_ctr_bound(cert, w2_initial, tau=1.0):
    """contraction_bound with the residual-adjusted rate alpha_tilde."""
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError(f"tau must lie in [0, 1], got {tau}")
    return contraction_bound(replace(cert, alpha=cert.alpha_tilde, eps_ctr=0.0), w2_initial, tau)


def terminal_bias(cert):
    return _accumulated(cert.kappa, cert.d_bar, cert.alpha_tilde, 1.0)


def operator_bound(cert, w2_inputs):
    """W2(P_hat rho_s, P eta_s) <= kappa e^{alpha_tilde} W2(rho_s, eta_s) + delta_w."""
    return approx_ctr_bound(cert, w2_inputs, 1.0)


def composed_operator_bound(cert, steps):
    """Same-input gap after `steps` compositions: delta_w sum_{j<K} (kappa e^{alpha_tilde})^j."""
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    growth = cert.kappa * np.exp(cert.alpha_tilde)
    return float(cert.delta_w * np.sum(growth ** np.arange(steps)))


def fmm_residual_bound(endpoint_residual, omega_lower=1.0):
    """omega_lower^{-1/2} sqrt(E_ep)."""
    _nonnegative(endpoint_residual=endpoint_residual)
    if not omega_lower > 0:
        raise ArgumentError(f"omega_lower must be positive, got {omega_lower}")
    return float(np.sqrt(endpoint_residual / omega_lower))


@dataclass(frozen=True)
class DetectabilityInputs:
    psi_bar: float
    sigma_bar: float
    score_gap: float
    fault_gap: float
    kappa: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        _nonnegative(psi_bar=self.psi_bar, sigma_bar=self.sigma_bar, score_gap=self.score_gap,
                     fault_gap=self.fault_gap)
        if not (np.isfinite(self.kappa) and self.kappa >= 1.0):
            raise ArgumentError(f"kappa must be >= 1, got {self.kappa}")
        if not np.isfinite(self.alpha):
            raise ArgumentError(f"rate must be finite, got {self.alpha}")

    @property
    def d_bar(self):
        return self.psi_bar * self.fault_gap + 0.5 * self.sigma_bar * self.score_gap


@dataclass(frozen=True)
class DetectabilityReport:
    d_bar: float
    bound: float
    margin: float
    identifiable_possible: bool

    def __iter__(self):
        return iter((self.bound, self.identifiable_possible))


def detectability_certificate(inputs, T, eps):
    """Upper bound on the W2 separation of two fault flows after T, and whether an eps margin can hold."""
    _nonnegative(T=T, eps=eps)
    bound = float(_accumulated(inputs.kappa, inputs.d_bar, inputs.alpha, T))
    return DetectabilityReport(inputs.d_bar, bound, float(eps), bool(eps <= bound))


@dataclass(frozen=True)
class ScoreGap:
    value: float
    regularized: bool
    n_samples: int

    def __float__(self):
        return self.value


def _gaussian_fit(ensemble, floor):
    mu = ensemble.mean()
    cov = np.atleast_2d(ensemble.cov())
    scale = max(np.trace(cov) / len(cov), 1e-300)
    regularized = bool(np.min(np.linalg.eigvalsh(cov)) < floor * scale)
    if regularized:
        cov = cov + floor * scale * np.eye(len(cov))
    return mu, np.linalg.inv(cov), regularized


def estimate_score_gap(ensembles_i, ensembles_j, floor=1e-8):
    """max over the time grid of max over pooled particles of |s_j(x) - s_i(x)|, Gaussian scores."""
    if len(ensembles_i) != len(ensembles_j) or len(ensembles_i) == 0:
        raise ArgumentError("score gap needs two equally long, nonempty ensemble sequences")
    gap, regularized, count = 0.0, False, 0
    for ei, ej in zip(ensembles_i, ensembles_j):
        mi, Pi, ri = _gaussian_fit(ei, floor)
        mj, Pj, rj = _gaussian_fit(ej, floor)
        x = np.concatenate([ei.points, ej.points])
        diff = -(x - mj) @ Pj + (x - mi) @ Pi
        gap = max(gap, float(np.max(np.linalg.norm(diff, axis=1))))
        regularized |= ri or rj
        count += len(x)
    if regularized:
        log.warning("Score gap used a regularised Gaussian covariance")
    return ScoreGap(gap, regularized, count)


def sampled_sup_norm(matrices):
    """max Frobenius norm over a batch of matrices."""
    m = np.asarray(matrices, dtype=float)
    return float(np.max(np.linalg.norm(m.reshape(len(m), -1), axis=1))) if len(m) else 0.0


def log_norm_rate(field, samples, t=0.0, eps=1e-6):
    """Sampled max over x of lambda_max(sym dF/dx), the contraction rate in the identity metric."""
    x = np.asarray(samples, dtype=float)
    if len(x) == 0:
        raise ArgumentError("log_norm_rate needs at least one sample")
    N, n = x.shape
    J = np.empty((N, n, n))
    for j in range(n):
        h = eps * np.maximum(1.0, np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        J[:, :, j] = (field(xp, t) - field(xm, t)) / (2 * h)[:, None]
    return float(np.max(np.linalg.eigvalsh(0.5 * (J + J.transpose(0, 2, 1)))[:, -1]))


def empirical_velocity(query, points, velocities, k=16):
    """k-nearest-neighbour average of `velocities` around each query point."""
    points = np.asarray(points, dtype=float)
    k = min(k, len(points))
    _, idx = cKDTree(points).query(np.asarray(query, dtype=float), k=k)
    idx = idx.reshape(len(query), k)
    return np.asarray(velocities, dtype=float)[idx].mean(1)


def interpolant_velocity_samples(model, reference, holdout, schedule, n_samples=1024, k=16, seed=0):
    """Held-out interpolant points with a regression surrogate of the transport velocity.

    The velocity at a held-out point I_tau is the neighbour average of the
    interpolant velocities of `reference` in the joint (state, tau, condition)
    space, all coordinates scaled by the reference spread.
    Returns (x, tau, cond, b) tensors ready for measure_certificate.
    """
    rng = np.random.default_rng(seed)

    def draw(ds, size):
        idx = rng.integers(len(ds), size=size)
        tau = rng.uniform(size=(size, 1))
        z = rng.standard_normal((size, ds.state_dim))
        x, dx = schedule.interpolate(ds.x_s[idx], ds.x_t[idx], tau, z)
        cond = model.condition(ds.s[idx], ds.t[idx], ds.w[idx], batch=size).numpy()
        return x, tau, cond, dx

    xr, tr, cr, vr = draw(reference, max(8 * n_samples, k))
    xq, tq, cq, _ = draw(holdout, n_samples)
    feats_r = np.concatenate([xr, tr, cr], 1)
    scale = np.maximum(feats_r.std(0), 1e-12)
    b = empirical_velocity(np.concatenate([xq, tq, cq], 1) / scale, feats_r / scale, vr, k)

    def t(v):
        return torch.as_tensor(v, dtype=DTYPE)

    return t(xq), t(tq), t(cq), t(b)


def measure_certificate(metric, model, x, tau, cond, field_gap_samples=None):
    """Sampled eps_ctr, m_lower, m_upper, alpha and d_bar for a trained metric/flow pair.

    Args:
        x, tau, cond: contraction sample batch, shapes (B, n), (B, 1), (B, c)
        field_gap_samples: optional (x, tau, cond, b) with b the reference
            transport velocity at x; d_bar = max |b - b_hat(x)|, 0 if None
    """
    if len(x) == 0:
        raise ArgumentError("certificate measurement needs a nonempty sample batch")
    with torch.enable_grad():
        R = contraction_residual(metric, model, x, tau, cond)
        eps_ctr = torch.sqrt(psd_part_sq_norm(R)).max().item()
    with torch.no_grad():
        eig = torch.linalg.eigvalsh(metric(x, tau, cond))
        alpha = metric.rate(cond).max().item()
        d_bar, count = 0.0, len(x)
        if field_gap_samples is not None:
            xg, tg, cg, b = field_gap_samples
            gap = torch.linalg.norm(b - model.induced_velocity(xg, tg, cg), dim=-1)
            d_bar, count = gap.max().item(), count + len(xg)
    cert = ContractionCertificate(alpha, eig.min().item(), eig.max().item(), d_bar, eps_ctr, count)
    log.info(f"Certificate: alpha={cert.alpha:.4g} kappa={cert.kappa:.4g} d_bar={cert.d_bar:.4g} "
             f"eps_ctr={cert.eps_ctr:.4g} delta_w={cert.delta_w:.4g}")
    return cert
