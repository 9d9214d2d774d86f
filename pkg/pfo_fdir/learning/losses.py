"""Flow-map matching, endpoint, semigroup, contraction and certificate losses.

All random draws for one training step live in a LossSample so that a step can
be replayed exactly (gradient checks, shuffling invariance).
"""
from dataclasses import dataclass
from typing import Optional

import torch
from torch.autograd.functional import jacobian, jvp

from pfo_fdir.learning.networks import DTYPE


@dataclass
class PairBatch:
    x_s: torch.Tensor
    x_t: torch.Tensor
    cond: torch.Tensor

    def __len__(self):
        return len(self.x_s)

    def __getitem__(self, idx):
        return PairBatch(self.x_s[idx], self.x_t[idx], self.cond[idx])


@dataclass
class LossSample:
    tau_fmm: torch.Tensor      # (B, 2) sorted
    z_fmm: torch.Tensor
    r_ep: torch.Tensor         # (B, 1)
    z_ep: torch.Tensor
    tau_sg: torch.Tensor       # (B, 3) sorted
    z_sg: torch.Tensor
    tau_ctr: torch.Tensor      # (B, 1)
    z_ctr: torch.Tensor

    @classmethod
    def draw(cls, batch_size, state_dim, generator=None):
        def u(k):
            return torch.rand(batch_size, k, generator=generator, dtype=DTYPE)

        def z():
            return torch.randn(batch_size, state_dim, generator=generator, dtype=DTYPE)

        return cls(torch.sort(u(2), -1).values, z(), u(1), z(), torch.sort(u(3), -1).values, z(), u(1), z())

    def __getitem__(self, idx):
        return LossSample(*(getattr(self, k)[idx] for k in self.__dataclass_fields__))


def time_derivative(model, x, tau0, tau1, cond):
    """(Phi_{tau0,tau1}(x), d/dtau1 Phi_{tau0,tau1}(x)) by forward-mode product, graph kept."""
    return jvp(lambda t1: model(x, tau0, t1, cond), tau1, torch.ones_like(tau1), create_graph=True)


def loss_fmm(model, batch, schedule, sample, omega=None):
    """E omega(tau0,tau1) [ |d_tau1 Phi_{tau0,tau1}(y) - dI_tau1|^2 + |Phi_{tau0,tau1}(y) - I_tau1|^2 ],
    y = Phi_{tau1,tau0}(I_tau1), over 0 <= tau0 <= tau1 <= 1."""
    tau0, tau1 = sample.tau_fmm[:, :1], sample.tau_fmm[:, 1:]
    I1, dI1 = schedule.interpolate(batch.x_s, batch.x_t, tau1, sample.z_fmm)
    y = model(I1, tau1, tau0, batch.cond)
    x1, dx1 = time_derivative(model, y, tau0, tau1, batch.cond)
    integrand = ((dx1 - dI1) ** 2).sum(-1) + ((x1 - I1) ** 2).sum(-1)
    if omega is not None:
        integrand = integrand * omega(tau0, tau1).reshape(-1)
    return integrand.mean()


def loss_endpoint(model, batch, schedule, sample, omega0=None):
    """Terminal-path residual E omega0(r) |d_r Phi_{0,r}(x_s) - dI_r|^2.

    Returns (weighted, unweighted); the unweighted integral feeds the operator bound.
    """
    r = sample.r_ep
    _, dI = schedule.interpolate(batch.x_s, batch.x_t, r, sample.z_ep)
    _, dx = time_derivative(model, batch.x_s, torch.zeros_like(r), r, batch.cond)
    res = ((dx - dI) ** 2).sum(-1)
    unweighted = res.mean()
    if omega0 is None:
        return unweighted, unweighted
    return (res * omega0(r).reshape(-1)).mean(), unweighted


def loss_semigroup(model, batch, schedule, sample):
    """E |Phi_{tau0,tau2}(I_tau0) - Phi_{tau1,tau2}(Phi_{tau0,tau1}(I_tau0))|^2."""
    t0, t1, t2 = sample.tau_sg[:, :1], sample.tau_sg[:, 1:2], sample.tau_sg[:, 2:]
    x0, _ = schedule.interpolate(batch.x_s, batch.x_t, t0, sample.z_sg)
    direct = model(x0, t0, t2, batch.cond)
    two_step = model(model(x0, t0, t1, batch.cond), t1, t2, batch.cond)
    return ((direct - two_step) ** 2).sum(-1).mean()


def induced_velocity(model, x, tau, cond):
    return model.induced_velocity(x, tau, cond)


def contraction_residual(metric, model, x, tau, cond):
    """dM/dtau along b + Db^T M + M Db - 2 alpha M, batched (B, n, n).

    dM/dtau is the total derivative d/de M(x + e b, tau + e); Db is the state
    Jacobian of the induced velocity.
    """
    b = model.induced_velocity(x, tau, cond)
    Db = jacobian(lambda y: model.induced_velocity(y, tau, cond).sum(0), x, create_graph=True, vectorize=True)
    Db = Db.permute(1, 0, 2)
    M, Mdot = jvp(lambda y, t: metric(y, t, cond), (x, tau), (b, torch.ones_like(tau)), create_graph=True)
    alpha = metric.rate(cond)
    R = Mdot + Db.transpose(1, 2) @ M + M @ Db - 2 * alpha[:, None, None] * M
    return 0.5 * (R + R.transpose(1, 2))


def psd_part_sq_norm(R):
    """|[R]_+|_F^2 = sum of squared positive eigenvalues."""
    return torch.clamp(torch.linalg.eigvalsh(R), min=0.0).pow(2).sum(-1)


def contraction_samples(batch, schedule, sample):
    x, _ = schedule.interpolate(batch.x_s, batch.x_t, sample.tau_ctr, sample.z_ctr)
    return x, sample.tau_ctr, batch.cond


def loss_contraction(metric, model, x, tau, cond):
    return psd_part_sq_norm(contraction_residual(metric, model, x, tau, cond)).mean()


def metric_extremes(metric, x, tau, cond):
    eig = torch.linalg.eigvalsh(metric(x, tau, cond))
    return eig.min(), eig.max()


def loss_certificate(metric, x, tau, cond, c_alpha=1.0, c_kappa=0.1):
    """E[c_alpha [alpha]_+^2] + c_kappa (log m_upper - log m_lower), extremes over the batch."""
    m_lo, m_hi = metric_extremes(metric, x, tau, cond)
    alpha = metric.rate(cond)
    return c_alpha * torch.clamp(alpha, min=0.0).pow(2).mean() + c_kappa * (torch.log(m_hi) - torch.log(m_lo))


def total_loss(model, metric, batch, schedule, sample, weights, omega=None, omega0=None):
    """Joint objective and its components (floats for logging, tensor `total` for backprop)."""
    fmm = loss_fmm(model, batch, schedule, sample, omega)
    ep, ep_raw = loss_endpoint(model, batch, schedule, sample, omega0)
    sg = loss_semigroup(model, batch, schedule, sample)
    x, tau, cond = contraction_samples(batch, schedule, sample)
    ctr = loss_contraction(metric, model, x, tau, cond)
    cert = loss_certificate(metric, x, tau, cond, weights.c_alpha, weights.c_kappa)
    total = (fmm + weights.lambda_ep * ep + weights.lambda_sg * sg
             + weights.lambda_ctr * ctr + weights.lambda_cert * cert)
    parts = {"fmm": fmm, "ep": ep, "ep_unweighted": ep_raw, "sg": sg, "ctr": ctr, "cert": cert}
    return total, parts
