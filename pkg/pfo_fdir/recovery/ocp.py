"""Per-component covariance steering over the recovery horizon and responsibility blending.

Each retained mixture component i gets an affine law du = nu_l + K_l (x - mu_l)
acting on its linearised local model

    mu+    = A mu + B nu + c
    Sigma+ = (A + B K) Sigma (A + B K)^T + W

so the mean depends only on nu and the covariance only on K. The nu-block is
an exact linear-quadratic tracking solve; the K-block is gradient descent
with Armijo backtracking.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np
import torch

from pfo_fdir.certificates import operator_bound
from pfo_fdir.density_transport import (GaussianMixture, ParticleEnsemble, gaussian_w2,
                                        mixture_from_responsibilities, wasserstein2)
from pfo_fdir.errors import ArgumentError
from pfo_fdir.util import sym

log = logging.getLogger(__name__)


@dataclass
class RecoveryWeights:
    q_m: float = 1.0
    q_S: float = 0.1
    lam_m: float = 0.1
    lam_S: float = 0.01
    rho_nu: float = 1e-3
    rho_K: float = 1e-3
    omega: float = 1.0
    lam_T: float = 1.0
    riccati_q: float = 1.0
    riccati_r: float = 1.0
    n_components: int = 3
    horizon: int = 25
    replan_every: int = 5
    gamma_min: float = 1e-3
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        for k in ("q_m", "q_S", "lam_m", "lam_S", "rho_nu", "rho_K", "omega", "lam_T", "riccati_q"):
            if getattr(self, k) < 0:
                raise ArgumentError(f"{k} must be >= 0, got {getattr(self, k)}")
        if self.riccati_r <= 0:
            raise ArgumentError("riccati_r must be positive (R must be SPD)")
        if self.horizon < 1 or self.n_components < 1 or self.replan_every < 1:
            raise ArgumentError("horizon, n_components and replan_every must be >= 1")

    @classmethod
    def from_config(cls, conf):
        return cls(**{k: conf[k] for k in cls.__dataclass_fields__ if k in conf})

    def omega_seq(self, N):
        return np.broadcast_to(np.asarray(self.omega, dtype=float), (N,))


@dataclass
class RecoveryProblem:
    """Component-wise data for one recovery solve.

    Per-component arrays are indexed [i, l]; mu0/Sigma0 are the component
    moments at l = 0, m_nom/S_nom the matched nominal targets for l = 1..N
    (index l - 1), x_nom the reference for l = 0..N, P the Riccati metric.
    """

    horizon: int
    beta: np.ndarray
    mu0: np.ndarray        # (M, n)
    Sigma0: np.ndarray     # (M, n, n)
    A: np.ndarray          # (M, N, n, n)
    B: np.ndarray          # (M, N, n, m)
    c: np.ndarray          # (M, N, n)
    W: np.ndarray          # (M, N, n, n)
    m_nom: np.ndarray      # (M, N, n)
    S_nom: np.ndarray      # (M, N, n, n)
    x_nom: np.ndarray      # (N + 1, n)
    P: np.ndarray          # (N + 1, n, n)
    weights: RecoveryWeights = field(default_factory=RecoveryWeights)

    def __post_init__(self):
        if self.horizon < 1:
            raise ArgumentError(f"horizon must be >= 1, got {self.horizon}")
        if not np.all(np.isclose(np.asarray(self.beta).sum(), 1.0)):
            raise ArgumentError("component weights must sum to one")


@dataclass
class ComponentPolicy:
    nu: np.ndarray          # (N, m)
    K: np.ndarray           # (N, m, n)
    mu: np.ndarray          # (N + 1, n)
    Sigma: np.ndarray       # (N + 1, n, n)
    W: np.ndarray           # (N, n, n)
    costs: List[float] = field(default_factory=list)
    status: str = "converged"

    def __len__(self):
        return len(self.nu)


def moment_rollout(policy, A, B, c, W, mu0, Sigma0):
    """Mean/covariance recursion of the local model under du = nu + K (x - mu)."""
    nu, K = (policy.nu, policy.K) if isinstance(policy, ComponentPolicy) else policy
    N = len(nu)
    mu = np.empty((N + 1, len(mu0)))
    Sigma = np.empty((N + 1,) + np.shape(Sigma0))
    mu[0], Sigma[0] = mu0, Sigma0
    for l in range(N):
        mu[l + 1] = A[l] @ mu[l] + B[l] @ nu[l] + c[l]
        Acl = A[l] + B[l] @ K[l]
        Sigma[l + 1] = sym(Acl @ Sigma[l] @ Acl.T + W[l])
    return mu, Sigma


def _mean_cost(problem, i, mu, nu):
    w = problem.weights
    om = w.omega_seq(problem.horizon)
    total = w.rho_nu * np.sum(nu ** 2)
    for l in range(1, problem.horizon + 1):
        e_n, e_x = mu[l] - problem.m_nom[i][l - 1], mu[l] - problem.x_nom[l]
        total += om[l - 1] * (w.q_m * e_n @ e_n + w.lam_m * e_x @ problem.P[l] @ e_x)
    return float(total)


def _cov_cost_torch(problem, i, K):
    w = problem.weights
    om = w.omega_seq(problem.horizon)
    A, B, W, S_nom, P, Sigma = (torch.as_tensor(v, dtype=torch.float64) for v in (
        problem.A[i], problem.B[i], problem.W[i], problem.S_nom[i], problem.P, problem.Sigma0[i]))
    total = w.rho_K * (K ** 2).sum()
    for l in range(problem.horizon):
        Acl = A[l] + B[l] @ K[l]
        Sigma = Acl @ Sigma @ Acl.T + W[l]
        Sigma = 0.5 * (Sigma + Sigma.T)
        total = total + om[l] * (w.q_S * ((Sigma - S_nom[l]) ** 2).sum() + w.lam_S * torch.trace(P[l + 1] @ Sigma))
    return total


def solve_mean_tracking(A, B, c, mu0, H, r, rho):
    """min sum_{l=1..N} (mu_l - r_l)^T H_l (mu_l - r_l) + rho sum_{l<N} |nu_l|^2 by backward recursion.

    Value function V_l(mu) = mu^T S_l mu - 2 s_l^T mu + const.
    """
    N, n = len(A), len(mu0)
    m = B.shape[2]
    S, s = H[N - 1].copy(), H[N - 1] @ r[N - 1]
    gains = [None] * N
    for l in range(N - 1, -1, -1):
        G = rho * np.eye(m) + B[l].T @ S @ B[l]
        Ginv_Bt = np.linalg.lstsq(G, B[l].T, rcond=None)[0]
        gains[l] = (Ginv_Bt, S.copy(), s.copy())
        L = S - S @ B[l] @ Ginv_Bt @ S
        ell = s - S @ B[l] @ Ginv_Bt @ s
        S_new = A[l].T @ L @ A[l]
        s_new = A[l].T @ (ell - L @ c[l])
        if l >= 1:
            S_new = S_new + H[l - 1]
            s_new = s_new + H[l - 1] @ r[l - 1]
        S, s = sym(S_new), s_new
    nu = np.zeros((N, m))
    mu = np.asarray(mu0, dtype=float)
    for l in range(N):
        Ginv_Bt, S_next, s_next = gains[l]
        z = A[l] @ mu + c[l]
        nu[l] = Ginv_Bt @ (s_next - S_next @ z)
        mu = z + B[l] @ nu[l]
    return nu


def solve_component_ocp(problem, i, metric=None):
    """Block-coordinate solve of the component-i recovery cost; costs are recorded per accepted iterate."""
    w = problem.weights
    N = problem.horizon
    if metric is not None:
        problem = replace(problem, P=metric.P)
    P = problem.P
    A, B, c, W = problem.A[i], problem.B[i], problem.c[i], problem.W[i]
    n, m = B.shape[1], B.shape[2]
    om = w.omega_seq(N)

    nu = np.zeros((N, m))
    K = torch.zeros((N, m, n), dtype=torch.float64, requires_grad=True)

    def total(nu_, K_):
        mu, _ = moment_rollout((nu_, np.zeros((N, m, n))), A, B, c, W, problem.mu0[i], problem.Sigma0[i])
        return _mean_cost(problem, i, mu, nu_) + float(_cov_cost_torch(problem, i, K_))

    costs = [total(nu, K.detach())]

    # nu-block: exact linear-quadratic tracking
    H = np.stack([om[l] * (w.q_m * np.eye(n) + w.lam_m * P[l + 1]) for l in range(N)])
    rhs = np.stack([om[l] * (w.q_m * problem.m_nom[i][l] + w.lam_m * P[l + 1] @ problem.x_nom[l + 1])
                    for l in range(N)])
    r = np.stack([np.linalg.lstsq(H[l], rhs[l], rcond=None)[0] for l in range(N)])
    nu_star = solve_mean_tracking(A, B, c, problem.mu0[i], H, r, w.rho_nu)
    cost = total(nu_star, K.detach())
    if cost <= costs[-1]:
        nu = nu_star
        costs.append(cost)
    mean_part = costs[-1] - float(_cov_cost_torch(problem, i, K.detach()))

    # K-block: gradient descent with Armijo backtracking
    status, step = "converged", 1.0
    J = _cov_cost_torch(problem, i, K)
    for it in range(w.max_iter):
        (g,) = torch.autograd.grad(J, K)
        g2 = float((g ** 2).sum())
        if g2 == 0.0:
            break
        accepted = False
        for _ in range(60):
            trial = (K - step * g).detach().requires_grad_(True)
            J_trial = _cov_cost_torch(problem, i, trial)
            if float(J_trial) <= float(J) - 1e-4 * step * g2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "line_search_failed"
            log.warning(f"OCP line search failed for component {i} at iteration {it}")
            break
        rel = (float(J) - float(J_trial)) / max(abs(float(J)), 1e-300)
        K, J = trial, J_trial
        costs.append(mean_part + float(J))
        step *= 2.0
        if rel < w.tol:
            break
    else:
        status = "max_iter"

    K = K.detach().numpy()
    mu, Sigma = moment_rollout((nu, K), A, B, c, W, problem.mu0[i], problem.Sigma0[i])
    return ComponentPolicy(nu, K, mu, Sigma, W, costs, status)


def blend_weights(mixture, x, gamma_min=1e-3):
    """Renormalised responsibilities over the retained set {i : gamma_i(x) >= gamma_min}."""
    gamma = mixture.responsibilities(np.asarray(x, dtype=float)[None])[0]
    keep = gamma >= gamma_min
    if not keep.any():
        keep = gamma == gamma.max()
    bar = np.where(keep, gamma, 0.0)
    return bar / bar.sum(), np.flatnonzero(keep)


def mixture_at(policies, beta, j):
    """Predicted mixture at plan step j from the solved components.

    Returns the mixture and the policy index of each of its components.
    """
    index = np.array([i for i, p in enumerate(policies) if p is not None], dtype=int)
    if len(index) == 0:
        raise ArgumentError("no component has a policy")
    b = np.asarray(beta, dtype=float)[index]
    b = b / b.sum() if b.sum() > 0 else np.full(len(index), 1.0 / len(index))
    jj = [min(j, len(policies[i].mu) - 1) for i in index]
    means = np.stack([policies[i].mu[k] for i, k in zip(index, jj)])
    covs = np.stack([sym(policies[i].Sigma[k]) for i, k in zip(index, jj)])
    return GaussianMixture(b, means, covs), index


def blend_step(policies, mixture, x, j=0, gamma_min=1e-3, index=None):
    """sum_i gamma_bar_i(x) (nu_j^i + K_j^i (x - m_i)) over the retained components of `mixture`.

    Component r of `mixture` belongs to policies[index[r]] (identity when index is None)
    and m_r is its mean.
    """
    x = np.asarray(x, dtype=float)
    index = np.arange(mixture.n_components) if index is None else np.asarray(index)
    bar, keep = blend_weights(mixture, x, gamma_min)
    du = 0.0
    for r in keep:
        pol = policies[index[r]]
        if pol is None:
            raise ArgumentError(f"component {index[r]} is retained but has no policy")
        jj = min(j, len(pol) - 1)
        du = du + bar[r] * (pol.nu[jj] + pol.K[jj] @ (x - mixture.means[r]))
    return np.asarray(du, dtype=float)


def blend_first_step(policies, mixture, x, gamma_min=1e-3):
    """First-step correction blended by the fault-mixture responsibilities at x."""
    return blend_step(policies, mixture, x, 0, gamma_min)


def blend_planned_step(policies, beta, x, j, gamma_min=1e-3):
    """Correction j steps after the solve, blended over the policies' predicted moments."""
    mixture, index = mixture_at(policies, beta, j)
    return blend_step(policies, mixture, x, j, gamma_min, index)


def propagate_recovery_densities(ensemble, propagator, w_hat, t_k, dt, N_r, rng=None):
    """Fault (w_hat) and nominal (w = 0) density tubes, each N_r + 1 long, element 0 the input.

    Both tubes draw process noise from one seed, so equal faults give equal tubes.
    """
    w_hat = np.asarray(w_hat, dtype=float)
    seed = None if rng is None else int(rng.integers(2 ** 63 - 1))
    rng_f = None if seed is None else np.random.default_rng(seed)
    rng_n = None if seed is None else np.random.default_rng(seed)
    fault, nominal = [ensemble], [ensemble]
    for l in range(N_r):
        s, t = t_k + l * dt, t_k + (l + 1) * dt
        fault.append(propagator(fault[-1], w_hat, s, t, rng_f))
        nominal.append(propagator(nominal[-1], np.zeros_like(w_hat), s, t, rng_n))
    return fault, nominal


def gmm_surrogate_error(mixture, ensemble, resp, rng, n_samples=None):
    """eps_f: matched-component Gaussian W2 plus the sampled W2 between the ensemble and the mixture."""
    moments = mixture_from_responsibilities(ensemble.points, ensemble.weights, resp, 0.0)
    matched = np.sqrt(sum(b * gaussian_w2(mixture.means[i], mixture.covs[i], moments.means[i], moments.covs[i]) ** 2
                          for i, b in enumerate(mixture.weights)))
    sample = ParticleEnsemble(mixture.sample(rng, n_samples or ensemble.size))
    resampled = ensemble if ensemble.is_uniform else ensemble.resample(rng)
    return float(matched + wasserstein2(resampled, sample)[0])


def surrogate_bound(cert, w2_filter_gap, eps_f):
    """Recovery-target gap: kappa e^{alpha_tilde} W2(rho_k|k, rho_hat_k|k) + delta_w + eps_f."""
    if w2_filter_gap < 0 or eps_f < 0:
        raise ArgumentError("filter gap and mixture error must be >= 0")
    return float(operator_bound(cert, w2_filter_gap) + eps_f)
