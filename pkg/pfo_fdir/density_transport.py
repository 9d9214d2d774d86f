"""Particle densities, pushforward, 2-Wasserstein / MMD distances and Gaussian mixtures."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import ot
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from pfo_fdir.errors import ArgumentError, ConvergenceError, NumericError
from pfo_fdir.util import psd_sqrt, sym

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
MARGINAL_TOL = 1e-8


@dataclass
class ParticleEnsemble:
    """Weighted empirical density sum_i w_i delta_{x_i}."""

    points: np.ndarray
    weights: Optional[np.ndarray] = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[None, :]
        if self.points.ndim != 2 or len(self.points) < 1:
            raise ArgumentError(f"ensemble needs an (N, n) point array with N >= 1, got {self.points.shape}")
        bad = np.flatnonzero(~np.all(np.isfinite(self.points), axis=1))
        if len(bad):
            raise NumericError(f"non-finite particle at index {bad[0]}", term="ensemble", index=int(bad[0]))
        if self.weights is None:
            self.weights = np.full(len(self.points), 1.0 / len(self.points))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.points),) or np.any(self.weights < 0):
            raise ArgumentError("weights must be a nonnegative vector with one entry per particle")
        total = self.weights.sum()
        if total <= 0:
            raise ArgumentError("weights sum to zero")
        if abs(total - 1.0) > WEIGHT_TOL:
            self.weights = self.weights / total

    @classmethod
    def dirac(cls, x, timestamp=0.0):
        return cls(np.asarray(x, dtype=float)[None, :], np.ones(1), timestamp)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return len(self.points)

    @property
    def is_uniform(self):
        return np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-15)

    def mean(self):
        return self.weights @ self.points

    def cov(self):
        d = self.points - self.mean()
        return sym((d * self.weights[:, None]).T @ d)

    def ess(self):
        return 1.0 / np.sum(self.weights ** 2)

    def resample(self, rng):
        """Systematic resampling to N uniformly weighted particles."""
        N = self.size
        positions = (rng.random() + np.arange(N)) / N
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, positions, side="right")
        return ParticleEnsemble(self.points[np.minimum(idx, N - 1)], None, self.timestamp)


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float
    method: str
    marginal_violation: float = 0.0


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihood: List[float] = field(default_factory=list)
    degenerate: bool = False
    assignment: Optional[np.ndarray] = None
    component_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float).reshape(len(self.means), self.means.shape[1], -1)
        if np.any(self.weights < -1e-15) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ArgumentError(f"mixture weights {self.weights} are not on the simplex")
        if np.max(np.abs(self.covs - np.swapaxes(self.covs, 1, 2)), initial=0.0) > 1e-10:
            raise ArgumentError("mixture covariances are not symmetric")
        vals, vecs = np.linalg.eigh(sym(self.covs))
        if np.min(vals) < -1e-10:
            raise ArgumentError(f"mixture covariance has eigenvalue {np.min(vals):.3e} < 0")
        self.covs = (vecs * np.clip(vals, 0.0, None)[:, None, :]) @ np.swapaxes(vecs, 1, 2)

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_pdf(self, x):
        """(N, M) matrix log N(x_p; m_i, Sigma_i)."""
        x = np.atleast_2d(x)
        n = self.dim
        out = np.empty((len(x), self.n_components))
        for i, (m, S) in enumerate(zip(self.means, self.covs)):
            try:
                L = cholesky(S, lower=True)
            except np.linalg.LinAlgError:
                L = cholesky(S + 1e-12 * max(np.trace(S) / n, 1.0) * np.eye(n), lower=True)
            z = solve_triangular(L, (x - m).T, lower=True)
            out[:, i] = -0.5 * np.sum(z ** 2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
        return out

    def responsibilities(self, x):
        lp = self.component_log_pdf(x) + np.log(np.maximum(self.weights, 1e-300))
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def log_pdf(self, x):
        return logsumexp(self.component_log_pdf(x) + np.log(np.maximum(self.weights, 1e-300)), axis=1)

    def sample(self, rng, N):
        comp = rng.choice(self.n_components, size=N, p=self.weights)
        out = np.empty((N, self.dim))
        for i in range(self.n_components):
            sel = comp == i
            out[sel] = rng.multivariate_normal(self.means[i], self.covs[i], size=int(sel.sum()), method="eigh")
        return out


def pushforward(ensemble, point_map, timestamp=None):
    """Apply `point_map` to every particle; weights are carried over unchanged."""
    image = np.asarray(point_map(ensemble.points), dtype=float).reshape(ensemble.points.shape)
    bad = np.flatnonzero(~np.all(np.isfinite(image), axis=1))
    if len(bad):
        raise NumericError(f"pushforward produced a non-finite point at index {bad[0]}",
                           term="pushforward", index=int(bad[0]))
    out = ParticleEnsemble.__new__(ParticleEnsemble)
    out.points = image
    out.weights = ensemble.weights.copy()
    out.timestamp = ensemble.timestamp if timestamp is None else timestamp
    return out


def _round_to_marginals(G, a, b):
    """Project a near-feasible coupling onto Pi(a, b) (row/column scaling plus rank-one fix)."""
    x = np.minimum(a / np.maximum(G.sum(1), 1e-300), 1.0)
    F = G * x[:, None]
    y = np.minimum(b / np.maximum(F.sum(0), 1e-300), 1.0)
    F = F * y[None, :]
    ea, eb = a - F.sum(1), b - F.sum(0)
    if ea.sum() > 0:
        F = F + np.outer(ea, eb) / ea.sum()
    return F


def wasserstein2(a, b, mode="auto", reg_scale=0.01, max_iter=2000, divergence_tol=1e-3):
    """W2 between two ensembles.

    Args:
        mode: "exact" (assignment for equal-size uniform ensembles, network
            simplex otherwise), "entropic" (log-stabilised Sinkhorn with
            epsilon scaling, an upper bound), or "auto" (= exact)
        reg_scale: epsilon as a fraction of the median squared distance
        divergence_tol: Sinkhorn marginal violation above which the solve counts
            as failed; smaller violations are removed by rounding the plan
    Returns:
        (distance, TransportPlan)
    """
    if a.dim != b.dim:
        raise ArgumentError(f"ensembles live in R^{a.dim} and R^{b.dim}")
    M = cdist(a.points, b.points, "sqeuclidean")
    if mode in ("auto", "exact"):
        if a.size == b.size and a.is_uniform and b.is_uniform:
            rows, cols = linear_sum_assignment(M)
            G = np.zeros_like(M)
            G[rows, cols] = a.weights[rows]
            cost = float(M[rows, cols].sum() / a.size)
        else:
            G = ot.emd(a.weights, b.weights, M)
            cost = float(np.sum(G * M))
        plan = TransportPlan(G, max(cost, 0.0), "exact")
    elif mode == "entropic":
        positive = M[M > 0]
        reg = reg_scale * (np.median(positive) if len(positive) else 1.0)
        n_outer = 40
        G, info = ot.bregman.sinkhorn_epsilon_scaling(
            a.weights, b.weights, M, reg, numItermax=n_outer, epsilon0=10 * reg,
            numInnerItermax=max_iter // n_outer, stopThr=MARGINAL_TOL ** 2, log=True, warn=False)
        violation = max(np.max(np.abs(G.sum(1) - a.weights)), np.max(np.abs(G.sum(0) - b.weights)))
        if not np.all(np.isfinite(G)) or violation > divergence_tol:
            raise ConvergenceError(f"Sinkhorn did not converge (marginal violation {violation:.3e})",
                                   violation=violation)
        G = _round_to_marginals(G, a.weights, b.weights)
        plan = TransportPlan(G, float(np.sum(G * M)), "entropic", float(violation))
    else:
        raise ArgumentError(f"unknown W2 mode {mode!r}")
    return float(np.sqrt(plan.cost)), plan


def _check_psd(S, name):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if np.max(np.abs(S - S.T)) > 1e-10 or np.min(np.linalg.eigvalsh(sym(S))) < -1e-10:
        raise ArgumentError(f"{name} is not symmetric PSD")
    return sym(S)


def gaussian_w2(m1, S1, m2, S2):
    """Closed-form W2 between N(m1, S1) and N(m2, S2) (Bures metric)."""
    S1, S2 = _check_psd(S1, "Sigma1"), _check_psd(S2, "Sigma2")
    r2 = psd_sqrt(S2)
    bures = np.trace(S1 + S2 - 2 * psd_sqrt(r2 @ S1 @ r2))
    d2 = np.sum((np.asarray(m1, dtype=float) - np.asarray(m2, dtype=float)) ** 2)
    return float(np.sqrt(max(d2 + bures, 0.0)))


def median_bandwidth(*point_sets):
    pooled = np.concatenate(point_sets)
    d = cdist(pooled, pooled)
    d = d[np.triu_indices(len(pooled), k=1)]
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def mmd2(a, b, kernel_bandwidth=None, unbiased=True):
    """Squared MMD with the normalised Gaussian kernel exp(-|x - y|^2 / (2 h^2))."""
    if kernel_bandwidth is not None and kernel_bandwidth <= 0:
        raise ArgumentError("kernel bandwidth must be positive")
    if unbiased and (a.size < 2 or b.size < 2):
        raise ArgumentError("unbiased MMD needs at least two particles per ensemble")
    h = kernel_bandwidth or median_bandwidth(a.points, b.points)

    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2 * h ** 2))

    def self_term(e):
        K = k(e.points, e.points)
        W = np.outer(e.weights, e.weights)
        if not unbiased:
            return np.sum(W * K)
        np.fill_diagonal(W, 0.0)
        return np.sum(W * K) / (1.0 - np.sum(e.weights ** 2))

    cross = a.weights @ k(a.points, b.points) @ b.weights
    return float(self_term(a) + self_term(b) - 2 * cross)


@dataclass
class GMMConfig:
    max_iter: int = 200
    tol: float = 1e-10
    floor: float = 1e-8
    seed: int = 0

    @classmethod
    def from_config(cls, conf):
        return cls(**{k: v for k, v in dict(conf).items() if k in cls.__dataclass_fields__})


def _floor(points, rel):
    scale = np.trace(np.atleast_2d(np.cov(points, rowvar=False))) / points.shape[1] if len(points) > 1 else 1.0
    return rel * max(scale, 1e-12)


def mixture_from_responsibilities(points, weights, resp, floor):
    """Weighted M-step: beta_i, m_i and (S_i + floor I) / N_i from responsibilities."""
    n = points.shape[1]
    Nk = weights @ resp
    Nk_safe = np.maximum(Nk, 1e-300)
    means = (resp * weights[:, None]).T @ points / Nk_safe[:, None]
    covs = np.empty((resp.shape[1], n, n))
    for i in range(resp.shape[1]):
        d = points - means[i]
        covs[i] = sym(((d * (weights * resp[:, i])[:, None]).T @ d + floor * np.eye(n)) / Nk_safe[i])
    return GaussianMixture(Nk / Nk.sum(), means, covs)


def _objective(mix, points, weights, floor):
    # penalised likelihood; EM on it is monotone
    ll = weights @ mix.log_pdf(points)
    if floor > 0:
        ll -= 0.5 * floor * sum(np.trace(np.linalg.inv(S)) for S in mix.covs)
    return float(ll)


def fit_gmm(ensemble, M, config=None):
    """Weighted EM with k-means++ seeding and a covariance floor."""
    config = config or GMMConfig()
    X, w = ensemble.points, ensemble.weights
    n = X.shape[1]
    if ensemble.size < M:
        raise ArgumentError(f"cannot fit {M} components to {ensemble.size} particles")
    floor = _floor(X, config.floor) if config.floor > 0 else 0.0
    centers, _ = kmeans_plusplus(X, M, sample_weight=w, random_state=config.seed)
    hard = np.argmin(cdist(X, centers, "sqeuclidean"), axis=1)
    resp = np.eye(M)[hard]
    degenerate = bool(np.any(np.bincount(hard, minlength=M) <= n))
    eff_floor = floor if floor > 0 else (_floor(X, 1e-12) if degenerate else 0.0)
    mix = mixture_from_responsibilities(X, w, resp, eff_floor)
    history = [_objective(mix, X, w, eff_floor)]
    for it in range(config.max_iter):
        resp = mix.responsibilities(X)
        mix = mixture_from_responsibilities(X, w, resp, eff_floor)
        history.append(_objective(mix, X, w, eff_floor))
        if abs(history[-1] - history[-2]) <= config.tol * max(1.0, abs(history[-2])):
            break
    # effective particle count per component under the final responsibilities
    counts = len(X) * (w @ mix.responsibilities(X))
    degenerate = degenerate or bool(np.any(counts <= n + 1e-9))
    if degenerate:
        log.warning(f"GMM fit with M={M}: a component holds <= {n} particles, covariance floored")
    mix.log_likelihood = history
    mix.component_counts = counts
    mix.degenerate = degenerate
    return mix


def matched_gmm_pair(fault, nominal, M, config=None):
    """Fault mixture by EM; nominal components share its responsibilities particle by particle."""
    if fault.size != nominal.size:
        raise ArgumentError(f"matched mixtures need index-matched ensembles, got {fault.size} and {nominal.size}")
    config = config or GMMConfig()
    fit = fit_gmm(fault, M, config)
    resp = fit.responsibilities(fault.points)
    floor_f = _floor(fault.points, config.floor) if config.floor > 0 else 0.0
    floor_n = _floor(nominal.points, config.floor) if config.floor > 0 else 0.0
    fmix = mixture_from_responsibilities(fault.points, fault.weights, resp, floor_f)
    nmix = mixture_from_responsibilities(nominal.points, fault.weights, resp, floor_n)
    nmix.weights = fmix.weights.copy()
    fmix.log_likelihood, fmix.degenerate = fit.log_likelihood, fit.degenerate
    # per-particle responsibilities, shared by both sides
    fmix.assignment = nmix.assignment = resp
    return fmix, nmix
