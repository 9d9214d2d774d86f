import numpy as np
import pytest
import torch

from pfo_fdir.certificates import (ContractionCertificate, DetectabilityInputs, approx_ctr_bound,
                                   composed_operator_bound, contraction_bound, detectability_certificate,
                                   empirical_velocity, estimate_score_gap, fmm_residual_bound,
                                   interpolant_velocity_samples, log_norm_rate, measure_certificate,
                                   operator_bound, sampled_sup_norm)
from pfo_fdir.density_transport import ParticleEnsemble, wasserstein2
from pfo_fdir.dynamics import ClosedLoopField, FaultProfile, linear_system, simulate
from pfo_fdir.errors import ArgumentError
from pfo_fdir.learning.interpolants import InterpolantSchedule
from pfo_fdir.learning.networks import DTYPE, ConstantMetric, ExponentialFlowMap, FlowMapModel
from tests.conftest import STABLE_A

TOL = 1e-12


def test_contraction_bound_closed_form():
    cert = ContractionCertificate(alpha=-1.0, d_bar=1.0)
    expected = 2.0 * np.exp(-1.0) + (1.0 - np.exp(-1.0))
    assert abs(contraction_bound(cert, 2.0, 1.0) - expected) < TOL
    flat = ContractionCertificate(alpha=0.0, m_lower=1.0, m_upper=4.0, d_bar=0.5)
    # kappa = 2, no decay: 2 * W2_0 + 2 * 0.5 * t
    assert abs(contraction_bound(flat, 1.0, 3.0) - 5.0) < TOL
    assert contraction_bound(cert, 0.0, 0.0) == 0.0
    with pytest.raises(ArgumentError):
        contraction_bound(cert, -1.0, 1.0)


def test_certificate_validation():
    with pytest.raises(ArgumentError):
        ContractionCertificate(alpha=-1.0, m_lower=2.0, m_upper=1.0)
    with pytest.raises(ArgumentError):
        ContractionCertificate(alpha=np.nan)
    with pytest.raises(ArgumentError):
        ContractionCertificate(alpha=-1.0, d_bar=-0.1)


def test_residual_adjusted_rate_and_operator_bounds():
    cert = ContractionCertificate(alpha=-1.0, m_lower=0.5, m_upper=2.0, d_bar=0.1, eps_ctr=0.2)
    assert abs(cert.alpha_tilde - (-1.0 + 0.2 / 1.0)) < TOL
    assert abs(cert.kappa - 2.0) < TOL
    assert abs(operator_bound(cert, 0.0) - cert.delta_w) < TOL
    assert abs(approx_ctr_bound(cert, 1.0) - (2.0 * np.exp(-0.8) + cert.delta_w)) < TOL
    growth = 2.0 * np.exp(-0.8)
    assert composed_operator_bound(cert, 0) == 0.0
    assert abs(composed_operator_bound(cert, 3) - cert.delta_w * (1 + growth + growth ** 2)) < TOL
    with pytest.raises(ArgumentError):
        approx_ctr_bound(cert, 1.0, tau=1.5)


def test_physical_time_rescaling():
    cert = ContractionCertificate(alpha=-0.1, d_bar=0.02, eps_ctr=0.01).in_physical_time(0.05)
    assert cert.time_unit == "physical"
    assert np.isclose(cert.alpha, -2.0) and np.isclose(cert.d_bar, 0.4) and np.isclose(cert.eps_ctr, 0.2)
    assert set(cert.to_dict()) >= {"alpha", "kappa", "alpha_tilde", "delta_w", "n_samples"}


def test_fmm_residual_bound():
    assert abs(fmm_residual_bound(0.04, 0.25) - 0.4) < TOL
    with pytest.raises(ArgumentError):
        fmm_residual_bound(0.04, 0.0)


def test_affine_fault_flows_respect_contraction_bound(affine):
    system = affine.system()
    w_i, w_j = np.array([0.0]), np.array([0.7])
    rng = np.random.default_rng(0)
    x0 = rng.normal(0.5, 0.2, size=(200, 2))
    shift = np.array([0.3, -0.1])
    T, dt = 1.5, 0.01
    steps = int(round(T / dt))
    xi = simulate(ClosedLoopField(system, FaultProfile(w_i)), x0, 0.0, dt, steps, deterministic=True)[-1]
    xj = simulate(ClosedLoopField(system, FaultProfile(w_j)), x0 + shift, 0.0, dt, steps, deterministic=True)[-1]
    w2 = wasserstein2(ParticleEnsemble(xi), ParticleEnsemble(xj))[0]
    bound = contraction_bound(affine.certificate(w_i, w_j), np.linalg.norm(shift), T)
    assert w2 <= bound * (1 + 1e-6), f"W2 {w2:.6f} exceeds the contraction bound {bound:.6f}"


def test_affine_mean_matches_closed_form(affine):
    system = affine.system()
    m0, w, T, dt = np.array([1.0, -1.0]), np.array([0.5]), 1.0, 0.01
    out = simulate(ClosedLoopField(system, FaultProfile(w)), m0[None], 0.0, dt, 100, deterministic=True)[-1, 0]
    assert np.allclose(out, affine.mean(m0, w, T), atol=1e-9)


def test_detectability_certificate():
    inputs = DetectabilityInputs(psi_bar=1.0, sigma_bar=0.5, score_gap=2.0, fault_gap=0.3)
    assert abs(inputs.d_bar - 0.8) < TOL
    report = detectability_certificate(inputs, T=2.0, eps=1.0)
    assert abs(report.bound - 1.6) < TOL and report.identifiable_possible
    bound, possible = detectability_certificate(inputs, T=2.0, eps=2.0)
    assert not possible, f"eps=2 above the separation bound {bound}"
    decaying = DetectabilityInputs(1.0, 0.0, 0.0, 1.0, kappa=1.0, alpha=-1.0)
    assert abs(detectability_certificate(decaying, 1.0, 0.0).bound - (1 - np.exp(-1.0))) < TOL
    with pytest.raises(ArgumentError):
        DetectabilityInputs(1.0, 1.0, 1.0, 1.0, kappa=0.5)


def test_score_gap_of_shifted_ensembles():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 2))
    m = np.array([0.4, -0.2])
    gap = estimate_score_gap([ParticleEnsemble(X)], [ParticleEnsemble(X + m)])
    precision = np.linalg.inv(np.cov(X, rowvar=False, bias=True))
    assert abs(gap.value - np.linalg.norm(precision @ m)) < 1e-8
    assert not gap.regularized and gap.n_samples == 600
    same = estimate_score_gap([ParticleEnsemble(X)] * 3, [ParticleEnsemble(X)] * 3)
    assert float(same) < 1e-10


def test_score_gap_regularizes_degenerate_ensembles():
    points = np.repeat(np.linspace(0.0, 1.0, 5)[:, None], 2, axis=1)
    gap = estimate_score_gap([ParticleEnsemble(points)], [ParticleEnsemble(points + 1.0)])
    assert gap.regularized and np.isfinite(gap.value)
    with pytest.raises(ArgumentError):
        estimate_score_gap([], [])


def test_log_norm_rate_of_linear_field():
    A = np.asarray(STABLE_A)
    field = ClosedLoopField(linear_system(A), FaultProfile.nominal(2))
    samples = np.random.default_rng(1).standard_normal((20, 2))
    expected = np.linalg.eigvalsh(0.5 * (A + A.T))[-1]
    assert abs(log_norm_rate(field, samples) - expected) < 1e-6


def test_sampled_sup_norm():
    mats = np.stack([np.eye(2), 3 * np.eye(2)])
    assert abs(sampled_sup_norm(mats) - 3 * np.sqrt(2)) < TOL
    assert sampled_sup_norm(np.zeros((0, 2, 2))) == 0.0


def test_empirical_velocity_of_constant_field():
    points = np.random.default_rng(2).standard_normal((50, 3))
    v = np.tile([1.0, 2.0, 3.0], (50, 1))
    out = empirical_velocity(points[:5], points, v, k=8)
    assert np.allclose(out, [1.0, 2.0, 3.0])


def test_measure_certificate_of_exact_linear_flow():
    A = -np.eye(2)
    model = ExponentialFlowMap(A, fault_dim=1)
    metric = ConstantMetric(np.eye(2), -1.0)
    x = torch.randn(32, 2, dtype=DTYPE)
    tau = torch.rand(32, 1, dtype=DTYPE)
    cond = torch.zeros(32, 3, dtype=DTYPE)
    cert = measure_certificate(metric, model, x, tau, cond, (x, tau, cond, x @ torch.as_tensor(A).T))
    assert cert.eps_ctr < 1e-10 and abs(cert.kappa - 1.0) < TOL and cert.d_bar < 1e-10
    assert cert.alpha == -1.0 and cert.n_samples == 64


def test_interpolant_velocity_samples_shapes(toy_dataset):
    model = FlowMapModel(2, 1, d_hidden=8, n_layers=1)
    x, tau, cond, b = interpolant_velocity_samples(model, toy_dataset, toy_dataset, InterpolantSchedule(),
                                                   n_samples=64, k=4)
    assert x.shape == (64, 2) and tau.shape == (64, 1) and cond.shape == (64, 3) and b.shape == (64, 2)
    assert torch.all((tau >= 0) & (tau <= 1))
