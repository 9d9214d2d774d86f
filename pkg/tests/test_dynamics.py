import dataclasses

import numpy as np
import pytest
from scipy.linalg import expm

from pfo_fdir.dynamics import (ClosedLoopField, DatasetConfig, FaultProfile, eval_closed_loop, flow_map,
                               generate_dataset, linear_system, probability_flow_map, simulate, step_sde)
from pfo_fdir.errors import ArgumentError, ConfigurationError, NumericError
from pfo_fdir.spacecraft import N_STATE, build_spacecraft, nominal_initial_state
from tests.conftest import STABLE_A

TOL = 1e-10


def test_nominal_fault_profile():
    nominal = FaultProfile.nominal(3)
    assert nominal.is_nominal, f"nominal profile should be w = 0, got {nominal.w}"
    assert not FaultProfile([0.0, 0.1]).is_nominal
    with pytest.raises(ArgumentError):
        FaultProfile([0.5, 1.5], bounded=True)


def test_closed_loop_field_is_affine_in_fault(linear_sys):
    x = np.array([0.3, -0.7])
    w = np.array([0.2, -0.1])
    out = eval_closed_loop(ClosedLoopField(linear_sys, FaultProfile(w)), x, 0.0)
    expected = np.asarray(STABLE_A) @ x + w
    assert np.allclose(out, expected, atol=TOL), f"F_w(x) = {out}, expected {expected}"


def test_fault_dimension_mismatch(linear_sys):
    with pytest.raises(ConfigurationError):
        ClosedLoopField(linear_sys, FaultProfile([1.0, 2.0, 3.0]))


def test_saturation_after_blending(linear_sys):
    limited = dataclasses.replace(linear_sys, input_limit=0.5)
    field = ClosedLoopField(limited, FaultProfile.nominal(2), lambda x, t: np.full(2, 10.0))
    u = field.control(np.zeros((3, 2)), 0.0)
    assert np.allclose(u, 0.5), f"blended command should saturate at 0.5, got {u}"


def test_step_sde_with_zero_noise_is_euler(linear_sys):
    field = ClosedLoopField(linear_sys, FaultProfile([0.1, 0.2]))
    x = np.array([[1.0, -1.0], [0.5, 0.25]])
    dt = 0.01
    out = step_sde(field, x, 0.0, dt, noise=np.zeros((2, 2)))
    assert np.allclose(out, x + field(x, 0.0) * dt, atol=TOL)
    with pytest.raises(ArgumentError):
        step_sde(field, x, 0.0, 0.0, noise=np.zeros((2, 2)))


def test_flow_map_matches_matrix_exponential(linear_sys):
    field = ClosedLoopField(linear_sys, FaultProfile.nominal(2))
    x = np.array([1.0, 2.0])
    out = flow_map(field, x, 0.0, 1.0, steps=200)
    expected = expm(np.asarray(STABLE_A)) @ x
    assert np.allclose(out, expected, atol=1e-9), f"RK4 flow {out} differs from expm {expected}"
    assert np.array_equal(flow_map(field, x, 0.5, 0.5), x)
    with pytest.raises(ArgumentError):
        flow_map(field, x, 1.0, 0.0)


def test_deterministic_simulate_matches_flow_map(linear_sys):
    field = ClosedLoopField(linear_sys, FaultProfile([0.3, 0.0]))
    x0 = np.array([[0.2, -0.4]])
    traj = simulate(field, x0, 0.0, 0.1, 10, deterministic=True)
    assert traj.shape == (11, 1, 2), f"unexpected history shape {traj.shape}"
    assert np.allclose(traj[-1, 0], flow_map(field, x0[0], 0.0, 1.0, steps=10), atol=TOL)


def test_simulate_diverges_with_numeric_error():
    field = ClosedLoopField(linear_system([[400.0]]), FaultProfile.nominal(1))
    with pytest.raises(NumericError):
        simulate(field, np.array([1.0]), 0.0, 1.0, 200, deterministic=True)


def test_generate_dataset_layout_and_determinism(linear_sys):
    library = [FaultProfile.nominal(2), FaultProfile([0.5, 0.0])]
    config = DatasetConfig(n_trajectories=4, horizon_steps=5, dt=0.1, pair_gaps=(1, 2), seed=3)
    ds = generate_dataset(linear_sys, library, config)
    # 4 trajectories x (5 one-step + 4 two-step pairs) per fault
    assert len(ds) == 2 * 4 * (5 + 4), f"expected 72 pairs, got {len(ds)}"
    assert set(np.round((ds.t - ds.s) / 0.1).astype(int)) == {1, 2}
    assert ds.state_dim == 2 and ds.fault_dim == 2
    again = generate_dataset(linear_sys, library, config)
    assert np.array_equal(ds.x_t, again.x_t), "same seed must give identical pairs"
    other = generate_dataset(linear_sys, library, dataclasses.replace(config, seed=4))
    assert not np.array_equal(ds.x_t, other.x_t)


def test_generate_dataset_is_independent_of_library_order(linear_sys):
    f0, f1 = FaultProfile.nominal(2), FaultProfile([0.5, 0.0])
    config = DatasetConfig(n_trajectories=3, horizon_steps=4, dt=0.1, seed=1)
    ds = generate_dataset(linear_sys, [f0, f1], config)
    first = ds.subset(np.flatnonzero(ds.w[:, 0] == 0.0))
    alone = generate_dataset(linear_sys, [f0], config)
    assert np.array_equal(first.x_t, alone.x_t), "stream of trajectory k depends only on k"


def test_generate_dataset_rejects_empty_library(linear_sys):
    with pytest.raises(ArgumentError):
        generate_dataset(linear_sys, [], DatasetConfig())


def test_probability_flow_reproduces_ou_variance():
    s, t_end = 0.5, 1.0
    ou = linear_system([[-1.0]], noise=s)
    x = np.random.default_rng(0).normal(0.8, 0.3, size=(2000, 1))
    m0, v0 = x.mean(), x.var()
    out = probability_flow_map(ClosedLoopField(ou, FaultProfile.nominal(1)), x, 0.0, t_end, steps=200)
    decay = np.exp(-2 * t_end)
    var = v0 * decay + s ** 2 * (1 - decay) / 2
    assert abs(out.var() - var) < 1e-2 * var, f"variance {out.var():.5f}, OU marginal {var:.5f}"
    assert abs(out.mean() - m0 * np.exp(-t_end)) < 1e-3


def test_step_sde_hand_computed_increment():
    ou = ClosedLoopField(linear_system([[-1.0]], noise=1.0), FaultProfile.nominal(1))
    out = step_sde(ou, np.array([1.0]), 0.0, 0.01, noise=[[0.3]])
    # 1 - 0.01 + sqrt(0.01) * 0.3
    assert abs(out[0] - 1.02) < TOL, f"EM step gave {out[0]}"
    first = step_sde(ou, np.ones((4, 1)), 0.0, 0.01, rng=np.random.default_rng(5))
    second = step_sde(ou, np.ones((4, 1)), 0.0, 0.01, rng=np.random.default_rng(5))
    assert np.array_equal(first, second)


def test_flow_map_of_exponential_decay():
    decay = ClosedLoopField(linear_system([[-1.0]]), FaultProfile.nominal(1))
    out = flow_map(decay, np.array([1.0]), 0.0, 1.0, steps=100)
    assert abs(out[0] - np.exp(-1.0)) < 1e-6


def test_flow_map_semigroup_on_linear_system(linear_sys):
    field = ClosedLoopField(linear_sys, FaultProfile([0.2, -0.3]))
    x = np.random.default_rng(6).standard_normal((5, 2))
    half = flow_map(field, x, 0.0, 0.5, steps=50)
    composed = flow_map(field, half, 0.5, 1.0, steps=50)
    direct = flow_map(field, x, 0.0, 1.0, steps=100)
    assert np.max(np.abs(composed - direct)) < 1e-8, f"semigroup gap {np.max(np.abs(composed - direct))}"


def test_flow_map_semigroup_on_spacecraft():
    field = ClosedLoopField(build_spacecraft(), FaultProfile([0.3, 0.0, 0.0, 0.0]))
    rng = np.random.default_rng(7)
    x = nominal_initial_state() + 0.05 * rng.standard_normal((3, N_STATE))
    r, s, t = 0.0, 0.4, 1.0
    composed = flow_map(field, flow_map(field, x, r, s, steps=20), s, t, steps=30)
    direct = flow_map(field, x, r, t, steps=50)
    assert np.max(np.abs(composed - direct)) < 1e-6, f"semigroup gap {np.max(np.abs(composed - direct))}"


def test_zero_fault_without_correction_is_nominal_field():
    model = build_spacecraft()
    rng = np.random.default_rng(8)
    plain = ClosedLoopField(model, FaultProfile.nominal(model.fault_dim))
    zero_correction = ClosedLoopField(model, FaultProfile.nominal(model.fault_dim),
                                      lambda x, t: np.zeros((len(x), model.control_dim)))
    for t in rng.uniform(0.0, 10.0, size=20):
        x = nominal_initial_state(t) + 0.1 * rng.standard_normal((50, N_STATE))
        nominal = model.f(x, t) + np.einsum("nij,nj->ni", model.g(x, t), model.saturate(model.u_cl(x, t)))
        for field in (plain, zero_correction):
            out = eval_closed_loop(field, x, t)
            gap = np.max(np.abs(out - nominal))
            assert gap < TOL, f"t={t:.3f}: zero-fault field differs from nominal by {gap}"
