import numpy as np
import pytest

from pfo_fdir.dynamics import ClosedLoopField, FaultProfile
from pfo_fdir.errors import ConfigurationError
from pfo_fdir.spacecraft import (N_STATE, THETA, SpacecraftParams, build_spacecraft, desired_attitude,
                                 loss_of_effectiveness, nominal_trajectory, tetrahedral_allocation)

TOL = 1e-12


@pytest.fixture(scope="module")
def spacecraft():
    params = SpacecraftParams()
    return params, build_spacecraft(params)


def test_benchmark_dimensions(spacecraft):
    params, model = spacecraft
    assert model.state_dim == N_STATE == 10
    assert model.control_dim == model.fault_dim == 4
    assert np.allclose(np.linalg.norm(tetrahedral_allocation(), axis=0), 1.0, atol=TOL)
    assert params.dt == 0.02 and params.horizon_steps == 500


def test_feedback_at_rest_tracks_reference_attitude(spacecraft):
    params, model = spacecraft
    x = np.zeros((1, N_STATE))
    field = ClosedLoopField(model, FaultProfile.nominal(4))
    u = field.control(x, 0.0)[0]
    expected = np.clip(params.allocation_pinv @ (params.kp * desired_attitude(0.0)), -0.14, 0.14)
    assert np.allclose(u, expected, atol=TOL), f"wheel torques {u}, expected {expected}"
    assert np.allclose(field(x, 0.0)[0, THETA], 0.0, atol=TOL), "theta_dot = omega = 0 at rest"


def test_loss_of_effectiveness_scales_wheel_torque(spacecraft):
    _, model = spacecraft
    rng = np.random.default_rng(0)
    x = 1e-2 * rng.standard_normal((5, N_STATE))
    alpha = np.array([0.15, 0.4, 0.2, 0.25])
    faulted = ClosedLoopField(model, loss_of_effectiveness(alpha))(x, 0.3)
    u = model.saturate(model.u_cl(x, 0.3))
    expected = model.f(x, 0.3) + np.einsum("nij,nj->ni", model.g(x, 0.3), (1 - alpha) * u)
    assert np.allclose(faulted, expected, atol=TOL)


def test_invalid_parameters_are_rejected():
    with pytest.raises(ConfigurationError):
        SpacecraftParams(inertia=[1.0, -1.0, 0.8])
    with pytest.raises(ConfigurationError):
        SpacecraftParams(allocation=2 * tetrahedral_allocation())


def test_params_from_config_converts_lists():
    params = SpacecraftParams.from_config({"kp": [1.0, 2.0, 3.0], "library": [[0.0] * 4], "dt": 0.01})
    assert isinstance(params.kp, np.ndarray) and params.dt == 0.01


def test_nominal_closed_loop_tracks_desired_attitude(spacecraft):
    params, model = spacecraft
    ref = nominal_trajectory(model, params)
    assert ref.shape == (501, N_STATE)
    error = np.linalg.norm(ref[-1, THETA] - desired_attitude(params.horizon))
    assert error < 0.05, f"terminal attitude error {error:.4f} rad"
