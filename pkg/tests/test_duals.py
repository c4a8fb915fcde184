"""Dual weight recursion against frozen values and finite differences."""

import numpy as np
import pytest

from jumpmc import (
    CapabilityError,
    ParameterError,
    backward_duals,
    build_augmented_grid,
    build_model,
    euler_operator_derivatives,
    euler_path,
    jump_operator_derivatives,
    no_jumps,
    sample_wiener_increments,
    uniform_mesh,
)
from jumpmc.jumps import JumpRealization
from jumpmc.model import JumpDiffusionModel


def linear_model(rate=2.0, payoff_quadratic=True):
    """a = rate * x, b = 1, no jumps; duals have closed products."""

    def drift(t, x):
        return rate * x

    def diffusion(t, x):
        return np.ones((1, 1))

    return JumpDiffusionModel(
        dim=1,
        wiener_dim=1,
        mark_dim=1,
        drift=drift,
        diffusion=diffusion,
        jump=lambda t, x, z: np.zeros(1),
        intensity=lambda t: 0.0,
        intensity_bound=0.0,
        mark_sampler=lambda t, rng: np.zeros(1),
        payoff=lambda x: float(x[0] ** 2),
        drift_t=lambda t, x: np.zeros(1),
        drift_x=lambda t, x: np.array([[rate]]),
        drift_xx=lambda t, x: np.zeros((1, 1, 1)),
        drift_xxx=lambda t, x: np.zeros((1, 1, 1, 1)),
        diffusion_t=lambda t, x: np.zeros((1, 1)),
        diffusion_x=lambda t, x: np.zeros((1, 1, 1)),
        diffusion_xx=lambda t, x: np.zeros((1, 1, 1, 1)),
        diffusion_xxx=lambda t, x: np.zeros((1, 1, 1, 1, 1)),
        jump_x=lambda t, x, z: np.zeros((1, 1)),
        jump_xx=lambda t, x, z: np.zeros((1, 1, 1)),
        jump_xxx=lambda t, x, z: np.zeros((1, 1, 1, 1)),
        payoff_x=lambda x: 2.0 * x,
        payoff_xx=lambda x: 2.0 * np.eye(1),
        payoff_xxx=lambda x: np.zeros((1, 1, 1)),
        x0=np.array([1.0]),
        horizon=1.0,
        name="linear",
    )


def frozen_test5_path(n=4, key=314, with_jumps=True):
    m = build_model("test5")
    if with_jumps:
        jumps = JumpRealization(
            times=np.array([0.3, 0.7]), marks=np.array([[0.8], [-0.6]])
        )
    else:
        jumps = no_jumps()
    grid = build_augmented_grid(uniform_mesh(1.0, n), jumps, horizon=1.0)
    rng = np.random.Generator(np.random.Philox(key=key))
    dw = sample_wiener_increments(grid, rng, m.wiener_dim)
    return m, grid, dw


def test_euler_operator_jacobian_frozen():
    # a = 2x, b = 0 noise: A = x + 2x dt, so dA/dx = 1 + 2 * 0.05 = 1.1.
    m = linear_model(rate=2.0)
    A1, A2, A3 = euler_operator_derivatives(
        m, 0.0, np.array([3.0]), 0.05, np.zeros(1), order=3
    )
    assert A1[0, 0] == pytest.approx(1.1, rel=1e-15)
    assert np.all(A2 == 0.0) and np.all(A3 == 0.0)


def test_euler_operator_includes_noise_term():
    m = build_model("test5")
    x = np.array([0.4, -0.2])
    A1, _, _ = euler_operator_derivatives(m, 0.0, x, 0.1, np.array([0.25]), order=1)
    expect = np.eye(2) + 0.1 * m.drift_x(0.0, x) + 0.25 * m.diffusion_x(0.0, x)[:, 0, :]
    np.testing.assert_allclose(A1, expect, rtol=1e-14)


def test_jump_operator_frozen_second_derivative():
    # c2 = z cos(x1)/sqrt(1+t) - x2 at t=0.5, x=(0,3), z=1:
    # d2 c2 / dx1 dx1 = -cos(0)/sqrt(1.5).
    m = build_model("test5")
    C1, C2, C3 = jump_operator_derivatives(
        m, 0.5, np.array([0.0, 3.0]), np.array([1.0]), order=3
    )
    np.testing.assert_allclose(C1, [[1.0, 0.0], [0.0, 0.0]], atol=1e-15)
    assert C2[1, 0, 0] == pytest.approx(-1.0 / np.sqrt(1.5), rel=1e-14)
    assert C3[1, 0, 0, 0] == pytest.approx(0.0, abs=1e-15)


def test_operator_order_validation():
    m = build_model("test5")
    with pytest.raises(ParameterError):
        euler_operator_derivatives(m, 0.0, m.x0, 0.1, np.zeros(1), order=4)
    with pytest.raises(ParameterError):
        jump_operator_derivatives(m, 0.0, m.x0, np.zeros(1), order=0)


def test_linear_model_closed_form_duals():
    # One step of size dt multiplies phi by (1 + rate dt); phi' picks up
    # the square of the same factor.
    m = linear_model(rate=2.0)
    grid = build_augmented_grid(uniform_mesh(1.0, 5), no_jumps(), horizon=1.0)
    dw = np.zeros((5, 1))
    path = euler_path(m, grid, dw)
    duals = backward_duals(m, path, order=2)
    x_T = path.terminal[0]
    factor = 1.0 + 2.0 * 0.2
    for n in range(6):
        expect_phi = 2.0 * x_T * factor ** (5 - n)
        assert duals.phi[n, 0] == pytest.approx(expect_phi, rel=1e-13)
        assert duals.phi1[n, 0, 0] == pytest.approx(
            2.0 * factor ** (2 * (5 - n)), rel=1e-13
        )


def test_terminal_duals_are_payoff_derivatives():
    m, grid, dw = frozen_test5_path()
    path = euler_path(m, grid, dw)
    duals = backward_duals(m, path, order=3)
    x_T = path.terminal
    np.testing.assert_allclose(duals.phi[-1], 2.0 * x_T, rtol=1e-15)
    np.testing.assert_allclose(duals.phi1[-1], 2.0 * np.eye(2), rtol=1e-15)
    np.testing.assert_allclose(duals.phi2[-1], np.zeros((2, 2, 2)), atol=1e-15)


def payoff_from(m, grid, dw, x0):
    return float(m.payoff(euler_path(m, grid, dw, x0=x0).terminal))


def test_first_order_duals_match_finite_differences():
    m, grid, dw = frozen_test5_path()
    path = euler_path(m, grid, dw)
    duals = backward_duals(m, path, order=1)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (
            payoff_from(m, grid, dw, m.x0 + e) - payoff_from(m, grid, dw, m.x0 - e)
        ) / (2.0 * h)
        assert fd == pytest.approx(duals.phi_left[0, j], rel=1e-4, abs=1e-8)


def test_second_order_duals_match_finite_differences():
    m, grid, dw = frozen_test5_path()
    path = euler_path(m, grid, dw)
    duals = backward_duals(m, path, order=2)
    h = 1e-4
    for i in range(2):
        for j in range(2):
            ei = np.zeros(2)
            ej = np.zeros(2)
            ei[i] = h
            ej[j] = h
            fd = (
                payoff_from(m, grid, dw, m.x0 + ei + ej)
                - payoff_from(m, grid, dw, m.x0 + ei - ej)
                - payoff_from(m, grid, dw, m.x0 - ei + ej)
                + payoff_from(m, grid, dw, m.x0 - ei - ej)
            ) / (4.0 * h * h)
            assert fd == pytest.approx(duals.phi1_left[0, i, j], rel=1e-3, abs=1e-6)


def test_duals_symmetry_randomized():
    # phi' is a Hessian and phi'' a third derivative of the same scalar
    # map, so both are symmetric in their derivative axes.
    for key in range(8):
        m, grid, dw = frozen_test5_path(n=3, key=1000 + key)
        path = euler_path(m, grid, dw)
        duals = backward_duals(m, path, order=3)
        for arr in (duals.phi1, duals.phi1_left):
            assert np.max(np.abs(arr - arr.transpose(0, 2, 1))) <= 1e-12
        for perm in ((0, 1, 3, 2), (0, 2, 1, 3), (0, 3, 2, 1)):
            assert np.max(np.abs(duals.phi2 - duals.phi2.transpose(*perm))) <= 1e-12


def test_zero_jump_map_passes_duals_through():
    # c == 0 makes the jump block the identity, so left limits equal node
    # values even at jump nodes.
    m = linear_model()
    jumps = JumpRealization(times=np.array([0.5]), marks=np.array([[1.0]]))
    grid = build_augmented_grid(uniform_mesh(1.0, 2), jumps, horizon=1.0)
    dw = np.zeros((grid.n_steps, 1))
    path = euler_path(m, grid, dw)
    duals = backward_duals(m, path, order=2)
    np.testing.assert_array_equal(duals.phi, duals.phi_left)
    np.testing.assert_array_equal(duals.phi1, duals.phi1_left)


def test_order_validation_and_capability():
    m, grid, dw = frozen_test5_path()
    path = euler_path(m, grid, dw)
    with pytest.raises(ParameterError):
        backward_duals(m, path, order=4)
    import dataclasses

    crippled = dataclasses.replace(build_model("test5"), drift_xx=None)
    with pytest.raises(CapabilityError, match="drift_xx"):
        backward_duals(crippled, path, order=2)
    # Order 1 does not need the missing callback.
    backward_duals(crippled, path, order=1)


def test_higher_arrays_none_below_order():
    m, grid, dw = frozen_test5_path()
    path = euler_path(m, grid, dw)
    d1 = backward_duals(m, path, order=1)
    assert d1.phi1 is None and d1.phi2 is None
    d2 = backward_duals(m, path, order=2)
    assert d2.phi1 is not None and d2.phi2 is None
