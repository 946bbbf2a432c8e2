"""Fixed-point drivers: particle transport, Picard iteration, limit systems."""

import numpy as np
import pytest

from mfglab import (
    InvalidInputError,
    PhaseGrid,
    TransportError,
    UnsupportedModelError,
    ValueField,
    continuity_residuals,
    lattice_ensemble,
    make_lagrangian,
    make_terminal,
    solve_eps_system,
    solve_limit_classical,
    solve_mfg_of_control,
    transport_eps,
    wasserstein1_joint,
)
from mfglab.hjb import solve_hjb_acceleration
from mfglab.measures import ParticleEnsemble
from mfglab.mfg import _sup_t_marginal_gap, free_transport_flow

from oracles import lq_limit_feedback, lq_limit_path

SMALL = PhaseGrid.regular(N_x=41, N_v=31, N_t=51)
ZERO_G = make_terminal("zero")


def _phase_field(values_fn, grid, eps):
    vals = np.empty((grid.t.size, grid.x.size, grid.v.size))
    vals[:] = values_fn(grid.x[:, None], grid.v[None, :])
    return ValueField(vals, grid, eps)


def test_free_transport_when_gradient_vanishes():
    mu0 = ParticleEnsemble(np.array([0.0, 0.5]), np.array([1.0, -0.5]))
    field = _phase_field(lambda x, v: np.ones_like(x + v), SMALL, 0.5)
    flow = transport_eps(mu0, field, 0.5)
    expected = mu0.positions[None, :] + SMALL.t[:, None] * mu0.velocities[None, :]
    assert np.allclose(flow.positions, expected, atol=1e-12)
    assert np.allclose(flow.velocities, mu0.velocities[None, :], atol=1e-12)


def test_transport_exponential_velocity_decay():
    # u = eps v^2 / 2 gives v' = -v, so v(t) = v0 exp(-t)
    grid = PhaseGrid.regular(N_t=1001)
    eps = 1.0
    field = _phase_field(lambda x, v: 0.5 * eps * v**2, grid, eps)
    mu0 = ParticleEnsemble(np.array([0.0]), np.array([0.5]))
    flow = transport_eps(mu0, field, eps)
    exact = 0.5 * np.exp(-grid.t)
    assert np.max(np.abs(flow.velocities[:, 0] - exact)) < 1e-4


def test_transport_mass_conservation_and_validation():
    mu0 = lattice_ensemble(16)
    field = _phase_field(lambda x, v: np.zeros_like(x + v), SMALL, 0.1)
    flow = transport_eps(mu0, field, 0.1)
    assert flow.weights is mu0.weights or np.allclose(flow.weights, mu0.weights)
    with pytest.raises(InvalidInputError):
        transport_eps(mu0, field, 0.0)


def test_transport_box_exit_names_particle():
    mu0 = ParticleEnsemble(np.array([0.0, 2.9]), np.array([0.0, 3.9]))
    field = _phase_field(lambda x, v: np.zeros_like(x + v), SMALL, 0.1)
    with pytest.raises(TransportError) as err:
        transport_eps(mu0, field, 0.1)
    assert err.value.particle == 1
    assert err.value.t is not None


def test_decoupled_system_single_iteration():
    spec = make_lagrangian("quadratic")
    mu0 = lattice_ensemble(25)
    sol = solve_eps_system(spec, ZERO_G, SMALL, mu0, 0.1)
    assert sol.converged and sol.iterations == 1 and sol.fixed_point_gap == 0.0
    assert sol.kind == "eps_system"


def test_coupled_system_fixed_point_certificate():
    spec = make_lagrangian("quadratic", kappa_c=0.5)
    mu0 = lattice_ensemble(64)
    tol = 1e-3
    sol = solve_eps_system(spec, ZERO_G, SMALL, mu0, 0.1, tol_fp=tol)
    assert sol.converged
    assert sol.fixed_point_gap < tol
    # one extra full iteration moves the flow by < 2 tol
    u2 = solve_hjb_acceleration(SMALL, spec, sol.flow, ZERO_G, 0.1)
    new = transport_eps(mu0, u2, 0.1)
    moved = _sup_t_marginal_gap(new.positions, sol.flow.positions, mu0.weights)
    assert moved < 2 * tol
    # re-solving the value problem with the returned flow barely changes u
    assert np.max(np.abs(u2.values - sol.value.values)) < 1e-2


def test_coupled_gap_history_decreases():
    spec = make_lagrangian("quadratic", kappa_c=0.5)
    mu0 = lattice_ensemble(64)
    sol = solve_eps_system(spec, ZERO_G, SMALL, mu0, 0.1)
    hist = sol.gap_history
    assert all(hist[i + 1] <= hist[i] for i in range(2, len(hist) - 1))


def test_limit_classical_decoupled_riccati_path():
    spec = make_lagrangian("quadratic", kappa_pot=1.0)
    grid = PhaseGrid(
        x=np.linspace(-3.0, 3.0, 301),
        v=np.linspace(-2.5, 2.5, 251),
        t=np.linspace(0.0, 1.0, 201),
    )
    mu0 = ParticleEnsemble(np.array([1.0, -0.5]), np.array([0.0, 0.0]))
    sol = solve_limit_classical(spec, ZERO_G, grid, mu0)
    assert sol.converged and sol.iterations == 1
    exact = lq_limit_path(1.0, 1.0, grid.t, 1.0)
    err = np.max(np.abs(sol.flow.positions[:, 0] - exact))
    assert err < 0.01 * np.max(np.abs(exact))


def test_limit_classical_continuity_residuals():
    spec = make_lagrangian("quadratic")
    grid = PhaseGrid.regular(N_x=201)
    mu0 = lattice_ensemble(400)
    sol = solve_limit_classical(spec, ZERO_G, grid, mu0)
    res = continuity_residuals(sol, spec)
    assert res.shape == (5,)
    assert np.all(res < 1e-2)


def test_mfg_of_control_trivial_model():
    spec = make_lagrangian("quadratic", kappa_pot=0.0)
    mu0 = lattice_ensemble(25)
    sol = solve_mfg_of_control(spec, ZERO_G, SMALL, mu0)
    assert sol.converged
    assert np.allclose(sol.value.values, 0.0, atol=1e-13)
    assert np.allclose(sol.flow.positions, mu0.positions[None, :], atol=1e-12)
    assert np.allclose(sol.flow.velocities[0], mu0.velocities, atol=0.0)
    assert np.allclose(sol.flow.velocities[1:], 0.0, atol=1e-12)


def test_mfg_of_control_riccati_feedback():
    spec = make_lagrangian("quadratic", kappa_pot=1.0)
    grid = PhaseGrid(
        x=np.linspace(-3.0, 3.0, 301),
        v=np.linspace(-2.5, 2.5, 251),
        t=np.linspace(0.0, 1.0, 201),
    )
    mu0 = ParticleEnsemble(np.array([1.0, -0.8]), np.array([0.3, 0.0]))
    sol = solve_mfg_of_control(spec, ZERO_G, grid, mu0)
    fb = lq_limit_feedback(1.0, 1.0, grid.t[:, None], sol.flow.positions)
    err = np.max(np.abs(sol.flow.velocities[1:] - fb[1:]))
    assert err < 0.01


def test_mfg_of_control_reconstruction_consistency():
    spec = make_lagrangian("quadratic")
    mu0 = lattice_ensemble(36)
    sol = solve_mfg_of_control(spec, ZERO_G, SMALL, mu0)
    # attach the feedback velocity to the transported marginal by hand
    for k in (SMALL.t.size // 2, SMALL.t.size - 1):
        rebuilt = ParticleEnsemble(
            sol.flow.positions[k], sol.flow.velocities[k], sol.flow.weights
        )
        assert float(wasserstein1_joint(sol.flow.ensemble(k), rebuilt)) == 0.0


def test_mfg_of_control_rejects_nonquadratic():
    spec = make_lagrangian("quartic")
    with pytest.raises(UnsupportedModelError):
        solve_mfg_of_control(spec, ZERO_G, SMALL, lattice_ensemble(9))


def test_free_transport_flow_requires_velocities():
    with pytest.raises(InvalidInputError):
        free_transport_flow(ParticleEnsemble(np.array([0.0])), SMALL)


def test_compact_support_propagation():
    spec = make_lagrangian("quadratic")
    mu0 = lattice_ensemble(100)
    sol = solve_eps_system(spec, ZERO_G, SMALL, mu0, 0.05)
    assert np.max(np.abs(sol.flow.positions)) <= SMALL.R_x
    assert np.max(np.abs(sol.flow.velocities)) <= SMALL.R_v
