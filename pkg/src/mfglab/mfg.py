"""Fixed-point drivers coupling the value solvers with particle transport.

Damped Picard iteration: solve the backward value problem given the current
measure flow, push the particles forward, and mix trajectories (convex
combination of particle paths sharing the initial ensemble) until the measure
flow is self-consistent in sup-over-time W1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, TransportError, UnsupportedModelError
from .hjb import (
    ControlSet,
    PhaseGrid,
    ValueField,
    gradient_x,
    interp_slice_x,
    interp_slice_xv,
    solve_hjb_acceleration,
    solve_hjb_limit_classical,
    solve_hjb_mfg_control,
)
from .measures import MeasureFlow, ParticleEnsemble, wasserstein1_1d
from .model import LagrangianSpec, TerminalCost, optimal_velocity_field


@dataclass(frozen=True)
class MFGSolution:
    value: ValueField
    flow: MeasureFlow
    iterations: int
    fixed_point_gap: float
    gap_history: tuple
    converged: bool
    kind: str  # eps_system | classical_limit | mfg_of_control


def _check_box(X, V, grid: PhaseGrid, t):
    bad = np.abs(X) > grid.R_x
    if V is not None:
        bad = bad | (np.abs(V) > grid.R_v)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise TransportError(
            f"particle {i} left the grid box at t={t:.4f}; increase R_x/R_v", t=float(t), particle=i
        )


def free_transport_flow(mu0: ParticleEnsemble, grid: PhaseGrid) -> MeasureFlow:
    if not mu0.is_joint:
        raise InvalidInputError("the initial ensemble must carry velocities")
    t = grid.t
    X = mu0.positions[None, :] + t[:, None] * mu0.velocities[None, :]
    V = np.broadcast_to(mu0.velocities, (t.size, mu0.size)).copy()
    return MeasureFlow(t, X, V, mu0.weights)


def transport_eps(
    mu0: ParticleEnsemble,
    field: ValueField,
    eps: float,
    dt_inner_factor: float = 4.0,
) -> MeasureFlow:
    """Integrate x' = v, v' = -(1/eps) D_v u along the value field.

    Inner sub-steps of size min(dt, eps/dt_inner_factor) guard against the
    stiffness of the velocity equation.
    """
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if not field.is_phase:
        raise InvalidInputError("transport_eps needs a (t, x, v) value field")
    grid = field.grid
    dv_field = np.gradient(field.values, grid.dv, axis=2)
    t = grid.t
    dt = grid.dt
    n_sub = max(1, int(np.ceil(dt / min(dt, eps / dt_inner_factor))))
    dti = dt / n_sub
    n = mu0.size
    X = np.empty((t.size, n))
    V = np.empty((t.size, n))
    X[0], V[0] = mu0.positions, mu0.velocities
    for k in range(t.size - 1):
        xc, vc = X[k].copy(), V[k].copy()
        for _ in range(n_sub):
            dv = interp_slice_xv(dv_field[k], grid, xc, vc)
            xc = xc + dti * vc
            vc = vc - (dti / eps) * dv
        _check_box(xc, vc, grid, t[k + 1])
        X[k + 1], V[k + 1] = xc, vc
    return MeasureFlow(t, X, V, mu0.weights)


def transport_along_velocity(
    m0_positions: np.ndarray,
    weights: np.ndarray,
    field: ValueField,
    spec: LagrangianSpec,
    substeps: int = 4,
):
    """Push marginal particles along the optimizing velocity b(t, x) of a limit field.

    Returns (positions, velocities) arrays of shape (n_times, n_particles) where
    velocities[k, i] = b(t_k, x_i(t_k)).
    """
    grid = field.grid
    b_field = optimal_velocity_field(spec, gradient_x(field))  # (n_t, n_x)
    t = grid.t
    dt = grid.dt
    dti = dt / substeps
    X = np.empty((t.size, m0_positions.size))
    B = np.empty_like(X)
    X[0] = m0_positions
    B[0] = interp_slice_x(b_field[0], grid, X[0])
    for k in range(t.size - 1):
        xc = X[k].copy()
        for _ in range(substeps):
            xc = xc + dti * interp_slice_x(b_field[k], grid, xc)
        _check_box(xc, None, grid, t[k + 1])
        X[k + 1] = xc
        B[k + 1] = interp_slice_x(b_field[k + 1], grid, xc)
    return X, B


def _sup_t_marginal_gap(Xa, Xb, weights):
    """sup over time nodes of W1 between the marginal ensembles of two path arrays."""
    n = Xa.shape[1]
    if np.allclose(weights, 1.0 / n):
        return float(np.max(np.mean(np.abs(np.sort(Xa, axis=1) - np.sort(Xb, axis=1)), axis=1)))
    gaps = [
        wasserstein1_1d(
            ParticleEnsemble(Xa[k], None, weights), ParticleEnsemble(Xb[k], None, weights)
        )
        for k in range(Xa.shape[0])
    ]
    return float(np.max(gaps))


def _sup_t_paired_joint_gap(Xa, Va, Xb, Vb, weights):
    """Paired-transport upper bound on sup_t d1 for joint flows sharing particles."""
    per_t = np.sum(weights * (np.abs(Xa - Xb) + np.abs(Va - Vb)), axis=1)
    return float(np.max(per_t))


def solve_eps_system(
    spec: LagrangianSpec,
    g: TerminalCost,
    grid: PhaseGrid,
    mu0: ParticleEnsemble,
    eps: float,
    controls: ControlSet | None = None,
    damping: float = 0.5,
    tol_fp: float = 1e-3,
    max_iter: int = 60,
    dt_inner_factor: float = 4.0,
) -> MFGSolution:
    """Damped Picard iteration for the penalized system."""
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    decoupled = spec.coupling_kind == "none" or spec.coupling_strength == 0.0
    if decoupled:
        u = solve_hjb_acceleration(grid, spec, None, g, eps, controls)
        flow = transport_eps(mu0, u, eps, dt_inner_factor)
        return MFGSolution(u, flow, 1, 0.0, (0.0,), True, "eps_system")
    flow = free_transport_flow(mu0, grid)
    history = []
    u = None
    for it in range(1, max_iter + 1):
        u = solve_hjb_acceleration(grid, spec, flow, g, eps, controls)
        new = transport_eps(mu0, u, eps, dt_inner_factor)
        Xm = (1.0 - damping) * flow.positions + damping * new.positions
        Vm = (1.0 - damping) * flow.velocities + damping * new.velocities
        gap = _sup_t_marginal_gap(Xm, flow.positions, mu0.weights)
        flow = MeasureFlow(grid.t, Xm, Vm, mu0.weights)
        history.append(gap)
        if gap < tol_fp:
            return MFGSolution(u, flow, it, gap, tuple(history), True, "eps_system")
    return MFGSolution(u, flow, max_iter, history[-1], tuple(history), False, "eps_system")


def solve_limit_classical(
    spec: LagrangianSpec,
    g: TerminalCost,
    grid: PhaseGrid,
    mu0: ParticleEnsemble,
    controls: ControlSet | None = None,
    damping: float = 0.5,
    tol_fp: float = 1e-3,
    max_iter: int = 60,
    substeps: int = 4,
) -> MFGSolution:
    """Classical limit system: value on (t, x), marginal particles transported
    along the optimizing velocity."""
    m0_pos = mu0.positions
    decoupled = spec.coupling_kind == "none" or spec.coupling_strength == 0.0
    if decoupled:
        u = solve_hjb_limit_classical(grid, spec, None, g, controls)
        X, _ = transport_along_velocity(m0_pos, mu0.weights, u, spec, substeps)
        flow = MeasureFlow(grid.t, X, None, mu0.weights)
        return MFGSolution(u, flow, 1, 0.0, (0.0,), True, "classical_limit")
    X = np.broadcast_to(m0_pos, (grid.t.size, m0_pos.size)).copy()
    flow = MeasureFlow(grid.t, X, None, mu0.weights)
    history = []
    u = None
    for it in range(1, max_iter + 1):
        u = solve_hjb_limit_classical(grid, spec, flow, g, controls)
        Xn, _ = transport_along_velocity(m0_pos, mu0.weights, u, spec, substeps)
        Xm = (1.0 - damping) * flow.positions + damping * Xn
        gap = _sup_t_marginal_gap(Xm, flow.positions, mu0.weights)
        flow = MeasureFlow(grid.t, Xm, None, mu0.weights)
        history.append(gap)
        if gap < tol_fp:
            return MFGSolution(u, flow, it, gap, tuple(history), True, "classical_limit")
    return MFGSolution(u, flow, max_iter, history[-1], tuple(history), False, "classical_limit")


def solve_mfg_of_control(
    spec: LagrangianSpec,
    g: TerminalCost,
    grid: PhaseGrid,
    mu0: ParticleEnsemble,
    controls: ControlSet | None = None,
    damping: float = 0.5,
    tol_fp: float = 1e-3,
    max_iter: int = 60,
    substeps: int = 4,
) -> MFGSolution:
    """State-control limit: marginal transport plus velocity reconstruction.

    The joint flow keeps the initial ensemble at t = 0 and attaches the
    optimizing feedback velocity b(t, x_i) at later nodes.
    """
    if not spec.is_quadratic_kinetic:
        raise UnsupportedModelError("the state-control limit requires the quadratic kinetic term")

    def reconstruct(u):
        X, B = transport_along_velocity(mu0.positions, mu0.weights, u, spec, substeps)
        V = B.copy()
        V[0] = mu0.velocities  # initial condition takes precedence over reconstruction
        return MeasureFlow(grid.t, X, V, mu0.weights)

    decoupled = spec.coupling_kind == "none" or spec.coupling_strength == 0.0
    if decoupled:
        u = solve_hjb_mfg_control(grid, spec, None, g, controls)
        return MFGSolution(u, reconstruct(u), 1, 0.0, (0.0,), True, "mfg_of_control")
    flow = free_transport_flow(mu0, grid)
    history = []
    u = None
    for it in range(1, max_iter + 1):
        u = solve_hjb_mfg_control(grid, spec, flow, g, controls)
        new = reconstruct(u)
        Xm = (1.0 - damping) * flow.positions + damping * new.positions
        Vm = (1.0 - damping) * flow.velocities + damping * new.velocities
        gap = _sup_t_paired_joint_gap(Xm, Vm, flow.positions, flow.velocities, mu0.weights)
        flow = MeasureFlow(grid.t, Xm, Vm, mu0.weights)
        history.append(gap)
        if gap < tol_fp:
            return MFGSolution(u, flow, it, gap, tuple(history), True, "mfg_of_control")
    return MFGSolution(u, flow, max_iter, history[-1], tuple(history), False, "mfg_of_control")
