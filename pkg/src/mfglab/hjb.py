"""Backward semi-Lagrangian solvers for the penalized and limit value functions.

The penalized problem is solved on a (t, x, v) box with a discrete acceleration
control set; the limit problems are solved on (t, x) with velocity controls.
Foot points fall on fixed offsets of the grid, so the multilinear interpolation
stencils are precomputed once and each backward step reduces to gathers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError, UnsupportedModelError
from .measures import MeasureFlow
from .model import LagrangianSpec, TerminalCost


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform (t, x, v) box [0,T] x [-R_x,R_x] x [-R_v,R_v]."""

    x: np.ndarray
    v: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for name in ("x", "v", "t"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.size < 3:
                raise ConfigurationError(f"grid axis {name} needs at least 3 nodes")
            object.__setattr__(self, name, arr)

    @classmethod
    def regular(cls, R_x=3.0, R_v=4.0, T=1.0, N_x=101, N_v=81, N_t=201):
        return cls(
            x=np.linspace(-R_x, R_x, N_x),
            v=np.linspace(-R_v, R_v, N_v),
            t=np.linspace(0.0, T, N_t),
        )

    @property
    def dx(self):
        return self.x[1] - self.x[0]

    @property
    def dv(self):
        return self.v[1] - self.v[0]

    @property
    def dt(self):
        return self.t[1] - self.t[0]

    @property
    def T(self):
        return float(self.t[-1])

    @property
    def R_x(self):
        return float(self.x[-1])

    @property
    def R_v(self):
        return float(self.v[-1])

    def velocity_box_margin(self, q1: float, rv0: float) -> float:
        """Margin of the energy-ball containment rule for the velocity box.

        Positive means the box provably contains the reachable velocities; the
        theoretical radius is extremely conservative, so this is reported by the
        audits rather than enforced at construction.
        """
        return self.R_v - np.sqrt(q1 * (1.0 + rv0**2)) / np.sqrt(self.T)


@dataclass(frozen=True)
class ControlSet:
    """Symmetric discrete control values containing 0."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.size % 2 == 0:
            raise ConfigurationError("control set must have an odd point count (0 must be a node)")
        if not np.allclose(vals, -vals[::-1]):
            raise ConfigurationError("control set must be symmetric about 0")
        object.__setattr__(self, "values", vals)

    @classmethod
    def symmetric(cls, a_max: float, n: int):
        return cls(np.linspace(-a_max, a_max, n))

    @property
    def a_max(self):
        return float(self.values[-1])


@dataclass(frozen=True)
class ValueField:
    """Discrete value function: shape (N_t, N_x, N_v) for eps > 0, (N_t, N_x) for a limit."""

    values: np.ndarray
    grid: PhaseGrid
    eps: float

    @property
    def is_phase(self) -> bool:
        return self.values.ndim == 3

    def probe(self, t, x, v=None):
        """Value at the nearest (t, x[, v]) node."""
        k = int(np.argmin(np.abs(self.grid.t - t)))
        i = int(np.argmin(np.abs(self.grid.x - x)))
        if self.is_phase:
            j = int(np.argmin(np.abs(self.grid.v - v)))
            return float(self.values[k, i, j])
        return float(self.values[k, i])


def _stencil_1d(q, nodes):
    """Clamped linear-interpolation stencil: base index, fraction, outward excess."""
    h = nodes[1] - nodes[0]
    s = (q - nodes[0]) / h
    i0 = np.clip(np.floor(s).astype(np.int64), 0, nodes.size - 2)
    frac = np.clip(s - i0, 0.0, 1.0)
    excess = np.maximum(nodes[0] - q, q - nodes[-1])
    return i0, frac, np.maximum(excess, 0.0)


def _coupling_slice(spec: LagrangianSpec, x, m_flow: MeasureFlow | None, k: int):
    if m_flow is None or spec.coupling_kind == "none" or spec.coupling_strength == 0.0:
        return np.zeros_like(x)
    return spec.coupling_value(x, m_flow.marginal(k))


def solve_hjb_acceleration(
    grid: PhaseGrid,
    spec: LagrangianSpec,
    m_flow: MeasureFlow | None,
    g: TerminalCost,
    eps: float,
    controls: ControlSet | None = None,
) -> ValueField:
    """Backward sweep for the acceleration-penalized value function.

    Each node minimizes, over discrete accelerations a,

        dt * (eps/2 a^2) + dt/2 * (L0 at the node + L0 at the foot point)
            + Interp u(t+dt, x + dt v + dt^2/2 a, v + dt a),

    i.e. a midpoint-accurate characteristic with trapezoidal running cost.
    Foot points outside the box are charged the growth-envelope penalty so
    outward excursions are suboptimal.
    """
    if eps <= 0:
        raise InvalidInputError("eps must be positive; use a limit solver for eps = 0")
    if controls is None:
        # the braking layer uses accelerations of order |v - b| / sqrt(eps), so
        # a fixed control box would throttle the layer at small eps
        controls = ControlSet.symmetric(max(8.0, 0.75 * grid.R_v / np.sqrt(eps)), 41)
    x, v, t = grid.x, grid.v, grid.t
    dt = grid.dt
    if dt * controls.a_max > 10.0 * max(grid.dx, grid.dv):
        raise ConfigurationError(
            "time step moves the velocity foot point more than 10 grid cells; refine t or coarsen a"
        )
    n_x, n_v, n_t = x.size, v.size, t.size
    a = controls.values
    n_a = a.size
    m0, T = spec.M0, grid.T

    # time-independent foot-point stencils
    foot_x = x[None, :, None] + dt * v[None, None, :] + 0.5 * dt**2 * a[:, None, None]
    foot_v = v[None, :] + dt * a[:, None]
    ix0, fx, ex_x = _stencil_1d(foot_x, x)  # (n_a, n_x, n_v)
    iv0, fv, ex_v = _stencil_1d(foot_v, v)  # (n_a, n_v)

    lin = np.empty((n_a, 4, n_x, n_v), dtype=np.int64)
    wgt = np.empty((n_a, 4, n_x, n_v))
    c = 0
    for cx, wx in ((0, 1.0 - fx), (1, fx)):
        for cv_off in (0, 1):
            lin[:, c] = (ix0 + cx) * n_v + (iv0 + cv_off)[:, None, :]
            wv = (1.0 - fv) if cv_off == 0 else fv
            wgt[:, c] = wx * wv[:, None, :]
            c += 1
    lin = lin.reshape(n_a, 4, n_x * n_v)
    wgt = wgt.reshape(n_a, 4, n_x * n_v)

    # growth-envelope penalties for clamped foot points
    pen_x = m0 * T * (1.0 + v[None, None, :] ** 2) * ex_x  # (n_a, n_x, n_v)
    pen_v = m0 * T * ex_v * (ex_v + 2.0 * grid.R_v)  # (n_a, n_v)
    const = (
        pen_x
        + pen_v[:, None, :]
        + dt * (0.5 * eps * a[:, None, None] ** 2)
        + 0.5 * dt * (spec.kinetic(foot_v)[:, None, :] + spec.potential(foot_x))
    ).reshape(n_a, n_x * n_v)

    # trapezoid rule: half the running cost at the node, half at the foot point
    kinetic_term = 0.5 * spec.kinetic(v)[None, :]
    potential_term = 0.5 * spec.potential(x)[:, None]

    u = np.empty((n_t, n_x, n_v))
    m_terminal = None if m_flow is None else m_flow.marginal(n_t - 1)
    u[-1] = np.broadcast_to(np.asarray(g.g(x, m_terminal), dtype=float)[:, None], (n_x, n_v))
    for k in range(n_t - 2, -1, -1):
        un = u[k + 1].ravel()
        cand = np.einsum("acn,acn->an", wgt, un[lin]) + const
        running = kinetic_term + potential_term + _coupling_slice(spec, x, m_flow, k)[:, None]
        u[k] = cand.min(axis=0).reshape(n_x, n_v) + dt * running
    return ValueField(u, grid, eps)


def _solve_hjb_in_x(grid, g, terminal_m, controls, control_running, separable_running, pen_rate):
    """Shared backward sweep in x with velocity controls.

    control_running: (n_b,) cost per unit time for each control.
    separable_running(k): (n_x,) control-independent cost per unit time at t_k.
    pen_rate: per-unit-excess boundary penalty, above the value's x-Lipschitz bound.
    """
    x, t = grid.x, grid.t
    dt = grid.dt
    n_x, n_t = x.size, t.size
    b = controls.values
    ix0, fx, ex = _stencil_1d(x[None, :] + dt * b[:, None], x)  # (n_b, n_x)
    const = dt * control_running[:, None] + pen_rate * ex

    u = np.empty((n_t, n_x))
    u[-1] = np.asarray(g.g(x, terminal_m), dtype=float)
    for k in range(n_t - 2, -1, -1):
        un = u[k + 1]
        cand = (1.0 - fx) * un[ix0] + fx * un[ix0 + 1] + const
        u[k] = cand.min(axis=0) + dt * separable_running(k)
    return u


def solve_hjb_limit_classical(
    grid: PhaseGrid,
    spec: LagrangianSpec,
    m_flow: MeasureFlow | None,
    g: TerminalCost,
    controls: ControlSet | None = None,
) -> ValueField:
    """Limit value function on (t, x): minimize dt L0(x, b, m_t) + Interp u(t+dt, x+dt b)."""
    if m_flow is not None and m_flow.velocities is not None:
        m_flow = m_flow.marginal_flow()
    if controls is None:
        controls = ControlSet(grid.v.copy())
    x = grid.x
    terminal_m = None if m_flow is None else m_flow.marginal(grid.t.size - 1)

    def separable(k):
        return spec.potential(x) + _coupling_slice(spec, x, m_flow, k)

    pen_rate = spec.M0 * (1.0 + grid.T) * (1.0 + grid.R_v**2) + g.dg_bound
    u = _solve_hjb_in_x(
        grid, g, terminal_m, controls, spec.kinetic(controls.values), separable, pen_rate
    )
    return ValueField(u, grid, 0.0)


def solve_hjb_mfg_control(
    grid: PhaseGrid,
    spec: LagrangianSpec,
    mu_flow: MeasureFlow | None,
    g: TerminalCost,
    controls: ControlSet | None = None,
) -> ValueField:
    """Limit value function of the state-control formulation: running cost b^2/2 + L0(x, mu_t)."""
    if not spec.is_quadratic_kinetic:
        raise UnsupportedModelError("the state-control limit requires the quadratic kinetic term")
    if controls is None:
        controls = ControlSet(grid.v.copy())
    x = grid.x
    terminal_m = None if mu_flow is None else mu_flow.marginal(grid.t.size - 1)

    def separable(k):
        return spec.potential(x) + _coupling_slice(spec, x, mu_flow, k)

    pen_rate = spec.M0 * (1.0 + grid.T) * (1.0 + grid.R_v**2) + g.dg_bound
    u = _solve_hjb_in_x(
        grid, g, terminal_m, controls, 0.5 * controls.values**2, separable, pen_rate
    )
    return ValueField(u, grid, 0.0)


def gradient_v(field: ValueField) -> np.ndarray:
    """D_v of a phase value field: centered interior, one-sided at the v-boundary."""
    if not field.is_phase:
        raise InvalidInputError("gradient_v needs a (t, x, v) field")
    return np.gradient(field.values, field.grid.dv, axis=2)


def gradient_x(field: ValueField) -> np.ndarray:
    """D_x of a value field: centered interior, one-sided at the x-boundary."""
    return np.gradient(field.values, field.grid.dx, axis=1)


def interp_slice_xv(slice_xv: np.ndarray, grid: PhaseGrid, xq, vq):
    """Bilinear interpolation of one (x, v) slice at query points, clamped to the box."""
    ix0, fx, _ = _stencil_1d(np.asarray(xq, dtype=float), grid.x)
    iv0, fv, _ = _stencil_1d(np.asarray(vq, dtype=float), grid.v)
    return (
        (1 - fx) * (1 - fv) * slice_xv[ix0, iv0]
        + (1 - fx) * fv * slice_xv[ix0, iv0 + 1]
        + fx * (1 - fv) * slice_xv[ix0 + 1, iv0]
        + fx * fv * slice_xv[ix0 + 1, iv0 + 1]
    )


def interp_slice_x(slice_x: np.ndarray, grid: PhaseGrid, xq):
    """Linear interpolation of one x slice, clamped to the box."""
    ix0, fx, _ = _stencil_1d(np.asarray(xq, dtype=float), grid.x)
    return (1 - fx) * slice_x[ix0] + fx * slice_x[ix0 + 1]
