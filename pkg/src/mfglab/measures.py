"""Particle measures on the line and on phase space, push-forward, and W1 distances.

Probability measures are represented by weighted particles: the time-indexed
measure flow produced by the solvers is the image of the initial ensemble under
a characteristic flow, which particles realize without numerical diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import InvalidInputError, TransportError

_WEIGHT_TOL = 1e-12


def _as_1d(a, name):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted particles in phase space (or on the line when velocities is None)."""

    positions: np.ndarray
    velocities: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        pos = _as_1d(self.positions, "positions")
        object.__setattr__(self, "positions", pos)
        if self.velocities is not None:
            vel = _as_1d(self.velocities, "velocities")
            if vel.shape != pos.shape:
                raise InvalidInputError("positions and velocities must have equal length")
            object.__setattr__(self, "velocities", vel)
        if self.weights is None:
            w = np.full(pos.shape, 1.0 / pos.size) if pos.size else np.empty(0)
        else:
            w = _as_1d(self.weights, "weights")
        if w.shape != pos.shape:
            raise InvalidInputError("weights must match the particle count")
        if pos.size == 0:
            raise InvalidInputError("empty ensemble")
        if not np.all(np.isfinite(pos)) or (
            self.velocities is not None and not np.all(np.isfinite(self.velocities))
        ):
            raise InvalidInputError("particle coordinates must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise InvalidInputError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.positions.size

    @property
    def is_joint(self) -> bool:
        return self.velocities is not None

    def uniform_weights(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, atol=_WEIGHT_TOL, rtol=0))


def marginal_x(mu: ParticleEnsemble) -> ParticleEnsemble:
    """Project a phase-space ensemble onto its position coordinate."""
    return ParticleEnsemble(mu.positions, None, mu.weights)


def pushforward(mu: ParticleEnsemble, mapping: Callable) -> ParticleEnsemble:
    """Image measure: apply ``mapping`` to every particle, keeping the weights.

    ``mapping`` takes (x, v) -> (x', v') for joint ensembles and x -> x' for
    velocity-free ones.
    """
    if mu.is_joint:
        out = mapping(mu.positions, mu.velocities)
        if not isinstance(out, tuple):
            raise InvalidInputError("mapping on a joint ensemble must return (x', v')")
        new_x, new_v = (np.broadcast_to(np.asarray(c, dtype=float), mu.positions.shape) for c in out)
    else:
        new_x = np.broadcast_to(np.asarray(mapping(mu.positions), dtype=float), mu.positions.shape)
        new_v = None
    bad = ~np.isfinite(new_x)
    if new_v is not None:
        bad |= ~np.isfinite(new_v)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise TransportError(f"mapping produced a non-finite image for particle {i}", particle=i)
    return ParticleEnsemble(np.array(new_x), None if new_v is None else np.array(new_v), mu.weights)


def second_moment(mu: ParticleEnsemble) -> float:
    """Weighted sum of |x|^2 + |v|^2 over the ensemble."""
    s = float(np.sum(mu.weights * mu.positions**2))
    if mu.is_joint:
        s += float(np.sum(mu.weights * mu.velocities**2))
    return s


@dataclass(frozen=True)
class MeasureFlow:
    """Time-indexed particle flow sharing one weight vector (transport preserves mass).

    positions and velocities are arrays of shape (n_times, n_particles);
    velocities is None for a marginal (position-only) flow.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None
    weights: np.ndarray

    def __post_init__(self):
        t = _as_1d(self.times, "times")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise InvalidInputError("times must be strictly increasing with at least 2 nodes")
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape[0] != t.size:
            raise InvalidInputError("positions must have one row per time node")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", pos)
        if self.velocities is not None:
            vel = np.asarray(self.velocities, dtype=float)
            if vel.shape != pos.shape:
                raise InvalidInputError("velocities must match positions in shape")
            object.__setattr__(self, "velocities", vel)
        w = _as_1d(self.weights, "weights")
        if w.size != pos.shape[1]:
            raise InvalidInputError("weights must match the particle count")
        object.__setattr__(self, "weights", w)

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    def ensemble(self, k: int) -> ParticleEnsemble:
        vel = None if self.velocities is None else self.velocities[k]
        return ParticleEnsemble(self.positions[k], vel, self.weights)

    def marginal(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.positions[k], None, self.weights)

    def marginal_flow(self) -> "MeasureFlow":
        return MeasureFlow(self.times, self.positions, None, self.weights)

    def index_at(self, t: float) -> int:
        """Nearest time-node index."""
        return int(np.argmin(np.abs(self.times - t)))


def wasserstein1_1d(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """Exact W1 on the line: L1 distance between the quantile functions."""
    if a.is_joint or b.is_joint:
        raise InvalidInputError("wasserstein1_1d expects velocity-free ensembles")
    return _w1_quantile(a.positions, a.weights, b.positions, b.weights)


def _w1_quantile(xa, wa, xb, wb):
    ia = np.argsort(xa, kind="stable")
    ib = np.argsort(xb, kind="stable")
    xa, wa = xa[ia], wa[ia]
    xb, wb = xb[ib], wb[ib]
    ca = np.cumsum(wa)[:-1]
    cb = np.cumsum(wb)[:-1]
    # common refinement of both cumulative-weight partitions of [0, 1]
    levels = np.concatenate(([0.0], np.sort(np.concatenate((ca, cb))), [1.0]))
    seg = np.diff(levels)
    mids = 0.5 * (levels[:-1] + levels[1:])
    qa = xa[np.searchsorted(np.cumsum(wa), mids, side="left").clip(0, xa.size - 1)]
    qb = xb[np.searchsorted(np.cumsum(wb), mids, side="left").clip(0, xb.size - 1)]
    return float(np.sum(seg * np.abs(qa - qb)))


class W1Result(NamedTuple):
    value: float
    exact: bool

    def __float__(self):
        return self.value


def _ground_cost(a: ParticleEnsemble, b: ParticleEnsemble) -> np.ndarray:
    c = np.abs(a.positions[:, None] - b.positions[None, :])
    if a.is_joint:
        c = c + np.abs(a.velocities[:, None] - b.velocities[None, :])
    return c


def wasserstein1_joint(
    a: ParticleEnsemble,
    b: ParticleEnsemble,
    n_exact: int = 2000,
    n_projections: int = 64,
    lp_limit: int = 40000,
    rng: np.random.Generator | None = None,
) -> W1Result:
    """W1 between phase-space ensembles with ground metric |dx| + |dv|.

    Exact for supports up to ``n_exact`` points (assignment for uniform weights
    of equal count, LP otherwise); larger instances fall back to sliced W1 over
    random projections and are flagged approximate.
    """
    if a.is_joint != b.is_joint:
        raise InvalidInputError("cannot mix joint and velocity-free ensembles")
    if max(a.size, b.size) <= n_exact:
        if a.size == b.size and a.uniform_weights() and b.uniform_weights():
            cost = _ground_cost(a, b)
            rows, cols = linear_sum_assignment(cost)
            return W1Result(float(cost[rows, cols].mean()), True)
        if a.size * b.size <= lp_limit:
            return W1Result(_w1_lp(a, b), True)
    return W1Result(_w1_sliced(a, b, n_projections, rng), False)


def _w1_lp(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """Exact optimal transport cost by linear programming on the coupling polytope."""
    n, m = a.size, b.size
    cost = _ground_cost(a, b).ravel()
    # equality constraints: row sums = a.weights, column sums = b.weights
    rows = np.repeat(np.arange(n), m)
    cols = np.tile(np.arange(m), n) + n
    data = np.ones(n * m)
    from scipy.sparse import coo_matrix

    A = coo_matrix(
        (np.concatenate((data, data)), (np.concatenate((rows, cols)), np.tile(np.arange(n * m), 2))),
        shape=(n + m, n * m),
    )
    rhs = np.concatenate((a.weights, b.weights))
    res = linprog(cost, A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise InvalidInputError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _w1_sliced(a, b, n_projections, rng):
    if not a.is_joint:
        return _w1_quantile(a.positions, a.weights, b.positions, b.weights)
    rng = np.random.default_rng(0) if rng is None else rng
    angles = rng.uniform(0.0, np.pi, size=n_projections)
    total = 0.0
    for th in angles:
        c, s = np.cos(th), np.sin(th)
        pa = c * a.positions + s * a.velocities
        pb = c * b.positions + s * b.velocities
        total += _w1_quantile(pa, a.weights, pb, b.weights)
    return total / n_projections


# Gaussian kernel helpers shared with the coupling evaluation.


def gaussian_kernel(r, sigma):
    return np.exp(-0.5 * (r / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def kernel_smooth(x, positions, weights, sigma):
    """(rho_sigma * m)(x) for a weighted particle measure m."""
    x = np.asarray(x, dtype=float)
    r = x[..., None] - positions
    return np.sum(weights * gaussian_kernel(r, sigma), axis=-1)


def kernel_smooth_dx(x, positions, weights, sigma):
    x = np.asarray(x, dtype=float)
    r = x[..., None] - positions
    return np.sum(weights * gaussian_kernel(r, sigma) * (-r / sigma**2), axis=-1)


def kernel_smooth_dxx(x, positions, weights, sigma):
    x = np.asarray(x, dtype=float)
    r = x[..., None] - positions
    return np.sum(weights * gaussian_kernel(r, sigma) * ((r / sigma**2) ** 2 - 1.0 / sigma**2), axis=-1)


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density sampled on a grid, unit mass under the trapezoid rule."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = _as_1d(self.x, "x")
        vals = _as_1d(self.values, "values")
        if vals.shape != x.shape:
            raise InvalidInputError("grid and density must have equal length")
        if np.any(vals < 0):
            raise InvalidInputError("density must be nonnegative")
        mass = np.trapezoid(vals, x)
        if abs(mass - 1.0) > 1e-10:
            raise InvalidInputError(f"density mass {mass} is not 1 within 1e-10")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", vals)

    def __call__(self, xq):
        return np.interp(xq, self.x, self.values)


def smoothed_density(m: ParticleEnsemble, sigma: float, grid: np.ndarray) -> GridDensity:
    """Gaussian kernel density estimate of a marginal ensemble, renormalized."""
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    grid = _as_1d(grid, "grid")
    vals = kernel_smooth(grid, m.positions, m.weights, sigma)
    mass = np.trapezoid(vals, grid)
    return GridDensity(grid, vals / mass)


def lattice_ensemble(n: int, box=((-1.0, 1.0), (-1.0, 1.0))) -> ParticleEnsemble:
    """Uniform-weight particles on a regular phase-space lattice inside ``box``."""
    side = max(2, int(round(np.sqrt(n))))
    (x0, x1), (v0, v1) = box
    # cell midpoints, so refinement mimics an absolutely continuous density
    xs = x0 + (x1 - x0) * (np.arange(side) + 0.5) / side
    vs = v0 + (v1 - v0) * (np.arange(side) + 0.5) / side
    X, V = np.meshgrid(xs, vs, indexing="ij")
    return ParticleEnsemble(X.ravel(), V.ravel())


def gaussian_ensemble(n: int, box=((-1.0, 1.0), (-1.0, 1.0)), seed: int = 0) -> ParticleEnsemble:
    """I.i.d. truncated-Gaussian particles with a fixed seed."""
    rng = np.random.default_rng(seed)
    (x0, x1), (v0, v1) = box
    cx, cv = 0.5 * (x0 + x1), 0.5 * (v0 + v1)
    sx, sv = 0.25 * (x1 - x0), 0.25 * (v1 - v0)
    xs = np.clip(rng.normal(cx, sx, size=n), x0, x1)
    vs = np.clip(rng.normal(cv, sv, size=n), v0, v1)
    return ParticleEnsemble(xs, vs)
