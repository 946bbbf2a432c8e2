"""Run configuration: JSON blocks with defaults, strict key validation, and
factories for the objects the solvers consume."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .analysis import SweepPlan
from .errors import ConfigurationError
from .hjb import ControlSet, PhaseGrid
from .measures import ParticleEnsemble, gaussian_ensemble, lattice_ensemble
from .model import LagrangianSpec, TerminalCost, make_lagrangian, make_terminal

DEFAULTS = {
    "model": {
        "name": "quadratic",
        "kappa_pot": 0.5,
        "kappa_c": 0.0,
        "sigma": 0.3,
        "M0": 60.0,
        "theta_bound": 1.0,
        "coupling": "marginal",
        "terminal": "zero",
        "terminal_amplitude": 1.0,
    },
    "grid": {
        "R_x": 3.0,
        "R_v": 4.0,
        "N_x": 101,
        "N_v": 81,
        "N_t": 201,
        "N_a": 41,
        "A_max": 8.0,
        "T": 1.0,
    },
    "measure": {
        "kind": "lattice",  # lattice | gaussian
        "n": 2000,
        "box": [[-1.0, 1.0], [-1.0, 1.0]],
        "seed": 0,
    },
    "solver": {
        "damping": 0.5,
        "tol_fp": 1e-3,
        "max_iter": 60,
        "dt_inner_factor": 4.0,
        "substeps": 4,
    },
    "sweep": {
        "eps_ladder": [0.5, 0.2, 0.1, 0.05, 0.02, 0.01],
        "box_radius": 2.0,
        "accel_delta": 0.1,
        "variant": "classical",  # classical | control
    },
}


def _merge_block(name, defaults, given):
    if not isinstance(given, dict):
        raise ConfigurationError(f"config block {name!r} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown keys in config block {name!r}: {', '.join(unknown)}")
    merged = dict(defaults)
    merged.update(given)
    return merged


@dataclass(frozen=True)
class RunConfig:
    model: dict
    grid: dict
    measure: dict
    solver: dict
    sweep: dict

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config blocks: {', '.join(unknown)}")
        blocks = {
            name: _merge_block(name, defaults, data.get(name, {}))
            for name, defaults in DEFAULTS.items()
        }
        cfg = cls(**blocks)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    def validate(self):
        grid = self.grid
        for key in ("N_x", "N_v", "N_t", "N_a"):
            if int(grid[key]) < 3:
                raise ConfigurationError(f"grid.{key} must be at least 3")
        for key in ("R_x", "R_v", "T", "A_max"):
            if float(grid[key]) <= 0:
                raise ConfigurationError(f"grid.{key} must be positive")
        if int(grid["N_a"]) % 2 == 0:
            raise ConfigurationError("grid.N_a must be odd so 0 is a control node")
        if self.measure["kind"] not in ("lattice", "gaussian"):
            raise ConfigurationError(f"unknown measure kind {self.measure['kind']!r}")
        if int(self.measure["n"]) < 1:
            raise ConfigurationError("measure.n must be positive")
        s = self.solver
        if not (0 < float(s["damping"]) <= 1):
            raise ConfigurationError("solver.damping must lie in (0, 1]")
        if float(s["tol_fp"]) <= 0 or int(s["max_iter"]) < 1:
            raise ConfigurationError("solver.tol_fp must be positive and max_iter >= 1")
        if self.sweep["variant"] not in ("classical", "control"):
            raise ConfigurationError(f"unknown sweep variant {self.sweep['variant']!r}")
        ladder = self.sweep["eps_ladder"]
        if not ladder or any(e <= 0 for e in ladder):
            raise ConfigurationError("sweep.eps_ladder must be positive")
        if any(ladder[i + 1] >= ladder[i] for i in range(len(ladder) - 1)):
            raise ConfigurationError("sweep.eps_ladder must be strictly decreasing")

    # -- factories ------------------------------------------------------------

    def build_spec(self) -> LagrangianSpec:
        m = self.model
        return make_lagrangian(
            m["name"],
            kappa_pot=float(m["kappa_pot"]),
            kappa_c=float(m["kappa_c"]),
            sigma=float(m["sigma"]),
            M0=float(m["M0"]),
            theta_bound=float(m["theta_bound"]),
            coupling=m["coupling"],
        )

    def build_terminal(self) -> TerminalCost:
        return make_terminal(self.model["terminal"], float(self.model["terminal_amplitude"]))

    def build_grid(self) -> PhaseGrid:
        g = self.grid
        return PhaseGrid.regular(
            R_x=float(g["R_x"]),
            R_v=float(g["R_v"]),
            T=float(g["T"]),
            N_x=int(g["N_x"]),
            N_v=int(g["N_v"]),
            N_t=int(g["N_t"]),
        )

    def build_controls(self) -> ControlSet:
        return ControlSet.symmetric(float(self.grid["A_max"]), int(self.grid["N_a"]))

    def build_mu0(self, seed=None) -> ParticleEnsemble:
        m = self.measure
        box = tuple(tuple(float(c) for c in pair) for pair in m["box"])
        if m["kind"] == "lattice":
            return lattice_ensemble(int(m["n"]), box)
        return gaussian_ensemble(int(m["n"]), box, int(m["seed"] if seed is None else seed))

    def build_plan(self) -> SweepPlan:
        s = self.sweep
        return SweepPlan(
            eps_ladder=tuple(float(e) for e in s["eps_ladder"]),
            box_radius=float(s["box_radius"]),
            accel_delta=float(s["accel_delta"]),
        )

    def to_dict(self) -> dict:
        return copy.deepcopy(
            {
                "model": self.model,
                "grid": self.grid,
                "measure": self.measure,
                "solver": self.solver,
                "sweep": self.sweep,
            }
        )
