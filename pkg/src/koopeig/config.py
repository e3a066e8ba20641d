"""Experiment configuration: TOML/JSON parsing, validation, canonical hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version specific
    import tomli as tomllib

from .errors import ConfigurationError
from .optimizer import CostConfig, SearchSpace
from .systems import DynSystem, SimGrid, get_system


@dataclass
class SystemSection:
    name: str = "closure"
    params: dict = field(default_factory=dict)


@dataclass
class GridSection:
    ranges: list = field(default_factory=lambda: [[-1.0, 1.0], [-1.0, 1.0]])
    counts: list = field(default_factory=lambda: [21, 21])
    subgrid_stride: int = 4


@dataclass
class SimulateSection:
    dt: float = 0.2
    n_samples: int = 250
    reference_ic: list = field(default_factory=lambda: [-1.0, -1.0])
    noise_variance: float = 0.0
    noise_seed: int = 0


@dataclass
class EigsSection:
    fixed: list = field(default_factory=list)  # [[re, im], ...]
    n_free_pairs: int = 2
    re_bounds: list = field(default_factory=lambda: [-2.0, -0.1])
    im_bounds: list = field(default_factory=lambda: [0.0, 1.0])
    d_min: float = 0.05
    penalty_weight: float = 1.0e3
    imag_floor: float = 0.01


@dataclass
class CostSection:
    ridge_weight: float = 1.0e-6
    kpde_weight: float = 1.0e-4
    clamp: float = 0.0  # 0 disables clamping
    interp_counts: list = field(default_factory=lambda: [100, 100])
    interp_ranges: list = field(default_factory=list)  # empty -> grid ranges
    smoothing: float = 1.0
    shift_fixed_point: bool = False


@dataclass
class OptimizerSection:
    pop_size: int = 25
    generations: int = 100
    nm_iterations: int = 1000
    seed: int = 7
    threads: int = 1
    inertia: float = 0.73
    cognitive: float = 1.5
    social: float = 1.5
    two_phase: bool = False
    phase1_generations: int = 0  # temporal-only warm-up generations when two_phase


@dataclass
class RefineSection:
    enabled: bool = False
    grid_counts: list = field(default_factory=lambda: [61, 61])
    grid_ranges: list = field(default_factory=list)
    interp_counts: list = field(default_factory=lambda: [201, 201])
    interp_ranges: list = field(default_factory=list)
    separatrix_margin: float = 0.0  # 0 disables the mask


@dataclass
class InputDynSection:
    enabled: bool = False
    hidden: int = 15
    ridge_weight: float = 1.0e-8
    refine_steps: int = 2000
    seed: int = 3
    excitation_amplitude: float = 0.2
    excitation_hold: float = 10.0
    horizon: float = 80.0
    validation_x0: list = field(default_factory=lambda: [0.5, 0.5])
    validation_seed: int = 11


@dataclass
class ControlSection:
    enabled: bool = False
    track: list = field(default_factory=lambda: [0])
    q_x: list = field(default_factory=lambda: [5.0, 5.0])
    r: list = field(default_factory=lambda: [0.5])
    time_constants: list = field(default_factory=lambda: [0.06])
    u_min: list = field(default_factory=lambda: [-1.0])
    u_max: list = field(default_factory=lambda: [1.0])
    k_i: list = field(default_factory=lambda: [-0.5])
    q_o: float = 1.0e-2
    r_o: float = 1.0e-4
    schedule_counts: list = field(default_factory=lambda: [9, 9])
    schedule_ranges: list = field(default_factory=list)
    dt: float = 0.02
    horizon: float = 40.0
    setpoint_time: float = 5.0
    setpoint_values: list = field(default_factory=lambda: [0.5])
    initial_state: list = field(default_factory=list)  # empty -> fixed point
    pi_kp: list = field(default_factory=lambda: [1.0])
    pi_ki: list = field(default_factory=lambda: [1.0])
    meas_noise_std: float = 0.0
    noise_seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/out"


_SECTIONS = {
    "system": SystemSection,
    "grid": GridSection,
    "simulate": SimulateSection,
    "eigs": EigsSection,
    "cost": CostSection,
    "optimizer": OptimizerSection,
    "refine": RefineSection,
    "inputdyn": InputDynSection,
    "control": ControlSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    """Typed view of one experiment file; see configs/ for examples."""

    system: SystemSection = field(default_factory=SystemSection)
    grid: GridSection = field(default_factory=GridSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    eigs: EigsSection = field(default_factory=EigsSection)
    cost: CostSection = field(default_factory=CostSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    refine: RefineSection = field(default_factory=RefineSection)
    inputdyn: InputDynSection = field(default_factory=InputDynSection)
    control: ControlSection = field(default_factory=ControlSection)
    output: OutputSection = field(default_factory=OutputSection)

    # --- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = {}
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        for key, section_cls in _SECTIONS.items():
            section = data.get(key, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"section [{key}] must be a table")
            valid = {f.name for f in section_cls.__dataclass_fields__.values()}
            bad = set(section) - valid
            if bad:
                raise ConfigurationError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = section_cls(**section)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # --- validation ---------------------------------------------------------

    def validate(self):
        if self.optimizer.seed is None:
            raise ConfigurationError("optimizer.seed is mandatory for reproducibility")
        if len(self.grid.ranges) != len(self.grid.counts):
            raise ConfigurationError("grid.ranges and grid.counts disagree")
        if self.cost.ridge_weight < 0 or self.cost.kpde_weight < 0:
            raise ConfigurationError("cost weights must be >= 0")
        if not 0 < self.cost.smoothing <= 1:
            raise ConfigurationError("cost.smoothing must be in (0, 1]")
        if self.simulate.noise_variance > 0 and self.simulate.noise_seed is None:
            raise ConfigurationError("noise_seed required when noise_variance > 0")
        self.build_system()  # raises on unknown system/params
        if self.control.enabled and not self.inputdyn.enabled:
            raise ConfigurationError("the control stage requires inputdyn to be enabled")
        if self.inputdyn.enabled and self.build_system().input_dim == 0:
            raise ConfigurationError("inputdyn requires a system with inputs")

    # --- typed builders -----------------------------------------------------

    def build_system(self) -> DynSystem:
        return get_system(self.system.name, **self.system.params)

    def build_grid(self) -> SimGrid:
        return SimGrid(
            ranges=tuple(tuple(r) for r in self.grid.ranges),
            counts=tuple(self.grid.counts),
            subgrid_stride=self.grid.subgrid_stride,
        )

    def _grid_from(self, counts, ranges) -> SimGrid:
        base = ranges if ranges else self.grid.ranges
        return SimGrid(ranges=tuple(tuple(r) for r in base), counts=tuple(counts))

    def interp_grid(self) -> SimGrid:
        return self._grid_from(self.cost.interp_counts, self.cost.interp_ranges)

    def refine_grids(self) -> tuple:
        fine = self._grid_from(self.refine.grid_counts, self.refine.grid_ranges)
        interp = self._grid_from(self.refine.interp_counts, self.refine.interp_ranges)
        return fine, interp

    def schedule_grid(self) -> SimGrid:
        return self._grid_from(self.control.schedule_counts, self.control.schedule_ranges)

    def shift_vector(self) -> Optional[np.ndarray]:
        if not self.cost.shift_fixed_point:
            return None
        sys_ = self.build_system()
        if not sys_.known_fixed_points:
            raise ConfigurationError(f"{sys_.name} has no known fixed point to shift by")
        return np.asarray(sys_.known_fixed_points[0], dtype=float)

    def build_cost_config(self, kpde_weight: Optional[float] = None) -> CostConfig:
        gamma = self.cost.kpde_weight if kpde_weight is None else kpde_weight
        return CostConfig(
            ridge_weight=self.cost.ridge_weight,
            kpde_weight=gamma,
            imag_floor=self.eigs.imag_floor,
            clamp=self.cost.clamp if self.cost.clamp > 0 else None,
            interp_grid=self.interp_grid() if gamma > 0 else None,
            smoothing=self.cost.smoothing,
            shift=self.shift_vector(),
        )

    def build_search_space(self) -> SearchSpace:
        return SearchSpace(
            n_free_pairs=self.eigs.n_free_pairs,
            re_bounds=tuple(self.eigs.re_bounds),
            im_bounds=tuple(self.eigs.im_bounds),
            fixed_pairs=np.asarray(self.eigs.fixed, dtype=float).reshape(-1, 2),
            d_min=self.eigs.d_min,
            penalty_weight=self.eigs.penalty_weight,
            imag_floor=self.eigs.imag_floor,
        )
