"""Population of simulated two-degree-of-freedom mass-spring-damper systems.

Each structure is a fixed-free chain (ground - spring/damper - m1 -
spring/damper - m2) with per-structure nominal stiffness k0 and a shared
temperature law: the effective stiffness at temperature T is

    k(T) = k0 + (-13 T^2 + 500 T)

so that k(0) = k0, the nominal value sampled for that population member.
The modelled quantity is the magnitude of the receptance FRF for a unit
harmonic force on the first mass, evaluated on a fixed frequency grid.
"""

import csv
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .seeding import rng_for

DEFAULT_STIFFNESS_INTERVAL = (8000.0, 12000.0)
DEFAULT_TEMPERATURE_RANGE = (0.0, 20.0)
DEFAULT_MASS = 1.0
DEFAULT_DAMPING = 10.0

# Quadratic temperature dependence of the spring stiffness.
STIFFNESS_T2 = -13.0
STIFFNESS_T1 = 500.0


class TargetKind(str, Enum):
    """What a task dataset's target vector contains."""

    LINE_1HZ = "line_1hz"      # |H11| at the 1 Hz grid line (scalar)
    LINE_50HZ = "line_50hz"    # |H11| at the 50 Hz grid line (scalar)
    FULL_FRF = "full_frf"      # |H11| then |H21| over the whole grid

    @property
    def line_frequency(self):
        return {"line_1hz": 1.0, "line_50hz": 50.0}.get(self.value)


@dataclass(frozen=True)
class StructureSpec:
    """One population member."""

    base_stiffness: float           # k0 [N/m], stiffness at T = 0
    mass: float = DEFAULT_MASS      # per DOF [kg]
    damping: float = DEFAULT_DAMPING  # c [N s/m]
    id: str = "s0"

    def __post_init__(self):
        if self.mass <= 0 or self.damping <= 0 or self.base_stiffness <= 0:
            raise ValueError("mass, damping and base stiffness must be positive")


@dataclass(frozen=True)
class FrequencyGrid:
    """Ordered FRF abscissa in Hz."""

    lines: np.ndarray

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=np.float64)
        if lines.ndim != 1 or lines.size == 0:
            raise ValueError("grid must be a non-empty 1-D array")
        if np.any(lines <= 0) or np.any(np.diff(lines) <= 0):
            raise ValueError("grid lines must be positive and strictly increasing")
        object.__setattr__(self, "lines", lines)

    def __len__(self):
        return self.lines.size

    def index_of(self, frequency_hz: float) -> int:
        hits = np.nonzero(np.abs(self.lines - frequency_hz) < 1e-9)[0]
        if hits.size == 0:
            raise ValueError(f"{frequency_hz} Hz is not a line of this grid")
        return int(hits[0])

    @classmethod
    def default(cls) -> "FrequencyGrid":
        # 1..100 Hz at 1 Hz spacing: both single-line problems are exact grid
        # lines and both resonances of every population member fall inside.
        return cls(np.arange(1.0, 101.0))


@dataclass
class FRFSample:
    """FRF magnitudes of both DOFs at one temperature (unit force on DOF 1)."""

    temperature: float
    magnitudes_dof1: np.ndarray
    magnitudes_dof2: np.ndarray


@dataclass
class TaskDataset:
    """A structure's few-shot regression task: temperature -> target vector."""

    structure: StructureSpec
    inputs: np.ndarray        # (n,) temperatures [degC]
    targets: np.ndarray       # (n, d) target vectors
    target_kind: TargetKind
    temperature_range: tuple = DEFAULT_TEMPERATURE_RANGE

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets.reshape(-1, 1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in length")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]

    @property
    def samples(self):
        return list(zip(self.inputs, self.targets))

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(
            self.structure,
            self.inputs[idx],
            self.targets[idx],
            self.target_kind,
            self.temperature_range,
        )


def sample_population(count, stiffness_interval=DEFAULT_STIFFNESS_INTERVAL,
                      seed=0, id_prefix="s"):
    """Draw ``count`` structures with k0 i.i.d. uniform on the interval."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = stiffness_interval
    if lo > hi:
        raise ValueError("stiffness interval is inverted")
    rng = rng_for(seed, "population", id_prefix, count)
    k0 = rng.uniform(lo, hi, size=count)
    width = max(3, len(str(count - 1)))
    return [
        StructureSpec(base_stiffness=float(k), id=f"{id_prefix}{i:0{width}d}")
        for i, k in enumerate(k0)
    ]


def stiffness_at(spec: StructureSpec, temperature: float,
                 temperature_range=DEFAULT_TEMPERATURE_RANGE) -> float:
    """Effective stiffness k(T) = k0 - 13 T^2 + 500 T."""
    lo, hi = temperature_range
    if np.any(np.asarray(temperature) < lo) or np.any(np.asarray(temperature) > hi):
        raise ValueError(f"temperature {temperature} outside configured range {temperature_range}")
    return spec.base_stiffness + STIFFNESS_T2 * temperature**2 + STIFFNESS_T1 * temperature


def system_matrices(spec: StructureSpec, temperature: float,
                    temperature_range=DEFAULT_TEMPERATURE_RANGE):
    """Mass, damping and stiffness matrices of the fixed-free chain."""
    k = stiffness_at(spec, temperature, temperature_range)
    chain = np.array([[2.0, -1.0], [-1.0, 1.0]])
    M = spec.mass * np.eye(2)
    C = spec.damping * chain
    K = k * chain
    return M, C, K


def _frf_magnitudes_raw(k, c, m, omegas):
    """|H11| and |H21| of (K + i w C - w^2 M) H = [1, 0]^T, closed form.

    ``k`` may be scalar or an array broadcastable against ``omegas``.
    """
    k = np.asarray(k, dtype=np.float64)
    iwc = 1j * np.asarray(omegas) * c
    w2m = np.asarray(omegas) ** 2 * m
    s = k + iwc  # complex spring/damper coefficient per chain element
    a11 = 2.0 * s - w2m
    a12 = -s
    a22 = s - w2m
    det = a11 * a22 - a12 * a12
    if np.any(det == 0):
        raise ValueError("singular FRF system (undamped resonance?)")
    h1 = a22 / det
    h2 = -a12 / det
    return np.abs(h1), np.abs(h2)


def frf_magnitudes(spec: StructureSpec, temperature: float, grid: FrequencyGrid,
                   temperature_range=DEFAULT_TEMPERATURE_RANGE) -> FRFSample:
    """Receptance magnitudes of both DOFs over the grid at one temperature."""
    k = stiffness_at(spec, temperature, temperature_range)
    omegas = 2.0 * np.pi * grid.lines
    mag1, mag2 = _frf_magnitudes_raw(k, spec.damping, spec.mass, omegas)
    if not (np.all(np.isfinite(mag1)) and np.all(np.isfinite(mag2))):
        raise ValueError(f"non-finite FRF for structure {spec.id}")
    return FRFSample(float(temperature), mag1, mag2)


def _targets_for(spec, temperatures, target_kind, grid, temperature_range):
    temps = np.asarray(temperatures, dtype=np.float64)
    k = stiffness_at(spec, temps, temperature_range)
    line_f = target_kind.line_frequency
    if line_f is not None:
        grid.index_of(line_f)  # raises if the requested line is absent
        omega = 2.0 * np.pi * line_f
        mag1, _ = _frf_magnitudes_raw(k, spec.damping, spec.mass, omega)
        return np.asarray(mag1).reshape(-1, 1)
    # Full FRF: broadcast (n samples) x (grid) and concatenate both DOFs.
    omegas = 2.0 * np.pi * grid.lines
    mag1, mag2 = _frf_magnitudes_raw(k[:, None], spec.damping, spec.mass, omegas[None, :])
    return np.concatenate([mag1, mag2], axis=1)


def make_task_dataset(spec: StructureSpec, n_samples: int, target_kind: TargetKind,
                      temperature_range=DEFAULT_TEMPERATURE_RANGE,
                      grid: FrequencyGrid | None = None, seed: int = 0) -> TaskDataset:
    """Sample (temperature, target) pairs for one structure.

    Temperatures are i.i.d. uniform over the range; targets are exact FRF
    magnitudes (no measurement noise).  Deterministic given the seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grid = grid or FrequencyGrid.default()
    rng = rng_for(seed, "task", spec.id, target_kind.value, n_samples)
    lo, hi = temperature_range
    temps = rng.uniform(lo, hi, size=n_samples)
    targets = _targets_for(spec, temps, target_kind, grid, temperature_range)
    return TaskDataset(spec, temps, targets, target_kind, temperature_range)


def export_datasets(tasks, csv_path):
    """Write tasks as CSV: structure_id,k0,temperature,target_0,...,target_{D-1}."""
    tasks = list(tasks)
    dim = tasks[0].target_dim
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["structure_id", "k0", "temperature"] + [f"target_{j}" for j in range(dim)]
        )
        for task in tasks:
            if task.target_dim != dim:
                raise ValueError("mixed target dimensions in one export")
            for x, y in zip(task.inputs, task.targets):
                writer.writerow(
                    [task.structure.id, repr(task.structure.base_stiffness), repr(float(x))]
                    + [repr(float(v)) for v in y]
                )


def write_dataset_manifest(path, *, target_kind, grid, temperature_range,
                           stiffness_interval, seed, n_structures,
                           samples_per_structure, files):
    manifest = {
        "target_kind": target_kind.value,
        "grid_hz": [float(f) for f in grid.lines],
        "temperature_range": list(temperature_range),
        "stiffness_interval": list(stiffness_interval),
        "seed": seed,
        "n_structures": n_structures,
        "samples_per_structure": samples_per_structure,
        "files": files,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
