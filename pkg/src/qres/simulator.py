"""Synthetic block-coherent datasets.

Every measurement set is internally coherent: tone amplitudes and phases are
drawn once per set and held for ``n_per_set`` consecutive measurements spaced
by ``tau``.  Sets are independent.  Each set draws from its own random stream
keyed by ``(seed, set_index)``, so a dataset does not depend on the order or
concurrency in which sets are generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any

import numpy as np

from .errors import ConfigError
from .signal_model import TWO_PI, ProbeConfig, detection_probability, filter_gain

RAYLEIGH_SCALE = np.sqrt(2.0 / np.pi)   # sigma / mean of a Rayleigh distribution


@dataclass(frozen=True)
class SignalModel:
    """Tones plus their per-set amplitude and phase noise.

    Parameters
    ----------
    deltas : sequence of float
        True tone frequencies in rad/s.
    omega : float
        Amplitude in rad/s: the fixed value (``amplitude_model="fixed"``) or
        the mean of the Rayleigh distribution (``"rayleigh"``).
    T_phi : float
        Coherence time of the signal; each set must fit inside it.
    n_per_set, n_sets : int
        Measurements per set and number of sets.
    weights : sequence of float, optional
        Relative tone amplitudes (default all ones).
    phi : float or sequence of float
        Phase(s) used when ``phase_model="fixed"``.
    shared_amplitude : bool
        With Rayleigh amplitudes, draw a single factor per set that scales
        every tone (``True``), or draw each tone independently.
    """

    deltas: tuple
    omega: float
    T_phi: float
    n_per_set: int
    n_sets: int
    amplitude_model: str = "rayleigh"
    phase_model: str = "uniform"
    phi: Any = 0.0
    weights: tuple | None = None
    shared_amplitude: bool = True

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in np.atleast_1d(self.deltas)))
        K = len(self.deltas)
        w = (1.0,) * K if self.weights is None else tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != K:
            raise ConfigError("weights must have one entry per tone", field="signal.weights")
        if K < 1:
            raise ConfigError("at least one tone is required", field="signal.deltas")
        if self.amplitude_model not in ("fixed", "rayleigh"):
            raise ConfigError(f"unknown amplitude model {self.amplitude_model!r}",
                              field="signal.amplitude_model")
        if self.phase_model not in ("fixed", "uniform"):
            raise ConfigError(f"unknown phase model {self.phase_model!r}", field="signal.phase_model")
        if self.omega < 0:
            raise ConfigError("amplitude must be non-negative", field="signal.omega")
        if self.n_sets < 1:
            raise ConfigError("n_sets must be at least 1", field="signal.n_sets")
        if self.n_per_set < 1:
            raise ConfigError("n_per_set must be at least 1", field="signal.n_per_set")
        if not self.T_phi > 0:
            raise ConfigError("T_phi must be positive", field="signal.T_phi")

    @property
    def n_tones(self) -> int:
        return len(self.deltas)

    def fixed_phases(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.phi, dtype=float), (self.n_tones,)).copy()

    def check_probe(self, probe: ProbeConfig) -> None:
        if self.n_per_set * probe.tau > self.T_phi * (1 + 1e-12):
            raise ConfigError(
                f"n_per_set * tau = {self.n_per_set * probe.tau:g} s exceeds T_phi = {self.T_phi:g} s",
                field="signal.n_per_set")

    def describe(self) -> dict:
        return {
            "deltas": list(self.deltas), "omega": self.omega, "T_phi": self.T_phi,
            "n_per_set": self.n_per_set, "n_sets": self.n_sets,
            "amplitude_model": self.amplitude_model, "phase_model": self.phase_model,
            "phi": np.atleast_1d(self.phi).tolist(), "weights": list(self.weights),
            "shared_amplitude": self.shared_amplitude,
        }


@dataclass(frozen=True)
class SetTruth:
    """Simulation-only record of the parameters drawn for one set."""

    omegas: np.ndarray
    phis: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, SetTruth) and np.array_equal(self.omegas, other.omegas)
                and np.array_equal(self.phis, other.phis))


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """``n`` consecutive outcomes sharing one amplitude/phase draw.

    ``outcomes`` holds detection counts per time point (bits for single
    shot).  Time ``i`` within the set is ``i * tau``; ``start_time`` places
    the set on the absolute clock.
    """

    set_index: int
    outcomes: np.ndarray
    start_time: float = 0.0
    truth: SetTruth | None = None

    @property
    def n(self) -> int:
        return self.outcomes.size

    def times(self, tau: float) -> np.ndarray:
        return np.arange(self.n) * tau

    def __eq__(self, other):
        return (isinstance(other, MeasurementSet) and self.set_index == other.set_index
                and self.start_time == other.start_time
                and self.outcomes.dtype == other.outcomes.dtype
                and np.array_equal(self.outcomes, other.outcomes) and self.truth == other.truth)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Measurement sets sharing one probe configuration."""

    probe: ProbeConfig
    sets: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        idx = [s.set_index for s in self.sets]
        if idx != list(range(len(idx))):
            raise ConfigError("set indices must be 0..N-1 in order", field="sets")

    @property
    def n_sets(self) -> int:
        return len(self.sets)

    @property
    def n_outcomes(self) -> int:
        return sum(s.n for s in self.sets)

    @cached_property
    def stacked(self):
        """Padded arrays ``(t, y, mask)`` of shape ``(L, n_max)``."""
        L = self.n_sets
        n_max = max((s.n for s in self.sets), default=0)
        t = np.broadcast_to(np.arange(n_max) * self.probe.tau, (L, n_max)).copy()
        y = np.zeros((L, n_max))
        mask = np.zeros((L, n_max))
        for l, s in enumerate(self.sets):
            y[l, :s.n] = s.outcomes
            mask[l, :s.n] = 1.0
        return t, y, mask

    @property
    def has_truth(self) -> bool:
        return all(s.truth is not None for s in self.sets)

    def subset(self, indices) -> "Dataset":
        """Dataset of the given sets, re-indexed contiguously in the given order."""
        indices = [int(i) for i in indices]
        sets = [replace(self.sets[i], set_index=j) for j, i in enumerate(indices)]
        meta = dict(self.metadata)
        meta["source_indices"] = indices
        return Dataset(self.probe, tuple(sets), meta)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.probe == other.probe
                and len(self.sets) == len(other.sets)
                and all(a == b for a, b in zip(self.sets, other.sets)))


def set_stream(seed: int, set_index: int) -> np.random.Generator:
    """Independent random stream for one set."""
    return np.random.default_rng([int(seed), int(set_index)])


def draw_set_parameters(model: SignalModel, rng: np.random.Generator):
    """Draw ``(omegas, phis)`` for one set, each of shape ``(K,)``.

    Rayleigh draws use scale ``sqrt(2/pi) * mean`` so that their mean is the
    configured amplitude.
    """
    K = model.n_tones
    w = np.asarray(model.weights)
    if model.amplitude_model == "fixed":
        omegas = w * model.omega
    elif model.shared_amplitude:
        omegas = w * rng.rayleigh(RAYLEIGH_SCALE * model.omega)
    else:
        omegas = rng.rayleigh(RAYLEIGH_SCALE * model.omega * w)
    if model.phase_model == "fixed":
        phis = np.mod(model.fixed_phases(), TWO_PI)
    else:
        phis = rng.uniform(0.0, TWO_PI, size=K)
    return np.asarray(omegas, dtype=float), phis


def set_probabilities(model: SignalModel, probe: ProbeConfig, truth: SetTruth, n: int):
    t = np.arange(n) * probe.tau
    deltas = np.asarray(model.deltas)
    phase = np.sum(truth.omegas[:, None] * filter_gain(deltas, probe.tau)[:, None]
                   * np.cos(deltas[:, None] * t + truth.phis[:, None]), axis=0)
    return detection_probability(phase, probe.readout_fidelity)


def set_spacing(model: SignalModel, probe: ProbeConfig) -> float:
    """Clock offset between consecutive set starts (coherence block plus a 16 tau gap)."""
    return max(model.T_phi, model.n_per_set * probe.tau) + 16 * probe.tau


def simulate_set(model: SignalModel, probe: ProbeConfig, seed: int, set_index: int) -> MeasurementSet:
    rng = set_stream(seed, set_index)
    omegas, phis = draw_set_parameters(model, rng)
    truth = SetTruth(omegas, phis)
    p = set_probabilities(model, probe, truth, model.n_per_set)
    dtype = np.uint8 if probe.shots_per_point < 256 else np.uint16
    outcomes = rng.binomial(probe.shots_per_point, p).astype(dtype)
    return MeasurementSet(set_index, outcomes, set_index * set_spacing(model, probe), truth)


def simulate_dataset(model: SignalModel, probe: ProbeConfig, seed: int) -> Dataset:
    """Simulate ``model.n_sets`` independent sets; deterministic in ``seed``."""
    model.check_probe(probe)
    sets = tuple(simulate_set(model, probe, seed, l) for l in range(model.n_sets))
    meta = {
        "seed": int(seed),
        "model": model.describe(),
    }
    return Dataset(probe, sets, meta)


def split_resample(dataset: Dataset, subset_size: int, n_iterations: int, seed: int) -> list:
    """Draw ``n_iterations`` random subsets of ``subset_size`` distinct sets."""
    if subset_size > dataset.n_sets or subset_size < 1:
        raise ConfigError(f"subset_size must be in [1, {dataset.n_sets}]", field="subset_size")
    rng = np.random.default_rng(seed)
    return [dataset.subset(rng.choice(dataset.n_sets, size=subset_size, replace=False))
            for _ in range(n_iterations)]
