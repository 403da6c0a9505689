"""Measurement physics of a phase-sensitive probe.

A tone ``Omega cos(delta t + phi)`` coupled to the probe during one block of
length ``tau`` imprints the phase

    Omega tau sinc(delta tau / 2) cos(delta t + phi)

and the photon-detection probability is ``sin^2(phase + pi/4)``, passed
through a symmetric readout bit-flip channel of fidelity ``f``.  Several
tones add their phases.

All functions here are pure numpy and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, LayoutError

TWO_PI = 2.0 * np.pi
PROB_EPS = 1e-12

AMPLITUDE_MODES = ("per_set", "constant", "marginal")


@dataclass(frozen=True)
class ProbeConfig:
    """Probe-side measurement parameters.

    Parameters
    ----------
    tau : float
        Duration of one measurement block in seconds; consecutive
        measurements within a set are spaced by ``tau``.
    readout_fidelity : float
        Probability in [0.5, 1] that the recorded bit equals the
        projective outcome.
    shots_per_point : int
        Repetitions per time point (1 is single shot).
    """

    tau: float
    readout_fidelity: float = 1.0
    shots_per_point: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive", field="probe.tau")
        if not 0.5 <= self.readout_fidelity <= 1.0:
            raise ConfigError("readout_fidelity must lie in [0.5, 1]", field="probe.readout_fidelity")
        if int(self.shots_per_point) != self.shots_per_point or self.shots_per_point < 1:
            raise ConfigError("shots_per_point must be a positive integer", field="probe.shots_per_point")


@dataclass(frozen=True)
class ToneParams:
    """One tone: angular frequency, Rabi amplitude and initial phase."""

    delta: float
    omega: float
    phi: float = 0.0

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("omega must be non-negative", field="omega")
        object.__setattr__(self, "phi", float(np.mod(self.phi, TWO_PI)))


@dataclass
class ParamVector:
    """Free parameters of the likelihood with a fixed flat layout.

    The flat layout is ``[deltas (K), amplitude block, phis (K*L)]`` where the
    amplitude block is ``omegas[k, l]`` (K*L entries, row-major) in
    ``"per_set"`` mode and a single scalar in ``"constant"`` and
    ``"marginal"`` modes.  In ``"marginal"`` mode the scalar is the mean of
    the Rayleigh amplitude distribution; in ``"constant"`` mode it is the
    amplitude shared by every set.  ``weights`` are fixed relative tone
    amplitudes and never free.
    """

    deltas: np.ndarray
    phis: np.ndarray
    omega: np.ndarray | float
    mode: str = "per_set"
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.deltas = np.atleast_1d(np.asarray(self.deltas, dtype=float))
        K = self.deltas.size
        self.phis = np.asarray(self.phis, dtype=float).reshape(K, -1)
        if self.mode not in AMPLITUDE_MODES:
            raise ConfigError(f"unknown amplitude mode {self.mode!r}", field="mode")
        if self.mode == "per_set":
            self.omega = np.asarray(self.omega, dtype=float).reshape(K, self.n_sets)
            if np.any(self.omega < 0):
                raise ConfigError("omegas must be non-negative", field="omega")
        else:
            self.omega = float(self.omega)
            if self.omega < 0:
                raise ConfigError("omega must be non-negative", field="omega")
        if self.weights is None:
            self.weights = np.ones(K)
        self.weights = np.asarray(self.weights, dtype=float).reshape(K)

    @property
    def n_tones(self) -> int:
        return self.deltas.size

    @property
    def n_sets(self) -> int:
        return self.phis.shape[1]

    @property
    def n_amplitude(self) -> int:
        return self.n_tones * self.n_sets if self.mode == "per_set" else 1

    @property
    def size(self) -> int:
        return self.n_tones + self.n_amplitude + self.n_tones * self.n_sets

    # flat-layout index helpers
    def delta_index(self, k: int) -> int:
        return k

    def omega_index(self, k: int = 0, l: int = 0) -> int:
        if self.mode == "per_set":
            return self.n_tones + k * self.n_sets + l
        return self.n_tones

    def phi_index(self, k: int, l: int) -> int:
        return self.n_tones + self.n_amplitude + k * self.n_sets + l

    def names(self) -> list[str]:
        K, L = self.n_tones, self.n_sets
        out = [f"delta_{k}" for k in range(K)]
        if self.mode == "per_set":
            out += [f"omega_{k}_{l}" for k in range(K) for l in range(L)]
        else:
            out.append("mean_omega" if self.mode == "marginal" else "omega")
        out += [f"phi_{k}_{l}" for k in range(K) for l in range(L)]
        return out

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.deltas, np.ravel(self.omega), self.phis.ravel()])

    def with_array(self, theta: np.ndarray) -> "ParamVector":
        """Return a copy carrying the flat vector ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size:
            raise LayoutError(f"expected {self.size} parameters, got {theta.size}")
        K, A = self.n_tones, self.n_amplitude
        omega = theta[K:K + A]
        return ParamVector(
            deltas=theta[:K].copy(),
            phis=theta[K + A:].reshape(K, self.n_sets).copy(),
            omega=omega.reshape(K, self.n_sets).copy() if self.mode == "per_set" else omega[0],
            mode=self.mode,
            weights=self.weights.copy(),
        )

    def omega_matrix(self) -> np.ndarray:
        """Unweighted amplitude parameter broadcast to ``(K, L)``."""
        if self.mode == "per_set":
            return self.omega
        return np.full((self.n_tones, self.n_sets), self.omega)

    def amplitudes(self) -> np.ndarray:
        """Physical per-tone, per-set amplitudes ``(K, L)``, weights applied."""
        return self.weights[:, None] * self.omega_matrix()

    def canonical(self) -> "ParamVector":
        """Sort tones by ascending frequency and wrap phases into [0, 2pi)."""
        order = np.argsort(self.deltas, kind="stable")
        return ParamVector(
            deltas=self.deltas[order],
            phis=np.mod(self.phis[order], TWO_PI),
            omega=np.abs(self.omega[order]) if self.mode == "per_set" else abs(self.omega),
            mode=self.mode,
            weights=self.weights[order],
        )


def sinc(z):
    """Unnormalized sinc, sin(z)/z with sinc(0) = 1."""
    return np.sinc(np.asarray(z, dtype=float) / np.pi)


def sinc_prime(z):
    """Derivative of the unnormalized sinc."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    return np.where(small, -z / 3.0 + z**3 / 30.0, (np.cos(zs) - np.sin(zs) / zs) / zs)


def filter_gain(delta, tau):
    """Phase picked up per unit amplitude by a block of length tau: tau*sinc(delta*tau/2)."""
    return tau * sinc(np.asarray(delta) * tau / 2.0)


def filter_gain_prime(delta, tau):
    return 0.5 * tau * tau * sinc_prime(np.asarray(delta) * tau / 2.0)


def accumulated_phase(tones: Sequence[ToneParams], t, tau: float):
    """Probe phase accumulated during the block starting at ``t``.

    Sum over tones of ``Omega tau sinc(delta tau/2) cos(delta t + phi)``.
    ``t`` may be an array.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for tone in tones:
        out = out + tone.omega * filter_gain(tone.delta, tau) * np.cos(tone.delta * t + tone.phi)
    return out


def detection_probability(phase, readout_fidelity: float = 1.0):
    """Probability of recording a detection for a given accumulated phase."""
    # sin^2(x + pi/4) in half-angle form: exact at the trivial phases
    ideal = 0.5 * (1.0 + np.sin(2.0 * np.asarray(phase, dtype=float)))
    f = readout_fidelity
    return f * ideal + (1.0 - f) * (1.0 - ideal)


def probability_slope(phase, readout_fidelity: float = 1.0):
    """d p / d phase."""
    return (2.0 * readout_fidelity - 1.0) * np.cos(2.0 * np.asarray(phase, dtype=float))


def linearized_probability(tone: ToneParams, t, tau: float):
    """Small-signal approximation ``1/2 + Omega tau (cos phi - delta t sin phi)``.

    Only meaningful for ``Omega tau << 1`` and ``delta t << 1``; outside that
    regime the formula is still returned, clamped to [0, 1].
    """
    t = np.asarray(t, dtype=float)
    p = 0.5 + tone.omega * tau * (np.cos(tone.phi) - tone.delta * t * np.sin(tone.phi))
    return np.clip(p, 0.0, 1.0)


def clamp_probability(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def tone_terms(deltas, phis, t, tau, weights=None):
    """Per-tone building blocks evaluated on a time grid.

    Parameters
    ----------
    deltas : (K,) array
    phis : (K, L) array
    t : (L, n) or (n,) array of times since set start
    tau : float
    weights : (K,) array, optional

    Returns
    -------
    gain : (K,) array
        ``weights * tau * sinc(delta tau / 2)``.
    gain_prime : (K,) array
        d gain / d delta.
    cos_arg, sin_arg : (K, L, n) arrays
        cos and sin of ``delta t + phi``.
    """
    deltas = np.asarray(deltas, dtype=float)
    K = deltas.size
    weights = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    phis = np.asarray(phis, dtype=float).reshape(K, -1)
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = np.broadcast_to(t, (phis.shape[1], t.size))
    arg = deltas[:, None, None] * t[None] + phis[:, :, None]
    gain = weights * filter_gain(deltas, tau)
    gain_prime = weights * filter_gain_prime(deltas, tau)
    return gain, gain_prime, np.cos(arg), np.sin(arg)


def probability_gradient(params: ParamVector, set_index: int, t, tau: float,
                         readout_fidelity: float = 1.0) -> np.ndarray:
    """Analytic gradient of the detection probability in set ``set_index``.

    Returns an array of shape ``t.shape + (params.size,)`` in the flat layout
    of ``params``.  Phase entries of other sets are zero.  In ``"marginal"``
    mode the probability is evaluated at amplitude ``params.omega`` and the
    mean-amplitude entry is zero, since that parameter acts only through
    the amplitude distribution.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    l = set_index
    K = params.n_tones
    gain, gain_prime, c, s = tone_terms(params.deltas, params.phis[:, l:l + 1], t, tau,
                                        params.weights)
    c, s = c[:, 0], s[:, 0]                       # (K, n)
    omega_k = params.omega_matrix()[:, l]
    phase = np.sum(omega_k[:, None] * gain[:, None] * c, axis=0)
    dp = probability_slope(phase, readout_fidelity)   # (n,)

    grad = np.zeros(t.shape + (params.size,))
    for k in range(K):
        dx_ddelta = omega_k[k] * (gain_prime[k] * c[k] - gain[k] * t * s[k])
        grad[..., params.delta_index(k)] = dp * dx_ddelta
        grad[..., params.phi_index(k, l)] = dp * (-omega_k[k] * gain[k] * s[k])
        if params.mode == "per_set":
            grad[..., params.omega_index(k, l)] = dp * gain[k] * c[k]
    if params.mode == "constant":
        grad[..., params.omega_index()] = dp * np.sum(gain[:, None] * c, axis=0)
    return grad
