"""Fisher information and Cramer-Rao bounds.

Exact model: outcomes are independent binomials, so the information is
``sum_i S * grad(p_i) grad(p_i)^T / (p_i (1 - p_i))`` with analytic gradients.

Marginal model: the per-set amplitude is integrated out, the outcome space
of a set is too large to enumerate, and the information is estimated as the
Monte Carlo mean of the outer product of the marginal score over simulated
records (exact enumeration is available for tiny sets).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularInfo
from .likelihood import integrate_amplitude
from .signal_model import (ParamVector, ProbeConfig, ToneParams, detection_probability,
                           probability_gradient, tone_terms)
from .simulator import RAYLEIGH_SCALE

PINV_CONDITION = 1e12


@dataclass
class FisherResult:
    """Fisher information matrix with its (pseudo-)inverse and CRB SDs.

    ``pseudo`` is set when the condition number exceeds ``1e12``; the
    inverse is then the Moore-Penrose pseudo-inverse and ``null_direction``
    is the eigenvector of the smallest eigenvalue.
    """

    names: list
    matrix: np.ndarray
    inverse: np.ndarray
    pseudo: bool
    condition: float
    crb_sd: np.ndarray
    null_direction: np.ndarray | None = None
    stderr: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def crb_separation(self) -> float:
        return crb_of_separation(self)

    def index(self, name: str) -> int:
        return self.names.index(name)


def fisher_result(matrix, names, stderr=None) -> FisherResult:
    """Symmetrize ``matrix`` and invert it, flagging ill-conditioning.

    The condition number is taken after scaling to unit diagonal, so it
    does not depend on the units of the parameters.
    """
    I = np.asarray(matrix, dtype=float)
    I = 0.5 * (I + I.T)
    P = I.shape[0]
    diag = np.diag(I).copy()
    live = diag > 0
    d = np.where(live, np.sqrt(np.where(live, diag, 1.0)), 1.0)
    S = I / np.outer(d, d)
    S[~live, :] = 0.0
    S[:, ~live] = 0.0
    evals, evecs = np.linalg.eigh(S)
    top = max(evals[-1], 0.0)
    cond = np.inf if evals[0] <= 0 or not live.all() else top / evals[0]
    pseudo = not cond <= PINV_CONDITION
    if pseudo:
        inv_s = np.linalg.pinv(S, rcond=1.0 / PINV_CONDITION, hermitian=True)
        null = evecs[:, 0] / d
        null /= np.linalg.norm(null) if np.linalg.norm(null) > 0 else 1.0
    else:
        inv_s = np.linalg.inv(S)
        null = None
    inv = inv_s / np.outer(d, d)
    inv = 0.5 * (inv + inv.T)
    crb = np.sqrt(np.clip(np.diag(inv), 0.0, None))
    if pseudo:
        small = evals <= top / PINV_CONDITION
        touched = np.any(np.abs(evecs[:, small]) > 1e-8, axis=1) | ~live
        crb = np.where(touched, np.inf, crb)
    res = FisherResult(list(names), I, inv, pseudo, float(cond), crb, null, stderr)
    res.extra["scaled_eigenvectors"] = (evals, evecs, d)
    return res


def crb_of_separation(fisher: FisherResult, i: int = 0, j: int = 1, strict: bool = False) -> float:
    """SD bound on ``theta_j - theta_i`` (by default ``delta_1 - delta_0``).

    Returns ``inf`` when the combination overlaps the null space of a
    singular matrix, or raises :class:`SingularInfo` if ``strict``.
    """
    v = np.zeros(fisher.matrix.shape[0])
    v[i], v[j] = -1.0, 1.0
    if fisher.pseudo:
        evals, evecs, d = fisher.extra["scaled_eigenvectors"]
        small = evals <= max(evals[-1], 0.0) / PINV_CONDITION
        # null directions in scaled coordinates are z = d * theta
        overlap = np.abs(evecs[:, small].T @ (v / d))
        if np.any(overlap > 1e-8 * np.linalg.norm(v / d)):
            if strict:
                raise SingularInfo("separation is not identifiable", fisher.null_direction)
            return np.inf
    return float(np.sqrt(max(v @ fisher.inverse @ v, 0.0)))


def crb_linear_combination(jacobian, v) -> float:
    """``sqrt(v^T (J^T J)^-1 v)`` computed stably through a QR factorization."""
    R = np.linalg.qr(np.asarray(jacobian, dtype=float), mode="r")
    d = np.abs(np.diag(R))
    if np.any(d <= d.max() * 1e-15):
        return np.inf
    from scipy.linalg import solve_triangular
    z = solve_triangular(R, np.asarray(v, dtype=float), trans="T")
    return float(np.linalg.norm(z))


def _local_indices(params: ParamVector, l: int) -> list:
    K = params.n_tones
    idx = [params.delta_index(k) for k in range(K)]
    if params.mode == "per_set":
        idx += [params.omega_index(k, l) for k in range(K)]
    else:
        idx.append(params.omega_index())
    idx += [params.phi_index(k, l) for k in range(K)]
    return idx


def fisher_exact(params: ParamVector, probe: ProbeConfig, n_per_set: int,
                 strict: bool = False) -> FisherResult:
    """Fisher information of the exact model at the true ``params``.

    ``params`` fixes the layout: ``"per_set"`` treats every set's
    amplitudes as unknowns, ``"constant"`` a single shared amplitude.
    Phases are always per-set unknowns.  Singular matrices are returned with
    ``pseudo`` set; ``strict`` raises :class:`SingularInfo` instead.
    """
    if params.mode == "marginal":
        raise ValueError("use fisher_marginal for the marginal model")
    t = np.arange(n_per_set) * probe.tau
    P = params.size
    I = np.zeros((P, P))
    S = probe.shots_per_point
    for l in range(params.n_sets):
        idx = _local_indices(params, l)
        G = probability_gradient(params, l, t, probe.tau, probe.readout_fidelity)[:, idx]
        om = params.omega_matrix()[:, l]
        gain, _, c, _ = tone_terms(params.deltas, params.phis[:, l:l + 1], t, probe.tau, params.weights)
        p = detection_probability(np.einsum("k,k,kn->n", om, gain, c[:, 0]), probe.readout_fidelity)
        w = S / np.clip(p * (1.0 - p), 1e-300, None)
        w = np.where((p > 0) & (p < 1), w, 0.0)
        I[np.ix_(idx, idx)] += (G * w[:, None]).T @ G
    res = fisher_result(I, params.names())
    if strict and res.pseudo:
        raise SingularInfo("Fisher information is singular", res.null_direction)
    return res


def marginal_scores(y, b, t, gain, gain_p, c, s, sigma, shots, fidelity, quadrature_order=32,
                    window="adaptive"):
    """Per-record score of one set's marginal log-likelihood.

    Columns: ``delta_k`` (K), mean amplitude (1), ``phi_k`` (K).
    ``c, s`` are ``(K, n)`` cos/sin of the tone arguments for this set.
    """
    _, h, _, _ = integrate_amplitude(y, 1.0, b, sigma, shots, fidelity, quadrature_order,
                                     window, want_h=True)
    d_delta = sigma * (h @ (gain_p[:, None] * c - gain[:, None] * t * s).T)
    d_mean = RAYLEIGH_SCALE * (h @ b)[:, None]
    d_phi = -sigma * gain * (h @ s.T)
    return np.concatenate([d_delta, d_mean, d_phi], axis=1)


def fisher_marginal(deltas, mean_omega: float, phases, probe: ProbeConfig, n_per_set: int,
                    quadrature_order: int = 32, mc_samples: int = 200, seed: int = 0,
                    weights=None, enumerate_outcomes: bool = False) -> FisherResult:
    """Fisher information of the amplitude-marginalized model.

    Per set, ``mc_samples`` records are simulated from the marginal model
    (Rayleigh amplitude, then binomial outcomes) and the information is the
    mean outer product of the marginal score; ``stderr`` holds the Monte
    Carlo standard error of every entry.  With ``enumerate_outcomes`` (single
    shot, ``n_per_set <= 20``) the expectation is an exact sum over all
    ``2**n`` records instead.

    Parameters
    ----------
    deltas : (K,) array
    mean_omega : float
        Mean Rayleigh amplitude, rad/s.
    phases : (K, L) array
        Per-set phases; ``L`` is the number of sets.
    """
    params = ParamVector(deltas, phases, mean_omega, mode="marginal", weights=weights)
    K, L = params.n_tones, params.n_sets
    P = params.size
    I = np.zeros((P, P))
    var = np.zeros((P, P))
    if mean_omega == 0:
        return fisher_result(I, params.names(), stderr=var)
    t = np.arange(n_per_set) * probe.tau
    S, fid = probe.shots_per_point, probe.readout_fidelity
    sigma = RAYLEIGH_SCALE * mean_omega
    ss = np.random.SeedSequence(seed)
    streams = ss.spawn(L)
    if enumerate_outcomes:
        if S != 1 or n_per_set > 20:
            raise ValueError("enumeration needs single-shot sets of at most 20 outcomes")
        records = np.array(list(itertools.product((0.0, 1.0), repeat=n_per_set)))
    for l in range(L):
        idx = _local_indices(params, l)
        gain, gain_p, c, s = tone_terms(params.deltas, params.phis[:, l:l + 1], t, probe.tau,
                                        params.weights)
        c, s = c[:, 0], s[:, 0]
        b = gain @ c
        if enumerate_outcomes:
            y = records
            logz, _, _, _ = integrate_amplitude(y, 1.0, b, sigma, S, fid, quadrature_order, "fixed")
            prob = np.exp(logz)
            prob /= prob.sum()
        else:
            rng = np.random.default_rng(streams[l])
            u = rng.rayleigh(1.0, size=mc_samples)
            p = detection_probability(sigma * u[:, None] * b, fid)
            y = rng.binomial(S, p).astype(float)
            prob = np.full(mc_samples, 1.0 / mc_samples)
        sc = marginal_scores(y, b, t, gain, gain_p, c, s, sigma, S, fid, quadrature_order,
                             "fixed" if enumerate_outcomes else "adaptive")
        outer = sc[:, :, None] * sc[:, None, :]
        block = np.einsum("r,rij->ij", prob, outer)
        I[np.ix_(idx, idx)] += block
        if not enumerate_outcomes:
            var[np.ix_(idx, idx)] += outer.var(axis=0, ddof=1) / mc_samples
    res = fisher_result(I, params.names(), stderr=np.sqrt(var))
    res.extra["mc_samples"] = 0 if enumerate_outcomes else mc_samples
    return res


def expected_marginal_loglik(theta_true: ParamVector, theta: ParamVector, probe: ProbeConfig,
                             n_per_set: int, quadrature_order: int = 64) -> float:
    """``E_{y ~ theta_true}[log P(y | theta)]`` by exact enumeration (tiny sets only)."""
    from .simulator import Dataset, MeasurementSet
    records = np.array(list(itertools.product((0, 1), repeat=n_per_set)), dtype=np.uint8)
    total = 0.0
    t = np.arange(n_per_set) * probe.tau
    for l in range(theta.n_sets):
        vals = []
        for params in (theta_true, theta):
            gain, _, c, _ = tone_terms(params.deltas, params.phis[:, l:l + 1], t, probe.tau,
                                       params.weights)
            b = gain @ c[:, 0]
            sigma = RAYLEIGH_SCALE * params.omega
            logz, _, _, _ = integrate_amplitude(records.astype(float), 1.0, b, sigma,
                                                probe.shots_per_point, probe.readout_fidelity,
                                                quadrature_order, "fixed")
            vals.append(logz)
        w = np.exp(vals[0])
        total += np.sum(w / w.sum() * vals[1])
    return float(total)


def fisher_linearized(tone: ToneParams, n_per_set: int, tau: float) -> FisherResult:
    """Single-set information over ``(delta, omega, phi)`` in the small-signal model.

    ``p = 1/2 + Omega tau (cos phi - delta t sin phi)`` depends on the three
    parameters only through ``Omega cos phi`` and ``Omega delta sin phi``, so
    the matrix has rank two.  Evaluated at ``p = 1/2`` (weight 4 per outcome).
    """
    t = np.arange(n_per_set) * tau
    d, om, ph = tone.delta, tone.omega, tone.phi
    G = np.stack([-om * tau * t * np.sin(ph),
                  tau * (np.cos(ph) - d * t * np.sin(ph)),
                  -om * tau * (np.sin(ph) + d * t * np.cos(ph))], axis=1)
    return fisher_result(4.0 * G.T @ G, ["delta", "omega", "phi"])


def single_tone_crb(delta: float, omega: float, tau: float, T: float, n_sets: int,
                    phase: float = 0.0, readout_fidelity: float = 1.0) -> float:
    """CRB SD of one frequency with a constant amplitude and known phases.

    Free parameters are the frequency and the amplitude; every set starts at
    the same known phase and holds ``round(T / tau)`` measurements.
    """
    n = int(round(T / tau))
    params = ParamVector([delta], np.full((1, n_sets), phase), omega, mode="constant")
    probe = ProbeConfig(tau, readout_fidelity)
    t = np.arange(n) * tau
    G = probability_gradient(params, 0, t, tau, readout_fidelity)[:, :2]
    gain, _, c, _ = tone_terms(params.deltas, params.phis[:, :1], t, tau)
    p = detection_probability(omega * gain[0] * c[0, 0], readout_fidelity)
    I = n_sets * (G / (p * (1 - p))[:, None]).T @ G
    return float(np.sqrt(np.linalg.inv(I)[0, 0]))


def scaling_exponents(T_values, N_values, omega_values, tau: float, delta: float,
                      T_ref: float | None = None, N_ref: int = 16, omega_ref: float | None = None,
                      tau_values=None) -> dict:
    """Log-log slopes of the single-frequency CRB versus T, N, Omega (and tau).

    Each axis is swept with the others held at their reference values
    (the first grid entry unless given).
    """
    T_ref = T_values[0] if T_ref is None else T_ref
    omega_ref = omega_values[0] if omega_ref is None else omega_ref

    def slope(xs, fn):
        ys = [fn(x) for x in xs]
        return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])

    out = {
        "T": slope(T_values, lambda T: single_tone_crb(delta, omega_ref, tau, T, N_ref)),
        "N": slope(N_values, lambda N: single_tone_crb(delta, omega_ref, tau, T_ref, int(N))),
        "omega": slope(omega_values, lambda om: single_tone_crb(delta, om, tau, T_ref, N_ref)),
    }
    if tau_values is not None:
        # hold the amplitude-times-duration product small: Omega fixed, tau varies
        out["tau"] = slope(tau_values, lambda tu: single_tone_crb(delta, omega_ref, tu, T_ref, N_ref))
    return out
