"""Log-likelihood of binary (or count) outcomes under the tone model.

Two flavours share one parameter layout (see :class:`ParamVector`):

* exact: amplitudes are parameters, either one per tone and set
  (``"per_set"``) or one shared by all sets (``"constant"``);
* marginal: a single Rayleigh factor per set, scaling all tones, is
  integrated out, leaving its mean as the only amplitude parameter.

The amplitude integral is done per set with Gauss-Legendre quadrature in
``u = Omega / sigma`` on a window around the posterior mode of ``u``
(``window="adaptive"``) or on the fixed range ``[0, 6]``
(``window="fixed"``).  With ~10^3 outcomes per set the amplitude
posterior is only ~0.1 wide in ``u``; a fixed 32-node rule over [0, 6]
cannot resolve it, hence the adaptive default.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import LayoutError, QuadratureError
from .signal_model import PROB_EPS, ParamVector, tone_terms
from .simulator import RAYLEIGH_SCALE, Dataset

U_CUT = 6.0
WINDOW_HALFWIDTH = 8.0
SCAN_POINTS = 16


@lru_cache(maxsize=None)
def gauss_legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def _check_layout(dataset: Dataset, n_sets: int):
    if n_sets != dataset.n_sets:
        raise LayoutError(f"parameters describe {n_sets} sets, dataset has {dataset.n_sets}")


def bernoulli_terms(x, y, mask, shots, fidelity, order=1):
    """Log-likelihood per outcome and its derivatives w.r.t. the probe phase ``x``.

    Returns ``ll`` and, for ``order >= 1``, ``dll/dx``; for ``order >= 2``
    also ``d2ll/dx2``.  Probabilities are clamped to [eps, 1-eps] before the
    logarithm; derivatives vanish where the clamp is active.
    """
    a = 2.0 * fidelity - 1.0
    s2 = np.sin(2.0 * x)
    p_raw = (1.0 - fidelity) + a * 0.5 * (1.0 + s2)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    q = 1.0 - p
    miss = shots - y
    ll = mask * (y * np.log(p) + miss * np.log(q))
    if order == 0:
        return (ll,)
    free = (p_raw > PROB_EPS) & (p_raw < 1.0 - PROB_EPS)
    c2 = np.cos(2.0 * x)
    dp = a * c2
    l_p = y / p - miss / q
    dll = np.where(free, mask * l_p * dp, 0.0)
    if order == 1:
        return ll, dll
    l_pp = -y / p**2 - miss / q**2
    d2 = np.where(free, mask * (l_pp * dp * dp - l_p * 2.0 * a * s2), 0.0)
    return ll, dll, d2


# ---------------------------------------------------------------------------
# exact likelihood

def _exact_terms(dataset: Dataset, params: ParamVector, order: int):
    _check_layout(dataset, params.n_sets)
    t, y, mask = dataset.stacked
    probe = dataset.probe
    gain, gain_p, c, s = tone_terms(params.deltas, params.phis, t, probe.tau, params.weights)
    om = params.omega_matrix()                                    # (K, L)
    x = np.einsum("kl,k,kln->ln", om, gain, c)
    terms = bernoulli_terms(x, y, mask, probe.shots_per_point, probe.readout_fidelity, order)
    return terms, (t, gain, gain_p, c, s, om)


def per_set_log_likelihood(dataset: Dataset, params: ParamVector, **kw) -> np.ndarray:
    """Log-likelihood contribution of every set, shape ``(L,)``."""
    if params.mode == "marginal":
        return marginal_terms(dataset, params, order=0, **kw).per_set
    (ll,), _ = _exact_terms(dataset, params, 0)
    return ll.sum(axis=1)


def log_likelihood(dataset: Dataset, params: ParamVector, **kw) -> float:
    """Total log-likelihood; sets are reduced in index order.

    Binomial coefficients of multi-shot counts do not depend on the
    parameters and are left out.

    ``"marginal"`` mode parameters are routed to
    :func:`marginal_log_likelihood`.
    """
    return float(np.sum(per_set_log_likelihood(dataset, params, **kw)))


def _exact_gradient(dataset: Dataset, params: ParamVector) -> np.ndarray:
    (ll, g), (t, gain, gain_p, c, s, om) = _exact_terms(dataset, params, 1)
    K, L = om.shape
    grad = np.zeros(params.size)
    gc = np.einsum("ln,kln->kl", g, c)
    gts = np.einsum("ln,ln,kln->kl", g, t, s)
    gs = np.einsum("ln,kln->kl", g, s)
    grad[:K] = np.sum(om * (gain_p[:, None] * gc - gain[:, None] * gts), axis=1)
    if params.mode == "per_set":
        grad[K:K + K * L] = (gain[:, None] * gc).ravel()
    else:
        grad[K] = np.sum(gain[:, None] * gc)
    grad[K + params.n_amplitude:] = (-om * gain[:, None] * gs).ravel()
    return grad


def log_likelihood_gradient(dataset: Dataset, params: ParamVector, **kw) -> np.ndarray:
    """Analytic gradient in the flat layout of ``params``."""
    if params.mode == "marginal":
        return marginal_terms(dataset, params, order=1, **kw).gradient
    return _exact_gradient(dataset, params)


# ---------------------------------------------------------------------------
# amplitude-marginalized likelihood

def quadrature_nodes(lo, hi, order):
    """Nodes ``u`` and log-weights (Gauss-Legendre times Rayleigh density) on [lo, hi]."""
    xi, wi = gauss_legendre(order)
    half = 0.5 * (np.asarray(hi) - np.asarray(lo))[..., None]
    u = np.asarray(lo)[..., None] + half * (xi + 1.0)
    u = np.maximum(u, 1e-300)
    logw = np.log(wi) + np.log(half) + np.log(u) - 0.5 * u * u
    return u, logw


def integrate_amplitude(y, mask, b, sigma, shots, fidelity, quadrature_order=32,
                        window="adaptive", want_h=False):
    """Amplitude integral for each row of outcomes.

    ``b`` is the probe phase per unit amplitude, so the phase at scaled
    amplitude ``u`` is ``sigma * u * b``.  In the adaptive window the
    log-posterior ``log u - u^2/2 + ll(sigma u b)`` is scanned on a coarse
    grid over ``[0, 6]``; every local maximum within 30 nats of the best is
    refined by safeguarded Newton steps (the posterior can be multimodal,
    since the detection probability is periodic in the phase) and covered
    by ``WINDOW_HALFWIDTH`` posterior widths either side, overlapping
    windows merged.

    Returns ``(logz, h, lo, hi)`` where ``h[r, i]`` is the posterior mean of
    ``u * dll/dx`` for outcome ``i`` of row ``r`` (zeros unless ``want_h``).
    """
    if window not in ("adaptive", "fixed"):
        raise ValueError(f"unknown window {window!r}")
    xi, wi = gauss_legendre(quadrature_order)
    y = np.ascontiguousarray(y, dtype=float)
    mask = np.ascontiguousarray(np.broadcast_to(mask, y.shape), dtype=float)
    b = np.ascontiguousarray(np.broadcast_to(b, y.shape), dtype=float)
    logz, h, lo, hi = _kernels.marginal_rows(
        y, mask, b, float(sigma), float(shots), float(fidelity), xi, wi,
        window == "adaptive", U_CUT, WINDOW_HALFWIDTH, SCAN_POINTS, want_h)
    if not np.all(np.isfinite(logz)):
        raise QuadratureError("amplitude integrand is not finite at any node")
    return logz, h, lo, hi


@dataclass
class MarginalTerms:
    per_set: np.ndarray
    gradient: np.ndarray | None = None


def marginal_terms(dataset: Dataset, params: ParamVector, order: int = 0,
                   quadrature_order: int = 32, window: str = "adaptive") -> MarginalTerms:
    _check_layout(dataset, params.n_sets)
    t, y, mask = dataset.stacked
    probe = dataset.probe
    shots, fid = probe.shots_per_point, probe.readout_fidelity
    sigma = RAYLEIGH_SCALE * params.omega
    gain, gain_p, c, s = tone_terms(params.deltas, params.phis, t, probe.tau, params.weights)
    b = np.einsum("k,kln->ln", gain, c)                            # phase per unit amplitude
    per_set, h, _, _ = integrate_amplitude(y, mask, b, sigma, shots, fid, quadrature_order,
                                           window, want_h=order >= 1)
    if params.omega == 0:
        # degenerate amplitude distribution: every outcome has p = 1/2
        per_set = bernoulli_terms(np.zeros_like(b), y, mask, shots, fid, 0)[0].sum(axis=1)
    out = MarginalTerms(per_set)
    if order >= 1:
        out.gradient = _marginal_gradient(params, t, b, h, sigma, gain, gain_p, c, s)
    return out


def _marginal_gradient(params, t, b, h, sigma, gain, gain_p, c, s):
    K, L = params.n_tones, params.n_sets
    grad = np.zeros(params.size)
    hc = np.einsum("ln,kln->k", h, c)
    hts = np.einsum("ln,ln,kln->k", h, t, s)
    grad[:K] = sigma * (gain_p * hc - gain * hts)
    grad[K] = RAYLEIGH_SCALE * np.sum(h * b)
    grad[K + 1:] = (-sigma * gain[:, None] * np.einsum("ln,kln->kl", h, s)).ravel()
    return grad


def marginal_log_likelihood(dataset: Dataset, deltas, mean_omega: float, phis,
                            quadrature_order: int = 32, weights=None, window: str = "adaptive") -> float:
    """Log-likelihood with the per-set Rayleigh amplitude integrated out.

    Parameters
    ----------
    deltas : (K,) array
        Tone frequencies in rad/s.
    mean_omega : float
        Mean of the Rayleigh amplitude distribution (rad/s).
    phis : (K, L) array
        Per-tone, per-set phases.
    quadrature_order : int
        Gauss-Legendre nodes per set (at least 8).
    weights : (K,) array, optional
        Relative tone amplitudes; default all ones.
    """
    if quadrature_order < 8:
        raise ValueError("quadrature_order must be at least 8")
    params = ParamVector(deltas, phis, mean_omega, mode="marginal", weights=weights)
    return float(np.sum(marginal_terms(dataset, params, 0, quadrature_order, window).per_set))
