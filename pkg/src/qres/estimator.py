"""Multi-start maximum-likelihood estimation of tone frequencies.

Each fit seeds its frequencies from the averaged power spectrum, screens
``n_starts`` starting points (frequencies on a jittered grid over the
search window) by their initial log-likelihood, and refines the best few
with a bounded local optimizer.  Parameters are rescaled by an approximate
Fisher diagonal so that the optimizer sees comparably curved coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, NoConvergence
from .likelihood import log_likelihood, log_likelihood_gradient, marginal_terms
from .signal_model import TWO_PI, ParamVector, filter_gain
from .simulator import Dataset, split_resample
from .spectrum import power_spectrum, spectral_seed

RAYLEIGH_MEAN_PER_RMS = np.sqrt(np.pi / 4.0)
# extra two-tone starts around the spectral seed, in units of 2pi / T_phi
COALESCED_SEPARATIONS = np.array([0.05, 0.2, 0.5])


@dataclass(frozen=True)
class EstimationConfig:
    """Settings for :func:`mle_estimate`.

    Parameters
    ----------
    K_fit : int
        Number of tones fitted (1 or 2).
    n_starts : int
        Starting points screened per fit.
    search_halfwidth : float, optional
        Frequency half-width of the start window around the spectral seed
        (rad/s).  Default ``5 * 2pi / T_phi``; ``T_phi`` falls back to the
        longest set duration.
    marginalize_amplitudes : bool
        Fit the Rayleigh-marginalized model (free mean amplitude) instead of
        free per-set amplitudes.
    amplitude_mode : str, optional
        Overrides ``marginalize_amplitudes``: ``"marginal"``, ``"per_set"``
        or ``"constant"``.
    optimizer : str
        ``"lbfgs"`` (bounded quasi-Newton with analytic gradients) or
        ``"nelder-mead"``.
    n_refine : int
        Number of best-screened starts that are optimized to convergence
        (the best start seeded at the spectral peak is refined as well).
    phase_init : str
        ``"projection"``: per-set least-squares phases at the start
        frequencies; ``"random"``: uniform phases.
    """

    K_fit: int = 2
    n_starts: int = 64
    search_halfwidth: float | None = None
    T_phi: float | None = None
    marginalize_amplitudes: bool = True
    amplitude_mode: str | None = None
    optimizer: str = "lbfgs"
    n_refine: int = 2
    phase_init: str = "projection"
    ftol: float = 1e-10
    xtol: float = 1e-8            # in units of 2pi / T_phi
    gtol: float = 1e-6
    max_iterations: int = 20000
    quadrature_order: int = 32
    pad_factor: int = 4

    def __post_init__(self):
        if self.K_fit not in (1, 2):
            raise ConfigError("K_fit must be 1 or 2", field="estimation.K_fit")
        if self.n_starts < 1:
            raise ConfigError("n_starts must be at least 1", field="estimation.n_starts")
        if self.search_halfwidth is not None and not self.search_halfwidth > 0:
            raise ConfigError("search_halfwidth must be positive", field="estimation.search_halfwidth")
        if self.mode not in ("marginal", "per_set", "constant"):
            raise ConfigError(f"unknown amplitude mode {self.amplitude_mode!r}",
                              field="estimation.amplitude_mode")
        if self.optimizer not in ("lbfgs", "nelder-mead"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", field="estimation.optimizer")
        if self.phase_init not in ("projection", "random"):
            raise ConfigError(f"unknown phase_init {self.phase_init!r}", field="estimation.phase_init")
        if self.n_refine < 1:
            raise ConfigError("n_refine must be at least 1", field="estimation.n_refine")

    @property
    def mode(self) -> str:
        if self.amplitude_mode is not None:
            return self.amplitude_mode
        return "marginal" if self.marginalize_amplitudes else "per_set"

    def coherence_time(self, dataset: Dataset) -> float:
        if self.T_phi is not None:
            return self.T_phi
        return max(s.n for s in dataset.sets) * dataset.probe.tau

    def halfwidth(self, dataset: Dataset) -> float:
        if self.search_halfwidth is not None:
            return self.search_halfwidth
        return 5.0 * TWO_PI / self.coherence_time(dataset)


@dataclass
class EstimateResult:
    """Outcome of one multi-start fit.

    ``params`` holds every fitted parameter (tones sorted ascending);
    ``start_index`` is the winning start in screening order.
    """

    deltas: np.ndarray
    params: ParamVector
    log_likelihood: float
    converged: bool
    start_index: int
    n_evaluations: int = 0
    initial_log_likelihoods: np.ndarray | None = None
    message: str = ""

    @property
    def separation(self) -> float:
        return float(self.deltas[-1] - self.deltas[0])


# ---------------------------------------------------------------------------
# starting points

def start_frequencies(seed_freqs, halfwidth: float, n_starts: int, rng: np.random.Generator):
    """Jittered uniform grid over ``seed +/- halfwidth``, shape ``(n_starts, K)``.

    For two tones the second coordinate walks the same grid in a random
    order, so the starts cover pairs rather than the diagonal only.
    """
    seed_freqs = np.atleast_1d(seed_freqs)
    K = seed_freqs.size
    cell = 2.0 * halfwidth / n_starts
    centres = -halfwidth + cell * (np.arange(n_starts) + 0.5)
    out = np.empty((n_starts, K))
    for k in range(K):
        order = np.arange(n_starts) if k == 0 else rng.permutation(n_starts)
        jitter = rng.uniform(-0.1, 0.1, n_starts) * cell
        out[:, k] = seed_freqs[k] + centres[order] + jitter
    return out


def projection_phases(dataset: Dataset, deltas, ridge: float = 1e-3):
    """Per-set least-squares phases and amplitudes of ``sum_k A_k cos(delta_k t + phi_k)``.

    Uses the small-signal form ``y - mean ~ (2f-1) x``.  A ridge term keeps
    the fit stable for nearly equal frequencies.  Returns ``(phis, amps)``,
    each ``(K, L)``; ``amps`` are probe-phase amplitudes (divide by the
    filter gain for Rabi amplitudes).
    """
    t, y, mask = dataset.stacked
    y = y / dataset.probe.shots_per_point
    contrast = 2.0 * dataset.probe.readout_fidelity - 1.0
    deltas = np.atleast_1d(deltas)
    K, L = deltas.size, dataset.n_sets
    phis = np.zeros((K, L))
    amps = np.zeros((K, L))
    for l in range(L):
        m = mask[l] > 0
        tl = t[l, m]
        r = (y[l, m] - y[l, m].mean()) / contrast
        A = np.concatenate([np.cos(np.outer(tl, deltas)), -np.sin(np.outer(tl, deltas))], axis=1)
        G = A.T @ A
        G += ridge * np.trace(G) / G.shape[0] * np.eye(G.shape[0])
        coef = np.linalg.solve(G, A.T @ r)
        z = coef[:K] + 1j * coef[K:]
        phis[:, l] = np.mod(np.angle(z), TWO_PI)
        amps[:, l] = np.abs(z)
    return phis, amps


def _initial_params(dataset, config, deltas, omega_rms, rng):
    K, L = deltas.size, dataset.n_sets
    mode = config.mode
    tau = dataset.probe.tau
    if config.phase_init == "projection":
        phis, amps = projection_phases(dataset, deltas)
    else:
        phis, amps = rng.uniform(0.0, TWO_PI, (K, L)), None
    if mode == "marginal":
        omega = omega_rms * RAYLEIGH_MEAN_PER_RMS
    elif mode == "constant":
        omega = omega_rms
    elif amps is not None:
        omega = amps / np.abs(filter_gain(deltas, tau))[:, None]
    else:
        omega = np.full((K, L), omega_rms)
    return ParamVector(deltas, phis, omega, mode=mode), amps


def _coalesced_params(dataset, config, centre, omega_rms, separations):
    """Two-tone starts straddling one frequency, both with its single-tone phase.

    Nearly degenerate pairs are rarely hit by the grid, and projections at
    two almost equal frequencies are poorly conditioned, so these starts are
    built from the one-tone projection with the amplitude split evenly.
    """
    phi1, amp1 = projection_phases(dataset, [centre])
    out = []
    for s in separations:
        deltas = np.array([centre - 0.5 * s, centre + 0.5 * s])
        phis = np.repeat(phi1, 2, axis=0)
        amps = np.repeat(0.5 * amp1, 2, axis=0)
        if config.mode == "marginal":
            omega = 0.5 * omega_rms * RAYLEIGH_MEAN_PER_RMS * np.sqrt(2.0)
        elif config.mode == "constant":
            omega = 0.5 * omega_rms * np.sqrt(2.0)
        else:
            omega = amps / np.abs(filter_gain(deltas, dataset.probe.tau))[:, None]
        out.append((ParamVector(deltas, phis, omega, mode=config.mode), amps))
    return out


def _scales(params: ParamVector, dataset: Dataset, omega_rms: float, set_amps=None) -> np.ndarray:
    """Approximate inverse square-root Fisher diagonal, used as coordinate scales.

    ``set_amps`` are per-set probe-phase amplitudes (from the projection
    start) that set the phase scales; otherwise the seed amplitude is used.
    """
    tau = dataset.probe.tau
    n = max(s.n for s in dataset.sets)
    L = params.n_sets
    K = params.n_tones
    a = 2.0 * dataset.probe.readout_fidelity - 1.0
    g = abs(float(filter_gain(np.mean(params.deltas), tau)))
    om = max(omega_rms, 1e-12)
    per_bit = 2.0 * a * a                      # 4 a^2 <cos^2>, averaged over phase
    if set_amps is None:
        set_amps = np.full((K, L), om * g)
    amp2 = np.maximum(np.asarray(set_amps) ** 2, (0.1 * om * g) ** 2)       # (K, L)
    # centred times: the phase reference sits mid-set, so only the spread counts
    sum_t2 = tau * tau * n * (n * n - 1) / 12.0
    sc = np.empty(params.size)
    sc[:K] = 1.0 / np.sqrt(per_bit * amp2.sum(axis=1) * sum_t2)
    A = params.n_amplitude
    if params.mode == "marginal":
        sc[K] = max(params.omega, om * 1e-3) / np.sqrt(L)
    elif params.mode == "constant":
        sc[K] = 1.0 / np.sqrt(per_bit * g * g * n * L)
    else:
        sc[K:K + A] = 1.0 / np.sqrt(per_bit * g * g * n)
    sc[K + A:] = (1.0 / np.sqrt(per_bit * amp2 * n)).ravel()
    return sc


def _bounds(params: ParamVector, seed_freqs, halfwidth):
    K, A = params.n_tones, params.n_amplitude
    lo = np.full(params.size, -np.inf)
    hi = np.full(params.size, np.inf)
    lo[:K] = np.atleast_1d(seed_freqs) - 2.0 * halfwidth
    hi[:K] = np.atleast_1d(seed_freqs) + 2.0 * halfwidth
    lo[K:K + A] = 0.0
    return lo, hi


# ---------------------------------------------------------------------------
# fitting

class _Objective:
    """Negative log-likelihood in scaled, decorrelated coordinates.

    ``theta = origin + scale * z`` except that each phase is referenced to
    the middle of its set: ``phi = origin + scale * z_phi - t_mid * (delta - delta_0)``.
    Without the shift, frequency and phase errors are strongly correlated.
    """

    def __init__(self, dataset, template, scale, origin, kw):
        self.dataset, self.template = dataset, template
        self.scale, self.origin, self.kw = scale, origin, kw
        K, A = template.n_tones, template.n_amplitude
        self.K, self.A, self.L = K, A, template.n_sets
        self.t_mid = 0.5 * (max(s.n for s in dataset.sets) - 1) * dataset.probe.tau
        self.n_eval = 0

    def theta(self, z):
        th = self.origin + self.scale * z
        K, A, L = self.K, self.A, self.L
        shift = self.scale[:K] * z[:K] * self.t_mid
        th[K + A:] -= np.repeat(shift, L)
        return th

    def grad_z(self, g):
        K, A, L = self.K, self.A, self.L
        gz = g * self.scale
        gz[:K] -= self.scale[:K] * self.t_mid * g[K + A:].reshape(K, L).sum(axis=1)
        return gz

    def params(self, z):
        return self.template.with_array(self.theta(z))

    def value(self, z):
        self.n_eval += 1
        return -log_likelihood(self.dataset, self.params(z), **self.kw)

    def value_and_grad(self, z):
        self.n_eval += 1
        p = self.params(z)
        if p.mode == "marginal":
            mt = marginal_terms(self.dataset, p, 1, **self.kw)
            return -float(np.sum(mt.per_set)), -self.grad_z(mt.gradient)
        ll = log_likelihood(self.dataset, p)
        return -ll, -self.grad_z(log_likelihood_gradient(self.dataset, p))


def _local_fit(obj: _Objective, lo, hi, config: EstimationConfig, dataset):
    K = obj.template.n_tones
    z_lo = (lo - obj.origin) / obj.scale
    z_hi = (hi - obj.origin) / obj.scale
    x_unit = TWO_PI / config.coherence_time(dataset)
    z0 = np.zeros(obj.origin.size)
    if config.optimizer == "lbfgs":
        res = minimize(obj.value_and_grad, z0, jac=True, method="L-BFGS-B",
                       bounds=list(zip(z_lo, z_hi)),
                       options={"ftol": config.ftol, "gtol": config.gtol,
                                "maxfun": config.max_iterations,
                                "maxiter": config.max_iterations, "maxcor": 20})
        converged = bool(res.success)
    else:
        xatol = config.xtol * x_unit / obj.scale[:K].min()

        def clipped(z):
            return obj.value(np.clip(z, z_lo, z_hi))
        res = minimize(clipped, z0, method="Nelder-Mead",
                       options={"xatol": xatol, "fatol": config.ftol * max(1.0, abs(obj.value(z0))),
                                "maxfev": config.max_iterations, "adaptive": True})
        res.x = np.clip(res.x, z_lo, z_hi)
        converged = bool(res.success)
    return res.x, -float(res.fun), converged, str(res.message)


def mle_estimate(dataset: Dataset, config: EstimationConfig, seed: int = 0,
                 raise_on_failure: bool = False) -> EstimateResult:
    """Multi-start maximum-likelihood fit of ``config.K_fit`` tones.

    All ``n_starts`` grid starts, plus seeded starts (the spectral peak
    itself for one tone, a few coalesced pairs straddling it for two), are
    scored by their log-likelihood; the ``n_refine`` best are optimized,
    plus the best seeded start if it is not among them; the highest final log-likelihood
    wins (ties go to the lowest start index) and carries its own
    convergence flag.  If no refined start converges the
    best point is returned with ``converged=False``, or
    :class:`NoConvergence` is raised when ``raise_on_failure`` is set.
    """
    if dataset.n_sets == 0 or dataset.n_outcomes == 0:
        raise ConfigError("dataset is empty", field="dataset")
    rng = np.random.default_rng(seed)
    spec = power_spectrum(dataset, pad_factor=config.pad_factor)
    sd = spectral_seed(spec, config.K_fit)
    hw = config.halfwidth(dataset)
    kw = {"quadrature_order": config.quadrature_order} if config.mode == "marginal" else {}

    freqs = start_frequencies(sd.frequencies, hw, config.n_starts, rng)
    starts = []
    for f in freqs:
        starts.append(_initial_params(dataset, config, np.sort(f), sd.amplitude, rng))
    n_grid = len(starts)
    if config.K_fit == 2:
        unit = TWO_PI / config.coherence_time(dataset)
        starts += _coalesced_params(dataset, config, float(np.mean(sd.frequencies)),
                                    sd.amplitude, COALESCED_SEPARATIONS * unit)
    else:
        starts.append(_initial_params(dataset, config, sd.frequencies.copy(), sd.amplitude, rng))
    init_ll = np.array([log_likelihood(dataset, p, **kw) for p, _ in starts])

    ranked = np.argsort(-init_ll, kind="stable")
    order = list(ranked[:config.n_refine])
    if n_grid < len(starts) and not any(i >= n_grid for i in order):
        # always refine the best seeded start as well
        order.append(next(i for i in ranked if i >= n_grid))
    lo_b, hi_b = _bounds(starts[0][0], sd.frequencies, hw)
    best = None
    n_eval = len(starts)
    for i in order:
        p0, amps = starts[i]
        origin = np.clip(p0.to_array(), lo_b, hi_b)
        scale = _scales(p0, dataset, sd.amplitude, amps)
        obj = _Objective(dataset, p0, scale, origin, kw)
        z, ll, ok, msg = _local_fit(obj, lo_b, hi_b, config, dataset)
        n_eval += obj.n_eval
        cand = (ll, -int(i), ok, obj.params(z), msg)
        if best is None or cand[:2] > best[:2]:
            best = cand
    ll, neg_i, ok, params, msg = best
    params = params.canonical()
    result = EstimateResult(params.deltas.copy(), params, ll, ok, -neg_i, n_eval, init_ll, msg)
    if not ok and raise_on_failure:
        raise NoConvergence("no start converged", result)
    return result


def local_estimate(dataset: Dataset, config: EstimationConfig, start: ParamVector) -> EstimateResult:
    """Single local fit from ``start``, typically the simulated truth.

    Serves as an oracle for the global search: a multi-start fit that ends
    below this log-likelihood has missed the best mode.  ``start.mode`` must
    match ``config.mode``.
    """
    if start.mode != config.mode:
        raise ConfigError(f"start is in {start.mode!r} mode, config wants {config.mode!r}",
                          field="amplitude_mode")
    kw = {"quadrature_order": config.quadrature_order} if config.mode == "marginal" else {}
    gain = np.abs(filter_gain(start.deltas, dataset.probe.tau))
    set_amps = start.amplitudes() * gain[:, None]
    omega_rms = float(np.sqrt(np.mean(start.omega_matrix() ** 2)))
    if config.mode == "marginal":
        omega_rms /= RAYLEIGH_MEAN_PER_RMS
    lo, hi = _bounds(start, start.deltas, config.halfwidth(dataset))
    obj = _Objective(dataset, start, _scales(start, dataset, omega_rms, set_amps),
                     np.clip(start.to_array(), lo, hi), kw)
    z, ll, ok, msg = _local_fit(obj, lo, hi, config, dataset)
    params = obj.params(z).canonical()
    return EstimateResult(params.deltas.copy(), params, ll, ok, 0, obj.n_eval, None, msg)


# ---------------------------------------------------------------------------
# resampling and resolution

@dataclass
class ResampleSummary:
    """Means and sample SDs over resampled fits (SDs are ``None`` for a single fit)."""

    n: int
    mean_deltas: np.ndarray
    sd_deltas: np.ndarray | None
    mean_separation: float
    sd_separation: float | None
    n_failed: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        def lst(a):
            return None if a is None else [float(v) for v in a]
        return {
            "n": self.n, "mean_deltas": lst(self.mean_deltas), "sd_deltas": lst(self.sd_deltas),
            "mean_separation": float(self.mean_separation),
            "sd_separation": None if self.sd_separation is None else float(self.sd_separation),
            "n_failed": self.n_failed,
        }


def summarize(results) -> ResampleSummary:
    if not results:
        raise ConfigError("no estimates to summarize", field="n_iterations")
    d = np.array([r.deltas for r in results])
    sep = np.abs(d[:, -1] - d[:, 0])
    many = len(results) > 1
    return ResampleSummary(
        n=len(results),
        mean_deltas=d.mean(axis=0),
        sd_deltas=d.std(axis=0, ddof=1) if many else None,
        mean_separation=float(sep.mean()),
        sd_separation=float(sep.std(ddof=1)) if many else None,
        n_failed=int(sum(not r.converged for r in results)),
    )


def _fit_one(sub, config, s):
    return mle_estimate(sub, config, s)


def estimate_over_resamples(dataset: Dataset, subset_size: int, n_iterations: int,
                            config: EstimationConfig, seed: int = 0, n_jobs: int = 1):
    """Fit ``n_iterations`` random subsets of ``subset_size`` sets.

    Returns ``(results, summary)``.  Subset ``i`` is fitted with its own
    seed derived from ``seed``, so results do not depend on ``n_jobs``.
    """
    if n_iterations < 1:
        raise ConfigError("n_iterations must be at least 1", field="n_iterations")
    ss = np.random.SeedSequence(seed)
    split_seed, fit_seed = ss.spawn(2)
    subsets = split_resample(dataset, subset_size, n_iterations,
                             int(split_seed.generate_state(1)[0]))
    seeds = [int(s) for s in fit_seed.generate_state(n_iterations)]
    if n_jobs == 1:
        results = [_fit_one(sub, config, s) for sub, s in zip(subsets, seeds)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(_fit_one)(sub, config, s)
                                          for sub, s in zip(subsets, seeds))
    return results, summarize(results)


@dataclass(frozen=True)
class ResolutionDecision:
    resolved: bool
    separation: float
    sd_separation: float | None
    sd_sum: float | None
    by_separation_sd: bool
    by_sd_sum: bool


def resolution_decision(summary: ResampleSummary | dict) -> ResolutionDecision:
    """Two tones are resolved when an error bar is smaller than the separation.

    ``resolved = SD(d2 - d1) < |d2 - d1|  or  SD(d1) + SD(d2) < |d2 - d1|``,
    using the mean estimates.  A missing SD never resolves.
    """
    if isinstance(summary, ResampleSummary):
        md = summary.mean_deltas
        sep = abs(float(md[-1] - md[0])) if md.size > 1 else 0.0
        sd_sep = summary.sd_separation
        sd_sum = None if summary.sd_deltas is None else float(np.sum(summary.sd_deltas[:2]))
    else:
        sep = abs(float(summary["separation"]))
        sd_sep = summary.get("sd_separation")
        sd_sum = summary.get("sd_sum")
    a = sd_sep is not None and sd_sep < sep
    b = sd_sum is not None and sd_sum < sep
    return ResolutionDecision(bool(a or b), sep, sd_sep, sd_sum, bool(a), bool(b))
