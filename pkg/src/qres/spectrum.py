"""Power-spectrum baseline: averaged DFT, seeding, line width, and the
line-shape Fisher information that exhibits the Rayleigh curse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import FlatSpectrum
from .signal_model import filter_gain
from .simulator import Dataset

MAD_TO_SD = 1.4826


@dataclass(frozen=True)
class Spectrum:
    """One-sided power spectrum averaged over sets.

    ``power`` is normalized so that ``power.sum()`` equals the mean per-set
    variance of the (mean-subtracted, per-shot) outcome record.
    """

    frequencies: np.ndarray      # rad/s
    power: np.ndarray
    n_sets: int
    n_per_set: int
    pad_factor: int
    tau: float
    readout_fidelity: float = 1.0

    @property
    def resolution(self) -> float:
        """Bin spacing in rad/s."""
        return self.frequencies[1] - self.frequencies[0]


def power_spectrum(dataset: Dataset, pad_factor: int = 1, window: str | None = None) -> Spectrum:
    """Incoherent average of per-set DFT power.

    Each set's outcomes (divided by the shot count) are mean-subtracted,
    optionally windowed, zero-padded to ``pad_factor`` times the longest
    set, and transformed.  Power per bin is ``|X|^2 / (n m)`` for a set of
    ``n`` samples padded to ``m``; positive-frequency bins other than DC and
    Nyquist are doubled, so the spectrum sums to the record variance
    (exactly so for the rectangular window).
    """
    _, y, mask = dataset.stacked
    y = y / dataset.probe.shots_per_point
    n_max = y.shape[1]
    m = int(pad_factor) * n_max
    counts = mask.sum(axis=1)
    mean = (y * mask).sum(axis=1) / counts
    centred = (y - mean[:, None]) * mask
    if window is not None:
        for l, n in enumerate(counts.astype(int)):
            centred[l, :n] *= get_window(window, n, fftbins=False)
    X = np.fft.rfft(centred, n=m, axis=1)
    power = np.abs(X) ** 2 / (counts[:, None] * m)
    power[:, 1:] *= 2.0
    if m % 2 == 0:
        power[:, -1] /= 2.0
    freqs = 2.0 * np.pi * np.fft.rfftfreq(m, d=dataset.probe.tau)
    return Spectrum(freqs, power.mean(axis=0), dataset.n_sets, n_max, int(pad_factor),
                    dataset.probe.tau, dataset.probe.readout_fidelity)


def linewidth(spectrum: Spectrum) -> float:
    """Full width at half maximum (rad/s) of the dominant peak above the median floor."""
    p = spectrum.power - np.median(spectrum.power)
    f = spectrum.frequencies
    j = int(np.argmax(p[1:])) + 1
    half = 0.5 * p[j]
    lo = j
    while lo > 0 and p[lo] > half:
        lo -= 1
    hi = j
    while hi < p.size - 1 and p[hi] > half:
        hi += 1
    left = f[lo] + (half - p[lo]) * (f[lo + 1] - f[lo]) / (p[lo + 1] - p[lo])
    right = f[hi - 1] + (half - p[hi - 1]) * (f[hi] - f[hi - 1]) / (p[hi] - p[hi - 1])
    return right - left


@dataclass(frozen=True)
class SpectralSeed:
    """Starting frequencies and per-tone rms amplitude (rad/s)."""

    frequencies: np.ndarray
    amplitude: float
    peak_index: int


def noise_floor(power: np.ndarray, k: float = 5.0) -> float:
    """``median + k * MAD``, MAD scaled to a normal standard deviation."""
    med = np.median(power)
    return med + k * MAD_TO_SD * np.median(np.abs(power - med))


def spectral_seed(spectrum: Spectrum, K: int) -> SpectralSeed:
    """Seed frequencies at the dominant peak.

    For ``K = 2`` both seeds sit on the same peak: separations below the
    line width are invisible in the spectrum, and recovering them is left to
    the likelihood search.  The amplitude is the rms per-tone Rabi amplitude
    implied by the peak power under the small-signal model, with tones adding
    incoherently.
    """
    if K not in (1, 2):
        raise ValueError("K must be 1 or 2")
    p = spectrum.power
    body = p[1:]
    if body.size == 0 or body.max() <= noise_floor(body):
        raise FlatSpectrum("no spectral bin exceeds median + 5 MAD")
    j = int(np.argmax(body)) + 1
    floor = np.median(body)
    contrast = 2.0 * spectrum.readout_fidelity - 1.0
    m = spectrum.pad_factor * spectrum.n_per_set
    amp2 = max(p[j] - floor, 0.0) * 2.0 * m / (spectrum.n_per_set * contrast**2)
    freq = spectrum.frequencies[j]
    gain = abs(filter_gain(freq, spectrum.tau))
    omega_rms = np.sqrt(amp2 / K) / gain
    return SpectralSeed(np.full(K, freq), float(omega_rms), j)


def write_spectrum_csv(spectrum: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_rad_s", "frequency_2pi_hz", "power"])
        for f, p in zip(spectrum.frequencies, spectrum.power):
            w.writerow([repr(float(f)), repr(float(f / (2 * np.pi))), repr(float(p))])


# ---------------------------------------------------------------------------
# line-shape Fisher information

def _lorentzian(z):
    return 1.0 / (1.0 + z * z), -2.0 * z / (1.0 + z * z) ** 2


def _gaussian(z):
    g = np.exp(-0.5 * z * z)
    return g, -z * g


LINESHAPES = {"lorentzian": _lorentzian, "gaussian": _gaussian}


def lineshape_jacobian(shape: str, d1: float, d2: float, T_phi: float, x,
                       amplitude: float = 1.0, unknown_width: bool = False):
    """Model ``A [g((x-d1) T) + g((x-d2) T)]`` and its Jacobian.

    Columns are ``(d1, d2, A)`` plus ``T`` when ``unknown_width``.
    """
    g = LINESHAPES[shape]
    z1, z2 = (x - d1) * T_phi, (x - d2) * T_phi
    g1, dg1 = g(z1)
    g2, dg2 = g(z2)
    cols = [-amplitude * T_phi * dg1, -amplitude * T_phi * dg2, g1 + g2]
    if unknown_width:
        cols.append(amplitude * ((x - d1) * dg1 + (x - d2) * dg2))
    return amplitude * (g1 + g2), np.stack(cols, axis=1)


def lineshape_fi_scaling(shape: str, unknown_width: bool, separations, T_phi: float = 1.0,
                         noise_sd: float = 1.0, points_per_width: int = 20,
                         span_widths: float = 200.0, centre: float = 0.0) -> np.ndarray:
    """Cramer-Rao SD of ``d2 - d1`` fitted from a two-peak power spectrum.

    The spectrum ``g((x-d1)T) + g((x-d2)T)`` is sampled on a uniform grid
    (``points_per_width`` samples per ``1/T``, spanning ``span_widths / T``
    beyond the peaks) with independent Gaussian noise of SD ``noise_sd``.
    Free parameters are both centres and the common amplitude, plus ``T``
    when ``unknown_width``.

    Parameters
    ----------
    separations : array of float
        ``d2 - d1`` in rad/s (must be positive).

    Returns
    -------
    ndarray
        SD of the separation estimate for each separation, in rad/s.
    """
    from .fisher import crb_linear_combination

    seps = np.atleast_1d(np.asarray(separations, dtype=float))
    if np.any(seps <= 0):
        raise ValueError("separations must be positive")
    out = np.empty(seps.size)
    v = np.zeros(4 if unknown_width else 3)
    v[0], v[1] = -1.0, 1.0
    for i, sep in enumerate(seps):
        d1, d2 = centre - sep / 2, centre + sep / 2
        half = sep / 2 + span_widths / T_phi
        x = np.arange(-half, half, 1.0 / (points_per_width * T_phi)) + centre
        _, J = lineshape_jacobian(shape, d1, d2, T_phi, x, unknown_width=unknown_width)
        out[i] = crb_linear_combination(J / noise_sd, v)
    return out
