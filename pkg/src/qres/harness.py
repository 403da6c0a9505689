"""Experiment orchestration: configs, presets, and the batch commands.

A config is a flat ``{"section.key": value}`` mapping (see
:func:`qres.io.parse_config`).  Frequencies and amplitudes are given in Hz
and converted to rad/s; scan separations may instead be given in units of
``2pi / T_phi``.  Every command is deterministic in ``run.seed``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .estimator import EstimationConfig, estimate_over_resamples, mle_estimate, resolution_decision, summarize
from .fisher import fisher_exact, fisher_marginal
from .io import dump_config, read_config, write_dataset
from .signal_model import TWO_PI, ParamVector, ProbeConfig
from .simulator import Dataset, SignalModel, simulate_dataset
from .spectrum import power_spectrum, write_spectrum_csv


class ConstraintError(ConfigError):
    """Config parsed fine but violates a model constraint."""


DEFAULTS = {
    "run.seed": 0,
    "probe.tau": 1.0,
    "probe.readout_fidelity": 1.0,
    "probe.shots_per_point": 1,
    "signal.frequencies_hz": [0.0],
    "signal.omega_hz": 0.0,
    "signal.T_phi": 1.0,
    "signal.n_per_set": 1,
    "signal.n_sets": 1,
    "signal.amplitude_model": "rayleigh",
    "signal.phase_model": "uniform",
    "signal.phi": 0.0,
    "signal.weights": None,
    "signal.shared_amplitude": True,
    "estimation.K_fit": 2,
    "estimation.n_starts": 64,
    "estimation.search_halfwidth_hz": None,
    "estimation.marginalize_amplitudes": True,
    "estimation.amplitude_mode": None,
    "estimation.optimizer": "lbfgs",
    "estimation.n_refine": 2,
    "estimation.phase_init": "projection",
    "estimation.quadrature_order": 32,
    "estimation.max_iterations": 20000,
    "resample.subset_size": None,
    "resample.n_iterations": 1,
    "scan.separations_hz": None,
    "scan.separations_T_phi": None,
    "scan.replicates": 1,
    "scan.estimate": True,
    "scan.crb_draws": 1,
    "fisher.mc_samples": 200,
    "fisher.quadrature_order": 32,
}

_TYPES = {
    int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,),
}


def _expect(key, value, kind, allow_none=False):
    if value is None and allow_none:
        return None
    if kind is list:
        return [float(_expect(key, v, float)) for v in (value if isinstance(value, list) else [value])]
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{key}: expected {kind.__name__}, got a boolean", field=key)
    if not isinstance(value, _TYPES[kind]):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}", field=key)
    return kind(value)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``source`` is the mapping as read from file (echoed verbatim in
    summaries); ``values`` merges it over :data:`DEFAULTS`.
    """

    source: dict
    values: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = sorted(set(d) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r}", field=unknown[0])
        values = dict(DEFAULTS)
        values.update(d)
        cfg = cls(dict(d), values)
        cfg._check_types()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(read_config(path))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}", field=None) from e

    def to_text(self) -> str:
        return dump_config(self.source)

    def __getitem__(self, key):
        return self.values[key]

    def _check_types(self):
        v = self.values
        spec = {
            "run.seed": (int, False), "probe.tau": (float, False),
            "probe.readout_fidelity": (float, False), "probe.shots_per_point": (int, False),
            "signal.frequencies_hz": (list, False), "signal.omega_hz": (float, False),
            "signal.T_phi": (float, False), "signal.n_per_set": (int, False),
            "signal.n_sets": (int, False), "signal.amplitude_model": (str, False),
            "signal.phase_model": (str, False), "signal.shared_amplitude": (bool, False),
            "signal.weights": (list, True),
            "estimation.K_fit": (int, False), "estimation.n_starts": (int, False),
            "estimation.search_halfwidth_hz": (float, True),
            "estimation.marginalize_amplitudes": (bool, False),
            "estimation.amplitude_mode": (str, True), "estimation.optimizer": (str, False),
            "estimation.n_refine": (int, False), "estimation.phase_init": (str, False),
            "estimation.quadrature_order": (int, False), "estimation.max_iterations": (int, False),
            "resample.subset_size": (int, True), "resample.n_iterations": (int, False),
            "scan.separations_hz": (list, True), "scan.separations_T_phi": (list, True),
            "scan.replicates": (int, False), "scan.estimate": (bool, False),
            "scan.crb_draws": (int, False),
            "fisher.mc_samples": (int, False), "fisher.quadrature_order": (int, False),
        }
        for key, (kind, allow_none) in spec.items():
            v[key] = _expect(key, v[key], kind, allow_none)
        phi = v["signal.phi"]
        v["signal.phi"] = _expect("signal.phi", phi, list if isinstance(phi, list) else float)

    # -- domain objects; constraint violations raise ConstraintError
    def probe(self) -> ProbeConfig:
        return _constrained(lambda: ProbeConfig(self["probe.tau"], self["probe.readout_fidelity"],
                                                self["probe.shots_per_point"]))

    def signal(self, frequencies_hz=None, seed_offset=None) -> SignalModel:
        freqs = self["signal.frequencies_hz"] if frequencies_hz is None else frequencies_hz

        def build():
            model = SignalModel(
                deltas=tuple(TWO_PI * np.asarray(freqs, dtype=float)),
                omega=TWO_PI * self["signal.omega_hz"], T_phi=self["signal.T_phi"],
                n_per_set=self["signal.n_per_set"], n_sets=self["signal.n_sets"],
                amplitude_model=self["signal.amplitude_model"],
                phase_model=self["signal.phase_model"], phi=self["signal.phi"],
                weights=self["signal.weights"], shared_amplitude=self["signal.shared_amplitude"])
            model.check_probe(self.probe())
            return model
        return _constrained(build)

    def estimation(self) -> EstimationConfig:
        hw = self["estimation.search_halfwidth_hz"]
        return _constrained(lambda: EstimationConfig(
            K_fit=self["estimation.K_fit"], n_starts=self["estimation.n_starts"],
            search_halfwidth=None if hw is None else TWO_PI * hw, T_phi=self["signal.T_phi"],
            marginalize_amplitudes=self["estimation.marginalize_amplitudes"],
            amplitude_mode=self["estimation.amplitude_mode"],
            optimizer=self["estimation.optimizer"], n_refine=self["estimation.n_refine"],
            phase_init=self["estimation.phase_init"],
            quadrature_order=self["estimation.quadrature_order"],
            max_iterations=self["estimation.max_iterations"]))

    def separations(self) -> np.ndarray:
        """Scan separations in rad/s."""
        hz, units = self["scan.separations_hz"], self["scan.separations_T_phi"]
        if (hz is None) == (units is None):
            raise ConfigError("give exactly one of scan.separations_hz, scan.separations_T_phi",
                              field="scan.separations_hz")
        sep = TWO_PI * np.asarray(hz) if hz is not None else \
            TWO_PI / self["signal.T_phi"] * np.asarray(units)
        if sep.size == 0:
            raise ConfigError("scan axis is empty", field="scan.separations_hz")
        return sep


def _constrained(build):
    try:
        return build()
    except ConstraintError:
        raise
    except ConfigError as e:
        raise ConstraintError(str(e), field=e.field) from e


# ---------------------------------------------------------------------------
# presets

def fig3_preset() -> dict:
    """Numerical two-tone experiment: Rayleigh amplitudes, uniform phases.

    Units are ``tau = 1``; frequencies in Hz are therefore cycles per tau.
    """
    T_phi = 1024.0
    return {
        "run.seed": 2024,
        "probe.tau": 1.0,
        "signal.frequencies_hz": [math.exp(4) / T_phi],
        "signal.omega_hz": 0.05,
        "signal.T_phi": T_phi,
        "signal.n_per_set": 1024,
        "signal.n_sets": 64,
        "signal.amplitude_model": "rayleigh",
        "signal.phase_model": "uniform",
        "estimation.K_fit": 2,
        "estimation.marginalize_amplitudes": True,
        "scan.separations_T_phi": [0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
        "scan.replicates": 32,
        "fisher.mc_samples": 200,
    }


def fig2_preset() -> dict:
    """Desk-scale analogue of the lab experiment: two tones 1.6 Hz apart.

    Each 0.25 s coherent set holds 256 outcomes; the amplitude is fixed and
    fitted as one shared constant.
    """
    T_phi = 0.25
    n = 256
    return {
        "run.seed": 880,
        "probe.tau": T_phi / n,
        "signal.frequencies_hz": [250.0, 251.6],
        "signal.omega_hz": FIG2_OMEGA_HZ,
        "signal.T_phi": T_phi,
        "signal.n_per_set": n,
        "signal.n_sets": 128,
        "signal.amplitude_model": "fixed",
        "signal.phase_model": "uniform",
        "estimation.K_fit": 2,
        "estimation.amplitude_mode": "constant",
        "resample.subset_size": 33,
        "resample.n_iterations": 256,
    }


# Rabi amplitude (Hz) at which 33-set subsets leave the threshold regime
FIG2_OMEGA_HZ = 30.0

PRESETS = {"fig3": fig3_preset, "fig2": fig2_preset}


def load_config(path=None, preset=None, seed=None) -> ExperimentConfig:
    """Merge a preset, a config file, and a seed override (later wins)."""
    d = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", field="preset")
        d.update(PRESETS[preset]())
    if path is not None:
        d.update(read_config(path))
    if seed is not None:
        d["run.seed"] = int(seed)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# commands

def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cli_simulate(cfg: ExperimentConfig, out) -> Dataset:
    """Simulate the configured signal and write it as QRES plus sidecar."""
    ds = simulate_dataset(cfg.signal(), cfg.probe(), cfg["run.seed"])
    write_dataset(ds, out)
    return ds


def _result_row(i, r):
    row = {"iteration": i, "log_likelihood": r.log_likelihood, "converged": int(r.converged),
           "start_index": r.start_index}
    for k, d in enumerate(r.deltas):
        row[f"delta_{k}_rad_s"] = float(d)
        row[f"delta_{k}_2pi_hz"] = float(d / TWO_PI)
    row["separation_rad_s"] = r.separation
    row["separation_2pi_hz"] = r.separation / TWO_PI
    return row


def _write_rows(path, rows, mode="w"):
    if not rows:
        return
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        if mode == "w":
            w.writeheader()
        w.writerows(rows)


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def cli_estimate(dataset: Dataset, cfg: ExperimentConfig, out, n_jobs: int = 1) -> dict:
    """Resampled MLE; writes ``<out>`` (CSV per iteration) and ``<out>.json`` (summary)."""
    subset = cfg["resample.subset_size"] or dataset.n_sets
    n_it = cfg["resample.n_iterations"]
    if n_it < 1:
        raise ConfigError("resample.n_iterations must be at least 1", field="resample.n_iterations")
    if subset > dataset.n_sets:
        raise ConstraintError(f"resample.subset_size {subset} exceeds {dataset.n_sets} sets",
                              field="resample.subset_size")
    results, summary = estimate_over_resamples(dataset, subset, n_it, cfg.estimation(),
                                               cfg["run.seed"], n_jobs=n_jobs)
    rows = [{k: _fmt(v) for k, v in _result_row(i, r).items()} for i, r in enumerate(results)]
    _write_rows(out, rows)
    dec = resolution_decision(summary)
    s = summary.as_dict()
    s["mean_deltas_2pi_hz"] = [d / TWO_PI for d in s["mean_deltas"]]
    s["sd_deltas_2pi_hz"] = None if s["sd_deltas"] is None else [d / TWO_PI for d in s["sd_deltas"]]
    s["mean_separation_2pi_hz"] = s["mean_separation"] / TWO_PI
    s["sd_separation_2pi_hz"] = None if s["sd_separation"] is None else s["sd_separation"] / TWO_PI
    doc = {
        "summary": s,
        "resolution": {"resolved": dec.resolved, "separation_rad_s": dec.separation,
                       "sd_separation_rad_s": dec.sd_separation, "sd_sum_rad_s": dec.sd_sum,
                       "by_separation_sd": dec.by_separation_sd, "by_sd_sum": dec.by_sd_sum},
        "failed_iterations": [i for i, r in enumerate(results) if not r.converged],
        "config": cfg.source,
    }
    _write_json(str(out) + ".json", doc)
    return doc


def truth_params(ds: Dataset, deltas, mode: str) -> ParamVector:
    """Parameter vector at the simulated truth of ``ds``."""
    phis = np.stack([s.truth.phis for s in ds.sets], axis=1)
    if mode == "per_set":
        omega = np.stack([s.truth.omegas for s in ds.sets], axis=1)
        return ParamVector(deltas, phis, omega, mode="per_set")
    om = np.stack([s.truth.omegas for s in ds.sets], axis=1)
    return ParamVector(deltas, phis, float(om.mean()), mode=mode)


def crb_pair(cfg: ExperimentConfig, deltas, seed) -> tuple:
    """Separation CRBs (exact per-set-amplitude model, marginal model) at one truth draw."""
    model = cfg.signal(frequencies_hz=np.asarray(deltas) / TWO_PI)
    probe = cfg.probe()
    ds = simulate_dataset(model, probe, seed)
    exact = fisher_exact(truth_params(ds, deltas, "per_set"), probe, model.n_per_set)
    marg = fisher_marginal(deltas, model.omega, truth_params(ds, deltas, "marginal").phis, probe,
                           model.n_per_set, cfg["fisher.quadrature_order"],
                           cfg["fisher.mc_samples"], seed, weights=model.weights)
    return exact.crb_separation, marg.crb_separation


def cli_fisher(cfg: ExperimentConfig, out) -> dict:
    """CRBs at the configured truth (first simulated draw); JSON output."""
    model = cfg.signal()
    deltas = np.asarray(model.deltas)
    probe = cfg.probe()
    ds = simulate_dataset(model, probe, cfg["run.seed"])
    doc = {"config": cfg.source}
    if model.n_tones > 2:
        raise ConstraintError("fisher supports one or two tones", field="signal.frequencies_hz")
    exact = fisher_exact(truth_params(ds, deltas, "per_set"), probe, model.n_per_set)
    doc["exact"] = {"names": exact.names[:len(deltas)],
                    "crb_sd_rad_s": [float(x) for x in exact.crb_sd[:len(deltas)]],
                    "pseudo_inverse": exact.pseudo, "condition": exact.condition}
    if model.omega > 0:
        marg = fisher_marginal(deltas, model.omega, truth_params(ds, deltas, "marginal").phis,
                               probe, model.n_per_set, cfg["fisher.quadrature_order"],
                               cfg["fisher.mc_samples"], cfg["run.seed"], weights=model.weights)
        doc["marginal"] = {"crb_sd_rad_s": [float(x) for x in marg.crb_sd[:len(deltas)]],
                           "pseudo_inverse": marg.pseudo, "mc_samples": cfg["fisher.mc_samples"]}
    if len(deltas) == 2:
        doc["exact"]["crb_separation_rad_s"] = exact.crb_separation
        if "marginal" in doc:
            doc["marginal"]["crb_separation_rad_s"] = marg.crb_separation
    _write_json(out, _finite(doc))
    return doc


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def cli_spectrum(dataset: Dataset, out, pad_factor: int = 1):
    spec = power_spectrum(dataset, pad_factor=pad_factor)
    write_spectrum_csv(spec, out)
    return spec


SCAN_COLUMNS = [
    "point", "separation_rad_s", "separation_2pi_hz", "separation_T_phi", "replicates",
    "mle_mean_separation_rad_s", "mle_sd_separation_rad_s", "mle_rmse_separation_rad_s",
    "mle_sd_se_rad_s", "mle_sd_separation_2pi_hz", "crb_exact_rad_s", "crb_exact_2pi_hz",
    "crb_marginal_rad_s", "crb_marginal_2pi_hz", "resolved", "n_failed", "wall_time_s",
]


def _completed_points(path) -> set:
    if not Path(path).exists():
        return set()
    with open(path, newline="") as fh:
        return {int(row["point"]) for row in csv.DictReader(fh)}


def scan_point(cfg: ExperimentConfig, point: int, separation: float) -> dict:
    """Simulate, fit and bound one separation; every random draw is keyed by ``(seed, point)``."""
    t0 = time.perf_counter()
    base = cfg["signal.frequencies_hz"][0] * TWO_PI
    deltas = np.array([base, base + separation])
    T_phi = cfg["signal.T_phi"]
    ss = np.random.SeedSequence([cfg["run.seed"], point])
    sim_seeds = [int(x) for x in ss.generate_state(cfg["scan.replicates"] + 1)]
    model = cfg.signal(frequencies_hz=deltas / TWO_PI)
    probe = cfg.probe()

    var_exact, var_marg = [], []
    for d in range(cfg["scan.crb_draws"]):
        e, m = crb_pair(cfg, deltas, sim_seeds[d])
        var_exact.append(e * e)
        var_marg.append(m * m)
    crb_e = math.sqrt(np.mean(var_exact))
    crb_m = math.sqrt(np.mean(var_marg))

    row = {"point": point, "separation_rad_s": separation,
           "separation_2pi_hz": separation / TWO_PI, "separation_T_phi": separation * T_phi / TWO_PI,
           "replicates": cfg["scan.replicates"], "crb_exact_rad_s": crb_e,
           "crb_exact_2pi_hz": crb_e / TWO_PI, "crb_marginal_rad_s": crb_m,
           "crb_marginal_2pi_hz": crb_m / TWO_PI}
    if cfg["scan.estimate"]:
        est = cfg.estimation()
        results = []
        for r in range(cfg["scan.replicates"]):
            ds = simulate_dataset(model, probe, sim_seeds[r])
            results.append(mle_estimate(ds, est, sim_seeds[r] + 1))
        summ = summarize(results)
        seps = np.array([x.separation for x in results])
        sd = summ.sd_separation
        row.update({
            "mle_mean_separation_rad_s": summ.mean_separation,
            "mle_sd_separation_rad_s": sd,
            "mle_rmse_separation_rad_s": float(np.sqrt(np.mean((seps - separation) ** 2))),
            # SE of a sample SD, normal approximation
            "mle_sd_se_rad_s": None if sd is None else sd / math.sqrt(2 * (len(seps) - 1)),
            "mle_sd_separation_2pi_hz": None if sd is None else sd / TWO_PI,
            "resolved": int(resolution_decision(summ).resolved),
            "n_failed": summ.n_failed,
        })
    row["wall_time_s"] = time.perf_counter() - t0
    return {k: _fmt(row.get(k)) if row.get(k) is not None else "" for k in SCAN_COLUMNS}


def cli_scan(cfg: ExperimentConfig, out, progress=None) -> list:
    """Separation scan; one CSV row per point, flushed as it completes.

    Rows already present in ``out`` are kept and their points skipped, so an
    interrupted scan resumes where it stopped.
    """
    seps = cfg.separations()
    if len(cfg["signal.frequencies_hz"]) != 1:
        raise ConstraintError("scan takes one base frequency; the second tone is added per point",
                              field="signal.frequencies_hz")
    done = _completed_points(out)
    if not done:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerow(SCAN_COLUMNS)
    new = []
    for i, sep in enumerate(seps):
        if i in done:
            continue
        row = scan_point(cfg, i, float(sep))
        _write_rows(out, [row], mode="a")
        new.append(row)
        if progress is not None:
            progress(row)
    return new


def read_scan(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
