import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qres.errors import ConfigError, NoConvergence
from qres.estimator import (EstimationConfig, ResampleSummary, estimate_over_resamples,
                            local_estimate, mle_estimate, projection_phases, resolution_decision,
                            start_frequencies, summarize)
from qres.fisher import fisher_exact
from qres.signal_model import ParamVector, ProbeConfig
from qres.simulator import SignalModel, simulate_dataset

TWO_PI = 2 * np.pi
T = 256.0
UNIT = TWO_PI / T


def _single_tone(seed, n_sets=8, omega=0.15):
    model = SignalModel((40.3 * UNIT,), omega, T, int(T), n_sets, amplitude_model="fixed")
    return simulate_dataset(model, ProbeConfig(1.0), seed), model


def test_start_grid_covers_window():
    rng = np.random.default_rng(0)
    f = start_frequencies([1.0, 1.0], 0.5, 20, rng)
    assert f.shape == (20, 2)
    assert np.all(np.abs(f - 1.0) <= 0.5)
    assert not np.allclose(f[:, 0], f[:, 1])
    # each coordinate visits every grid cell once
    for k in range(2):
        cells = np.floor((f[:, k] - 0.5) / (1.0 / 20)).astype(int)
        assert sorted(cells) == list(range(20))


def test_projection_recovers_phases():
    model = SignalModel((0.5,), 0.05, 512.0, 512, 3, amplitude_model="fixed")
    ds = simulate_dataset(model, ProbeConfig(1.0, shots_per_point=2000), 1)
    phis, amps = projection_phases(ds, [0.5])
    truth = np.array([s.truth.phis[0] for s in ds.sets])
    err = np.angle(np.exp(1j * (phis[0] - truth)))
    assert np.all(np.abs(err) < 0.05)
    from qres.signal_model import filter_gain
    np.testing.assert_allclose(amps[0], 0.05 * filter_gain(0.5, 1.0), rtol=0.1)


def test_single_tone_fit_within_crb():
    errs, crbs = [], []
    cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", n_starts=8, n_refine=2, T_phi=T)
    for seed in range(6):
        ds, model = _single_tone(seed)
        r = mle_estimate(ds, cfg, seed)
        assert r.converged
        errs.append(r.deltas[0] - model.deltas[0])
        truth = ParamVector(model.deltas, np.stack([s.truth.phis for s in ds.sets], axis=1),
                            model.omega, mode="constant")
        crbs.append(fisher_exact(truth, ds.probe, model.n_per_set).crb_sd[0])
    z = np.array(errs) / np.array(crbs)
    assert np.all(np.abs(z) < 4)


@pytest.mark.parametrize("mode", ["marginal", "per_set"])
def test_two_separated_tones(mode):
    d = np.array([40.0, 43.0]) * UNIT
    model = SignalModel(tuple(d), 0.3, T, int(T), 8)
    ds = simulate_dataset(model, ProbeConfig(1.0), 2)
    cfg = EstimationConfig(K_fit=2, amplitude_mode=mode, n_starts=16, T_phi=T)
    r = mle_estimate(ds, cfg, 0)
    np.testing.assert_allclose(r.deltas, d, atol=0.3 * UNIT)
    assert r.params.mode == mode
    assert np.all(np.diff(r.deltas) >= 0)


def test_global_search_reaches_local_fit_from_truth():
    d = np.array([40.0, 43.0]) * UNIT
    model = SignalModel(tuple(d), 0.3, T, int(T), 8)
    ds = simulate_dataset(model, ProbeConfig(1.0), 2)
    cfg = EstimationConfig(K_fit=2, amplitude_mode="marginal", n_starts=16, T_phi=T)
    truth = ParamVector(d, np.stack([s.truth.phis for s in ds.sets], axis=1), model.omega,
                        mode="marginal")
    local = local_estimate(ds, cfg, truth)
    from qres.likelihood import log_likelihood
    assert local.converged
    assert local.log_likelihood >= log_likelihood(ds, truth)
    glob = mle_estimate(ds, cfg, 0)
    assert glob.log_likelihood >= local.log_likelihood - 1e-3
    np.testing.assert_allclose(glob.deltas, local.deltas, atol=0.01 * UNIT)


def test_local_fit_rejects_mode_mismatch():
    ds, model = _single_tone(0)
    start = ParamVector(model.deltas, np.zeros((1, 8)), 0.15, mode="constant")
    with pytest.raises(ConfigError):
        local_estimate(ds, EstimationConfig(K_fit=1, amplitude_mode="marginal"), start)


def test_nelder_mead_matches_lbfgs():
    ds, model = _single_tone(3, n_sets=4, omega=0.3)
    fits = {}
    for opt in ("nelder-mead", "lbfgs"):
        cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", optimizer=opt,
                               n_starts=8, n_refine=2, T_phi=T)
        fits[opt] = mle_estimate(ds, cfg, 0)
    nm, lb = fits["nelder-mead"], fits["lbfgs"]
    assert nm.converged
    assert nm.log_likelihood == pytest.approx(lb.log_likelihood, abs=1e-6)
    assert nm.deltas[0] == pytest.approx(lb.deltas[0], abs=1e-3 * UNIT)
    assert abs(nm.deltas[0] - model.deltas[0]) < 0.3 * UNIT


def test_fit_is_seeded():
    ds, _ = _single_tone(4, n_sets=3, omega=0.3)
    cfg = EstimationConfig(K_fit=2, n_starts=6, n_refine=1, T_phi=T)
    a, b = mle_estimate(ds, cfg, 5), mle_estimate(ds, cfg, 5)
    assert np.array_equal(a.params.to_array(), b.params.to_array())


def test_no_convergence():
    ds, _ = _single_tone(5, n_sets=2)
    cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", n_starts=2, n_refine=1,
                           max_iterations=2, T_phi=T)
    r = mle_estimate(ds, cfg, 0)
    assert not r.converged
    with pytest.raises(NoConvergence) as e:
        mle_estimate(ds, cfg, 0, raise_on_failure=True)
    assert e.value.result is not None


@pytest.mark.parametrize("kw", [{"K_fit": 3}, {"n_starts": 0}, {"optimizer": "bfgs"},
                                {"amplitude_mode": "free"}, {"search_halfwidth": -1.0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EstimationConfig(**kw)


def test_resamples_independent_of_jobs():
    ds, _ = _single_tone(6, n_sets=6)
    cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", n_starts=4, n_refine=1, T_phi=T)
    r1, s1 = estimate_over_resamples(ds, 3, 3, cfg, seed=2, n_jobs=1)
    r2, s2 = estimate_over_resamples(ds, 3, 3, cfg, seed=2, n_jobs=2)
    assert [x.deltas.tolist() for x in r1] == [x.deltas.tolist() for x in r2]
    assert s1.sd_deltas is not None


def test_summary_of_one_has_no_sd():
    ds, _ = _single_tone(7, n_sets=2)
    cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", n_starts=2, n_refine=1, T_phi=T)
    s = summarize([mle_estimate(ds, cfg, 0)])
    assert s.sd_deltas is None and s.sd_separation is None
    assert not resolution_decision(s).resolved
    with pytest.raises(ConfigError):
        summarize([])


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(-5, 5))
def test_resolution_rule(sd_sep, sd1, sd2, centre):
    for sep in (0.5, 3.0):
        s = ResampleSummary(10, np.array([centre, centre + sep]), np.array([sd1, sd2]), sep, sd_sep, 0)
        dec = resolution_decision(s)
        assert dec.resolved == (sd_sep < sep or sd1 + sd2 < sep)
        via_dict = resolution_decision({"separation": sep, "sd_separation": sd_sep,
                                        "sd_sum": sd1 + sd2})
        assert via_dict.resolved == dec.resolved


def test_winner_beats_every_start():
    d = np.array([40.0, 40.6]) * UNIT
    ds = simulate_dataset(SignalModel(tuple(d), 0.3, T, int(T), 6), ProbeConfig(1.0), 9)
    r = mle_estimate(ds, EstimationConfig(K_fit=2, n_starts=10, T_phi=T), 1)
    assert r.log_likelihood >= np.max(r.initial_log_likelihoods) - 1e-9
    assert r.deltas[0] <= r.deltas[1]
    assert np.isfinite(r.log_likelihood)


@pytest.mark.slow
def test_sd_shrinks_as_root_n():
    cfg = EstimationConfig(K_fit=1, amplitude_mode="constant", n_starts=4, n_refine=1, T_phi=T)
    sds = []
    Ns = [16, 32, 64]
    for N in Ns:
        model = SignalModel((40.3 * UNIT,), 0.1, T, int(T), N, amplitude_model="fixed")
        est = [mle_estimate(simulate_dataset(model, ProbeConfig(1.0), 100 * N + r), cfg, r).deltas[0]
               for r in range(40)]
        sds.append(np.std(est, ddof=1))
    slope = np.polyfit(np.log(Ns), np.log(sds), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


@pytest.mark.slow
def test_single_tone_at_fig3_scale(fig3_consts):
    c = fig3_consts
    model = SignalModel((c["delta1"],), c["mean_omega"], c["T_phi"], c["n"], c["L"])
    ds = simulate_dataset(model, ProbeConfig(c["tau"]), 31)
    r = mle_estimate(ds, EstimationConfig(K_fit=1, n_starts=16, T_phi=c["T_phi"]), 0)
    from qres.fisher import fisher_marginal
    phis = np.stack([s.truth.phis for s in ds.sets], axis=1)
    crb = fisher_marginal([c["delta1"]], c["mean_omega"], phis, ds.probe, c["n"],
                          mc_samples=100, seed=1).crb_sd[0]
    assert abs(r.deltas[0] - c["delta1"]) < 3 * crb
