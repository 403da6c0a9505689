import csv
import json

import numpy as np
import pytest

from qres.cli import main
from qres.harness import ExperimentConfig, fig2_preset, fig3_preset, load_config, read_scan
from qres.io import export_csv, read_dataset, write_dataset
from qres.signal_model import ProbeConfig
from qres.simulator import SignalModel, simulate_dataset

TWO_PI = 2 * np.pi

SMALL = """\
run.seed = 7
probe.tau = 1.0
signal.frequencies_hz = 0.0390625,
signal.omega_hz = 0.05
signal.T_phi = 128.0
signal.n_per_set = 128
signal.n_sets = 6
estimation.K_fit = 2
estimation.n_starts = 6
estimation.n_refine = 1
estimation.amplitude_mode = constant
signal.amplitude_model = fixed
resample.subset_size = 4
resample.n_iterations = 3
fisher.mc_samples = 20
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def test_fig3_preset_shape(tmp_path):
    out = tmp_path / "fig3.qres"
    assert main(["simulate", "--preset", "fig3", "--out", str(out)]) == 0
    ds = read_dataset(out)
    assert ds.n_sets == 2**6
    assert all(s.n == 2**10 for s in ds.sets)
    assert ds.n_outcomes == 2**16


def test_simulate_is_bit_identical(small_cfg, tmp_path):
    a, b = tmp_path / "a.qres", tmp_path / "b.qres"
    main(["simulate", "--config", str(small_cfg), "--out", str(a)])
    main(["simulate", "--config", str(small_cfg), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    main(["simulate", "--config", str(small_cfg), "--seed", "8", "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_zero_amplitude_is_fair(tmp_path):
    cfg = tmp_path / "z.cfg"
    cfg.write_text(SMALL.replace("signal.omega_hz = 0.05", "signal.omega_hz = 0.0"))
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "z.qres")])
    y = np.concatenate([s.outcomes for s in read_dataset(tmp_path / "z.qres").sets])
    assert abs(y.mean() - 0.5) < 3 * 0.5 / np.sqrt(y.size)


def test_parse_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("probe.tau 1.0\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text("probe.tau = 1.0\nprobe.colour = red\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "probe.colour" in capsys.readouterr().err


@pytest.mark.parametrize("line,field", [("probe.tau = 0.0", "probe.tau"),
                                        ("signal.n_per_set = 4096", "signal.n_per_set"),
                                        ("probe.readout_fidelity = 0.2", "probe.readout_fidelity")])
def test_constraint_exit_3(small_cfg, tmp_path, capsys, line, field):
    key = line.split(" = ")[0]
    text = "".join(l + "\n" for l in SMALL.splitlines() if not l.startswith(key + " ")) + line + "\n"
    small_cfg.write_text(text)
    assert main(["simulate", "--config", str(small_cfg), "--out", str(tmp_path / "x")]) == 3
    assert field in capsys.readouterr().err


def test_estimate_outputs(small_cfg, tmp_path):
    data = tmp_path / "d.qres"
    main(["simulate", "--config", str(small_cfg), "--out", str(data)])
    out = tmp_path / "est.csv"
    assert main(["estimate", str(data), "--config", str(small_cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 3
    assert {"delta_0_rad_s", "delta_0_2pi_hz", "separation_rad_s", "separation_2pi_hz"} <= set(rows[0])
    for r in rows:
        assert float(r["delta_0_2pi_hz"]) * TWO_PI == pytest.approx(float(r["delta_0_rad_s"]))
    doc = json.loads(open(str(out) + ".json").read())
    assert doc["config"] == ExperimentConfig.from_file(small_cfg).source
    assert set(doc["resolution"]) >= {"resolved", "by_separation_sd", "by_sd_sum"}
    assert doc["summary"]["n"] == 3
    assert doc["failed_iterations"] == [i for i, r in enumerate(rows) if r["converged"] == "0"]


def test_estimate_bad_inputs(small_cfg, tmp_path):
    data = tmp_path / "d.qres"
    main(["simulate", "--config", str(small_cfg), "--out", str(data)])
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL.replace("resample.n_iterations = 3", "resample.n_iterations = 0"))
    assert main(["estimate", str(data), "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2
    cfg.write_text(SMALL.replace("resample.subset_size = 4", "resample.subset_size = 40"))
    assert main(["estimate", str(data), "--config", str(cfg), "--out", str(tmp_path / "e")]) == 3
    junk = tmp_path / "junk.qres"
    junk.write_bytes(b"not a dataset")
    assert main(["estimate", str(junk), "--config", str(small_cfg), "--out", str(tmp_path / "e")]) == 4


def test_fisher_and_spectrum(small_cfg, tmp_path):
    cfg = tmp_path / "two.cfg"
    cfg.write_text(SMALL.replace("signal.frequencies_hz = 0.0390625,",
                                 "signal.frequencies_hz = 0.0390625, 0.05"))
    out = tmp_path / "f.json"
    assert main(["fisher", "--config", str(cfg), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["exact"]["crb_separation_rad_s"] > 0
    assert doc["marginal"]["mc_samples"] == 20
    data = tmp_path / "d.qres"
    main(["simulate", "--config", str(cfg), "--out", str(data)])
    assert main(["spectrum", str(data), "--pad", "2", "--out", str(tmp_path / "s.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0][:2] == ["frequency_rad_s", "frequency_2pi_hz"]
    assert len(rows) == 1 + 128 + 1


def test_ingest_round_trip(tmp_path):
    ds = simulate_dataset(SignalModel((0.3,), 0.2, 64.0, 64, 5), ProbeConfig(0.5), 3)
    export_csv(ds, tmp_path / "rec.csv")
    assert main(["ingest", str(tmp_path / "rec.csv"), "--out", str(tmp_path / "rec.qres")]) == 0
    back = read_dataset(tmp_path / "rec.qres")
    assert [s.outcomes.tolist() for s in back.sets] == [s.outcomes.tolist() for s in ds.sets]
    (tmp_path / "bad.csv").write_text("time_s,outcome\n0,1\n1,7\n")
    assert main(["ingest", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "x")]) == 4


SCAN = SMALL + """\
scan.separations_T_phi = 2.0, 3.0, 4.0
scan.replicates = 2
"""


def test_scan_resumes_identically(tmp_path):
    cfg = tmp_path / "scan.cfg"
    cfg.write_text(SCAN.replace("estimation.amplitude_mode = constant\n", ""))
    full = tmp_path / "full.csv"
    assert main(["scan", "--config", str(cfg), "--out", str(full)]) == 0
    rows = read_scan(full)
    assert len(rows) == 3
    assert all(r["crb_exact_rad_s"] and r["crb_marginal_rad_s"] for r in rows)
    # simulate a scan killed after its first point
    lines = full.read_text().splitlines(keepends=True)
    part = tmp_path / "part.csv"
    part.write_text("".join(lines[:2]))
    main(["scan", "--config", str(cfg), "--out", str(part)])
    skip = {"wall_time_s"}
    a, b = read_scan(full), read_scan(part)
    assert [{k: v for k, v in r.items() if k not in skip} for r in a] == \
        [{k: v for k, v in r.items() if k not in skip} for r in b]


def test_scan_without_estimation_keeps_crb(tmp_path):
    cfg = tmp_path / "scan.cfg"
    cfg.write_text(SCAN.replace("estimation.amplitude_mode = constant\n", "") + "scan.estimate = false\n")
    out = tmp_path / "s.csv"
    main(["scan", "--config", str(cfg), "--out", str(out)])
    rows = read_scan(out)
    assert all(r["mle_sd_separation_rad_s"] == "" and float(r["crb_exact_rad_s"]) > 0 for r in rows)


def test_config_round_trip(tmp_path):
    for preset in (fig2_preset(), fig3_preset()):
        cfg = ExperimentConfig.from_dict(preset)
        p = tmp_path / "c.cfg"
        p.write_text(cfg.to_text())
        assert ExperimentConfig.from_file(p).source == cfg.source
        assert ExperimentConfig.from_file(p).values == cfg.values


def test_load_config_precedence(small_cfg):
    cfg = load_config(small_cfg, "fig3", seed=99)
    assert cfg["run.seed"] == 99
    assert cfg["signal.n_sets"] == 6              # file overrides preset
    assert cfg["scan.replicates"] == 32           # preset fills the rest
