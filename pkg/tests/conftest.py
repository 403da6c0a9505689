import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qres.signal_model import ProbeConfig
from qres.simulator import SignalModel, simulate_dataset

settings.register_profile("qres", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qres")

TWO_PI = 2 * np.pi


@pytest.fixture
def small_dataset():
    """Two tones, three sets of 48 single-shot outcomes."""
    model = SignalModel(deltas=(0.30, 0.36), omega=0.2, T_phi=64.0, n_per_set=48, n_sets=3)
    return simulate_dataset(model, ProbeConfig(1.0), seed=11)


@pytest.fixture(scope="session")
def fig3_consts():
    T_phi = 1024.0
    return {"tau": 1.0, "T_phi": T_phi, "delta1": np.exp(4) * TWO_PI / T_phi,
            "mean_omega": 0.05 * TWO_PI, "n": 1024, "L": 64, "unit": TWO_PI / T_phi}


# acceptance verdicts, filled by tests/test_acceptance.py and echoed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"acceptance criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
