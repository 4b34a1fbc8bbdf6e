import numpy as np
import pytest

from boostjm.data import JointDataset
from boostjm.jointlik import NuisanceParams, PredictorState


def toy_dataset(rng, N=8, max_obs=4, p_long=2, p_shared=2, event_rate=0.5):
    """Small random dataset with 1..max_obs rows per individual."""
    obs_ids, times, ev, st = [], [], [], []
    for i in range(N):
        k = int(rng.integers(1, max_obs + 1))
        t = np.sort(rng.uniform(0, 4, size=k))
        t[0] = 0.0 if rng.uniform() < 0.5 else t[0]
        obs_ids += [i + 1] * k
        times += t.tolist()
        ev.append(t[-1] + rng.uniform(0.05, 1.5))
        st.append(int(rng.uniform() < event_rate))
    n = len(times)
    return JointDataset(
        obs_ids=np.array(obs_ids), time=np.array(times), y=rng.normal(size=n) * 2 + 1,
        x_long=rng.normal(size=(n, p_long)), ids=np.arange(1, N + 1), event_time=np.array(ev),
        status=np.array(st), x_shared=rng.normal(size=(N, p_shared)),
    )


def random_state(ds, rng, scale=0.5):
    return PredictorState.from_coefficients(
        ds, rng.normal(), rng.normal(size=ds.p_long) * scale, rng.normal() * scale,
        rng.normal(size=ds.p_shared) * scale, rng.normal() * scale,
        gamma0=rng.normal(size=ds.N) * scale, gamma1=rng.normal(size=ds.N) * scale,
    )


def random_nuisance(rng):
    return NuisanceParams(sigma2=float(rng.uniform(0.3, 3)), alpha=float(rng.normal() * 0.7),
                          lambda0=float(rng.uniform(0.02, 0.5)))


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


# One line per acceptance criterion, filled in by test_acceptance.py and
# repeated in the terminal summary so it survives output capture.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
