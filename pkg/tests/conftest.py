import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from painmeter.signal_store import ChannelSpec, Recording

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_recording(n_channels=3, timesteps=40000, score=1, rec_id="r0", subject="s0", seed=0, kinds=None):
    rng = np.random.default_rng(seed)
    kinds = kinds or ["pulse"] * n_channels
    channels = tuple(ChannelSpec(f"c{i}", kinds[i], f"spot {i}") for i in range(n_channels))
    return Recording(rec_id, subject, score, channels, rng.standard_normal((n_channels, timesteps)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_recordings():
    # four short-noise recordings with a planted per-label channel mean shift
    recs = []
    for i, score in enumerate((1, 2, 1, 2)):
        r = make_recording(2, 40000, score, f"r{i}", "s0", seed=i)
        vals = np.array(r.values)
        vals[0] += 0.8 * (score - 1.5)
        recs.append(Recording(r.id, r.subject_id, r.pain_score, r.channels, vals))
    return recs


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
