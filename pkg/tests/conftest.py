import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hflab import _accel
from hflab.lob import N_LEVELS, LobSnapshot, SnapshotStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def book(ts, bid, ask, bq=1.0, aq=1.0, step=0.5, depth=1.0):
    """A valid 10-level snapshot with level-1 prices/quantities as given."""
    bids = np.empty((N_LEVELS, 2))
    asks = np.empty((N_LEVELS, 2))
    bids[:, 0] = bid - step * np.arange(N_LEVELS)
    asks[:, 0] = ask + step * np.arange(N_LEVELS)
    bids[:, 1] = depth
    asks[:, 1] = depth
    bids[0, 1] = bq
    asks[0, 1] = aq
    return LobSnapshot(ts, bids, asks)


def stream_from_mids(mids, t0=0, spread=1.0):
    """Stream whose literal weighted midprice equals ``mids`` (unit level-1 quantities)."""
    snaps = [book(t0 + 100 * i, m - spread / 2, m + spread / 2) for i, m in enumerate(mids)]
    return SnapshotStream.from_snapshots(snaps, "fixture")


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request):
    prev = _accel.use_numba(request.param)
    yield request.param
    _accel.use_numba(prev)


# -- acceptance reporting ---------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance(n, "title")`` feed a one-line-per-criterion
# PASS/FAIL summary printed at the end of the run.  ``acceptance_note`` lets a
# test attach measured numbers to its line.

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def _entry(item):
    m = item.get_closest_marker("acceptance")
    if m is None:
        return None
    n, title = m.args
    return _ACCEPTANCE.setdefault(n, {"title": title, "outcomes": [], "notes": []})


@pytest.fixture
def acceptance_note(request):
    entry = _entry(request.node)

    def note(text):
        if entry is not None:
            entry["notes"].append(str(text))
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry["outcomes"].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        ok = bool(e["outcomes"]) and all(o == "passed" for o in e["outcomes"])
        line = f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
