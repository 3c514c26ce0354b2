import subprocess
import sys

import numpy as np
from hypothesis import given, strategies as st

from hflab import _accel
from hflab.kernels import lstm_backward, lstm_forward, normalize_windows, scan_entries


def both(fn, *args):
    prev = _accel.use_numba(True)
    try:
        a = fn(*args)
        _accel.use_numba(False)
        b = fn(*args)
    finally:
        _accel.use_numba(prev)
    return a, b


def test_normalize_windows_parity():
    rng = np.random.default_rng(0)
    rows = rng.normal(5.0, 3.0, size=(60, 7))
    rows[:, 3] = 2.5                                          # constant column
    ends = np.arange(9, 60, 4)
    (a, ma, sa), (b, mb, sb) = both(normalize_windows, rows, ends, 10)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(ma, mb, atol=1e-12)
    np.testing.assert_allclose(sa, sb, atol=1e-12)
    assert np.all(a[:, :, 3] == 0) and np.all(b[:, :, 3] == 0)


def test_lstm_forward_backward_parity():
    rng = np.random.default_rng(1)
    B, L, H = 3, 6, 4
    xw = rng.standard_normal((B, L, 4 * H))
    wh = rng.standard_normal((H, 4 * H)) * 0.5
    (ha, ca, aa), (hb, cb, ab) = both(lstm_forward, xw, wh)
    np.testing.assert_allclose(ha, hb, atol=1e-12)
    np.testing.assert_allclose(ca, cb, atol=1e-12)
    np.testing.assert_allclose(aa, ab, atol=1e-12)
    dhs = rng.standard_normal((B, L, H))
    da, db = both(lstm_backward, dhs, ca, aa, wh)
    np.testing.assert_allclose(da, db, atol=1e-12)


def brute_scan(side, hold):
    ticks, t = [], 0
    while t < len(side):
        if side[t] != 0:
            if t + hold > len(side) - 1:
                return ticks, 1
            ticks.append(t)
            t += hold + 1
        else:
            t += 1
    return ticks, 0


@given(st.lists(st.sampled_from([-1, 0, 0, 1]), max_size=80), st.integers(0, 12))
def test_scan_entries_parity_with_brute_force(side, hold):
    side = np.array(side, dtype=np.int8)
    (ta, ea), (tb, eb) = both(scan_entries, side, hold)
    want, ex = brute_scan(list(side), hold)
    assert ta.tolist() == tb.tolist() == want
    assert ea == eb == ex


def test_env_var_disables_numba():
    code = "from hflab._accel import numba_enabled; print(numba_enabled())"
    out = subprocess.run([sys.executable, "-c", code], env={"HFLAB_DISABLE_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
