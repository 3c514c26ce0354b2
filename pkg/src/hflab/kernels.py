"""Hot numeric kernels with a numba path and a pure-numpy path.

Public functions dispatch on :func:`hflab._accel.numba_enabled`.  Both paths
compute the same quantities; they may differ in the last bits because the
summation order differs (loop vs BLAS / pairwise sums).
"""

from __future__ import annotations

import numpy as np

from hflab._accel import njit, numba_enabled

# zero-std guard for per-window normalisation, relative to the column level
STD_FLOOR = 1e-12

# ---------------------------------------------------------------------------
# online (per-window) normalisation


@njit
def _normalize_windows_nb(rows, ends, L):
    B = ends.shape[0]
    F = rows.shape[1]
    out = np.empty((B, L, F))
    mean = np.empty((B, F))
    std = np.empty((B, F))
    for b in range(B):
        start = ends[b] - L + 1
        for f in range(F):
            s = 0.0
            for k in range(L):
                s += rows[start + k, f]
            m = s / L
            ss = 0.0
            for k in range(L):
                d = rows[start + k, f] - m
                ss += d * d
            sd = np.sqrt(ss / L)
            mean[b, f] = m
            std[b, f] = sd
            if sd <= STD_FLOOR * max(1.0, abs(m)):
                for k in range(L):
                    out[b, k, f] = 0.0
            else:
                for k in range(L):
                    out[b, k, f] = (rows[start + k, f] - m) / sd
    return out, mean, std


def _normalize_windows_np(rows, ends, L):
    idx = ends[:, None] - (L - 1) + np.arange(L)[None, :]
    win = rows[idx]
    mean = win.mean(axis=1)
    centred = win - mean[:, None, :]
    std = np.sqrt((centred * centred).mean(axis=1))
    degenerate = std <= STD_FLOOR * np.maximum(1.0, np.abs(mean))
    safe = np.where(degenerate, 1.0, std)
    out = centred / safe[:, None, :]
    out[np.broadcast_to(degenerate[:, None, :], out.shape)] = 0.0
    return out, mean, std


def normalize_windows(rows: np.ndarray, ends: np.ndarray, L: int):
    """Normalise the windows ``rows[e-L+1 : e+1]`` for each ``e`` in ``ends``.

    Returns ``(windows [B, L, F], mean [B, F], std [B, F])`` in float64 using
    the population std of each window column; zero-std columns map to 0.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if numba_enabled():
        return _normalize_windows_nb(rows, ends, int(L))
    return _normalize_windows_np(rows, ends, int(L))


# ---------------------------------------------------------------------------
# LSTM recurrence.  Gate layout along the last axis: [f | i | o | c~].


# numba's scalar tanh is several times slower than exp without SVML
@njit
def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit
def _tanh(x):
    return 1.0 - 2.0 / (np.exp(2.0 * x) + 1.0)


@njit
def _lstm_forward_nb(xw, wh):
    B, L, G = xw.shape
    H = G // 4
    hs = np.zeros((B, L, H), dtype=xw.dtype)
    cs = np.zeros((B, L, H), dtype=xw.dtype)
    acts = np.empty((B, L, G), dtype=xw.dtype)
    z = np.empty(G, dtype=xw.dtype)
    h = np.zeros(H, dtype=xw.dtype)
    c = np.zeros(H, dtype=xw.dtype)
    for b in range(B):
        h[:] = 0.0
        c[:] = 0.0
        for t in range(L):
            for j in range(G):
                z[j] = xw[b, t, j]
            for k in range(H):
                hk = h[k]
                for j in range(G):
                    z[j] += hk * wh[k, j]
            for j in range(H):
                f = _sig(z[j])
                i = _sig(z[H + j])
                o = _sig(z[2 * H + j])
                g = _tanh(z[3 * H + j])
                cj = f * c[j] + i * g
                c[j] = cj
                h[j] = o * _tanh(cj)
                acts[b, t, j] = f
                acts[b, t, H + j] = i
                acts[b, t, 2 * H + j] = o
                acts[b, t, 3 * H + j] = g
                hs[b, t, j] = h[j]
                cs[b, t, j] = cj
    return hs, cs, acts


def _sig_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward_np(xw, wh):
    B, L, G = xw.shape
    H = G // 4
    hs = np.zeros((B, L, H), dtype=xw.dtype)
    cs = np.zeros((B, L, H), dtype=xw.dtype)
    acts = np.empty((B, L, G), dtype=xw.dtype)
    h = np.zeros((B, H), dtype=xw.dtype)
    c = np.zeros((B, H), dtype=xw.dtype)
    for t in range(L):
        z = xw[:, t, :] + h @ wh
        a = acts[:, t, :]
        a[:, : 3 * H] = _sig_np(z[:, : 3 * H])
        a[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c = a[:, :H] * c + a[:, H : 2 * H] * a[:, 3 * H :]
        h = a[:, 2 * H : 3 * H] * np.tanh(c)
        hs[:, t, :] = h
        cs[:, t, :] = c
    return hs, cs, acts


def lstm_forward(xw: np.ndarray, wh: np.ndarray):
    """Run one LSTM layer from zero state.

    ``xw`` is the pre-computed input contribution ``x_t W_x + b`` of shape
    (B, L, 4H); ``wh`` is (H, 4H).  Returns ``(hs, cs, acts)``.
    """
    xw = np.ascontiguousarray(xw)
    wh = np.ascontiguousarray(wh, dtype=xw.dtype)
    if numba_enabled():
        return _lstm_forward_nb(xw, wh)
    return _lstm_forward_np(xw, wh)


@njit
def _lstm_backward_nb(dhs, cs, acts, wh):
    B, L, H = dhs.shape
    G = 4 * H
    dz = np.empty((B, L, G), dtype=dhs.dtype)
    dh = np.zeros(H, dtype=dhs.dtype)
    dc = np.zeros(H, dtype=dhs.dtype)
    for b in range(B):
        dh[:] = 0.0
        dc[:] = 0.0
        for t in range(L - 1, -1, -1):
            for j in range(H):
                f = acts[b, t, j]
                i = acts[b, t, H + j]
                o = acts[b, t, 2 * H + j]
                g = acts[b, t, 3 * H + j]
                c_prev = cs[b, t - 1, j] if t > 0 else 0.0
                tc = _tanh(cs[b, t, j])
                dhj = dhs[b, t, j] + dh[j]
                do = dhj * tc
                dcj = dc[j] + dhj * o * (1.0 - tc * tc)
                dc[j] = dcj * f
                dz[b, t, j] = dcj * c_prev * f * (1.0 - f)
                dz[b, t, H + j] = dcj * g * i * (1.0 - i)
                dz[b, t, 2 * H + j] = do * o * (1.0 - o)
                dz[b, t, 3 * H + j] = dcj * i * (1.0 - g * g)
            for k in range(H):
                s = 0.0
                for j in range(G):
                    s += wh[k, j] * dz[b, t, j]
                dh[k] = s
    return dz


def _lstm_backward_np(dhs, cs, acts, wh):
    B, L, H = dhs.shape
    dz = np.empty((B, L, 4 * H), dtype=dhs.dtype)
    dh = np.zeros((B, H), dtype=dhs.dtype)
    dc = np.zeros((B, H), dtype=dhs.dtype)
    zero = np.zeros((B, H), dtype=dhs.dtype)
    for t in range(L - 1, -1, -1):
        a = acts[:, t, :]
        f, i, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        c_prev = cs[:, t - 1, :] if t > 0 else zero
        tc = np.tanh(cs[:, t, :])
        dht = dhs[:, t, :] + dh
        do = dht * tc
        dct = dc + dht * o * (1.0 - tc * tc)
        dc = dct * f
        d = dz[:, t, :]
        d[:, :H] = dct * c_prev * f * (1.0 - f)
        d[:, H : 2 * H] = dct * g * i * (1.0 - i)
        d[:, 2 * H : 3 * H] = do * o * (1.0 - o)
        d[:, 3 * H :] = dct * i * (1.0 - g * g)
        dh = d @ wh.T
    return dz


def lstm_backward(dhs: np.ndarray, cs: np.ndarray, acts: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """Back-propagate through time; returns d(loss)/d(pre-activation) of shape (B, L, 4H)."""
    dhs = np.ascontiguousarray(dhs, dtype=cs.dtype)
    wh = np.ascontiguousarray(wh, dtype=cs.dtype)
    if numba_enabled():
        return _lstm_backward_nb(dhs, cs, acts, wh)
    return _lstm_backward_np(dhs, cs, acts, wh)


# ---------------------------------------------------------------------------
# backtest entry scan


@njit
def _scan_entries_nb(side, hold):
    n = side.shape[0]
    ticks = np.empty(n, dtype=np.int64)
    count = 0
    exhausted = 0
    t = 0
    while t < n:
        if side[t] != 0:
            if t + hold > n - 1:
                exhausted = 1
                break
            ticks[count] = t
            count += 1
            t += hold + 1
        else:
            t += 1
    return ticks[:count], exhausted


def _scan_entries_np(side, hold):
    n = side.shape[0]
    fires = np.flatnonzero(side)
    out = []
    exhausted = 0
    k = 0
    while k < fires.shape[0]:
        t = int(fires[k])
        if t + hold > n - 1:
            exhausted = 1
            break
        out.append(t)
        k = int(np.searchsorted(fires, t + hold + 1, side="left"))
    return np.array(out, dtype=np.int64), exhausted


def scan_entries(side: np.ndarray, hold: int):
    """Greedy single-position scan.

    ``side[t]`` is +1/-1 when the entry rule fires at decision tick ``t`` and
    0 otherwise.  A decision at ``t`` occupies ticks ``t .. t+hold`` (open at
    ``t+delay``, close at ``t+hold``); the next decision may happen at
    ``t+hold+1``.  Returns ``(decision_ticks, exhausted)`` where ``exhausted``
    is 1 if a firing decision could not close before the data ended.
    """
    side = np.ascontiguousarray(side, dtype=np.int8)
    if numba_enabled():
        return _scan_entries_nb(side, int(hold))
    return _scan_entries_np(side, int(hold))
