"""Midprices, log-returns, the 38-column feature rows, per-window (online)
normalisation, look-back windows and the ADF unit-root statistic.

Feature row layout (38 columns)::

    0..8    bid prices, levels 1-9
    9..17   bid quantities, levels 1-9
    18..26  ask prices, levels 1-9
    27..35  ask quantities, levels 1-9
    36      lagged log-return log(mid_t / mid_{t-tau})
    37      weighted midprice

Dataset files
-------------
CSV: header ``f0..f37,target`` then one row per feature row; ``target`` is the
log-return over (t, t+tau] and ``nan`` where it is not yet observable.

Binary (little-endian)::

    magic   8 bytes  b"HFLBFEAT"
    version u8       1
    n_rows  u64
    n_cols  u64      39 (38 features + target)
    tau     u32
    offset  u64      stream index of row 0 (== tau)
    data    n_rows * n_cols float64, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hflab import kernels
from hflab.errors import (
    DatasetFormatError,
    NonPositivePrice,
    SingularRegression,
    StreamTooShort,
    ZeroQuantities,
)
from hflab.lob import LobSnapshot, SnapshotStream

N_FEATURES = 38
N_BOOK_LEVELS = 9
LAG_COL = 36
MID_COL = 37

FEATURE_NAMES = (
    [f"bid_px_{i}" for i in range(1, 10)]
    + [f"bid_qty_{i}" for i in range(1, 10)]
    + [f"ask_px_{i}" for i in range(1, 10)]
    + [f"ask_qty_{i}" for i in range(1, 10)]
    + ["lagged_log_return", "weighted_mid"]
)

MID_MODES = ("literal", "microprice")


def weighted_midprice(s: LobSnapshot, mode: str = "literal") -> float:
    """Level-1 weighted midprice.

    ``literal``: (q_a p_a + q_b p_b) / 2.
    ``microprice``: (q_a p_b + q_b p_a) / (q_a + q_b).
    """
    pa, qa = float(s.asks[0, 0]), float(s.asks[0, 1])
    pb, qb = float(s.bids[0, 0]), float(s.bids[0, 1])
    if mode == "literal":
        return (qa * pa + qb * pb) / 2.0
    if mode == "microprice":
        if qa + qb == 0:
            raise ZeroQuantities("level-1 quantities sum to zero")
        return (qa * pb + qb * pa) / (qa + qb)
    raise ValueError(f"unknown midprice mode {mode!r}")


def stream_midprices(stream: SnapshotStream, mode: str = "literal") -> np.ndarray:
    pa, qa = stream.asks[:, 0, 0], stream.asks[:, 0, 1]
    pb, qb = stream.bids[:, 0, 0], stream.bids[:, 0, 1]
    if mode == "literal":
        return (qa * pa + qb * pb) / 2.0
    if mode == "microprice":
        tot = qa + qb
        if np.any(tot == 0):
            raise ZeroQuantities(f"level-1 quantities sum to zero at snapshot {int(np.flatnonzero(tot == 0)[0])}")
        return (qa * pb + qb * pa) / tot
    raise ValueError(f"unknown midprice mode {mode!r}")


def log_return(p_t: float, p_t_plus_tau: float) -> float:
    if not (p_t > 0 and p_t_plus_tau > 0):
        raise NonPositivePrice(f"log-return needs positive prices, got {p_t}, {p_t_plus_tau}")
    return math.log(p_t_plus_tau / p_t)


def build_feature_rows(stream: SnapshotStream, tau: int, mid_mode: str = "literal") -> np.ndarray:
    """One 38-column row per snapshot with index >= tau, in stream order.

    Row ``i`` describes stream snapshot ``i + tau``.
    """
    n = len(stream)
    if tau < 1:
        raise ValueError(f"horizon must be >= 1, got {tau}")
    if n <= tau:
        raise StreamTooShort(f"stream of length {n} too short for horizon {tau}")
    mids = stream_midprices(stream, mid_mode)
    if np.any(mids <= 0):
        raise NonPositivePrice("weighted midprice must be positive")
    k = N_BOOK_LEVELS
    sl = slice(tau, n)
    rows = np.empty((n - tau, N_FEATURES))
    rows[:, 0:9] = stream.bids[sl, :k, 0]
    rows[:, 9:18] = stream.bids[sl, :k, 1]
    rows[:, 18:27] = stream.asks[sl, :k, 0]
    rows[:, 27:36] = stream.asks[sl, :k, 1]
    rows[:, LAG_COL] = np.log(mids[tau:] / mids[:-tau])
    rows[:, MID_COL] = mids[tau:]
    return rows


def forward_targets(mids: np.ndarray, tau: int) -> np.ndarray:
    """``log(mid[t+tau]/mid[t])`` aligned on t; trailing tau entries are nan."""
    mids = np.asarray(mids, dtype=np.float64)
    out = np.full(mids.shape[0], np.nan)
    if mids.shape[0] > tau:
        out[:-tau] = np.log(mids[tau:] / mids[:-tau])
    return out


def online_normalize(window: np.ndarray):
    """Standardise each column of an (L, F) window with its own mean and population std.

    Returns ``(normalized, stats)`` where ``stats`` is (F, 2) of (mean, std).
    Zero-std columns become all zeros.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError("online_normalize needs an (L, F) window with L >= 2")
    out, mean, std = kernels.normalize_windows(w, np.array([w.shape[0] - 1]), w.shape[0])
    return out[0], np.stack([mean[0], std[0]], axis=1)


@dataclass
class FeatureWindow:
    rows: np.ndarray          # (L, 38), normalised
    target: float             # log-return over (t, t+tau]; nan if unobservable
    norm_stats: np.ndarray    # (38, 2) mean/std of the raw window
    t_index: int              # stream index of the last row


class WindowDataset:
    """Lazily materialised look-back windows over a feature-row table.

    Window ``k`` ends at row ``ends[k]`` and covers rows ``ends[k]-L+1 ..
    ends[k]``; its target is ``log(mid[e+tau]/mid[e])``.  With
    ``require_target=False`` windows run to the last row (targets nan) for
    inference.
    """

    def __init__(self, rows: np.ndarray, L: int, tau: int, mids: np.ndarray | None = None,
                 stride: int = 1, tick_offset: int | None = None, require_target: bool = True,
                 ends: np.ndarray | None = None):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != N_FEATURES:
            raise ValueError(f"rows must be (n, {N_FEATURES})")
        if L < 2:
            raise ValueError("look-back must be >= 2")
        self.rows = rows
        self.L = int(L)
        self.tau = int(tau)
        self.mids = rows[:, MID_COL] if mids is None else np.asarray(mids, dtype=np.float64)
        self.tick_offset = self.tau if tick_offset is None else int(tick_offset)
        self.targets_all = forward_targets(self.mids, self.tau)
        n = rows.shape[0]
        if ends is None:
            last = n - self.tau - 1 if require_target else n - 1
            if last < self.L - 1:
                raise StreamTooShort(
                    f"{n} rows cannot hold a window of {self.L} plus horizon {self.tau}"
                    if require_target else f"{n} rows cannot hold a window of {self.L}"
                )
            ends = np.arange(self.L - 1, last + 1, int(stride), dtype=np.int64)
        self.ends = np.asarray(ends, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.ends.shape[0])

    @property
    def targets(self) -> np.ndarray:
        return self.targets_all[self.ends]

    @property
    def ticks(self) -> np.ndarray:
        return self.ends + self.tick_offset

    def subset(self, sel) -> "WindowDataset":
        return WindowDataset(self.rows, self.L, self.tau, mids=self.mids, tick_offset=self.tick_offset,
                             ends=self.ends[sel])

    def batch(self, idx=None, dtype=np.float64):
        """Return ``(X [B, L, 38], y [B])`` for window indices ``idx`` (default: all)."""
        ends = self.ends if idx is None else self.ends[idx]
        X, _, _ = kernels.normalize_windows(self.rows, ends, self.L)
        return X.astype(dtype, copy=False), self.targets_all[ends].astype(dtype, copy=False)

    def window(self, k: int) -> FeatureWindow:
        e = int(self.ends[k])
        X, mean, std = kernels.normalize_windows(self.rows, np.array([e]), self.L)
        return FeatureWindow(X[0], float(self.targets_all[e]), np.stack([mean[0], std[0]], axis=1),
                             e + self.tick_offset)

    def __iter__(self):
        for k in range(len(self)):
            yield self.window(k)


def make_windows(rows: np.ndarray, mids: np.ndarray | None, L: int, tau: int, stride: int = 1,
                 tick_offset: int | None = None) -> list[FeatureWindow]:
    """All windows with an observable target: ends t in [L-1, n-tau-1] step ``stride``.

    ``mids`` defaults to the weighted-mid feature column.
    """
    return list(WindowDataset(rows, L, tau, mids=mids, stride=stride, tick_offset=tick_offset))


# ---------------------------------------------------------------------------
# ADF


def adf_statistic(series: Sequence[float], max_lag: int = 0) -> float:
    """t-statistic of gamma in dy_t = a + gamma*y_{t-1} + sum_i b_i dy_{t-i} + e_t (OLS)."""
    y = np.asarray(series, dtype=np.float64)
    p = int(max_lag)
    if p < 0:
        raise ValueError("max_lag must be >= 0")
    if y.shape[0] <= p + 2:
        raise StreamTooShort(f"series of length {y.shape[0]} too short for max_lag {p}")
    dy = np.diff(y)
    # rows t = p .. len(dy)-1 of the differenced series
    resp = dy[p:]
    n = resp.shape[0]
    cols = [np.ones(n), y[p:-1]]
    for i in range(1, p + 1):
        cols.append(dy[p - i : -i])
    X = np.column_stack(cols)
    k = X.shape[1]
    if n <= k:
        raise SingularRegression(f"{n} observations for {k} regressors")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(1.0, diag.max()):
        raise SingularRegression("collinear design matrix")
    beta = np.linalg.solve(r, q.T @ resp)
    resid = resp - X @ beta
    sigma2 = float(resid @ resid) / (n - k)
    rinv = np.linalg.solve(r, np.eye(k))
    cov = sigma2 * (rinv @ rinv.T)
    se = math.sqrt(cov[1, 1])
    if se == 0.0:
        return -math.inf if beta[1] < 0 else (math.inf if beta[1] > 0 else 0.0)
    return float(beta[1] / se)


# ---------------------------------------------------------------------------
# dataset files

_FEAT_MAGIC = b"HFLBFEAT"
_FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<8sBQQIQ")


def feature_table(stream: SnapshotStream, tau: int, mid_mode: str = "literal") -> np.ndarray:
    """Feature rows plus a target column: (n - tau, 39)."""
    rows = build_feature_rows(stream, tau, mid_mode)
    return np.column_stack([rows, forward_targets(rows[:, MID_COL], tau)])


def write_dataset_binary(table: np.ndarray, tau: int, path) -> None:
    table = np.ascontiguousarray(table, dtype="<f8")
    header = _FEAT_HEADER.pack(_FEAT_MAGIC, _FEAT_VERSION, table.shape[0], table.shape[1], int(tau), int(tau))
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(table.tobytes(order="C"))


def read_dataset_binary(path):
    """Returns ``(table, tau, offset)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n_rows, n_cols, tau, offset = _FEAT_HEADER.unpack_from(raw)
    if magic != _FEAT_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != _FEAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = _FEAT_HEADER.size + 8 * n_rows * n_cols
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    table = np.frombuffer(raw, dtype="<f8", offset=_FEAT_HEADER.size).reshape(n_rows, n_cols).astype(np.float64)
    return table, int(tau), int(offset)


def write_dataset_csv(table: np.ndarray, path) -> None:
    header = ",".join([f"f{i}" for i in range(N_FEATURES)] + ["target"])
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dataset_csv(path) -> np.ndarray:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if len(header) != N_FEATURES + 1 or header[-1] != "target":
            raise DatasetFormatError(f"{path}: unexpected header")
        data = [[float(x) for x in line.split(",")] for line in fh if line.strip()]
    return np.array(data, dtype=np.float64).reshape(-1, N_FEATURES + 1)
