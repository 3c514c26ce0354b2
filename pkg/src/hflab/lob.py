"""Level-2 order book snapshots: parsing, validation, dedup, CSV I/O and a
seeded synthetic stream generator.

Wire format (UTF-8 CSV, ``.`` decimal separator)::

    ts_ms,bp1,bq1,...,bp10,bq10,ap1,aq1,...,ap10,aq10

one header line then one snapshot per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from hflab.errors import (
    CrossedBook,
    EmptySide,
    InvalidRegime,
    MalformedRecord,
    OutOfOrder,
    UnsortedLevels,
)

N_LEVELS = 10
N_FIELDS = 1 + 4 * N_LEVELS
MID_DECIMALS = 8

CSV_HEADER = ",".join(
    ["ts_ms"]
    + [f"{k}{i}" for i in range(1, N_LEVELS + 1) for k in ("bp", "bq")]
    + [f"{k}{i}" for i in range(1, N_LEVELS + 1) for k in ("ap", "aq")]
)


def _check_book(bids: np.ndarray, asks: np.ndarray, where: str = "") -> None:
    """Validate one side pair of shape (10, 2) each; raise on the first violation."""
    if not (np.all(np.isfinite(bids)) and np.all(np.isfinite(asks))):
        raise MalformedRecord(f"non-finite value{where}")
    if np.any(bids[:, 0] <= 0) or np.any(asks[:, 0] <= 0):
        raise MalformedRecord(f"non-positive price{where}")
    if np.any(bids[:, 1] < 0) or np.any(asks[:, 1] < 0):
        raise MalformedRecord(f"negative quantity{where}")
    if not np.any(bids[:, 1] > 0) or not np.any(asks[:, 1] > 0):
        raise EmptySide(f"a whole book side has zero quantity{where}")
    if bids[0, 0] >= asks[0, 0]:
        raise CrossedBook(f"best bid {bids[0, 0]} >= best ask {asks[0, 0]}{where}")
    if np.any(np.diff(bids[:, 0]) >= 0):
        raise UnsortedLevels(f"bid prices not strictly decreasing{where}")
    if np.any(np.diff(asks[:, 0]) <= 0):
        raise UnsortedLevels(f"ask prices not strictly increasing{where}")


@dataclass(frozen=True)
class LobSnapshot:
    """One timestamped 10-level book; ``bids``/``asks`` are (10, 2) arrays of (price, qty)."""

    timestamp_ms: int
    bids: np.ndarray
    asks: np.ndarray

    def __post_init__(self):
        bids = np.array(self.bids, dtype=np.float64).reshape(N_LEVELS, 2)
        asks = np.array(self.asks, dtype=np.float64).reshape(N_LEVELS, 2)
        _check_book(bids, asks)
        bids.flags.writeable = False
        asks.flags.writeable = False
        object.__setattr__(self, "bids", bids)
        object.__setattr__(self, "asks", asks)
        object.__setattr__(self, "timestamp_ms", int(self.timestamp_ms))

    @property
    def best_bid(self) -> float:
        return float(self.bids[0, 0])

    @property
    def best_ask(self) -> float:
        return float(self.asks[0, 0])

    @property
    def spread(self) -> float:
        return self.best_ask - self.best_bid

    def __eq__(self, other):
        if not isinstance(other, LobSnapshot):
            return NotImplemented
        return (
            self.timestamp_ms == other.timestamp_ms
            and np.array_equal(self.bids, other.bids)
            and np.array_equal(self.asks, other.asks)
        )

    __hash__ = None


@dataclass
class SnapshotStream:
    """Columnar, time-ordered stream of snapshots.

    ``ts`` is (n,) int64, ``bids`` and ``asks`` are (n, 10, 2) float64.
    """

    ts: np.ndarray
    bids: np.ndarray
    asks: np.ndarray
    source_id: str = ""
    _validated: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        self.ts = np.ascontiguousarray(self.ts, dtype=np.int64).reshape(-1)
        n = self.ts.shape[0]
        self.bids = np.ascontiguousarray(self.bids, dtype=np.float64).reshape(n, N_LEVELS, 2)
        self.asks = np.ascontiguousarray(self.asks, dtype=np.float64).reshape(n, N_LEVELS, 2)
        if n > 1 and np.any(np.diff(self.ts) < 0):
            bad = int(np.flatnonzero(np.diff(self.ts) < 0)[0]) + 1
            raise OutOfOrder(f"timestamp decreases at snapshot {bad}")

    @classmethod
    def from_snapshots(cls, snapshots: Iterable[LobSnapshot], source_id: str = "") -> "SnapshotStream":
        snaps = list(snapshots)
        if not snaps:
            return cls.empty(source_id)
        return cls(
            ts=np.array([s.timestamp_ms for s in snaps], dtype=np.int64),
            bids=np.stack([s.bids for s in snaps]),
            asks=np.stack([s.asks for s in snaps]),
            source_id=source_id,
        )

    @classmethod
    def empty(cls, source_id: str = "") -> "SnapshotStream":
        return cls(np.zeros(0, np.int64), np.zeros((0, N_LEVELS, 2)), np.zeros((0, N_LEVELS, 2)), source_id)

    def __len__(self) -> int:
        return int(self.ts.shape[0])

    def __getitem__(self, idx):
        if isinstance(idx, slice) or isinstance(idx, np.ndarray):
            return SnapshotStream(self.ts[idx], self.bids[idx], self.asks[idx], self.source_id)
        return LobSnapshot(int(self.ts[idx]), self.bids[idx], self.asks[idx])

    def __iter__(self) -> Iterator[LobSnapshot]:
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "SnapshotStream":
        return SnapshotStream(self.ts.copy(), self.bids.copy(), self.asks.copy(), self.source_id)

    def validate(self) -> None:
        """Check every book invariant; raises on the first bad snapshot."""
        for i in range(len(self)):
            _check_book(self.bids[i], self.asks[i], where=f" at snapshot {i}")

    def equals(self, other: "SnapshotStream") -> bool:
        return (
            np.array_equal(self.ts, other.ts)
            and np.array_equal(self.bids, other.bids)
            and np.array_equal(self.asks, other.asks)
        )


# ---------------------------------------------------------------------------
# text records


def parse_snapshot(record: str) -> LobSnapshot:
    parts = record.strip().split(",")
    if len(parts) != N_FIELDS:
        raise MalformedRecord(f"expected {N_FIELDS} fields, got {len(parts)}")
    try:
        ts_f = float(parts[0])
        values = np.array([float(p) for p in parts[1:]], dtype=np.float64)
    except ValueError as exc:
        raise MalformedRecord(f"non-numeric field: {exc}") from None
    if not math.isfinite(ts_f) or ts_f != int(ts_f):
        raise MalformedRecord(f"timestamp {parts[0]!r} is not an integer")
    bids = values[: 2 * N_LEVELS].reshape(N_LEVELS, 2)
    asks = values[2 * N_LEVELS :].reshape(N_LEVELS, 2)
    return LobSnapshot(int(ts_f), bids, asks)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_snapshot(s: LobSnapshot) -> str:
    fields = [str(int(s.timestamp_ms))]
    fields += [_fmt(v) for v in s.bids.reshape(-1)]
    fields += [_fmt(v) for v in s.asks.reshape(-1)]
    return ",".join(fields)


def read_stream_csv(path, source_id: str | None = None) -> SnapshotStream:
    """Read a snapshot CSV; every row is validated, out-of-order rows are rejected."""
    path = Path(path)
    ts, books = [], []
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("ts_ms"):
            raise MalformedRecord(f"{path}: missing header line")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                snap = parse_snapshot(line)
            except MalformedRecord as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
            except (CrossedBook, UnsortedLevels, EmptySide) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
            if ts and snap.timestamp_ms < ts[-1]:
                raise OutOfOrder(f"{path}:{lineno}: timestamp {snap.timestamp_ms} < {ts[-1]}")
            ts.append(snap.timestamp_ms)
            books.append((snap.bids, snap.asks))
    if not ts:
        return SnapshotStream.empty(source_id or path.stem)
    return SnapshotStream(
        np.array(ts, dtype=np.int64),
        np.stack([b for b, _ in books]),
        np.stack([a for _, a in books]),
        source_id=source_id or path.stem,
    )


def write_stream_csv(stream: SnapshotStream, path) -> None:
    path = Path(path)
    flat = np.concatenate([stream.bids.reshape(len(stream), -1), stream.asks.reshape(len(stream), -1)], axis=1)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for t, row in zip(stream.ts, flat):
            fh.write(str(int(t)) + "," + ",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# dedup


def dedup_stream(
    stream: SnapshotStream,
    midprice_fn: Callable[[LobSnapshot], float] | str | None = None,
) -> SnapshotStream:
    """Drop snapshots whose midprice equals the previously kept one.

    ``midprice_fn`` is either a per-snapshot callable or a weighted-midprice
    mode name (``"literal"``/``"microprice"``; default literal).  Midprices
    are rounded to 8 decimals before comparison.
    """
    n = len(stream)
    if n == 0:
        return stream.copy()
    if callable(midprice_fn):
        mids = np.array([midprice_fn(s) for s in stream], dtype=np.float64)
    else:
        from hflab.features import stream_midprices

        mids = stream_midprices(stream, midprice_fn or "literal")
    keep = dedup_mask(mids)
    return stream[np.flatnonzero(keep)]


def dedup_mask(mids: np.ndarray) -> np.ndarray:
    """Boolean keep-mask for the consecutive-equal-midprice rule.

    The last kept value always equals the immediately preceding value (it was
    either kept, or dropped for being equal to the last kept one), so the
    sequential fold reduces to a neighbour comparison.
    """
    r = np.round(np.asarray(mids, dtype=np.float64), MID_DECIMALS)
    keep = np.ones(r.shape[0], dtype=bool)
    if r.shape[0] > 1:
        keep[1:] = r[1:] != r[:-1]
    return keep


GAP_EDGES_MS = (0, 100, 200, 500, 1000, 5000)


def gap_stats(stream: SnapshotStream) -> dict:
    """Inter-snapshot gap histogram in milliseconds (gaps are not altered)."""
    gaps = np.diff(stream.ts) if len(stream) > 1 else np.zeros(0, np.int64)
    edges = list(GAP_EDGES_MS) + [np.inf]
    counts, _ = np.histogram(gaps, bins=edges)
    labels = [f"[{lo},{hi})" for lo, hi in zip(GAP_EDGES_MS, list(GAP_EDGES_MS[1:]) + ["inf"])]
    return {
        "n_gaps": int(gaps.shape[0]),
        "max_gap_ms": int(gaps.max()) if gaps.size else 0,
        "median_gap_ms": float(np.median(gaps)) if gaps.size else 0.0,
        "histogram": dict(zip(labels, (int(c) for c in counts))),
    }


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Regime:
    """Parameters of the synthetic book generator.

    The mid follows a geometric random walk with per-tick log drift ``drift``
    and log volatility ``vol``.  ``signal_snr`` plants a predictable
    component: the next log-return gets ``vol * sqrt(signal_snr) * z_t`` where
    ``z_t`` is the standardised level-1 imbalance visible in the book at t.
    """

    drift: float = 0.0
    vol: float = 1e-4
    spread: float = 0.5
    depth_profile: Sequence[float] = (1.0, 1.2, 1.5, 1.8, 2.0, 2.2, 2.5, 2.8, 3.0, 3.5)
    p0: float = 20000.0
    level_step: float = 0.5
    qty_noise: float = 0.25
    imbalance: float = 0.5
    signal_snr: float = 0.0


def synth_lob_stream(seed: int, n: int, regime: Regime | None = None, t0_ms: int = 1_658_361_600_000,
                     dt_ms: int = 100, source_id: str | None = None) -> SnapshotStream:
    """Deterministic synthetic stream; the same seed gives a bit-identical result."""
    rg = regime or Regime()
    if n < 1:
        raise InvalidRegime("n must be >= 1")
    if not rg.spread > 0:
        raise InvalidRegime(f"spread must be positive, got {rg.spread}")
    if rg.vol < 0:
        raise InvalidRegime(f"vol must be non-negative, got {rg.vol}")
    depth = np.asarray(rg.depth_profile, dtype=np.float64)
    if depth.shape != (N_LEVELS,) or np.any(depth <= 0):
        raise InvalidRegime("depth_profile needs 10 positive quantities")
    if not 0 <= rg.imbalance < 1:
        raise InvalidRegime("imbalance must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    # uniform imbalance has std a/sqrt(3)
    iota = rng.uniform(-rg.imbalance, rg.imbalance, size=n)
    z = iota / (rg.imbalance / math.sqrt(3.0)) if rg.imbalance > 0 else np.zeros(n)
    eps = rng.standard_normal(n)
    qnoise = rng.lognormal(0.0, rg.qty_noise, size=(n, 2, N_LEVELS))

    log_ret = np.empty(n)
    log_ret[0] = 0.0
    log_ret[1:] = rg.drift + rg.vol * (math.sqrt(rg.signal_snr) * z[:-1] + eps[1:])
    mid = rg.p0 * np.exp(np.cumsum(log_ret))

    offsets = rg.spread / 2.0 + rg.level_step * np.arange(N_LEVELS)
    bids = np.empty((n, N_LEVELS, 2))
    asks = np.empty((n, N_LEVELS, 2))
    bids[:, :, 0] = mid[:, None] - offsets[None, :]
    asks[:, :, 0] = mid[:, None] + offsets[None, :]
    bids[:, :, 1] = depth[None, :] * qnoise[:, 0, :]
    asks[:, :, 1] = depth[None, :] * qnoise[:, 1, :]
    # level 1 carries the imbalance with a fixed total, so the literal
    # weighted mid stays a stable multiple of the true mid
    bids[:, 0, 1] = depth[0] * (1.0 + iota)
    asks[:, 0, 1] = depth[0] * (1.0 - iota)
    if np.any(bids[:, :, 0] <= 0):
        raise InvalidRegime("generated non-positive bid price; raise p0 or lower vol")

    ts = t0_ms + dt_ms * np.arange(n, dtype=np.int64)
    return SnapshotStream(ts, bids, asks, source_id=source_id or f"synth-{seed}")
