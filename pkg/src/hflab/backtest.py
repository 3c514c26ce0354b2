"""Tick-driven backtest of single- and multi-signal strategies.

Timing: a decision taken at tick ``t`` (using only signals computed from
snapshots up to ``t``) opens at ``t + delay`` and closes at
``t + tau + delay``, both at the weighted midprice of the execution tick.
One position at a time; the next decision can happen at ``t + tau + delay + 1``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from hflab import kernels
from hflab.errors import (
    DegenerateColumn,
    MalformedLadder,
    MissingModel,
    ModelHorizonMismatch,
    SignalStreamMismatch,
    TooFewTrades,
)
from hflab.features import WindowDataset, build_feature_rows, stream_midprices
from hflab.lob import SnapshotStream

LADDER_2 = (0.15, 0.1, 0.05)
LADDER_5 = (0.15, 0.125, 0.1, 0.075, 0.05, 0.025)
# percentiles of the training |aggregated signal| used as ladder thresholds
LADDER_2_PCT = (80.0, 50.0)
LADDER_5_PCT = (90.0, 75.0, 60.0, 45.0, 30.0)
MIN_THRESHOLD_PCT = 10.0


@dataclass(frozen=True)
class BacktestConfig:
    main_horizon: int = 28
    signal_horizons: tuple | None = None   # default: (main_horizon,)
    delay_ticks: int = 2
    trade_qty: float = 0.1
    slippage_rate: float = 0.000002
    sizing_thresholds: tuple | None = None
    sizing_quantities: tuple | None = None
    min_threshold: float | None = None

    def __post_init__(self):
        hs = (self.main_horizon,) if self.signal_horizons is None else self.signal_horizons
        object.__setattr__(self, "signal_horizons", tuple(int(h) for h in hs))
        if not self.signal_horizons:
            raise ValueError("need at least one signal horizon")
        if self.main_horizon < 1:
            raise ValueError("main_horizon must be >= 1")
        if self.delay_ticks < 0:
            raise ValueError("delay_ticks must be >= 0")
        if not self.trade_qty > 0:
            raise ValueError("trade_qty must be positive")
        if self.slippage_rate < 0:
            raise ValueError("slippage_rate must be >= 0")
        if self.min_threshold is not None and self.min_threshold < 0:
            raise ValueError("min_threshold must be >= 0")
        if (self.sizing_thresholds is None) != (self.sizing_quantities is None):
            raise MalformedLadder("sizing needs both thresholds and quantities")
        if self.sizing_thresholds is not None:
            t = tuple(float(x) for x in self.sizing_thresholds)
            q = tuple(float(x) for x in self.sizing_quantities)
            check_ladder(t, q)
            object.__setattr__(self, "sizing_thresholds", t)
            object.__setattr__(self, "sizing_quantities", q)

    @property
    def hold_ticks(self) -> int:
        """Ticks from decision to close."""
        return self.main_horizon + self.delay_ticks


def check_ladder(thresholds: Sequence[float], quantities: Sequence[float]) -> None:
    if len(thresholds) == 0:
        raise MalformedLadder("ladder needs at least one threshold")
    if len(quantities) != len(thresholds) + 1:
        raise MalformedLadder(f"{len(thresholds)} thresholds need {len(thresholds) + 1} quantities, "
                              f"got {len(quantities)}")
    if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise MalformedLadder(f"thresholds must be strictly descending: {tuple(thresholds)}")
    if any(not q > 0 for q in quantities):
        raise MalformedLadder("ladder quantities must be positive")
    if any(a < b for a, b in zip(quantities, quantities[1:])):
        raise MalformedLadder(f"quantities must be descending: {tuple(quantities)}")


def trade_size(magnitude: float, thresholds: Sequence[float] | None = None,
               quantities: Sequence[float] | None = None, default_qty: float = 0.1) -> float:
    """Quantity of the first rung whose threshold the magnitude reaches; the last rung otherwise."""
    if thresholds is None and quantities is None:
        return float(default_qty)
    if thresholds is None or quantities is None:
        raise MalformedLadder("sizing needs both thresholds and quantities")
    check_ladder(thresholds, quantities)
    for t, q in zip(thresholds, quantities):
        if magnitude >= t:
            return float(q)
    return float(quantities[-1])


@dataclass(frozen=True)
class Aggregate:
    unanimous_sign: int | None
    sum: float
    magnitude: float


def aggregate(signals_at_t: Sequence[float]) -> Aggregate:
    s = np.asarray(signals_at_t, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("aggregate needs at least one signal")
    if np.all(s > 0):
        sign = 1
    elif np.all(s < 0):
        sign = -1
    else:
        sign = None
    tot = float(s.sum())
    return Aggregate(sign, tot, abs(tot))


# ---------------------------------------------------------------------------
# signals


@dataclass
class SignalMatrix:
    """Per-tick forecasts: ``values[t, j]`` is the horizon-``horizons[j]`` signal at tick t (nan if none)."""

    horizons: tuple
    values: np.ndarray

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.horizons):
            raise SignalStreamMismatch(f"signal matrix of shape {self.values.shape} for {len(self.horizons)} horizons")

    @property
    def n_ticks(self) -> int:
        return self.values.shape[0]

    def columns(self, horizons: Sequence[int]) -> np.ndarray:
        idx = []
        for h in horizons:
            if int(h) not in self.horizons:
                raise MissingModel(f"no signal for horizon {h}")
            idx.append(self.horizons.index(int(h)))
        return self.values[:, idx]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick"] + [f"h{h}" for h in self.horizons])
            for t, row in enumerate(self.values):
                w.writerow([t] + [repr(float(x)) for x in row])

    @classmethod
    def read_csv(cls, path) -> "SignalMatrix":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            head = next(r)
            horizons = tuple(int(h[1:]) for h in head[1:])
            vals = [[float(x) for x in row[1:]] for row in r]
        return cls(horizons, np.array(vals, dtype=np.float64).reshape(-1, len(horizons)))


def generate_signals(models: Mapping[int, object], stream: SnapshotStream, L: int | None = None,
                     mid_mode: str = "literal", batch_size: int = 512) -> SignalMatrix:
    """Run each horizon's model over every window of the stream.

    A window ending at tick t uses snapshots ``t-L+1-tau .. t`` (the lagged
    return needs tau ticks of history), so ticks before ``L-1+tau`` get nan.
    """
    if not models:
        raise MissingModel("no models given")
    horizons = sorted(int(h) for h in models)
    looks = {models[h].spec.lookback for h in horizons}
    if len(looks) != 1:
        raise ModelHorizonMismatch(f"models disagree on look-back: {sorted(looks)}")
    lookback = looks.pop()
    if L is not None and int(L) != lookback:
        raise ModelHorizonMismatch(f"look-back {L} != model look-back {lookback}")
    n = len(stream)
    out = np.full((n, len(horizons)), np.nan)
    for j, h in enumerate(horizons):
        m = models[h]
        if m.spec.horizon != h:
            raise ModelHorizonMismatch(f"model registered for horizon {h} was trained for {m.spec.horizon}")
        if n <= h + lookback - 1:
            continue
        rows = build_feature_rows(stream, h, mid_mode)
        ds = WindowDataset(rows, lookback, h, require_target=False)
        for s in range(0, len(ds), batch_size):
            sel = np.arange(s, min(s + batch_size, len(ds)))
            X, _ = ds.batch(sel)
            out[ds.ticks[sel], j] = m.point_forecast(X)
    return SignalMatrix(tuple(horizons), out)


def strategy_horizons(strategy: int, main: int) -> tuple:
    """Strategy 1: the main horizon alone; 2: main and main+-2; 3: main-2 .. main+2."""
    if strategy == 1:
        return (main,)
    if strategy == 2:
        return (main - 2, main, main + 2)
    if strategy == 3:
        return tuple(range(main - 2, main + 3))
    raise ValueError(f"unknown strategy {strategy}")


def signal_count_horizons(k: int, main: int = 25) -> tuple:
    """k (odd) horizons centred on ``main``."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"signal count must be odd and positive, got {k}")
    half = (k - 1) // 2
    return tuple(range(main - half, main + half + 1))


# ---------------------------------------------------------------------------
# strategy


@dataclass(frozen=True)
class Trade:
    decision_tick: int
    open_tick: int
    close_tick: int
    side: str
    qty: float
    open_price: float
    close_price: float
    signals_at_open: tuple
    magnitude: float
    pnl: float

    @property
    def direction(self) -> int:
        return 1 if self.side == "long" else -1


def trade_pnl(side: str, qty: float, open_price: float, close_price: float, slippage_rate: float) -> float:
    d = 1.0 if side == "long" else -1.0
    return d * qty * (close_price - open_price) - slippage_rate * qty * (open_price + close_price)


@dataclass
class TradeLedger:
    trades: list
    config: BacktestConfig
    discarded: int = 0
    n_ticks: int = 0

    @property
    def pnl(self) -> np.ndarray:
        return np.array([t.pnl for t in self.trades], dtype=np.float64)

    @property
    def cumulative_pnl(self) -> np.ndarray:
        return np.cumsum(self.pnl)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.array([t.magnitude for t in self.trades], dtype=np.float64)

    def signal_columns(self) -> np.ndarray:
        return np.array([t.signals_at_open for t in self.trades], dtype=np.float64).reshape(
            len(self.trades), len(self.config.signal_horizons))

    def __len__(self) -> int:
        return len(self.trades)

    def summary(self) -> dict:
        pnl = self.pnl
        out = {
            "final_pnl": float(pnl.sum()) if pnl.size else 0.0,
            "trade_count": len(self.trades),
            "discarded_trades": int(self.discarded),
            "win_ratio": float(np.mean(pnl > 0)) if pnl.size else 0.0,
            "pnl_std": float(np.std(pnl)) if pnl.size else 0.0,
            "signal_horizons": list(self.config.signal_horizons),
            "main_horizon": self.config.main_horizon,
            "signal_pnl_correlation": {},
        }
        if len(self.trades) >= 2:
            sig = self.signal_columns()
            for j, h in enumerate(self.config.signal_horizons):
                out["signal_pnl_correlation"][f"h{h}"] = _safe_corr(sig[:, j], pnl)
        return out

    # -- writers -------------------------------------------------------------
    def write_csv(self, path) -> None:
        hs = self.config.signal_horizons
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["decision_tick", "open_tick", "close_tick", "side", "qty", "open_price", "close_price"]
                       + [f"signal_h{h}" for h in hs] + ["magnitude", "pnl"])
            for t in self.trades:
                w.writerow([t.decision_tick, t.open_tick, t.close_tick, t.side, repr(t.qty), repr(t.open_price),
                            repr(t.close_price)] + [repr(float(s)) for s in t.signals_at_open]
                           + [repr(t.magnitude), repr(t.pnl)])

    def write_summary_json(self, path) -> None:
        s = self.summary()
        s["config"] = _config_dict(self.config)
        Path(path).write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")

    def write_cum_pnl_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick", "cum_pnl"])
            for t, c in zip(self.trades, self.cumulative_pnl):
                w.writerow([t.close_tick, repr(float(c))])


def _config_dict(cfg: BacktestConfig) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def read_ledger_csv(path) -> tuple[list, tuple]:
    """Parse a ledger CSV back into trades; returns ``(trades, horizons)``."""
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        hs = tuple(int(c[len("signal_h"):]) for c in r.fieldnames if c.startswith("signal_h"))
        trades = []
        for row in r:
            trades.append(Trade(
                int(row["decision_tick"]), int(row["open_tick"]), int(row["close_tick"]), row["side"],
                float(row["qty"]), float(row["open_price"]), float(row["close_price"]),
                tuple(float(row[f"signal_h{h}"]) for h in hs), float(row["magnitude"]), float(row["pnl"]),
            ))
    return trades, hs


def ledger_from_csv(path, main_horizon: int | None = None) -> TradeLedger:
    trades, hs = read_ledger_csv(path)
    main = main_horizon if main_horizon is not None else hs[len(hs) // 2]
    return TradeLedger(trades, BacktestConfig(main_horizon=main, signal_horizons=hs))


def entry_sides(signals: np.ndarray, min_threshold: float | None = None) -> np.ndarray:
    """Per-tick entry direction (+1 long, -1 short, 0 none) from a [n, k] signal block.

    Several signals must agree strictly in sign.  A single signal goes short
    when it is exactly zero.  Ticks with any missing signal never fire.
    """
    s = np.asarray(signals, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    k = s.shape[1]
    valid = np.all(np.isfinite(s), axis=1)
    if k == 1:
        side = np.where(s[:, 0] > 0, 1, -1)
    else:
        side = np.where(np.all(s > 0, axis=1), 1, np.where(np.all(s < 0, axis=1), -1, 0))
    side = np.where(valid, side, 0)
    if min_threshold is not None:
        mag = np.abs(np.where(valid[:, None], s, 0.0).sum(axis=1))
        side = np.where(mag >= min_threshold * k, side, 0)
    return side.astype(np.int8)


def run_strategy(prices, signals, cfg: BacktestConfig) -> TradeLedger:
    """Simulate the entry rule over a price series.

    ``prices`` is a deduped SnapshotStream (weighted midprices are used) or a
    1-D array of execution prices; ``signals`` is a SignalMatrix (the
    configured horizons are selected) or an [n, k] array aligned with
    ``cfg.signal_horizons``.
    """
    if isinstance(prices, SnapshotStream):
        prices = stream_midprices(prices)
    prices = np.asarray(prices, dtype=np.float64)
    if isinstance(signals, SignalMatrix):
        sig = signals.columns(cfg.signal_horizons)
    else:
        sig = np.asarray(signals, dtype=np.float64)
        if sig.ndim == 1:
            sig = sig[:, None]
        if sig.shape[1] != len(cfg.signal_horizons):
            raise SignalStreamMismatch(f"{sig.shape[1]} signal columns for horizons {cfg.signal_horizons}")
    if sig.shape[0] != prices.shape[0]:
        raise SignalStreamMismatch(f"{sig.shape[0]} signal rows for {prices.shape[0]} ticks")

    side = entry_sides(sig, cfg.min_threshold)
    decisions, exhausted = kernels.scan_entries(side, cfg.hold_ticks)
    trades = []
    for t in decisions.tolist():
        s = sig[t]
        mag = abs(float(s.sum()))
        qty = trade_size(mag, cfg.sizing_thresholds, cfg.sizing_quantities, cfg.trade_qty)
        o, c = t + cfg.delay_ticks, t + cfg.hold_ticks
        name = "long" if side[t] > 0 else "short"
        op, cp = float(prices[o]), float(prices[c])
        trades.append(Trade(t, o, c, name, qty, op, cp, tuple(float(x) for x in s), mag,
                            trade_pnl(name, qty, op, cp, cfg.slippage_rate)))
    return TradeLedger(trades, cfg, int(exhausted), int(prices.shape[0]))


def signal_count_sweep(signals: SignalMatrix, prices, cfg: BacktestConfig, main: int = 25,
                       counts: Sequence[int] = (1, 3, 5, 7, 9, 11)) -> dict:
    """Run the unanimity strategy with k signals centred on ``main`` for each k.

    Returns ``{k: ledger}``.
    """
    out = {}
    for k in counts:
        hs = signal_count_horizons(int(k), main)
        signals.columns(hs)
        kcfg = BacktestConfig(main_horizon=main, signal_horizons=hs, delay_ticks=cfg.delay_ticks,
                              trade_qty=cfg.trade_qty, slippage_rate=cfg.slippage_rate,
                              sizing_thresholds=cfg.sizing_thresholds, sizing_quantities=cfg.sizing_quantities,
                              min_threshold=cfg.min_threshold)
        out[int(k)] = run_strategy(prices, signals, kcfg)
    return out


# ---------------------------------------------------------------------------
# threshold calibration


def calibrate_ladder(train_signals: np.ndarray, rungs: int) -> tuple:
    """Sizing thresholds and quantities from the training |aggregated signal| distribution."""
    if rungs == 2:
        pct, qty = LADDER_2_PCT, LADDER_2
    elif rungs == 5:
        pct, qty = LADDER_5_PCT, LADDER_5
    else:
        raise MalformedLadder(f"ladders have 2 or 5 thresholds, not {rungs}")
    s = np.asarray(train_signals, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    s = s[np.all(np.isfinite(s), axis=1)]
    if s.shape[0] == 0:
        raise TooFewTrades("no finite training signals to calibrate on")
    mag = np.abs(s.sum(axis=1))
    th = tuple(float(x) for x in np.percentile(mag, pct))
    if any(a <= b for a, b in zip(th, th[1:])):
        raise MalformedLadder(f"calibrated thresholds are not strictly descending: {th}")
    return th, qty


def calibrate_min_threshold(train_signals: np.ndarray) -> float:
    """Per-signal unit c: the 10th percentile of |signal|; the rule then requires |sum| >= c * k."""
    s = np.asarray(train_signals, dtype=np.float64).ravel()
    s = s[np.isfinite(s)]
    if s.size == 0:
        raise TooFewTrades("no finite training signals to calibrate on")
    return float(np.percentile(np.abs(s), MIN_THRESHOLD_PCT))


# ---------------------------------------------------------------------------
# reporting


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateColumn("zero-variance column")
    return float(dx @ dy) / (sx * sy)


def _safe_corr(x, y) -> float | None:
    try:
        return pearson(x, y)
    except DegenerateColumn:
        return None


def correlation_table(ledger: TradeLedger, horizons: Sequence[int] | None = None):
    """Pearson correlations among per-trade pnl and the per-horizon signals at entry.

    Returns ``(labels, matrix)``; labels are ``pnl`` then ``h<horizon>``.
    """
    if len(ledger) < 2:
        raise TooFewTrades("correlations need at least 2 trades")
    all_h = ledger.config.signal_horizons
    hs = all_h if horizons is None else tuple(int(h) for h in horizons)
    sig = ledger.signal_columns()
    cols = [ledger.pnl]
    for h in hs:
        if h not in all_h:
            raise MissingModel(f"ledger has no signal for horizon {h}")
        cols.append(sig[:, all_h.index(h)])
    labels = ["pnl"] + [f"h{h}" for h in hs]
    k = len(cols)
    mat = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            mat[i, j] = mat[j, i] = pearson(cols[i], cols[j])
    for i in range(k):
        pearson(cols[i], cols[i])       # raises on a zero-variance column
    return labels, mat


def magnitude_pnl_profile(ledger: TradeLedger, batch: int = 200) -> np.ndarray:
    """Correlation of magnitude and pnl within consecutive batches of trades sorted by magnitude.

    The final partial batch is dropped; a batch with constant magnitude or
    pnl yields nan.
    """
    if batch < 2:
        raise ValueError("batch must be >= 2")
    n = len(ledger)
    if n < batch:
        raise TooFewTrades(f"{n} trades < batch of {batch}")
    mag = ledger.magnitudes
    pnl = ledger.pnl
    order = np.argsort(mag, kind="stable")
    out = np.empty(n // batch)
    for b in range(n // batch):
        sel = order[b * batch : (b + 1) * batch]
        r = _safe_corr(mag[sel], pnl[sel])
        out[b] = np.nan if r is None else r
    return out


def winning_ratio_by_magnitude(ledger: TradeLedger, bins: int | Sequence[float] = 5) -> list:
    """Win ratio per magnitude bin.

    ``bins`` is a bin count (edges at magnitude quantiles) or explicit
    ascending edges.  Each entry is ``{lo, hi, n, wins, ratio}``; empty bins
    get ratio nan.  The last bin is closed on the right.
    """
    if len(ledger) == 0:
        raise TooFewTrades("empty ledger")
    mag = ledger.magnitudes
    pnl = ledger.pnl
    if np.ndim(bins) == 0:
        edges = np.quantile(mag, np.linspace(0.0, 1.0, int(bins) + 1))
    else:
        edges = np.asarray(bins, dtype=np.float64)
    nb = edges.size - 1
    idx = np.clip(np.searchsorted(edges, mag, side="right") - 1, 0, nb - 1)
    out = []
    for b in range(nb):
        sel = idx == b
        n = int(sel.sum())
        wins = int(np.count_nonzero(pnl[sel] > 0))
        out.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "n": n, "wins": wins,
                    "ratio": wins / n if n else float("nan")})
    return out


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["final_pnl", "trade_count", "discarded_trades", "win_ratio", "pnl_std",
                 "signal_horizons", "main_horizon", "signal_pnl_correlation", "config"],
    "properties": {
        "final_pnl": {"type": "number"},
        "trade_count": {"type": "integer", "minimum": 0},
        "discarded_trades": {"type": "integer", "minimum": 0},
        "win_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "pnl_std": {"type": "number", "minimum": 0},
        "signal_horizons": {"type": "array", "items": {"type": "integer"}},
        "main_horizon": {"type": "integer"},
        "signal_pnl_correlation": {"type": "object",
                                   "additionalProperties": {"type": ["number", "null"]}},
        "config": {"type": "object"},
    },
}
