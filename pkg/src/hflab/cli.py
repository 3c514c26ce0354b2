"""``hflab`` command-line entry point.

Exit codes: 0 success, 2 I/O or input-format error, 3 numeric failure,
4 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hflab import backtest as bt
from hflab import errors as E
from hflab.config import RunConfig
from hflab.features import (
    N_FEATURES,
    WindowDataset,
    feature_table,
    read_dataset_binary,
    read_dataset_csv,
    write_dataset_binary,
    write_dataset_csv,
)
from hflab.lob import Regime, dedup_stream, gap_stats, read_stream_csv, synth_lob_stream, write_stream_csv
from hflab.models import TrainedModel
from hflab.train import evaluate, temporal_split, train, write_reports

log = logging.getLogger("hflab")

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4

_IO_ERRORS = (OSError, E.MalformedRecord, E.CrossedBook, E.UnsortedLevels, E.EmptySide, E.OutOfOrder,
              E.DatasetFormatError, E.CheckpointError, E.StreamTooShort, E.SignalStreamMismatch,
              E.ModelHorizonMismatch, E.MissingModel, E.ZeroQuantities, E.NonPositivePrice)
_NUMERIC_ERRORS = (E.DivergedTraining, E.NonFiniteGradient, E.DegenerateTargets, E.SingularRegression,
                   E.DegenerateColumn, E.EmptyClass, E.TooFewTrades, FloatingPointError)
_CONFIG_ERRORS = (E.ConfigError, E.InvalidSpec, E.InvalidAblation, E.IndivisibleHeads, E.OddDimension,
                  E.MalformedLadder, E.EmptySplit, E.InvalidRegime, E.QuantileOutOfRange)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, _NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(exc, _IO_ERRORS):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig, args) -> Path:
    d = Path(args.out_dir) if getattr(args, "out_dir", None) else cfg.get_path("run", "out_dir", Path("."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path, what: str) -> Path:
    if path is None:
        raise E.ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _horizon(cfg: RunConfig) -> int:
    h = cfg.get_int("model", "horizon", 1)
    if h < 1:
        raise E.ConfigError(f"horizon must be >= 1, got {h}")
    return h


def ckpt_name(kind: str, horizon: int) -> str:
    return f"{kind}_h{horizon}.ckpt"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> int:
    n = cfg.get_int("data", "synth_n", 20000)
    snr = cfg.get_float("data", "synth_snr", 1.0)
    seed = cfg.seed()
    out = Path(args.out or cfg.get_path("data", "raw", Path("raw.csv")))
    stream = synth_lob_stream(seed, n, Regime(signal_snr=snr))
    write_stream_csv(stream, out)
    log.info("wrote %d synthetic snapshots to %s", len(stream), out)
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args) -> int:
    src = _require(args.input or cfg.get_path("data", "raw"), "raw input")
    out = Path(args.out or cfg.get_path("data", "stream", Path("stream.csv")))
    raw = read_stream_csv(src)
    clean = dedup_stream(raw, cfg.get("data", "mid_mode", "literal"))
    write_stream_csv(clean, out)
    stats = {"rows_in": len(raw), "rows_out": len(clean), "gaps": gap_stats(clean)}
    stats_path = Path(args.stats) if args.stats else out.with_suffix(".stats.json")
    _write_json(stats_path, stats)
    log.info("ingest: %d rows in, %d rows out", len(raw), len(clean))
    return EXIT_OK


def cmd_featurize(cfg: RunConfig, args) -> int:
    src = _require(args.input or cfg.get_path("data", "stream"), "deduped stream")
    h = _horizon(cfg)
    out = Path(args.out or f"features_h{h}.bin")
    table = feature_table(read_stream_csv(src), h, cfg.get("data", "mid_mode", "literal"))
    if out.suffix == ".csv":
        write_dataset_csv(table, out)
    else:
        write_dataset_binary(table, h, out)
    log.info("featurize: %d rows at horizon %d -> %s", table.shape[0], h, out)
    return EXIT_OK


def _load_dataset(path: Path, horizon: int, lookback: int, mid_mode: str) -> WindowDataset:
    """Windows from a feature file (.bin/.csv) or a deduped stream CSV."""
    head = path.read_bytes()[:8]
    if head == b"HFLBFEAT":
        table, tau, _ = read_dataset_binary(path)
        if tau != horizon:
            raise E.ConfigError(f"{path} was featurized for horizon {tau}, not {horizon}")
        rows = table[:, :N_FEATURES]
    elif head.startswith(b"f0,"):
        rows = read_dataset_csv(path)[:, :N_FEATURES]
    else:
        rows = feature_table(read_stream_csv(path), horizon, mid_mode)[:, :N_FEATURES]
    return WindowDataset(rows, lookback, horizon)


def cmd_train(cfg: RunConfig, args) -> int:
    h = _horizon(cfg)
    spec = cfg.model_spec(h)
    tcfg = cfg.train_config(spec.kind)
    src = _require(args.input or cfg.get_path("data", "features") or cfg.get_path("data", "stream"), "training data")
    ds = _load_dataset(src, h, spec.lookback, cfg.get("data", "mid_mode", "literal"))
    tr, va, _ = temporal_split(ds, tcfg.train_frac, tcfg.val_frac)
    res = train(spec, tr, va, tcfg)
    out = _out_dir(cfg, args)
    stem = ckpt_name(spec.kind, h)[: -len(".ckpt")]
    res.model.save(out / f"{stem}.ckpt")
    res.write_curves(out / f"{stem}_curves.csv")
    write_reports([evaluate(res.model, va)], out / f"{stem}_val.csv", out / f"{stem}_val.json")
    log.info("train: %s best epoch %d of %d (%.1fs)", stem, res.best_epoch, len(res.curves), res.seconds)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ck = _require(args.checkpoint, "checkpoint")
    model = TrainedModel.load(ck)
    h = model.spec.horizon
    tcfg = cfg.train_config(model.spec.kind) if cfg.get("run", "seed") else None
    src = _require(args.input or cfg.get_path("data", "features") or cfg.get_path("data", "stream"), "evaluation data")
    ds = _load_dataset(src, h, model.spec.lookback, cfg.get("data", "mid_mode", "literal"))
    fr = (tcfg.train_frac, tcfg.val_frac) if tcfg else (0.7, 0.15)
    _, _, te = temporal_split(ds, *fr)
    out = _out_dir(cfg, args)
    stem = Path(ck).stem
    write_reports([evaluate(model, te)], out / f"{stem}_test.csv", out / f"{stem}_test.json")
    return EXIT_OK


def _load_models(ckdir: Path, kind: str, horizons) -> dict:
    models = {}
    for h in horizons:
        p = ckdir / ckpt_name(kind, h)
        if not p.exists():
            raise E.MissingModel(f"no checkpoint for horizon {h}: {p}")
        models[h] = TrainedModel.load(p)
    return models


def cmd_backtest(cfg: RunConfig, args) -> int:
    cfg.seed()
    main = cfg.get_int("backtest", "main_horizon", 28)
    strategy = cfg.get_int("backtest", "strategy", 1)
    k = cfg.get_int("backtest", "signals")
    if k is not None:
        horizons = bt.signal_count_horizons(k, main)
    else:
        if strategy not in (1, 2, 3):
            raise E.ConfigError(f"strategy must be 1, 2 or 3, got {strategy}")
        horizons = bt.strategy_horizons(strategy, main)
    sizing = cfg.get_int("backtest", "sizing", 0)
    if sizing not in (0, 2, 5):
        raise E.ConfigError(f"sizing must be 0, 2 or 5, got {sizing}")
    min_thr = cfg.get("backtest", "min_threshold", "off").strip().lower()
    if min_thr not in ("on", "off"):
        raise E.ConfigError(f"min_threshold must be on or off, got {min_thr!r}")

    stream = read_stream_csv(_require(args.input or cfg.get_path("backtest", "stream"), "backtest stream"))
    sig_file = args.signal_file or cfg.get_path("backtest", "signal_file")
    calib = None
    if sig_file:
        signals = bt.SignalMatrix.read_csv(_require(sig_file, "signal file"))
        if sizing or min_thr == "on":
            calib = signals.columns(horizons)
    else:
        ckdir = _require(args.checkpoints or cfg.get_path("backtest", "checkpoints"), "checkpoint directory")
        models = _load_models(ckdir, cfg.get("model", "kind", "hfformer"), horizons)
        signals = bt.generate_signals(models, stream, mid_mode=cfg.get("data", "mid_mode", "literal"))
        if sizing or min_thr == "on":
            train_stream = read_stream_csv(_require(cfg.get_path("data", "stream"), "training stream for calibration"))
            frac = cfg.get_float("train", "train_frac", 0.7)
            cut = train_stream[: max(1, int(len(train_stream) * frac))]
            calib = bt.generate_signals(models, cut).columns(horizons)

    kw = dict(main_horizon=main, signal_horizons=horizons,
              delay_ticks=cfg.get_int("backtest", "delay_ticks", 2),
              trade_qty=cfg.get_float("backtest", "trade_qty", 0.1),
              slippage_rate=cfg.get_float("backtest", "slippage_rate", 0.000002))
    if sizing:
        kw["sizing_thresholds"], kw["sizing_quantities"] = bt.calibrate_ladder(calib, sizing)
    if min_thr == "on":
        kw["min_threshold"] = bt.calibrate_min_threshold(calib)
    try:
        bcfg = bt.BacktestConfig(**kw)
    except E.MalformedLadder:
        raise
    except ValueError as exc:
        raise E.ConfigError(str(exc)) from exc
    ledger = bt.run_strategy(stream, signals, bcfg)
    out = _out_dir(cfg, args)
    ledger.write_csv(out / "ledger.csv")
    ledger.write_summary_json(out / "summary.json")
    ledger.write_cum_pnl_csv(out / "cum_pnl.csv")
    log.info("backtest: %d trades, final pnl %.6f", len(ledger), ledger.summary()["final_pnl"])
    return EXIT_OK


def ledger_report(path: Path) -> dict:
    ledger = bt.ledger_from_csv(path)
    s = ledger.summary()
    rep = {k: s[k] for k in ("final_pnl", "trade_count", "win_ratio", "pnl_std", "signal_horizons")}
    if len(ledger) >= 2:
        try:
            labels, mat = bt.correlation_table(ledger)
            rep["correlation"] = {"labels": labels, "matrix": mat.tolist()}
        except E.DegenerateColumn as exc:
            rep["correlation"] = {"error": str(exc)}
    if len(ledger) >= 1:
        rep["win_ratio_by_magnitude"] = bt.winning_ratio_by_magnitude(ledger, 5)
    return rep


def cmd_report(cfg: RunConfig, args) -> int:
    if not args.ledgers:
        raise E.ConfigError("report needs at least one ledger")
    paths = [_require(p, "ledger") for p in args.ledgers]
    out = _out_dir(cfg, args)
    reports = {p.stem if len(set(q.stem for q in paths)) == len(paths) else str(p): ledger_report(p) for p in paths}
    _write_json(out / "report.json", reports)
    names = list(reports)
    with open(out / "comparison.csv", "w") as fh:
        fh.write("metric," + ",".join(names) + "\n")
        for m in ("final_pnl", "trade_count", "win_ratio", "pnl_std"):
            fh.write(m + "," + ",".join(repr(reports[n][m]) for n in names) + "\n")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hflab", description="LOB forecasting and backtesting pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=("hfformer", "lstm"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--strategy", type=int, choices=(1, 2, 3))
    p.add_argument("--signals", type=int, help="number of signals centred on the main horizon")
    p.add_argument("--sizing", type=int, choices=(0, 2, 5))
    p.add_argument("--min-threshold", choices=("on", "off"))
    p.add_argument("--input", help="input file (raw CSV, stream CSV or feature file)")
    p.add_argument("--out", help="output file")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--stats", help="ingest statistics JSON path")
    p.add_argument("--checkpoint", help="checkpoint for evaluate")
    p.add_argument("--checkpoints", help="checkpoint directory for backtest")
    p.add_argument("--signal-file", help="precomputed signal matrix CSV for backtest")
    p.add_argument("--ledgers", nargs="*", help="ledger CSVs for report")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        cfg.set("run", "seed", args.seed)
        cfg.set("model", "kind", args.model)
        cfg.set("model", "horizon", args.horizon)
        cfg.set("backtest", "strategy", args.strategy)
        cfg.set("backtest", "signals", args.signals)
        cfg.set("backtest", "sizing", args.sizing)
        cfg.set("backtest", "min_threshold", args.min_threshold)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"hflab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
