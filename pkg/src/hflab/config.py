"""INI run configuration with command-line overrides.

Sections and keys (all optional unless a subcommand needs them)::

    [run]       seed, out_dir, verbosity
    [data]      raw, stream, features, mid_mode, synth_n, synth_snr
    [model]     kind, lookback, d_model, heads, head_dim, ffn_dim, encoder_layers,
                decoder_hidden, lstm_hidden, lstm_layers, loss, quantiles, ablation
    [train]     epochs, batch_size, learning_rate, weight_decay, patience,
                train_frac, val_frac, dtype, max_batches_per_epoch
    [backtest]  stream, checkpoints, main_horizon, strategy, signals, delay_ticks,
                trade_qty, slippage_rate, sizing, min_threshold
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from hflab.errors import ConfigError, HFLabError
from hflab.models import ModelSpec, build_variant, hfformer_spec, lstm_spec
from hflab.train import TrainConfig, default_train_config

SECTIONS = ("run", "data", "model", "train", "backtest")

_MODEL_INT = {"lookback", "d_model", "heads", "ffn_dim", "encoder_layers", "decoder_hidden",
              "lstm_hidden", "lstm_layers"}
_TRAIN_INT = {"epochs", "batch_size", "patience", "max_batches_per_epoch"}
_TRAIN_FLOAT = {"learning_rate", "weight_decay", "train_frac", "val_frac"}


class RunConfig:
    """Parsed INI sections; ``get`` applies overrides first."""

    def __init__(self, sections: dict | None = None, base_dir: Path | None = None):
        self.sections = {s: {} for s in SECTIONS}
        for s, kv in (sections or {}).items():
            self.sections.setdefault(s, {}).update(kv)
        self.base_dir = base_dir or Path.cwd()

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        unknown = [s for s in cp.sections() if s not in SECTIONS]
        if unknown:
            raise ConfigError(f"{p}: unknown section(s) {unknown}")
        return cls({s: dict(cp[s]) for s in cp.sections()}, p.parent)

    def set(self, section: str, key: str, value) -> None:
        if value is not None:
            self.sections[section][key] = str(value)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def get_int(self, section: str, key: str, default=None):
        v = self.get(section, key)
        if v is None or v == "":
            return default
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}") from exc

    def get_float(self, section: str, key: str, default=None):
        v = self.get(section, key)
        if v is None or v == "":
            return default
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number, got {v!r}") from exc

    def get_path(self, section: str, key: str, default=None):
        v = self.get(section, key)
        if v is None or v == "":
            return default
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def seed(self, required: bool = True):
        s = self.get_int("run", "seed")
        if s is None and required:
            raise ConfigError("a seed is required (--seed or [run] seed)")
        return s

    # -- typed views ---------------------------------------------------------
    def model_spec(self, horizon: int | None = None) -> ModelSpec:
        m = self.sections["model"]
        kind = m.get("kind", "hfformer")
        h = horizon if horizon is not None else self.get_int("model", "horizon", 1)
        kw = {}
        for k in _MODEL_INT:
            if k in m:
                kw[k] = self.get_int("model", k)
        if "head_dim" in m:
            kw["head_dim"] = None if m["head_dim"].strip().lower() in ("", "none") else self.get_int("model", "head_dim")
        if "loss" in m:
            kw["loss"] = m["loss"]
        if m.get("quantiles"):
            try:
                kw["quantiles"] = tuple(float(q) for q in m["quantiles"].split(","))
            except ValueError as exc:
                raise ConfigError(f"[model] quantiles must be comma-separated numbers: {m['quantiles']!r}") from exc
        try:
            if kind == "hfformer":
                spec = hfformer_spec(horizon=h, **kw)
            elif kind == "lstm":
                spec = lstm_spec(horizon=h, **kw)
            else:
                raise ConfigError(f"[model] kind must be hfformer or lstm, got {kind!r}")
            ab = m.get("ablation", "").strip()
            if ab and ab != "none":
                spec = build_variant(spec, ab)
        except ConfigError:
            raise
        except (HFLabError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model configuration: {exc}") from exc
        return spec

    def train_config(self, kind: str) -> TrainConfig:
        t = self.sections["train"]
        kw = {}
        for k in _TRAIN_INT:
            if k in t:
                kw[k] = self.get_int("train", k)
        for k in _TRAIN_FLOAT:
            if k in t:
                kw[k] = self.get_float("train", k)
        if "dtype" in t:
            kw["dtype"] = t["dtype"]
        seed = self.seed()
        try:
            return default_train_config(kind, seed=seed, **kw)
        except (HFLabError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training configuration: {exc}") from exc
