"""Training loop, grid search, temporal splits and evaluation metrics."""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from hflab.errors import (
    DegenerateTargets,
    DivergedTraining,
    EmptyClass,
    EmptySplit,
    HFLabError,
    InvalidSpec,
    NonFiniteGradient,
    ShapeMismatch,
)
from hflab.features import WindowDataset
from hflab.models import ModelSpec, TrainedModel, forward, init_params
from hflab.nn import functional as F
from hflab.nn.optim import AdamWState, adamw_step
from hflab.nn.tensor import Tensor, no_grad

# per-kind defaults: (learning rate, batch size)
KIND_DEFAULTS = {"hfformer": (0.04, 256), "lstm": (0.001, 64)}
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.04
    weight_decay: float = 0.01
    loss: str | None = None          # None: use the model spec's loss
    seed: int = 0
    patience: int = 5
    train_frac: float = 0.7
    val_frac: float = 0.15
    dtype: str = "float32"
    scale_targets: bool = True
    max_batches_per_epoch: int | None = None
    grad_clip: float | None = None       # global L2 norm bound
    warmup_steps: int = 0                # linear learning-rate warmup
    lr_decay: str = "none"               # "none" or "cosine" (to zero at the last epoch)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidSpec("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidSpec("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidSpec("learning_rate must be positive")
        if self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")
        if self.patience < 1:
            raise InvalidSpec("patience must be >= 1")
        if not (0 < self.train_frac < 1 and 0 < self.val_frac < 1 and self.train_frac + self.val_frac < 1):
            raise InvalidSpec("split fractions must be positive and leave room for a test block")
        if self.dtype not in DTYPES:
            raise InvalidSpec(f"dtype must be one of {sorted(DTYPES)}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidSpec("grad_clip must be positive")
        if self.lr_decay not in ("none", "cosine"):
            raise InvalidSpec(f"unknown lr_decay {self.lr_decay!r}")
        if self.warmup_steps < 0:
            raise InvalidSpec("warmup_steps must be >= 0")
        if self.loss is not None and self.loss not in ("mse", "mae", "quantile"):
            raise InvalidSpec(f"unknown loss {self.loss!r}")


def default_train_config(kind: str, **overrides) -> TrainConfig:
    """Training defaults for a model kind (hfformer: lr 0.04 / batch 256; lstm: lr 0.001 / batch 64)."""
    if kind not in KIND_DEFAULTS:
        raise InvalidSpec(f"unknown model kind {kind!r}")
    lr, bs = KIND_DEFAULTS[kind]
    kw = {"learning_rate": lr, "batch_size": bs}
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# splits


def temporal_split(ds: WindowDataset, train_frac: float = 0.7, val_frac: float = 0.15,
                   embargo: int | None = None):
    """Contiguous train / val / test blocks of windows ordered by end index.

    ``embargo`` windows (default: the horizon) are dropped after each block so
    that no training target overlaps the first validation window.
    """
    n = len(ds)
    gap = ds.tau if embargo is None else int(embargo)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    tr = np.arange(0, n_train)
    va = np.arange(n_train + gap, min(n_train + n_val, n))
    te = np.arange(n_train + n_val + gap, n)
    parts = []
    for name, sel in (("train", tr), ("val", va), ("test", te)):
        if sel.size == 0:
            raise EmptySplit(f"{name} split is empty ({n} windows)")
        parts.append(ds.subset(sel))
    return tuple(parts)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TrainedModel
    curves: list            # [(epoch, train_loss, val_loss)]
    best_epoch: int
    seconds: float

    def write_curves(self, path) -> None:
        write_loss_curves(self.curves, path)


def write_loss_curves(curves, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl, vl in curves:
            w.writerow([e, repr(float(tl)), repr(float(vl))])


def _objective(spec: ModelSpec, kind: str, pred: Tensor, y: np.ndarray) -> Tensor:
    if kind == "quantile":
        return F.quantile_loss(pred, y, spec.quantiles)
    return F.loss(kind, pred, y.reshape(-1, 1))


def _eval_loss(spec, kind, params, X, y, batch) -> float:
    total = 0.0
    with no_grad():
        for s in range(0, X.shape[0], batch):
            xb, yb = X[s : s + batch], y[s : s + batch]
            out = forward(Tensor(xb), params, spec)
            total += float(_objective(spec, kind, out, yb).data) * xb.shape[0]
    return total / X.shape[0]


def _clip_(params, bound: float) -> None:
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(sq)
    if math.isfinite(norm) and norm > bound:
        k = bound / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= k


def train(spec: ModelSpec, train_set: WindowDataset, val_set: WindowDataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch AdamW with per-epoch validation and early stopping.

    Targets are divided by the training-set target std (stored as
    ``target_scale``) so the same learning rate works for every horizon.
    The returned model holds the parameters of the best validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplit("train and validation sets must be non-empty")
    if int(train_set.ends.max()) >= int(val_set.ends.min()):
        raise EmptySplit("validation windows must end strictly after every training window")
    if train_set.L != spec.lookback:
        raise ShapeMismatch(f"dataset look-back {train_set.L} != model look-back {spec.lookback}")
    kind = cfg.loss or spec.loss
    if kind != spec.loss:
        spec = replace(spec, loss=kind, quantiles=())
    dtype = DTYPES[cfg.dtype]
    t0 = time.perf_counter()

    Xtr, ytr = train_set.batch(dtype=np.float64)
    Xva, yva = val_set.batch(dtype=np.float64)
    if not (np.all(np.isfinite(ytr)) and np.all(np.isfinite(yva))):
        raise DegenerateTargets("training and validation windows need observable targets")
    scale = float(np.std(ytr)) if cfg.scale_targets else 1.0
    if not scale > 0:
        raise DegenerateTargets("training targets have zero variance")
    Xtr, Xva = Xtr.astype(dtype), Xva.astype(dtype)
    ytr, yva = (ytr / scale).astype(dtype), (yva / scale).astype(dtype)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng, dtype)
    state = AdamWState()
    best = math.inf
    best_epoch = 0
    best_params = {k: p.data.copy() for k, p in params.items()}
    best_state = None
    stale = 0
    curves = []
    n = Xtr.shape[0]
    bs = cfg.batch_size
    per_epoch = -(-n // bs)
    if cfg.max_batches_per_epoch is not None:
        per_epoch = min(per_epoch, cfg.max_batches_per_epoch)
    total_steps = per_epoch * cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        starts = range(0, n, bs)
        if cfg.max_batches_per_epoch is not None:
            starts = list(starts)[: cfg.max_batches_per_epoch]
        seen = 0
        total = 0.0
        for s in starts:
            idx = np.sort(order[s : s + bs])
            for p in params.values():
                p.grad = None
            out = forward(Tensor(Xtr[idx]), params, spec)
            lval = _objective(spec, kind, out, ytr[idx])
            val = float(lval.data)
            if not math.isfinite(val):
                raise DivergedTraining(f"non-finite training loss at epoch {epoch}")
            lval.backward()
            if cfg.grad_clip is not None:
                _clip_(params, cfg.grad_clip)
            lr = cfg.learning_rate
            if cfg.warmup_steps and state.step < cfg.warmup_steps:
                lr *= (state.step + 1) / cfg.warmup_steps
            elif cfg.lr_decay == "cosine":
                done = min(1.0, state.step / max(1, total_steps))
                lr *= 0.5 * (1.0 + math.cos(math.pi * done))
            try:
                adamw_step(params, None, state, lr, weight_decay=cfg.weight_decay)
            except NonFiniteGradient as exc:
                raise DivergedTraining(f"non-finite gradient for {exc} at epoch {epoch}") from exc
            total += val * idx.size
            seen += idx.size
        train_loss = total / seen
        val_loss = _eval_loss(spec, kind, params, Xva, yva, max(bs, 512))
        if not math.isfinite(val_loss):
            raise DivergedTraining(f"non-finite validation loss at epoch {epoch}")
        curves.append((epoch, train_loss, val_loss))
        if val_loss < best:
            best, best_epoch, stale = val_loss, epoch, 0
            best_params = {k: p.data.copy() for k, p in params.items()}
            best_state = AdamWState(state.step, {k: v.copy() for k, v in state.m.items()},
                                    {k: v.copy() for k, v in state.v.items()})
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    for k, p in params.items():
        p.data = best_params[k]
        p.grad = None
    meta = {
        "target_scale": scale,
        "best_epoch": best_epoch,
        "epochs_run": len(curves),
        "best_val_loss": best,
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
        "batch_size": bs,
        "n_train": n,
        "n_val": int(Xva.shape[0]),
    }
    model = TrainedModel(spec, params, meta, best_state)
    return TrainResult(model, curves, best_epoch, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# grid search


_SPEC_FIELDS = {f.name for f in fields(ModelSpec)}
_CFG_FIELDS = {f.name for f in fields(TrainConfig)}


@dataclass
class GridResult:
    best_spec: ModelSpec | None
    best_config: TrainConfig | None
    best_model: TrainedModel | None
    leaderboard: list       # dicts sorted by val loss
    failures: list          # (cell, error message)

    def write_csv(self, path) -> None:
        write_records_csv(self.leaderboard, path)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({"leaderboard": self.leaderboard,
                                          "failures": [{"cell": c, "error": e} for c, e in self.failures]},
                                         indent=2, sort_keys=True) + "\n")


def grid_search(spec: ModelSpec, grids: Mapping[str, Sequence], train_set: WindowDataset,
                val_set: WindowDataset, cfg: TrainConfig) -> GridResult:
    """Train every combination of ``grids`` (keys are ModelSpec or TrainConfig fields).

    Every cell uses the same seed and splits.  Cells that raise an hflab error
    are recorded as failures and the sweep continues.
    """
    keys = sorted(grids)
    for k in keys:
        if k not in _SPEC_FIELDS and k not in _CFG_FIELDS:
            raise InvalidSpec(f"{k!r} is neither a model nor a training field")
    board = []
    failures = []
    models = {}
    for combo in itertools.product(*(list(grids[k]) for k in keys)):
        cell = dict(zip(keys, combo))
        try:
            cs = replace(spec, **{k: v for k, v in cell.items() if k in _SPEC_FIELDS})
            cc = replace(cfg, **{k: v for k, v in cell.items() if k in _CFG_FIELDS})
            res = train(cs, train_set, val_set, cc)
        except HFLabError as exc:
            failures.append((cell, f"{type(exc).__name__}: {exc}"))
            continue
        rec = dict(cell)
        rec["val_loss"] = float(res.model.train_meta["best_val_loss"])
        rec["best_epoch"] = res.best_epoch
        rec["seconds"] = round(res.seconds, 3)
        key = len(board)
        rec["cell"] = key
        models[key] = (cs, cc, res.model)
        board.append(rec)
    board.sort(key=lambda r: (r["val_loss"], r["cell"]))
    for rank, rec in enumerate(board, 1):
        rec["rank"] = rank
    if not board:
        return GridResult(None, None, None, board, failures)
    cs, cc, m = models[board[0]["cell"]]
    return GridResult(cs, cc, m, board, failures)


# ---------------------------------------------------------------------------
# metrics


def _pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeMismatch(f"{p.shape[0]} predictions vs {y.shape[0]} targets")
    if p.size == 0:
        raise ShapeMismatch("metrics need at least one sample")
    return p, y


def r2_score(preds, targets, baseline: str = "mean") -> float:
    """Out-of-sample R^2 = 1 - SSE / SST.

    ``baseline="mean"`` measures SST around the test-set mean; ``"zero"``
    around 0 (the zero-return predictor).
    """
    p, y = _pair(preds, targets)
    if baseline == "mean":
        ref = y.mean()
    elif baseline == "zero":
        ref = 0.0
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    sst = float(np.sum((y - ref) ** 2))
    if sst == 0.0:
        raise DegenerateTargets("targets have zero total variance")
    return 1.0 - float(np.sum((y - p) ** 2)) / sst


def classification_ratios(preds, targets) -> dict:
    """True-positive rates of the buy (>0) and sell (<0) classes; zero targets are ignored."""
    p, y = _pair(preds, targets)
    pos, neg = y > 0, y < 0
    if not pos.any():
        raise EmptyClass("no positive targets (buy class is empty)")
    if not neg.any():
        raise EmptyClass("no negative targets (sell class is empty)")
    return {
        "buy_tpr": float(np.count_nonzero(pos & (p > 0)) / np.count_nonzero(pos)),
        "sell_tpr": float(np.count_nonzero(neg & (p < 0)) / np.count_nonzero(neg)),
    }


def weighted_classification_ratios(preds, targets) -> dict:
    """Like :func:`classification_ratios` but each sample weighs |target|."""
    p, y = _pair(preds, targets)
    pos, neg = y > 0, y < 0
    if not pos.any():
        raise EmptyClass("no positive targets (buy class is empty)")
    if not neg.any():
        raise EmptyClass("no negative targets (sell class is empty)")
    w = np.abs(y)
    return {
        "buy_w": float(w[pos & (p > 0)].sum() / w[pos].sum()),
        "sell_w": float(w[neg & (p < 0)].sum() / w[neg].sum()),
    }


@dataclass
class EvalReport:
    horizon: int
    r2: float
    r2_zero: float
    buy_tpr: float
    sell_tpr: float
    buy_w: float
    sell_w: float
    n_samples: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(model: TrainedModel, ds: WindowDataset) -> EvalReport:
    X, y = ds.batch(dtype=np.float64)
    pred = model.point_forecast(X)
    cr = classification_ratios(pred, y)
    wr = weighted_classification_ratios(pred, y)
    return EvalReport(
        horizon=model.spec.horizon,
        r2=r2_score(pred, y),
        r2_zero=r2_score(pred, y, baseline="zero"),
        n_samples=int(y.size),
        **cr,
        **wr,
    )


def write_records_csv(records: Sequence[Mapping], path) -> None:
    """Write a list of flat dicts as CSV with the union of keys (first-seen order)."""
    cols: "OrderedDict[str, None]" = OrderedDict()
    for r in records:
        for k in r:
            cols.setdefault(k, None)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(cols), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_reports(reports: Sequence[EvalReport], csv_path=None, json_path=None) -> None:
    recs = [r.as_dict() for r in reports]
    if csv_path is not None:
        write_records_csv(recs, csv_path)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(recs, indent=2, sort_keys=True) + "\n")
