"""HFformer, the stacked-LSTM baseline and the ablation variants.

Models are plain functions of a parameter dict (name -> Tensor) and a
:class:`ModelSpec`; :class:`TrainedModel` bundles the three for inference and
checkpointing.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from hflab.errors import CheckpointError, InvalidAblation, InvalidSpec, ShapeMismatch
from hflab.features import LAG_COL, N_FEATURES
from hflab.nn import functional as F
from hflab.nn.checkpoint import dump_kv, load_checkpoint, parse_kv, save_checkpoint
from hflab.nn.optim import AdamWState
from hflab.nn.tensor import Tensor, as_tensor, concat, getitem, no_grad, reshape

KINDS = ("hfformer", "lstm")
LOSSES = ("mse", "mae", "quantile")
DEFAULT_QUANTILES = (0.1, 0.5, 0.9)
ABLATIONS = ("no_spiking", "with_pe", "transformer_decoder")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "hfformer"
    n_features: int = N_FEATURES
    lookback: int = 100
    horizon: int = 1
    # hfformer
    d_model: int = 64
    heads: int = 6
    head_dim: int | None = 11
    ffn_dim: int = 256
    encoder_layers: int = 1
    decoder_hidden: int = 64
    # lstm
    lstm_hidden: int = 16
    lstm_layers: int = 5
    # objective
    loss: str = "mse"
    quantiles: tuple = ()
    # ablation flags (hfformer only)
    use_positional_encoding: bool = False
    use_transformer_decoder: bool = False
    plain_prelu: bool = False
    spike_order: str = "prelu_first"
    surrogate_temp: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}")
        if self.loss not in LOSSES:
            raise InvalidSpec(f"unknown loss {self.loss!r}")
        if self.loss == "quantile" and not self.quantiles:
            object.__setattr__(self, "quantiles", DEFAULT_QUANTILES)
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.loss != "quantile" and self.quantiles:
            raise InvalidSpec("quantiles are only used with loss=quantile")
        if any(not 0 < q < 1 for q in self.quantiles):
            raise InvalidSpec(f"quantiles must lie in (0, 1): {self.quantiles}")
        if self.horizon < 1:
            raise InvalidSpec(f"horizon must be >= 1, got {self.horizon}")
        if self.lookback < 1:
            raise InvalidSpec(f"lookback must be >= 1, got {self.lookback}")
        if self.kind == "lstm" and (self.use_positional_encoding or self.use_transformer_decoder or self.plain_prelu):
            raise InvalidSpec("ablation flags are only valid for hfformer")
        if self.spike_order not in ("prelu_first", "spike_first"):
            raise InvalidSpec(f"unknown spike_order {self.spike_order!r}")
        if self.kind == "hfformer":
            F.head_width(self.d_model, self.heads, self.head_dim)
            if self.use_positional_encoding and self.d_model % 2:
                raise InvalidSpec("positional encoding needs an even d_model")
        if not self.surrogate_temp > 0:
            raise InvalidSpec("surrogate_temp must be positive")

    @property
    def n_outputs(self) -> int:
        return len(self.quantiles) if self.loss == "quantile" else 1

    @property
    def attn_width(self) -> int:
        return self.heads * F.head_width(self.d_model, self.heads, self.head_dim)

    # -- key-value text form -------------------------------------------------
    def to_kv(self) -> str:
        d = asdict(self)
        d["quantiles"] = ",".join(repr(q) for q in self.quantiles)
        d["head_dim"] = "" if self.head_dim is None else self.head_dim
        return dump_kv(d)

    @classmethod
    def from_kv(cls, text: str | Mapping[str, str]) -> "ModelSpec":
        raw = parse_kv(text) if isinstance(text, str) else dict(text)
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            kw[f.name] = _coerce(f.name, raw[f.name])
        return cls(**kw)


_INT_FIELDS = {"n_features", "lookback", "horizon", "d_model", "heads", "ffn_dim", "encoder_layers",
               "decoder_hidden", "lstm_hidden", "lstm_layers"}
_BOOL_FIELDS = {"use_positional_encoding", "use_transformer_decoder", "plain_prelu"}


def _coerce(name: str, value):
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if name in _INT_FIELDS:
            return int(v)
        if name == "head_dim":
            return None if v in ("", "None", "none") else int(v)
        if name in _BOOL_FIELDS:
            if v.lower() in ("true", "1", "yes", "on"):
                return True
            if v.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(v)
        if name == "surrogate_temp":
            return float(v)
        if name == "quantiles":
            return tuple(float(q) for q in v.split(",") if q.strip())
    except ValueError:
        raise InvalidSpec(f"bad value for {name}: {value!r}") from None
    return v


def hfformer_spec(**kw) -> ModelSpec:
    """HFformer defaults: 64-wide single encoder block, 6 heads, 2-layer linear decoder."""
    return ModelSpec(kind="hfformer", **kw)


def lstm_spec(**kw) -> ModelSpec:
    """LSTM defaults: 5 stacked layers of 16 units."""
    kw.setdefault("head_dim", None)
    return ModelSpec(kind="lstm", **kw)


def build_variant(base: ModelSpec, ablation: str) -> ModelSpec:
    if base.kind != "hfformer":
        raise InvalidAblation(f"ablations apply to hfformer specs, not {base.kind!r}")
    if ablation == "no_spiking":
        return replace(base, plain_prelu=True)
    if ablation == "with_pe":
        return replace(base, use_positional_encoding=True)
    if ablation == "transformer_decoder":
        return replace(base, use_transformer_decoder=True)
    raise InvalidAblation(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")


# ---------------------------------------------------------------------------
# parameters


def _attn_shapes(prefix: str, d: int, width: int):
    return [
        (prefix + "w_q", (d, width)), (prefix + "b_q", (width,)),
        (prefix + "w_k", (d, width)), (prefix + "b_k", (width,)),
        (prefix + "w_v", (d, width)), (prefix + "b_v", (width,)),
        (prefix + "w_o", (width, d)), (prefix + "b_o", (d,)),
    ]


def _ffn_shapes(prefix: str, spec: ModelSpec):
    d, ff = spec.d_model, spec.ffn_dim
    out = [(prefix + "w1", (d, ff)), (prefix + "b1", (ff,)), (prefix + "prelu", (1,))]
    if not spec.plain_prelu:
        out.append((prefix + "threshold", (1,)))
    out += [(prefix + "w2", (ff, d)), (prefix + "b2", (d,))]
    return out


def _norm_shapes(prefix: str, d: int):
    return [(prefix + "gain", (d,)), (prefix + "bias", (d,))]


def param_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple]":
    shapes: list = []
    if spec.kind == "lstm":
        d_in = spec.n_features
        H = spec.lstm_hidden
        for k in range(spec.lstm_layers):
            shapes += [(f"lstm.{k}.w", (H + d_in, 4 * H)), (f"lstm.{k}.b", (4 * H,))]
            d_in = H
        shapes += [("head.w", (H, spec.n_outputs)), ("head.b", (spec.n_outputs,))]
        return OrderedDict(shapes)

    d, width = spec.d_model, spec.attn_width
    shapes += [("embed.w", (spec.n_features, d)), ("embed.b", (d,))]
    for i in range(spec.encoder_layers):
        p = f"encoder.{i}."
        shapes += _attn_shapes(p + "attn.", d, width)
        shapes += _norm_shapes(p + "norm1.", d)
        shapes += _ffn_shapes(p + "ffn.", spec)
        shapes += _norm_shapes(p + "norm2.", d)
    if spec.use_transformer_decoder:
        p = "tdec."
        shapes += [(p + "embed.w", (1, d)), (p + "embed.b", (d,))]
        shapes += _attn_shapes(p + "self_attn.", d, width)
        shapes += _norm_shapes(p + "norm1.", d)
        shapes += _attn_shapes(p + "cross_attn.", d, width)
        shapes += _norm_shapes(p + "norm2.", d)
        shapes += _ffn_shapes(p + "ffn.", spec)
        shapes += _norm_shapes(p + "norm3.", d)
    shapes += [
        ("decoder.w1", (spec.lookback * d, spec.decoder_hidden)), ("decoder.b1", (spec.decoder_hidden,)),
        ("decoder.prelu", (1,)),
        ("decoder.w2", (spec.decoder_hidden, spec.n_outputs)), ("decoder.b2", (spec.n_outputs,)),
    ]
    return OrderedDict(shapes)


def param_count(spec: ModelSpec) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(spec).values()))


def init_params(spec: ModelSpec, seed: int | np.random.Generator = 0, dtype=np.float64) -> "OrderedDict[str, Tensor]":
    """Seeded initialisation.

    Weights and biases of linear/attention maps: U(+-1/sqrt(fan_in)).  LSTM
    weights and biases U(+-1/sqrt(H)); no forget-gate offset, which in a deep
    stack would wash out the most recent input at every layer.  Layer
    norms start at gain 1 / bias 0, PReLU slopes at 0.25, spike thresholds at 0.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = param_shapes(spec)
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    fan_in = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("w") and len(shape) == 2:
            fan_in[name.rsplit(".", 1)[0] + "." + leaf.replace("w", "b", 1)] = shape[0]
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("lstm."):
            H = spec.lstm_hidden
            arr = rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(H)
        elif leaf == "gain":
            arr = np.ones(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        elif leaf == "prelu":
            arr = np.full(shape, 0.25)
        elif leaf == "threshold":
            arr = np.zeros(shape)
        elif len(shape) == 2:
            arr = rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(shape[0])
        else:
            bound = 1.0 / math.sqrt(fan_in.get(name, shape[0]))
            arr = rng.uniform(-bound, bound, size=shape)
        out[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True, name=name)
    return out


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell_step(x_t, h_prev, c_prev, w, b):
    """One LSTM step built from primitive ops.

    ``w`` is (H + d_in, 4H) acting on ``[h_prev, x_t]``; gate blocks are
    [forget | input | output | candidate].  Uses h_t = o * tanh(c_t).
    """
    x_t, h_prev, c_prev, w = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev), as_tensor(w)
    if x_t.ndim == 1 and h_prev.ndim == 1 and c_prev.ndim == 1:
        h, c = lstm_cell_step(reshape(x_t, (1, -1)), reshape(h_prev, (1, -1)), reshape(c_prev, (1, -1)), w, b)
        return reshape(h, (-1,)), reshape(c, (-1,))
    H = h_prev.shape[-1]
    if w.shape != (H + x_t.shape[-1], 4 * H) or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"lstm cell: x{x_t.shape} h{h_prev.shape} c{c_prev.shape} w{w.shape}")
    z = F.linear(concat([h_prev, x_t], axis=-1), w, b)
    f = F.sigmoid(z[..., :H])
    i = F.sigmoid(z[..., H : 2 * H])
    o = F.sigmoid(z[..., 2 * H : 3 * H])
    g = F.tanh(z[..., 3 * H :])
    c = f * c_prev + i * g
    h = o * F.tanh(c)
    return h, c


def _as_batch(window):
    x = as_tensor(window)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (L, F) or (B, L, F) input, got {x.shape}")
    return x, False


def lstm_forward(window, params: Mapping[str, Tensor], spec: ModelSpec) -> Tensor:
    """Stacked LSTM over the window; final hidden state -> linear head. Returns (B, n_out)."""
    x, _ = _as_batch(window)
    if x.shape[-1] != spec.n_features:
        raise ShapeMismatch(f"expected {spec.n_features} features, got {x.shape[-1]}")
    h = x
    for k in range(spec.lstm_layers):
        h = F.lstm_layer(h, params[f"lstm.{k}.w"], params[f"lstm.{k}.b"])
    last = getitem(h, (slice(None), -1, slice(None)))
    return F.linear(last, params["head.w"], params["head.b"])


# ---------------------------------------------------------------------------
# HFformer


def _ffn(h, params, prefix: str, spec: ModelSpec, surrogate: bool):
    z = F.linear(h, params[prefix + "w1"], params[prefix + "b1"])
    a = params[prefix + "prelu"]
    if spec.plain_prelu:
        z = F.prelu(z, a)
    elif spec.spike_order == "prelu_first":
        z = F.spiking_activation(F.prelu(z, a), params[prefix + "threshold"], spec.surrogate_temp, surrogate)
    else:
        z = F.prelu(F.spiking_activation(z, params[prefix + "threshold"], spec.surrogate_temp, surrogate), a)
    return F.linear(z, params[prefix + "w2"], params[prefix + "b2"])


def encoder_block(h, params, prefix: str, spec: ModelSpec, surrogate: bool = True, mask=None):
    att = F.multi_head_attention(h, params, spec.heads, prefix + "attn.", mask=mask)
    h = F.add_norm(h, att, params[prefix + "norm1.gain"], params[prefix + "norm1.bias"])
    ff = _ffn(h, params, prefix + "ffn.", spec, surrogate)
    return F.add_norm(h, ff, params[prefix + "norm2.gain"], params[prefix + "norm2.bias"])


def _decoder_block(e, memory, params, spec: ModelSpec, surrogate: bool):
    p = "tdec."
    L = e.shape[1]
    att = F.multi_head_attention(e, params, spec.heads, p + "self_attn.", mask=F.causal_mask(L))
    e = F.add_norm(e, att, params[p + "norm1.gain"], params[p + "norm1.bias"])
    cross = F.multi_head_attention(e, params, spec.heads, p + "cross_attn.", memory=memory)
    e = F.add_norm(e, cross, params[p + "norm2.gain"], params[p + "norm2.bias"])
    ff = _ffn(e, params, p + "ffn.", spec, surrogate)
    return F.add_norm(e, ff, params[p + "norm3.gain"], params[p + "norm3.bias"])


def hfformer_forward(window, params: Mapping[str, Tensor], spec: ModelSpec, surrogate: bool = True) -> Tensor:
    """Embed -> encoder block(s) -> flatten -> Linear/PReLU/Linear.  Returns (B, n_out).

    With ``use_transformer_decoder`` the lagged-return column is embedded and
    run through a causally-masked decoder block attending to the encoder
    output; the linear head then reads the decoder states.
    """
    if spec.kind != "hfformer":
        raise InvalidSpec("hfformer_forward needs an hfformer spec")
    x, _ = _as_batch(window)
    B, L, nf = x.shape
    if nf != spec.n_features or L != spec.lookback:
        raise ShapeMismatch(f"expected (*, {spec.lookback}, {spec.n_features}) input, got {x.shape}")
    h = F.linear(x, params["embed.w"], params["embed.b"])
    pe = F.sinusoidal_pe(L, spec.d_model) if spec.use_positional_encoding else None
    if pe is not None:
        h = h + pe
    for i in range(spec.encoder_layers):
        h = encoder_block(h, params, f"encoder.{i}.", spec, surrogate)
    if spec.use_transformer_decoder:
        lagged = Tensor(np.ascontiguousarray(x.data[:, :, LAG_COL : LAG_COL + 1]))
        e = F.linear(lagged, params["tdec.embed.w"], params["tdec.embed.b"])
        if pe is not None:
            e = e + pe
        h = _decoder_block(e, h, params, spec, surrogate)
    flat = reshape(h, (B, L * spec.d_model))
    z = F.prelu(F.linear(flat, params["decoder.w1"], params["decoder.b1"]), params["decoder.prelu"])
    return F.linear(z, params["decoder.w2"], params["decoder.b2"])


def forward(window, params: Mapping[str, Tensor], spec: ModelSpec, surrogate: bool = True) -> Tensor:
    if spec.kind == "lstm":
        return lstm_forward(window, params, spec)
    return hfformer_forward(window, params, spec, surrogate)


# ---------------------------------------------------------------------------
# trained model


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: "OrderedDict[str, Tensor]"
    train_meta: dict = field(default_factory=dict)
    optim_state: AdamWState | None = None

    def __post_init__(self):
        shapes = param_shapes(self.spec)
        if list(shapes) != list(self.params):
            raise CheckpointError("parameter names do not match the model spec")
        for name, shape in shapes.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def target_scale(self) -> float:
        return float(self.train_meta.get("target_scale", 1.0))

    def predict(self, X: np.ndarray, batch_size: int = 512, dtype=None) -> np.ndarray:
        """Raw model outputs in target units: (N, n_out)."""
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        dtype = dtype or self.params[next(iter(self.params))].dtype
        outs = []
        with no_grad():
            for s in range(0, X.shape[0], batch_size):
                xb = Tensor(X[s : s + batch_size].astype(dtype, copy=False))
                outs.append(forward(xb, self.params, self.spec).data)
        if not outs:
            return np.zeros((0, self.spec.n_outputs))
        return np.concatenate(outs, axis=0).astype(np.float64) * self.target_scale

    def point_forecast(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Scalar log-return forecast per window (the median column in quantile mode)."""
        out = self.predict(X, batch_size)
        if self.spec.loss == "quantile":
            qs = np.asarray(self.spec.quantiles)
            return out[:, int(np.argmin(np.abs(qs - 0.5)))]
        return out[:, 0]

    def save(self, path, with_optimizer: bool = True) -> None:
        meta = {k: self.train_meta[k] for k in sorted(self.train_meta)}
        save_checkpoint(path, self.spec.to_kv(), {k: p.data for k, p in self.params.items()}, meta,
                        self.optim_state if with_optimizer else None)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "TrainedModel":
        ck = load_checkpoint(path)
        spec = ModelSpec.from_kv(ck.spec_text)
        params = OrderedDict(
            (k, Tensor(np.ascontiguousarray(v, dtype=dtype), requires_grad=True, name=k)) for k, v in ck.params.items()
        )
        meta = {}
        for k, v in ck.meta.items():
            try:
                meta[k] = int(v) if v.lstrip("-").isdigit() else float(v)
            except ValueError:
                meta[k] = v
        return cls(spec, params, meta, ck.optim)
