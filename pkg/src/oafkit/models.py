"""Architecture variants (baseline, onset stack, Onsets-and-Frames and its
highway / dilation / attention / L2-time / speech modifications) and losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import InvalidConfig, ShapeError
from .layers import (
    BiLSTM,
    ConvStack,
    DilatedBlock,
    FCSigmoid,
    HighwayConv,
    Linear,
    Module,
    SelfAttention,
)

VARIANTS = (
    "baseline",
    "baseline_onset",
    "oaf",
    "oaf_highway",
    "oaf_dilation",
    "oaf_highway_dilation",
    "oaf_attention",
    "oaf_l2time",
    "speech",
)

# command-line spelling -> variant
ALIASES = {
    "baseline": "baseline",
    "b+o": "baseline_onset",
    "oaf": "oaf",
    "oaf+h": "oaf_highway",
    "oaf+d": "oaf_dilation",
    "oaf+h+d": "oaf_highway_dilation",
    "oaf+a": "oaf_attention",
    "oaf-l2": "oaf_l2time",
    "speech": "speech",
}

TABLE_LABELS = {
    "baseline": "baseline",
    "baseline_onset": "B+O",
    "oaf": "OaF",
    "oaf_highway": "OaF+H",
    "oaf_dilation": "OaF+D",
    "oaf_highway_dilation": "OaF+H+D",
    "oaf_attention": "OaF+A",
    "oaf_l2time": "OaF-L2",
    "speech": "speech",
}

HEADS = {
    "baseline": ("frame",),
    "baseline_onset": ("onset", "frame"),
    "oaf": ("onset", "offset", "frame", "velocity"),
    "oaf_highway": ("onset", "offset", "frame", "velocity"),
    "oaf_dilation": ("onset", "offset", "frame", "velocity"),
    "oaf_highway_dilation": ("onset", "offset", "frame", "velocity"),
    "oaf_attention": ("onset", "offset", "frame", "velocity"),
    "oaf_l2time": ("frame", "onset_time", "offset_time"),
    "speech": ("onset", "offset", "frame"),
}

PROB_HEADS = ("onset", "offset", "frame")
ALL_HEADS = ("onset", "offset", "frame", "velocity", "onset_time", "offset_time")


def resolve_variant(name: str) -> str:
    key = name.strip().lower()
    if key in VARIANTS:
        return key
    if key in ALIASES:
        return ALIASES[key]
    raise InvalidConfig(f"unknown variant {name!r}; choose from {', '.join(ALIASES)}")


@dataclass
class ModelConfig:
    variant: str = "oaf"
    K: int = 256
    P: int = 88
    n_mels: int = 229
    conv1: int = 48
    conv2: int = 96
    dropout: float = 0.25
    # initial output probability of sigmoid heads; 0 keeps the uniform bias init
    prior: float = 0.01
    # 1: standardise each input clip to zero mean / unit variance (one scalar pair per clip)
    normalize: int = 1

    def __post_init__(self):
        self.variant = resolve_variant(self.variant)
        if self.P < 1:
            raise InvalidConfig("P must be >= 1")
        if self.K < 2 or self.K % 2:
            raise InvalidConfig(f"K must be a positive even number, got {self.K}")
        if self.n_mels < 4:
            raise InvalidConfig("n_mels must be >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if not 0.0 <= self.prior < 1.0:
            raise InvalidConfig("prior must lie in [0, 1)")

    @property
    def highway(self):
        return self.variant in ("oaf_highway", "oaf_highway_dilation")

    @property
    def dilation(self):
        return self.variant in ("oaf_dilation", "oaf_highway_dilation")

    @property
    def attention(self):
        return self.variant == "oaf_attention"

    @property
    def heads(self):
        return HEADS[self.variant]

    def to_header(self) -> dict:
        return {f"model.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in header:
                kw[f.name] = header[key] if f.type == "str" else (
                    float(header[key]) if f.name in ("dropout", "prior") else int(header[key])
                )
        return cls(**kw)


@dataclass
class HeadOutputs:
    """Per-head outputs, each (batch, frames, P).  Probability heads also keep
    their logits for the loss."""

    onset: ad.Value | None = None
    offset: ad.Value | None = None
    frame: ad.Value | None = None
    velocity: ad.Value | None = None
    onset_time: ad.Value | None = None
    offset_time: ad.Value | None = None
    logits: dict | None = None

    def present(self):
        return tuple(h for h in ALL_HEADS if getattr(self, h) is not None)

    def numpy(self, index=None):
        """Plain arrays; ``index`` selects one batch item."""
        out = {}
        for h in self.present():
            arr = getattr(self, h).data
            out[h] = arr if index is None else arr[index]
        return out


class AcousticStack(Module):
    """Conv stack, optionally followed by a highway conv and a dilated block."""

    def __init__(self, cfg: ModelConfig, rng):
        self.conv = ConvStack(cfg.n_mels, cfg.K, rng, channels=(cfg.conv1, cfg.conv2), dropout=cfg.dropout)
        self.highway = HighwayConv(rng) if cfg.highway else None
        self.dilated = DilatedBlock(cfg.K, rng) if cfg.dilation else None

    def forward(self, x, train=False, rng=None):
        h = self.conv(x, train, rng)
        if self.highway is not None:
            h = self.highway(h)
        if self.dilated is not None:
            h = self.dilated(h)
        return h


class SequenceHead(Module):
    """BiLSTM, optional self-attention, then a per-frame output layer."""

    def __init__(self, n_in, cfg: ModelConfig, rng, n_out=None, sigmoid=True):
        self.rnn = BiLSTM(n_in, cfg.K, rng)
        self.attention = SelfAttention(cfg.K, rng) if cfg.attention else None
        width = 2 * cfg.K if cfg.attention else cfg.K
        n_out = cfg.P if n_out is None else n_out
        self.out = FCSigmoid(width, n_out, rng, cfg.prior or None) if sigmoid else Linear(width, n_out, rng)

    def features(self, x):
        h = self.rnn(x)
        if self.attention is not None:
            h = self.attention(h)
        return h

    def forward(self, x):
        """Pre-activation output (logits or raw regression values)."""
        h = self.features(x)
        return self.out.logits(h) if isinstance(self.out, FCSigmoid) else self.out(h)


def standardize(x, eps=1e-5):
    """Per-clip scalar mean/variance normalisation of a (batch, frames, bins) Value."""
    mu = ad.mean(ad.mean(x, axis=2, keepdims=True), axis=1, keepdims=True)
    d = x - mu
    var = ad.mean(ad.mean(d * d, axis=2, keepdims=True), axis=1, keepdims=True)
    return d / ad.power(var + eps, 0.5)


class AcousticModel(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        v = cfg.variant
        heads = cfg.heads
        if v == "baseline":
            self.frame_acoustic = AcousticStack(cfg, rng)
            self.frame_head = SequenceHead(cfg.K, cfg, rng)
            return
        if "onset" in heads:
            self.onset_acoustic = AcousticStack(cfg, rng)
            self.onset_head = SequenceHead(cfg.K, cfg, rng)
        if "offset" in heads:
            self.offset_acoustic = AcousticStack(cfg, rng)
            self.offset_head = SequenceHead(cfg.K, cfg, rng)
        if "onset_time" in heads:
            self.onset_time_acoustic = AcousticStack(cfg, rng)
            self.onset_time_head = SequenceHead(cfg.K, cfg, rng, sigmoid=False)
            self.offset_time_acoustic = AcousticStack(cfg, rng)
            self.offset_time_head = SequenceHead(cfg.K, cfg, rng, sigmoid=False)
        self.frame_acoustic = AcousticStack(cfg, rng)
        self.frame_activation = FCSigmoid(cfg.K, cfg.P, rng, cfg.prior or None)
        self.frame_head = SequenceHead(2 * cfg.P, cfg, rng)
        if "velocity" in heads:
            self.velocity_acoustic = AcousticStack(cfg, rng)
            self.velocity_out = Linear(cfg.K, cfg.P, rng)

    def forward(self, spec, train=False, rng=None) -> HeadOutputs:
        """``spec``: (batch, frames, n_mels) array/Value or a single (frames, n_mels) matrix."""
        x = spec if isinstance(spec, ad.Value) else ad.Value(np.asarray(spec))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[2] != self.cfg.n_mels:
            raise ShapeError(f"model expects (batch, frames, {self.cfg.n_mels}) input, got {x.shape}")
        x = ad.Value(x.data.astype(self._dtype(), copy=False)) if not x.requires_grad else x
        if self.cfg.normalize:
            x = standardize(x)
        heads = self.cfg.heads
        out = HeadOutputs(logits={})
        if self.cfg.variant == "baseline":
            logit = self.frame_head(self.frame_acoustic(x, train, rng))
            out.logits["frame"] = logit
            out.frame = ad.sigmoid(logit)
            return out
        if "onset" in heads:
            logit = self.onset_head(self.onset_acoustic(x, train, rng))
            out.logits["onset"] = logit
            out.onset = ad.sigmoid(logit)
        if "offset" in heads:
            logit = self.offset_head(self.offset_acoustic(x, train, rng))
            out.logits["offset"] = logit
            out.offset = ad.sigmoid(logit)
        if "onset_time" in heads:
            out.onset_time = self.onset_time_head(self.onset_time_acoustic(x, train, rng))
            out.offset_time = self.offset_time_head(self.offset_time_acoustic(x, train, rng))
            side = out.onset_time
        else:
            side = out.onset
        activation = self.frame_activation(self.frame_acoustic(x, train, rng))
        # onset information feeds the frame stack without a gradient path back
        combined = ad.concat([ad.stop_gradient(side), activation], axis=-1)
        logit = self.frame_head(combined)
        out.logits["frame"] = logit
        out.frame = ad.sigmoid(logit)
        if "velocity" in heads:
            out.velocity = self.velocity_out(self.velocity_acoustic(x, train, rng))
        return out

    def _dtype(self):
        return next(iter(self.parameters().values())).dtype

    def predict(self, spec) -> dict:
        """Eval-mode forward on one (frames, n_mels) matrix; returns numpy heads."""
        with ad.no_grad():
            return self.forward(spec, train=False).numpy(index=0)

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays: dict):
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise InvalidConfig(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if p.shape != arrays[k].shape:
                raise ShapeError(f"parameter {k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=p.dtype, copy=True)

    def save(self, path, extra_header=None):
        header = self.cfg.to_header()
        header.update(extra_header or {})
        checkpoint.save(path, self.state_dict(), header)

    @classmethod
    def load(cls, path):
        arrays, header = checkpoint.load(path)
        model = cls(ModelConfig.from_header(header))
        model.load_state_dict(arrays)
        return model, header


def build(cfg: ModelConfig, seed=0) -> AcousticModel:
    return AcousticModel(cfg, seed)


def forward(model, spec, train_flag=False, rng=None) -> HeadOutputs:
    return model.forward(spec, train=train_flag, rng=rng)


def _require(heads: HeadOutputs, names, variant):
    for n in names:
        if getattr(heads, n) is None:
            raise InvalidConfig(f"variant {variant} needs a {n} head")


def _bce(heads, name, target):
    logits = (heads.logits or {}).get(name)
    if logits is None:
        # no logits kept: invert the probabilities (clamped away from 0 and 1)
        p = np.clip(getattr(heads, name).data, 1e-7, 1 - 1e-7)
        logits = ad.Value(np.log(p) - np.log1p(-p))
    return ad.bce_with_logits(logits, target)


def loss_terms(heads: HeadOutputs, labels, variant) -> dict:
    """Named loss terms for ``variant``; ``labels`` is a LabelTensors batch."""
    variant = resolve_variant(variant)
    terms = {}
    if variant in ("baseline", "speech"):
        _require(heads, ("frame",), variant)
        terms["frame"] = _bce(heads, "frame", labels.frame_roll)
        return terms
    if variant == "oaf_l2time":
        _require(heads, ("frame", "onset_time", "offset_time"), variant)
        terms["frame"] = _bce(heads, "frame", labels.frame_roll)
        pred = ad.concat([heads.onset_time, heads.offset_time], axis=-1)
        target = np.concatenate([labels.onset_time_roll, labels.offset_time_roll], axis=-1)
        terms["time"] = ad.mse(pred, target)
        return terms
    if variant == "baseline_onset":
        _require(heads, ("onset", "frame"), variant)
        terms["onset"] = _bce(heads, "onset", labels.onset_roll)
        terms["frame"] = _bce(heads, "frame", labels.frame_roll)
        return terms
    _require(heads, ("onset", "offset", "frame", "velocity"), variant)
    terms["onset"] = _bce(heads, "onset", labels.onset_roll)
    terms["offset"] = _bce(heads, "offset", labels.offset_roll)
    terms["frame"] = _bce(heads, "frame", labels.frame_roll)
    terms["velocity"] = ad.mse(heads.velocity, labels.velocity_roll, mask=labels.onset_roll)
    return terms


def loss(heads: HeadOutputs, labels, variant) -> ad.Value:
    terms = list(loss_terms(heads, labels, variant).values())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def time_loss_split(pred_onset, pred_offset, target_onset, target_offset):
    """Share of the squared-error time loss coming from zero-target entries.

    Returns ``(zero_fraction, zero_sum, nonzero_sum)``.
    """
    pred = np.concatenate([np.asarray(pred_onset), np.asarray(pred_offset)], axis=-1)
    target = np.concatenate([np.asarray(target_onset), np.asarray(target_offset)], axis=-1)
    sq = (pred - target) ** 2
    zero = target == 0
    zero_sum = float(sq[zero].sum())
    nonzero_sum = float(sq[~zero].sum())
    total = zero_sum + nonzero_sum
    return (zero_sum / total if total > 0 else 0.0), zero_sum, nonzero_sum
