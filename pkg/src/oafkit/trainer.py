"""Training loop: step-decayed Adam, per-tensor gradient clipping, and
patience/trial early stopping with best-checkpoint reloads."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataio import LabelTensors
from .decoder import decode_notes, decode_phonemes
from .errors import DivergedError, InvalidConfig, InvalidInput
from .evaluator import match_notes, per
from .frontend import AudioClip, SpectrogramConfig, featurize, log_mel
from .models import loss as model_loss

log = logging.getLogger(__name__)

CONTINUE, RELOAD_BEST, STOP = "continue", "reload_best", "stop"


@dataclass
class TrainConfig:
    base_lr: float = 6e-4
    decay_factor: float = 0.98
    decay_every: int = 10000
    clip_norm: float = 3.0
    batch_size: int = 4
    seq_len_samples: int = 327680
    max_iters: int = 500000
    eval_every: int = 1000
    max_patience: int = 10
    max_trial: int = 10
    seed: int = 0
    onset_frames: int = 2

    def validate(self, hop=512) -> "TrainConfig":
        for name in ("base_lr", "decay_factor", "decay_every", "clip_norm", "batch_size",
                     "seq_len_samples", "eval_every", "max_patience", "max_trial"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.max_iters < 0:
            raise InvalidConfig("max_iters must be >= 0")
        if self.seq_len_samples % hop:
            raise InvalidConfig(f"seq_len_samples ({self.seq_len_samples}) must be a multiple of hop ({hop})")
        return self


def lr_schedule(iteration, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def clip_gradients(params, clip_norm) -> None:
    """Rescale each parameter's gradient independently to L2 norm <= clip_norm."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        if p.grad is None:
            continue
        norm = float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2)))
        if norm > clip_norm:
            p.grad *= p.grad.dtype.type(clip_norm / norm)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.reset()

    def reset(self):
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class EarlyStopper:
    """Patience counts consecutive non-improving validations; each time it
    reaches ``max_patience`` a trial is used up (reload best, halve lr);
    running out of trials stops training."""

    max_patience: int = 10
    max_trial: int = 10
    min_delta: float = 1e-6
    best: float = -math.inf
    patience: int = 0
    trial: int = 0
    improved: bool = False

    def update(self, metric) -> str:
        if not math.isfinite(metric):
            raise InvalidInput(f"validation metric must be finite, got {metric}")
        self.improved = metric > self.best + self.min_delta
        if self.improved:
            self.best = metric
            self.patience = 0
            return CONTINUE
        self.patience += 1
        if self.patience < self.max_patience:
            return CONTINUE
        self.patience = 0
        self.trial += 1
        return STOP if self.trial >= self.max_trial else RELOAD_BEST


def early_stop_update(state: EarlyStopper, val_metric) -> str:
    return state.update(val_metric)


@dataclass
class TrainState:
    iteration: int = 0
    lr_scale: float = 1.0
    stopper: EarlyStopper = field(default_factory=EarlyStopper)
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)


@dataclass
class TrainResult:
    best_state: dict
    best_metric: float
    state: TrainState

    @property
    def history(self):
        return self.state.history

    @property
    def losses(self):
        return self.state.losses


def history_csv(history) -> str:
    if not history:
        return "iteration,loss,lr\n"
    metric_keys = [k for k in history[0] if k not in ("iteration", "loss", "lr")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", *metric_keys, "lr"])
    for row in history:
        w.writerow([row["iteration"], f"{row['loss']:.6f}", *(f"{row[k]:.6f}" for k in metric_keys),
                    f"{row['lr']:.8g}"])
    return buf.getvalue()


def transcribe(model, samples, spec_cfg=SpectrogramConfig(), onset_thresh=0.5, frame_thresh=0.5):
    """Audio samples to NoteEvents (piano models) in one eval-mode pass."""
    heads = model.predict(featurize(samples, spec_cfg))
    return decode_notes(heads, onset_thresh, frame_thresh, spec_cfg.hop, spec_cfg.sample_rate)


def evaluate_model(model, examples, spec_cfg=SpectrogramConfig()) -> dict:
    """Validation metrics: note P/R/F1 for note data, PER for phoneme data."""
    if all(ex.kind == "notes" for ex in examples):
        matched = n_ref = n_est = 0
        for ex in examples:
            est = transcribe(model, ex.clip.samples, spec_cfg)
            m = match_notes(ex.events, est)
            matched, n_ref, n_est = matched + m.matched, n_ref + m.n_ref, n_est + m.n_est
        from .evaluator import Metrics

        m = Metrics.from_counts(matched, n_ref, n_est)
        return {"note_precision": m.precision, "note_recall": m.recall, "note_f1": m.f1}
    total = 0.0
    for ex in examples:
        heads = model.predict(featurize(ex.clip.samples, spec_cfg))
        hyp = [s.symbol for s in decode_phonemes(heads["frame"], spec_cfg.hop, spec_cfg.sample_rate)]
        total += per([s.symbol for s in ex.events], hyp)
    return {"per": total / len(examples)}


def _score(metrics: dict) -> float:
    return metrics["note_f1"] if "note_f1" in metrics else -metrics["per"]


class _CropSampler:
    """Hop-aligned random crops of ``seq_len_samples`` with matching labels."""

    def __init__(self, examples, cfg: TrainConfig, spec_cfg: SpectrogramConfig, rng, cache_size=256):
        self.examples = examples
        self.cfg = cfg
        self.spec_cfg = spec_cfg
        self.rng = rng
        self.frames = cfg.seq_len_samples // spec_cfg.hop
        self.cache = OrderedDict()
        self.cache_size = cache_size

    def _crop(self, idx, start_frame):
        key = (idx, start_frame)
        hit = self.cache.get(key)
        if hit is not None:
            self.cache.move_to_end(key)
            return hit
        ex = self.examples[idx]
        hop = self.spec_cfg.hop
        s0 = start_frame * hop
        audio = ex.clip.samples[s0:s0 + self.cfg.seq_len_samples]
        if len(audio) < self.cfg.seq_len_samples:
            audio = np.concatenate([audio, np.zeros(self.cfg.seq_len_samples - len(audio))])
        spec = log_mel(AudioClip(audio, ex.clip.sample_rate), self.spec_cfg).values.astype(np.float32)
        labels = ex.rolls(hop, self.cfg.onset_frames).crop(start_frame, self.frames, s0 / ex.clip.sample_rate)
        self.cache[key] = (spec, labels)
        if len(self.cache) > self.cache_size:
            self.cache.popitem(last=False)
        return spec, labels

    def batch(self):
        specs, labels = [], []
        for _ in range(self.cfg.batch_size):
            idx = int(self.rng.integers(len(self.examples)))
            total = -(-len(self.examples[idx].clip.samples) // self.spec_cfg.hop)
            start = int(self.rng.integers(max(total - self.frames, 0) + 1))
            s, l = self._crop(idx, start)
            specs.append(s)
            labels.append(l)
        return np.stack(specs), LabelTensors.stack(labels)


def train(model, train_set, val_set, cfg: TrainConfig, spec_cfg=SpectrogramConfig(),
          progress=None) -> TrainResult:
    """Optimise ``model`` in place and return the best-validation parameters.

    ``progress(iteration, loss)`` is called after each step when given.
    """
    cfg.validate(spec_cfg.hop)
    if not train_set:
        raise InvalidInput("training set is empty")
    if not val_set:
        raise InvalidInput("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params)
    state = TrainState(stopper=EarlyStopper(cfg.max_patience, cfg.max_trial))
    best_state = model.state_dict()
    sampler = _CropSampler(train_set, cfg, spec_cfg, rng)
    variant = model.cfg.variant
    window = []

    while state.iteration < cfg.max_iters:
        it = state.iteration
        specs, labels = sampler.batch()
        heads = model.forward(specs, train=True, rng=rng)
        total = model_loss(heads, labels, variant)
        value = float(total.data)
        if not math.isfinite(value):
            raise DivergedError(it, value)
        model.zero_grad()
        ad.backward(total)
        clip_gradients(params, cfg.clip_norm)
        lr = lr_schedule(it, cfg) * state.lr_scale
        opt.step(lr)
        state.losses.append(value)
        window.append(value)
        state.iteration += 1
        if progress is not None:
            progress(state.iteration, value)

        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.max_iters:
            metrics = evaluate_model(model, val_set, spec_cfg)
            row = {"iteration": state.iteration, "loss": float(np.mean(window)), **metrics, "lr": lr}
            state.history.append(row)
            window = []
            decision = state.stopper.update(_score(metrics))
            if state.stopper.improved:
                best_state = model.state_dict()
            log.info("iter %d loss %.4f %s -> %s", state.iteration, row["loss"], metrics, decision)
            if decision == RELOAD_BEST:
                model.load_state_dict(best_state)
                state.lr_scale *= 0.5
                opt.reset()
            elif decision == STOP:
                break

    best_metric = state.stopper.best
    return TrainResult(best_state, best_metric, state)
