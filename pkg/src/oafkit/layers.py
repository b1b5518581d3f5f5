"""Network building blocks assembled from autodiff primitives.

All sequence layers take ``(batch, frames, width)`` Values.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, InvalidInput, ShapeError


class Module:
    """Parameter container; parameters are the ``requires_grad`` Values found
    on the instance (directly, in child modules, or in lists of modules)."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, ad.Value) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def to(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_param(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return ad.Value(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def effective_kernel(k: int, rate: int) -> int:
    """Span of a dilated kernel: k + (k - 1)(rate - 1)."""
    return k + (k - 1) * (rate - 1)


def _check_width(x, width, what):
    if x.ndim != 3 or x.shape[2] != width:
        raise ShapeError(f"{what} expects (batch, frames, {width}) input, got {x.shape}")


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = uniform_param(rng, (n_in, n_out), n_in)
        self.bias = uniform_param(rng, (n_out,), n_in)

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects width {self.weight.shape[0]}, got {x.shape}")
        return x @ self.weight + self.bias


class FCSigmoid(Linear):
    """Per-frame sigmoid output layer; ``logits`` exposes the pre-activation.

    With ``prior`` in (0, 1) the bias starts at logit(prior), so sparse
    targets do not have to be learned down from probability 0.5.
    """

    def __init__(self, n_in, n_out, rng, prior=None):
        super().__init__(n_in, n_out, rng)
        if prior is not None:
            if not 0.0 < prior < 1.0:
                raise InvalidConfig(f"prior must lie in (0, 1), got {prior}")
            self.bias.data[:] = math.log(prior / (1.0 - prior))

    def logits(self, x):
        return super().forward(x)

    def forward(self, x):
        return ad.sigmoid(self.logits(x))


class ConvStack(Module):
    """conv3x3(c1) -> conv3x3(c1) -> pool(1,2) -> conv3x3(c2) -> pool(1,2) -> dropout -> linear(K).

    Pooling acts on the frequency axis only, so frame alignment is preserved.
    """

    def __init__(self, n_mels, width, rng, channels=(48, 96), dropout=0.25):
        c1, c2 = channels
        self.n_mels = n_mels
        self.dropout = dropout
        self.conv1_w = uniform_param(rng, (c1, 1, 3, 3), 9)
        self.conv1_b = uniform_param(rng, (c1,), 9)
        self.conv2_w = uniform_param(rng, (c1, c1, 3, 3), 9 * c1)
        self.conv2_b = uniform_param(rng, (c1,), 9 * c1)
        self.conv3_w = uniform_param(rng, (c2, c1, 3, 3), 9 * c1)
        self.conv3_b = uniform_param(rng, (c2,), 9 * c1)
        self.fc = Linear(c2 * (n_mels // 4), width, rng)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.n_mels:
            raise ShapeError(f"ConvStack expects (batch, frames, {self.n_mels}), got {x.shape}")
        n, frames, _ = x.shape
        h = x.reshape(n, 1, frames, self.n_mels)
        h = ad.relu(ad.conv2d(h, self.conv1_w, self.conv1_b, padding=1))
        h = ad.relu(ad.conv2d(h, self.conv2_w, self.conv2_b, padding=1))
        h = ad.maxpool2d(h, (1, 2))
        h = ad.relu(ad.conv2d(h, self.conv3_w, self.conv3_b, padding=1))
        h = ad.maxpool2d(h, (1, 2))
        h = ad.dropout(h, self.dropout, train, rng)
        c = h.shape[1]
        h = h.transpose(0, 2, 1, 3).reshape(n, frames, c * h.shape[3])
        return self.fc(h)


class HighwayConv(Module):
    """Gated 3x3 convolution over the (frame, feature) plane.

    y = T * H(x) + (1 - T) * x, H = relu(conv(x)), T = sigmoid(conv(x) + gate bias).
    """

    def __init__(self, rng, gate_bias=-1.0):
        self.h_w = uniform_param(rng, (1, 1, 3, 3), 9)
        self.h_b = uniform_param(rng, (1,), 9)
        self.t_w = uniform_param(rng, (1, 1, 3, 3), 9)
        self.t_b = ad.Value(np.full((1,), gate_bias, np.float32), requires_grad=True)

    def transform(self, x4):
        return ad.relu(ad.conv2d(x4, self.h_w, self.h_b, padding=1))

    def gate(self, x4):
        return ad.sigmoid(ad.conv2d(x4, self.t_w, self.t_b, padding=1))

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeError(f"HighwayConv expects (batch, frames, width), got {x.shape}")
        n, frames, width = x.shape
        x4 = x.reshape(n, 1, frames, width)
        t = self.gate(x4)
        y = t * self.transform(x4) + (1.0 - t) * x4
        return y.reshape(n, frames, width)


class DilatedBlock(Module):
    """Parallel kernel-3 temporal convolutions at several dilation rates, averaged."""

    def __init__(self, width, rng, rates=(1, 4, 8), kernel=3):
        self.rates = tuple(int(r) for r in rates)
        if any(r < 1 for r in self.rates):
            raise InvalidConfig(f"dilation rates must be >= 1, got {rates}")
        self.kernel = kernel
        fan_in = width * kernel
        self.branches_w = [uniform_param(rng, (width, width, kernel, 1), fan_in) for _ in self.rates]
        self.branches_b = [uniform_param(rng, (width,), fan_in) for _ in self.rates]

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.branches_w, self.branches_b)):
            yield f"{prefix}branch{i}.weight", w
            yield f"{prefix}branch{i}.bias", b

    @property
    def min_frames(self):
        return effective_kernel(self.kernel, max(self.rates))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.branches_w[0].shape[1]:
            raise ShapeError(f"DilatedBlock expects (batch, frames, {self.branches_w[0].shape[1]}), got {x.shape}")
        n, frames, width = x.shape
        if frames < self.min_frames:
            raise InvalidInput(f"dilated block needs at least {self.min_frames} frames, got {frames}")
        x4 = x.transpose(0, 2, 1).reshape(n, width, frames, 1)
        pad = (self.kernel - 1) // 2
        outs = [
            ad.conv2d(x4, w, b, padding=(pad * r, 0), dilation=(r, 1))
            for w, b, r in zip(self.branches_w, self.branches_b, self.rates)
        ]
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        y = total * (1.0 / len(outs))
        return y.reshape(n, width, frames).transpose(0, 2, 1)


class BiLSTM(Module):
    """Forward and backward LSTMs with hidden size width/2, concatenated per frame."""

    def __init__(self, n_in, width, rng):
        if width % 2:
            raise InvalidConfig(f"BiLSTM width must be even, got {width}")
        hid = width // 2
        self.n_in = n_in
        self.fwd_wx = uniform_param(rng, (n_in, 4 * hid), hid)
        self.fwd_wh = uniform_param(rng, (hid, 4 * hid), hid)
        self.fwd_b = uniform_param(rng, (4 * hid,), hid)
        self.bwd_wx = uniform_param(rng, (n_in, 4 * hid), hid)
        self.bwd_wh = uniform_param(rng, (hid, 4 * hid), hid)
        self.bwd_b = uniform_param(rng, (4 * hid,), hid)

    def forward(self, x):
        _check_width(x, self.n_in, "BiLSTM")
        if x.shape[1] < 1:
            raise InvalidInput("BiLSTM needs at least one frame")
        fwd = ad.lstm_recurrence(x @ self.fwd_wx + self.fwd_b, self.fwd_wh, reverse=False)
        bwd = ad.lstm_recurrence(x @ self.bwd_wx + self.bwd_b, self.bwd_wh, reverse=True)
        return ad.concat([fwd, bwd], axis=-1)


class SelfAttention(Module):
    """Single-head scaled dot-product attention over frames, concatenated with its input."""

    def __init__(self, width, rng):
        self.width = width
        self.wq = uniform_param(rng, (width, width), width)
        self.wk = uniform_param(rng, (width, width), width)
        self.wv = uniform_param(rng, (width, width), width)

    def weights(self, x):
        q = x @ self.wq
        k = x @ self.wk
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.width))
        return ad.softmax(scores, axis=-1)

    def forward(self, x, return_weights=False):
        _check_width(x, self.width, "SelfAttention")
        a = self.weights(x)
        out = ad.concat([a @ (x @ self.wv), x], axis=-1)
        return (out, a) if return_weights else out
