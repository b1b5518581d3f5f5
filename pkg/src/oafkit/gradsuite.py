"""Finite-difference gradient checks for every trainable layer and loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import BiLSTM, ConvStack, DilatedBlock, FCSigmoid, HighwayConv, SelfAttention

# piecewise-linear layers (relu, max-pool) need a small step so that the
# two-sided difference does not straddle a kink
DEFAULT_EPS = 1e-6


def _input(rng, shape):
    return ad.Value(rng.normal(size=shape), requires_grad=True)


def _check_module(module, x, rng, eps, n_samples, **kwargs):
    module.to(np.float64)
    probe = rng.normal(size=module(x, **kwargs).shape)
    params = {"input": x, **module.parameters()}
    errs = ad.grad_check_params(lambda: ad.vsum(module(x, **kwargs) * probe), params, eps, n_samples, rng)
    return max(errs.values())


def _check_loss(fn, shape, rng, eps, n_samples, mask=True):
    z = _input(rng, shape)
    target = (rng.random(shape) < 0.3).astype(np.float64)
    m = (rng.random(shape) < 0.5).astype(np.float64) if mask else None
    errs = ad.grad_check_params(lambda: fn(z, target, mask=m), {"z": z}, eps, n_samples, rng)
    return errs["z"]


def layer_suite(seed=0, eps=DEFAULT_EPS, n_samples=40) -> dict:
    """Max relative error per layer/loss for one seed, all in float64."""
    rng = np.random.default_rng(seed)
    out = {}
    out["conv_stack"] = _check_module(ConvStack(12, 6, rng, channels=(3, 4), dropout=0.25),
                                      _input(rng, (2, 5, 12)), rng, eps, n_samples)
    out["highway"] = _check_module(HighwayConv(rng), _input(rng, (2, 6, 7)), rng, eps, n_samples)
    out["dilated"] = _check_module(DilatedBlock(4, rng), _input(rng, (2, 18, 4)), rng, eps, n_samples)
    out["bilstm"] = _check_module(BiLSTM(5, 6, rng), _input(rng, (2, 7, 5)), rng, eps, n_samples)
    out["attention"] = _check_module(SelfAttention(5, rng), _input(rng, (2, 6, 5)), rng, eps, n_samples)
    out["fc_sigmoid"] = _check_module(FCSigmoid(5, 4, rng), _input(rng, (2, 6, 5)), rng, eps, n_samples)
    out["bce_loss"] = _check_loss(ad.bce_with_logits, (2, 6, 4), rng, eps, n_samples)
    out["mse_loss"] = _check_loss(ad.mse, (2, 6, 4), rng, eps, n_samples)
    return out


def run(seeds=(0, 1, 2), eps=DEFAULT_EPS, n_samples=40) -> dict:
    """Worst error over ``seeds`` for each entry of :func:`layer_suite`."""
    worst = {}
    for s in seeds:
        for name, err in layer_suite(s, eps, n_samples).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
