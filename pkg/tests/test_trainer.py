import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oafkit import autodiff as ad
from oafkit import dataio, models, trainer
from oafkit.errors import DivergedError, InvalidConfig, InvalidInput
from oafkit.frontend import SpectrogramConfig
from oafkit.trainer import CONTINUE, RELOAD_BEST, STOP, EarlyStopper, TrainConfig

SPEC = SpectrogramConfig(n_mels=16)


def test_lr_examples():
    cfg = TrainConfig()
    assert trainer.lr_schedule(0, cfg) == 6e-4
    assert trainer.lr_schedule(9999, cfg) == 6e-4
    assert trainer.lr_schedule(10000, cfg) == pytest.approx(5.88e-4, rel=1e-12)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_lr_non_increasing_and_periodic(a, b):
    cfg = TrainConfig()
    lo, hi = sorted((a, b))
    assert trainer.lr_schedule(hi, cfg) <= trainer.lr_schedule(lo, cfg)
    if lo // cfg.decay_every == hi // cfg.decay_every:
        assert trainer.lr_schedule(hi, cfg) == trainer.lr_schedule(lo, cfg)


def _param(grad):
    p = ad.Value(np.zeros(np.shape(grad)), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_clip_examples():
    big, small, zero = _param([0.0, 6.0]), _param([0.6, 0.8]), _param([0.0, 0.0])
    trainer.clip_gradients({"a": big, "b": small, "c": zero}, 3.0)
    assert np.allclose(big.grad, [0.0, 3.0]) and abs(np.linalg.norm(big.grad) - 3) < 1e-6
    assert np.array_equal(small.grad, [0.6, 0.8])
    assert np.array_equal(zero.grad, [0.0, 0.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 10))
def test_clip_bound(values, clip):
    p = _param(values)
    before = p.grad.copy()
    trainer.clip_gradients([p], clip)
    assert np.linalg.norm(p.grad) <= clip + 1e-6
    # direction is preserved
    assert np.allclose(p.grad * np.linalg.norm(before), before * np.linalg.norm(p.grad))


# ---------------------------------------------------------------- early stopping


def reference_automaton(improvements, max_patience, max_trial):
    """Independent restatement of the patience/trial rules.  The first
    validation always improves on the initial (minus infinity) best."""
    out, patience, trial = [], 0, 0
    for i, better in enumerate(improvements):
        if better or i == 0:
            patience = 0
            out.append(CONTINUE)
            continue
        patience += 1
        if patience == max_patience:
            patience = 0
            trial += 1
            out.append(STOP if trial == max_trial else RELOAD_BEST)
            if trial == max_trial:
                break
        else:
            out.append(CONTINUE)
    return out


def run_stopper(improvements, max_patience, max_trial):
    s = EarlyStopper(max_patience, max_trial)
    metric, out = 0.0, []
    for better in improvements:
        metric += 1.0 if better else 0.0
        out.append(s.update(metric))
        if out[-1] == STOP:
            break
    return out, s


def test_early_stop_improving_stream():
    s = EarlyStopper()
    assert [s.update(0.1 * i) for i in range(50)] == [CONTINUE] * 50
    assert s.patience == 0 and s.trial == 0


def test_early_stop_ten_non_improvements():
    out, s = run_stopper([True] + [False] * 10, 10, 10)
    assert out == [CONTINUE] * 10 + [RELOAD_BEST]
    assert s.trial == 1 and s.patience == 0


def test_early_stop_hundred_non_improvements():
    out, s = run_stopper([True] + [False] * 200, 10, 10)
    assert len(out) == 101 and out[-1] == STOP
    assert out.count(RELOAD_BEST) == 9 and s.trial == 10


def test_early_stop_exhaustive_small():
    for length in range(1, 15):
        for stream in itertools.product([False, True], repeat=length):
            got, s = run_stopper(stream, 3, 3)
            assert got == reference_automaton(stream, 3, 3)
            assert s.trial <= 3 and got.count(RELOAD_BEST) < 3


@pytest.mark.parametrize("seed", range(200))
def test_early_stop_random_default_limits(seed):
    rng = np.random.default_rng(seed)
    stream = list(rng.random(300) < rng.uniform(0.0, 0.3))
    got, _ = run_stopper(stream, 10, 10)
    assert got == reference_automaton(stream, 10, 10)
    # only unbroken runs of non-improvement use up trials, at most 10 x 10 of them
    assert got.count(RELOAD_BEST) + got.count(STOP) <= 10
    assert got.count(RELOAD_BEST) <= 9


def test_early_stop_threshold_and_errors():
    s = EarlyStopper(max_patience=2)
    s.update(0.5)
    s.update(0.5 + 5e-7)
    assert s.patience == 1 and s.best == 0.5
    with pytest.raises(InvalidInput):
        s.update(float("nan"))
    assert trainer.early_stop_update(EarlyStopper(), 1.0) == CONTINUE


# ---------------------------------------------------------------- training loop


def tiny_model(variant="oaf", seed=0):
    return models.build(models.ModelConfig(variant, K=8, n_mels=16, conv1=2, conv2=3), seed=seed)


@pytest.fixture(scope="module")
def corpus():
    return dataio.synth_corpus(3, seed=1, duration=1.0, density=0.05)


def tiny_cfg(**kw):
    base = dict(seq_len_samples=512 * 12, batch_size=2, max_iters=10, eval_every=5, seed=3)
    return TrainConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(seq_len_samples=1000).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(base_lr=0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(max_iters=-1).validate()


def test_zero_iterations_returns_initial(corpus):
    model = tiny_model()
    init = {k: v.copy() for k, v in model.state_dict().items()}
    res = trainer.train(model, corpus, corpus, tiny_cfg(max_iters=0), SPEC)
    assert res.history == [] and res.losses == []
    assert all(np.array_equal(init[k], res.best_state[k]) for k in init)


def test_empty_sets_rejected(corpus):
    with pytest.raises(InvalidInput):
        trainer.train(tiny_model(), [], corpus, tiny_cfg(), SPEC)
    with pytest.raises(InvalidInput):
        trainer.train(tiny_model(), corpus, [], tiny_cfg(), SPEC)


def test_diverged(corpus):
    model = tiny_model()
    next(iter(model.parameters().values())).data[...] = np.nan
    with pytest.raises(DivergedError) as info:
        trainer.train(model, corpus, corpus, tiny_cfg(), SPEC)
    assert info.value.iteration == 0


def test_determinism_and_history(corpus):
    runs = []
    for _ in range(2):
        res = trainer.train(tiny_model(), corpus, corpus, tiny_cfg(), SPEC)
        runs.append(res)
    a, b = runs
    assert len(a.losses) == 10 and a.losses == b.losses
    assert trainer.history_csv(a.history) == trainer.history_csv(b.history)
    lines = trainer.history_csv(a.history).splitlines()
    assert lines[0] == "iteration,loss,note_precision,note_recall,note_f1,lr"
    assert [int(r.split(",")[0]) for r in lines[1:]] == [5, 10]
    assert trainer.history_csv([]) == "iteration,loss,lr\n"


def test_crop_sampler_alignment(corpus):
    cfg = tiny_cfg()
    sampler = trainer._CropSampler(corpus, cfg, SPEC, np.random.default_rng(0))
    specs, labels = sampler.batch()
    assert specs.shape == (2, 12, 16) and labels.frame_roll.shape == (2, 12, 88)
    # a crop taken at frame 0 carries the clip's own first frames
    spec0, lab0 = sampler._crop(0, 0)
    full = corpus[0].rolls(512, cfg.onset_frames)
    assert np.array_equal(lab0.frame_roll, full.frame_roll[:12])


def test_convex_toy_monotone():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 5))
    y = x @ rng.normal(size=(5, 2))
    w = ad.Value(np.zeros((5, 2)), requires_grad=True)
    params = {"w": w}
    opt = trainer.Adam(params)
    losses = []
    for it in range(50):
        loss = ad.mse(ad.matmul(ad.Value(x), w), y)
        losses.append(float(loss.data))
        w.grad = None
        ad.backward(loss)
        trainer.clip_gradients(params, 3.0)
        opt.step(trainer.lr_schedule(it, TrainConfig()))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_evaluate_model_speech_per():
    alphabet = dataio.PhonemeAlphabet(["a", "b", "c"])
    model = models.build(models.ModelConfig("speech", K=8, P=3, n_mels=16, conv1=2, conv2=3), seed=0)
    segs = [dataio.PhonemeSegment(0, 0.0, 0.3), dataio.PhonemeSegment(1, 0.3, 0.6)]
    clip = dataio.synth_clip([dataio.NoteEvent(60, 0.0, 0.6)], 16000, duration=0.6)
    ex = dataio.Example(clip, segs, kind="phonemes", n_symbols=len(alphabet))
    metrics = trainer.evaluate_model(model, [ex], SPEC)
    assert set(metrics) == {"per"} and metrics["per"] >= 0
