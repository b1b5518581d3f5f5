"""Command-line entry point: ``oafkit <command> [options]``.

Exit codes: 0 success, 1 data error (bad file, bad label line), 2 usage
error (unknown flag, variant or config key).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, dataio, evaluator, gradsuite, models, trainer
from .decoder import decode_phonemes
from .errors import InvalidConfig, OafkitError
from .frontend import SpectrogramConfig, featurize

log = logging.getLogger("oafkit")

MANIFEST = "manifest.json"
SPLITS = ("train", "validation", "test")

# config keys understood in --config files, by owner
MODEL_KEYS = {f.name for f in fields(models.ModelConfig)} - {"variant"}
TRAIN_KEYS = {f.name for f in fields(trainer.TrainConfig)} - {"seed"}
TOP_KEYS = {"seed", "variant", "data_dir", "out", "max_iters", "eval_every", "threads", "speech"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TOP_KEYS | MODEL_KEYS | TRAIN_KEYS:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        cfg[key] = value
    return cfg


def _resolve(args) -> dict:
    """Config file values overlaid by explicitly given flags."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key in TOP_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    return cfg


def _typed(dc, cfg: dict, **extra):
    kw = {}
    for f in fields(dc):
        if f.name in cfg:
            raw = cfg[f.name]
            kw[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
    kw.update(extra)
    try:
        return dc(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _spec_cfg(cfg) -> SpectrogramConfig:
    speech = str(cfg.get("speech", "0")).lower() in ("1", "true", "yes")
    return SpectrogramConfig.speech() if speech or cfg.get("variant") == "speech" else SpectrogramConfig()


def write_manifest(out_dir, command, config, inputs, outputs, seed):
    """Record what produced the files in ``out_dir``."""
    manifest = {
        "command": command,
        "config": {k: (v if isinstance(v, (int, float, str, bool)) or v is None else str(v))
                   for k, v in sorted(config.items())},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": int(seed),
        "version": __version__,
    }
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(cfg, default) -> Path:
    out = Path(cfg.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _label_files(path):
    p = Path(path)
    if p.is_dir():
        return {f.stem: f for f in sorted(p.glob("*.tsv"))}
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such file or directory")
    return {p.stem: p}


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _resolve(args)
    out = Path(cfg.get("data_dir") or cfg.get("out") or "data")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    counts = {"train": args.n_train, "validation": args.n_val, "test": args.n_test}
    written = []
    for i, split in enumerate(SPLITS):
        d = out / split
        d.mkdir(exist_ok=True)
        for ex in dataio.synth_corpus(counts[split], seed * 1000 + i, args.duration, args.density):
            dataio.write_wav(d / f"{ex.name}.wav", ex.clip)
            dataio.write_note_labels(d / f"{ex.name}.tsv", ex.events)
            written += [d / f"{ex.name}.wav", d / f"{ex.name}.tsv"]
    cfg.update(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
               duration=args.duration, density=args.density)
    write_manifest(out, "synth", cfg, [], written, seed)
    print(f"wrote {len(written) // 2} clips to {out}")


def cmd_featurize(args):
    cfg = _resolve(args)
    src = Path(cfg.get("data_dir") or ".")
    wavs = sorted(src.rglob("*.wav")) if src.is_dir() else [src]
    if not src.exists():
        raise FileNotFoundError(f"{src}: no such file or directory")
    out = _out_dir(cfg, "features")
    spec_cfg = _spec_cfg(cfg)
    written = []
    for wav in wavs:
        clip = dataio.read_wav(wav)
        target = out / wav.relative_to(src).with_suffix(".npy") if src.is_dir() else out / (wav.stem + ".npy")
        target.parent.mkdir(parents=True, exist_ok=True)
        np.save(target, featurize(clip.samples, spec_cfg))
        written.append(target)
    cfg.update(asdict(spec_cfg))
    write_manifest(out, "featurize", cfg, wavs, written, cfg["seed"])
    print(f"featurized {len(written)} files into {out}")


def cmd_train(args):
    cfg = _resolve(args)
    variant = cfg.get("variant") or "oaf"
    try:
        variant = models.resolve_variant(variant)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None
    cfg["variant"] = variant
    seed = int(cfg["seed"])
    data = Path(cfg.get("data_dir") or "data")
    spec_cfg = _spec_cfg(cfg)
    alphabet = dataio.PhonemeAlphabet() if variant == "speech" else None
    train_set = dataio.load_split(data / "train", spec_cfg.sample_rate, alphabet)
    val_set = dataio.load_split(data / "validation", spec_cfg.sample_rate, alphabet)
    model_extra = {"n_mels": spec_cfg.n_mels}
    if alphabet is not None:
        model_extra["P"] = len(alphabet)
    mcfg = _typed(models.ModelConfig, cfg, variant=variant, **model_extra)
    tcfg = _typed(trainer.TrainConfig, cfg, seed=seed)
    model = models.build(mcfg, seed=seed)
    out = _out_dir(cfg, "run")

    def progress(it, loss):
        if it % max(1, tcfg.eval_every // 10) == 0:
            log.info("iter %d loss %.5f", it, loss)

    result = trainer.train(model, train_set, val_set, tcfg, spec_cfg, progress)
    model.load_state_dict(result.best_state)
    header = {"train.best_metric": f"{result.best_metric:.6f}", "train.iterations": result.state.iteration}
    if alphabet is not None:
        header["alphabet"] = " ".join(alphabet.symbols)
    model.save(out / "model.ckpt", header)
    (out / "history.csv").write_text(trainer.history_csv(result.history), encoding="utf-8")
    cfg.update({f"model.{k}": v for k, v in asdict(mcfg).items()})
    cfg.update({f"train.{k}": v for k, v in asdict(tcfg).items()})
    write_manifest(out, "train", cfg, [data / "train", data / "validation"],
                   [out / "model.ckpt", out / "history.csv"], seed)
    print(f"trained {models.TABLE_LABELS[variant]} for {result.state.iteration} iterations; "
          f"best validation score {result.best_metric:.4f}; checkpoint {out / 'model.ckpt'}")


def cmd_transcribe(args):
    cfg = _resolve(args)
    model, header = models.AcousticModel.load(args.checkpoint)
    variant = model.cfg.variant
    spec_cfg = SpectrogramConfig.speech() if variant == "speech" else SpectrogramConfig()
    out = _out_dir(cfg, "transcriptions")
    written = []
    for wav in map(Path, args.inputs):
        clip = dataio.read_wav(wav)
        if variant == "speech":
            alphabet = dataio.PhonemeAlphabet(header.get("alphabet", "").split())
            heads = model.predict(featurize(clip.samples, spec_cfg))
            segs = decode_phonemes(heads["frame"], spec_cfg.hop, spec_cfg.sample_rate)
            target = out / (wav.stem + ".phn")
            dataio.write_phn(target, segs, clip.sample_rate, alphabet)
        else:
            events = trainer.transcribe(model, clip.samples, spec_cfg, args.onset_thresh, args.frame_thresh)
            target = out / (wav.stem + ".tsv")
            dataio.write_note_labels(target, events)
        written.append(target)
    cfg.update(checkpoint=args.checkpoint, variant=variant,
               onset_thresh=args.onset_thresh, frame_thresh=args.frame_thresh)
    write_manifest(out, "transcribe", cfg, [args.checkpoint, *args.inputs], written, cfg["seed"])
    print(f"wrote {len(written)} transcriptions to {out}")


def _evaluate_pairs(ref_files, est_files, offset_ratio=None) -> dict:
    """Pooled metrics over files present in both sets (by stem)."""
    missing = sorted(set(ref_files) - set(est_files))
    if missing:
        raise FileNotFoundError(f"no estimate for reference file(s): {', '.join(missing)}")
    counts = {c: [0, 0, 0] for c in evaluator.TABLE_COLUMNS}
    for stem in sorted(ref_files):
        ref = dataio.read_note_labels(ref_files[stem])
        est = dataio.read_note_labels(est_files[stem])
        for name, m in evaluator.transcription_metrics(ref, est, offset_ratio=offset_ratio).items():
            counts[name][0] += m.matched
            counts[name][1] += m.n_ref
            counts[name][2] += m.n_est
    return {name: evaluator.Metrics.from_counts(*c) for name, c in counts.items()}


def cmd_evaluate(args):
    cfg = _resolve(args)
    ref_files, est_files = _label_files(args.ref), _label_files(args.est)
    if len(ref_files) == 1 and len(est_files) == 1:
        est_files = {next(iter(ref_files)): next(iter(est_files.values()))}
    metrics = _evaluate_pairs(ref_files, est_files, args.offset_ratio)
    rows = {args.label: metrics}
    text = evaluator.f1_table(rows)
    print(text, end="")
    print(f"note F1 = {metrics['note'].f1:.4f}")
    if cfg.get("out"):
        out = _out_dir(cfg, "eval")
        (out / "metrics.csv").write_text(evaluator.metrics_csv(rows), encoding="utf-8")
        (out / "metrics.txt").write_text(text, encoding="utf-8")
        cfg.update(ref=args.ref, est=args.est, offset_ratio=args.offset_ratio)
        write_manifest(out, "evaluate", cfg, [args.ref, args.est], [out / "metrics.csv", out / "metrics.txt"],
                       cfg["seed"])


def cmd_gradcheck(args):
    cfg = _resolve(args)
    seed = int(cfg["seed"])
    worst = gradsuite.run(seeds=tuple(range(seed, seed + args.n_seeds)), eps=args.eps)
    width = max(map(len, worst))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "max_rel_error", "ok"])
    ok = True
    for name, err in worst.items():
        good = err < args.tol
        ok &= good
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if good else 'FAIL'}")
        w.writerow([name, f"{err:.6e}", int(good)])
    if cfg.get("out"):
        out = _out_dir(cfg, "gradcheck")
        (out / "gradcheck.csv").write_text(buf.getvalue(), encoding="utf-8")
        cfg.update(n_seeds=args.n_seeds, eps=args.eps, tol=args.tol)
        write_manifest(out, "gradcheck", cfg, [], [out / "gradcheck.csv"], seed)
    return 0 if ok else 1


def cmd_table(args):
    cfg = _resolve(args)
    data = Path(cfg.get("data_dir") or "data")
    split = data / "test" if (data / "test").is_dir() else data
    examples = dataio.load_split(split)
    rows = {}
    for run in map(Path, args.runs):
        ckpt = run / "model.ckpt" if run.is_dir() else run
        model, _ = models.AcousticModel.load(ckpt)
        counts = {c: [0, 0, 0] for c in evaluator.TABLE_COLUMNS}
        for ex in examples:
            est = trainer.transcribe(model, ex.clip.samples)
            n_frames = -(-len(ex.clip.samples) // SpectrogramConfig().hop)
            for name, m in evaluator.transcription_metrics(ex.events, est, n_frames=n_frames).items():
                counts[name][0] += m.matched
                counts[name][1] += m.n_ref
                counts[name][2] += m.n_est
        label = models.TABLE_LABELS[model.cfg.variant]
        rows[label] = {n: evaluator.Metrics.from_counts(*c) for n, c in counts.items()}
    text = evaluator.f1_table(rows)
    print(text, end="")
    out = _out_dir(cfg, "report")
    (out / "table.txt").write_text(text, encoding="utf-8")
    (out / "table.csv").write_text(evaluator.metrics_csv(rows), encoding="utf-8")
    write_manifest(out, "table", cfg, [*args.runs, split], [out / "table.txt", out / "table.csv"], cfg["seed"])


# ---------------------------------------------------------------- parser


def _common(p, variant=False):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="BLAS thread limit")
    if variant:
        p.add_argument("--variant", choices=sorted(set(models.ALIASES) | set(models.VARIANTS)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oafkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"oafkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic piano corpus (train/validation/test)")
    _common(p)
    p.add_argument("--data-dir", help="corpus directory to create (default: --out, else ./data)")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--density", type=float, default=0.05, help="notes per pitch per second")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV files to cached log-mel .npy arrays")
    _common(p)
    p.add_argument("--data-dir", help="a WAV file or a directory searched recursively")
    p.add_argument("--speech", action="store_const", const="1", help="use the 30-300 Hz speech band")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a variant; writes model.ckpt and history.csv")
    _common(p, variant=True)
    p.add_argument("--data-dir", help="directory holding train/ and validation/")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--eval-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="checkpoint + WAV files to label files")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--onset-thresh", type=float, default=0.5)
    p.add_argument("--frame-thresh", type=float, default=0.5)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", help="score estimated note labels against references")
    _common(p)
    p.add_argument("--ref", required=True, help="label file or directory of .tsv files")
    p.add_argument("--est", required=True, help="label file or directory of .tsv files")
    p.add_argument("--offset-ratio", type=float, default=None,
                   help="offset window max(50 ms, ratio * duration); default fixed 50 ms")
    p.add_argument("--label", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    _common(p)
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--eps", type=float, default=gradsuite.DEFAULT_EPS)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("table", help="evaluate trained runs on a test split; one row per variant")
    _common(p)
    p.add_argument("--data-dir", help="corpus directory (its test/ split is used when present)")
    p.add_argument("runs", nargs="+", help="run directories (or checkpoint files)")
    p.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        return args.func(args) or 0
    except (UsageError, InvalidConfig) as exc:
        parser.error(str(exc))
    except (OafkitError, OSError) as exc:
        print(f"oafkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
