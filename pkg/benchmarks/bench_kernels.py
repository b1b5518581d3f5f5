"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each kernel runs on identical inputs under both backends; results are
checked for agreement before timing.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from oafkit import _kernels_py

try:
    from oafkit import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(rng):
    """(name, callable-taking-a-backend) pairs at training-like sizes."""
    out = []
    for hid in (16, 64, 128):
        xproj = rng.normal(size=(4, 64, 4 * hid)).astype(np.float32)
        wh = (rng.normal(size=(hid, 4 * hid)) * 0.1).astype(np.float32)
        h, c, g = _kernels_py.lstm_forward(xproj, wh, False)
        dh = rng.normal(size=h.shape).astype(np.float32)
        out.append((f"lstm_forward H={hid}", lambda k, x=xproj, w=wh: k.lstm_forward(x, w, False)))
        out.append((f"lstm_backward H={hid}",
                    lambda k, a=(dh, h, c, g, wh): k.lstm_backward(*a, False)))
    for c_in, width in ((1, 229), (8, 229), (16, 114)):
        xp = rng.normal(size=(4, c_in, 66, width + 2)).astype(np.float32)
        geom = (3, 3, 1, 1, 1, 1, 64, width)
        cols = _kernels_py.im2col(xp, *geom)
        out.append((f"im2col C={c_in} W={width}", lambda k, x=xp, g=geom: k.im2col(x, *g)))
        out.append((f"col2im C={c_in} W={width}",
                    lambda k, cl=cols, s=xp.shape, g=geom: k.col2im(cl, *s, *g)))
    a = rng.integers(0, 40, size=300)
    b = rng.integers(0, 40, size=280)
    out.append(("levenshtein 300x280", lambda k: k.levenshtein(a, b)))
    return out


def _same(x, y):
    if isinstance(x, tuple):
        return all(_same(p, q) for p, q in zip(x, y))
    return np.allclose(x, y, rtol=1e-4, atol=1e-5)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write results here")
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng):
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat))
        if _compiled is not None:
            if not _same(fn(_kernels_py), fn(_compiled)):
                raise SystemExit(f"{name}: backends disagree")
            cy = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat))
        else:
            cy = float("nan")
        rows.append((name, py * 1e3, cy * 1e3, py / cy))
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel'.ljust(width)}  {'python ms':>10}  {'cython ms':>10}  {'speedup':>8}")
    for name, py, cy, sp in rows:
        print(f"{name.ljust(width)}  {py:10.3f}  {cy:10.3f}  {sp:7.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "python_ms", "cython_ms", "speedup"])
            w.writerows([(n, f"{p:.4f}", f"{c:.4f}", f"{s:.3f}") for n, p, c, s in rows])


if __name__ == "__main__":
    main()
