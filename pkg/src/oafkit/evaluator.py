"""Note/frame precision, recall, F1 and phoneme error rate."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataio import events_to_rolls
from .errors import InvalidInput, ShapeError

# distances are rounded before comparing against a tolerance, so that
# e.g. 0.05000000001 does not miss a 50 ms window
_DECIMALS = 7

TABLE_COLUMNS = ("note", "note-w-o", "note-w-v", "note-w-ov", "frame")


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    matched: int
    n_ref: int
    n_est: int

    @classmethod
    def from_counts(cls, matched, n_ref, n_est):
        if n_ref == 0 and n_est == 0:
            return cls(1.0, 1.0, 1.0, 0, 0, 0)
        p = matched / n_est if n_est else 0.0
        r = matched / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f, matched, n_ref, n_est)


def max_bipartite_matching(adj, n_right) -> list:
    """Maximum-cardinality matching (augmenting paths).

    ``adj[i]`` lists right-vertex indices adjacent to left vertex ``i``.
    Returns ``(left, right)`` pairs.
    """
    match_right = [-1] * n_right

    def augment(u, seen):
        for v in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] < 0 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(len(adj)):
        augment(u, [False] * n_right)
    return sorted((u, v) for v, u in enumerate(match_right) if u >= 0)


def _arrays(events):
    on = np.array([e.onset for e in events], dtype=np.float64)
    off = np.array([e.offset for e in events], dtype=np.float64)
    pitch = np.array([e.pitch for e in events], dtype=np.int64)
    vel = np.array([e.velocity for e in events], dtype=np.float64)
    return on, off, pitch, vel


def candidate_pairs(ref, est, onset_tol=0.05, require_offset=False, offset_tol=0.05, offset_ratio=None):
    """Boolean (n_ref, n_est) matrix of pitch/onset(/offset) compatible pairs."""
    r_on, r_off, r_p, _ = _arrays(ref)
    e_on, e_off, e_p, _ = _arrays(est)
    ok = r_p[:, None] == e_p[None, :]
    ok &= np.round(np.abs(r_on[:, None] - e_on[None, :]), _DECIMALS) <= onset_tol
    if require_offset:
        tol = np.full(len(ref), float(offset_tol))
        if offset_ratio is not None:
            tol = np.maximum(tol, offset_ratio * (r_off - r_on))
        ok &= np.round(np.abs(r_off[:, None] - e_off[None, :]), _DECIMALS) <= tol[:, None]
    return ok


def velocity_scale(ref, est, cand) -> float:
    """Least-squares factor s minimising sum (s * v_est - v_ref)^2 over candidate pairs."""
    _, _, _, r_v = _arrays(ref)
    _, _, _, e_v = _arrays(est)
    i, j = np.nonzero(cand)
    den = float(np.sum(e_v[j] ** 2))
    if i.size == 0 or den == 0:
        return 1.0
    return float(np.sum(e_v[j] * r_v[i]) / den)


def match_notes(ref, est, onset_tol=0.05, require_offset=False, require_velocity=False,
                offset_tol=0.05, velocity_tol=0.1, offset_ratio=None) -> Metrics:
    """Note-level P/R/F1 from a maximum one-to-one matching of compatible pairs.

    ``offset_ratio`` switches to the duration-proportional offset window
    ``max(offset_tol, offset_ratio * duration)``; None keeps the fixed window.
    """
    ref, est = list(ref), list(est)
    if not ref or not est:
        return Metrics.from_counts(0, len(ref), len(est))
    cand = candidate_pairs(ref, est, onset_tol, require_offset, offset_tol, offset_ratio)
    if require_velocity:
        s = velocity_scale(ref, est, cand)
        _, _, _, r_v = _arrays(ref)
        _, _, _, e_v = _arrays(est)
        cand &= np.round(np.abs(s * e_v[None, :] - r_v[:, None]), _DECIMALS) <= velocity_tol
    adj = [list(np.flatnonzero(row)) for row in cand]
    matched = len(max_bipartite_matching(adj, len(est)))
    return Metrics.from_counts(matched, len(ref), len(est))


def frame_metrics(ref_roll, est_roll) -> Metrics:
    ref = np.asarray(ref_roll) > 0
    est = np.asarray(est_roll) > 0
    if ref.shape != est.shape:
        raise ShapeError(f"roll shapes differ: {ref.shape} vs {est.shape}")
    tp = int(np.sum(ref & est))
    return Metrics.from_counts(tp, int(ref.sum()), int(est.sum()))


def levenshtein(a, b) -> int:
    """Minimum number of insertions, deletions and substitutions turning a into b."""
    codes = {}
    ia = [codes.setdefault(s, len(codes)) for s in a]
    ib = [codes.setdefault(s, len(codes)) for s in b]
    return kernels.levenshtein(np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64))


def per(ref, hyp) -> float:
    """Phoneme error rate: edit distance over reference length (may exceed 1)."""
    ref = list(ref)
    if not ref:
        raise InvalidInput("reference phoneme sequence is empty")
    return levenshtein(ref, list(hyp)) / len(ref)


def transcription_metrics(ref, est, hop=512, sr=16000, n_frames=None, offset_ratio=None) -> dict:
    """The five report columns (note, note-w-o, note-w-v, note-w-ov, frame)."""
    ref, est = list(ref), list(est)
    if n_frames is None:
        end = max([e.offset for e in ref + est], default=0.0)
        n_frames = max(1, int(np.ceil(end * sr / hop)) + 1)
    out = {
        "note": match_notes(ref, est),
        "note-w-o": match_notes(ref, est, require_offset=True, offset_ratio=offset_ratio),
        "note-w-v": match_notes(ref, est, require_velocity=True),
        "note-w-ov": match_notes(ref, est, require_offset=True, require_velocity=True, offset_ratio=offset_ratio),
    }
    out["frame"] = frame_metrics(
        events_to_rolls(ref, n_frames, hop, sr).frame_roll,
        events_to_rolls(est, n_frames, hop, sr).frame_roll,
    )
    return out


def metrics_csv(rows: dict) -> str:
    """``rows``: label -> {column: Metrics}.  One line per (label, column)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "precision", "recall", "f1", "matched", "n_ref", "n_est"])
    for label, cols in rows.items():
        for name, m in cols.items():
            w.writerow([label, name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}",
                        m.matched, m.n_ref, m.n_est])
    return buf.getvalue()


def f1_table(rows: dict, columns=TABLE_COLUMNS) -> str:
    """Aligned plain-text F1 table, one row per model label."""
    header = ["architecture", *columns]
    body = []
    for label, cols in rows.items():
        body.append([label] + [f"{cols[c].f1:.3f}" if c in cols else "-" for c in columns])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"
