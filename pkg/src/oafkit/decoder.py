"""Posteriors to symbolic events."""
from __future__ import annotations

import numpy as np

from .dataio import MIN_PITCH, NoteEvent, PhonemeSegment


def _runs(mask):
    """Half-open [start, end) index pairs of True runs in a 1-D boolean array."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2], edges[1::2]))


def _note_starts(post, on):
    """Start frames for one pitch: one per local maximum of ``post`` inside a
    run of ``on`` (flat tops count once).

    The first peak of a run starts at the run's rising edge; a later peak
    starts just after the lowest frame separating it from the previous one.
    Peaks do not depend on the threshold, so raising it can only drop notes.
    """
    starts = []
    for a, b in _runs(on):
        seg = post[a:b]
        peaks = []
        i = 0
        while i < len(seg):
            j = i
            while j + 1 < len(seg) and seg[j + 1] == seg[i]:
                j += 1
            left = i == 0 or seg[i - 1] < seg[i]
            right = j == len(seg) - 1 or seg[j + 1] < seg[i]
            if left and right:
                peaks.append(i)
            i = j + 1
        starts.append(a)
        for prev, cur in zip(peaks, peaks[1:]):
            starts.append(a + prev + int(np.argmin(seg[prev:cur])) + 1)
    return starts


def decode_notes(heads: dict, onset_thresh=0.5, frame_thresh=0.5, hop=512, sr=16000,
                 min_pitch=MIN_PITCH) -> list:
    """Onset-gated note extraction from (frames x pitches) head arrays.

    A note starts where the onset head crosses its threshold (a second peak
    inside one above-threshold run starts another note) and lasts while the
    frame or onset head stays above threshold, up to the next start on that
    pitch.  Without an onset head, notes are runs of
    active frames; time-regression heads, when present, refine the times of
    those runs.
    """
    frame = np.asarray(heads["frame"])
    n_frames, n_pitches = frame.shape
    velocity = heads.get("velocity")
    frame_on = frame >= frame_thresh
    scale = hop / sr
    notes = []

    if heads.get("onset") is None:
        on_t, off_t = heads.get("onset_time"), heads.get("offset_time")
        for p in range(n_pitches):
            for start, end in _runs(frame_on[:, p]):
                onset, offset = start * scale, end * scale
                if on_t is not None and off_t is not None:
                    t0, t1 = float(on_t[start, p]), float(off_t[start, p])
                    if 0 <= t0 < t1:
                        onset, offset = t0, t1
                notes.append(NoteEvent(p + min_pitch, onset, offset, 1.0))
        notes.sort(key=lambda e: (e.onset, e.pitch))
        return notes

    onset = np.asarray(heads["onset"])
    onset_on = onset >= onset_thresh
    for p in range(n_pitches):
        starts = _note_starts(onset[:, p], onset_on[:, p])
        if not starts:
            continue
        active = frame_on[:, p] | onset_on[:, p]
        for k, start in enumerate(starts):
            stop = starts[k + 1] if k + 1 < len(starts) else n_frames
            end = start
            while end < stop and active[end]:
                end += 1
            vel = 1.0 if velocity is None else float(np.clip(velocity[start, p], 0.0, 1.0))
            notes.append(NoteEvent(p + min_pitch, start * scale, end * scale, vel))
    notes.sort(key=lambda e: (e.onset, e.pitch))
    return notes


def decode_phonemes(frame, hop=512, sr=16000, collapse=True) -> list:
    """Per-frame argmax; runs of one symbol become a segment when ``collapse``."""
    frame = np.asarray(frame)
    if frame.shape[0] == 0:
        return []
    best = frame.argmax(axis=1)
    scale = hop / sr
    if not collapse:
        return [PhonemeSegment(int(s), i * scale, (i + 1) * scale) for i, s in enumerate(best)]
    change = np.flatnonzero(np.diff(best)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(best)]])
    return [PhonemeSegment(int(best[s]), s * scale, e * scale) for s, e in zip(starts, ends)]
