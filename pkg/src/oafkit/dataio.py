"""Audio and label file formats, target construction and synthetic corpora."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidLabel, ParseError, UnsupportedFormat
from .frontend import AudioClip

MIN_PITCH = 21
MAX_PITCH = 108
N_PITCHES = MAX_PITCH - MIN_PITCH + 1


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: float = 1.0

    def __post_init__(self):
        if int(self.pitch) != self.pitch or not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise InvalidInput(f"pitch {self.pitch} outside {MIN_PITCH}..{MAX_PITCH}")
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)) or self.offset <= self.onset:
            raise InvalidInput(f"need offset > onset, got onset={self.onset} offset={self.offset}")
        if not 0.0 <= self.velocity <= 1.0:
            raise InvalidInput(f"velocity {self.velocity} outside [0, 1]")

    @property
    def frequency(self) -> float:
        return midi_to_hz(self.pitch)


@dataclass(frozen=True)
class PhonemeSegment:
    symbol: int
    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise InvalidInput(f"need end > start, got {self.start}..{self.end}")


class PhonemeAlphabet:
    """Interns phoneme strings to consecutive integer ids."""

    def __init__(self, symbols=()):
        self._ids = {}
        self.symbols = []
        for s in symbols:
            self.intern(s)

    def intern(self, symbol: str) -> int:
        if symbol not in self._ids:
            self._ids[symbol] = len(self.symbols)
            self.symbols.append(symbol)
        return self._ids[symbol]

    def __len__(self):
        return len(self.symbols)

    def __getitem__(self, idx):
        return self.symbols[idx]


@dataclass
class LabelTensors:
    frame_roll: np.ndarray
    onset_roll: np.ndarray
    offset_roll: np.ndarray
    velocity_roll: np.ndarray
    onset_time_roll: np.ndarray
    offset_time_roll: np.ndarray

    @property
    def n_frames(self):
        return self.frame_roll.shape[-2]

    def crop(self, start, length, time_shift=0.0) -> "LabelTensors":
        """Frames [start, start+length), zero-padded past the end; time targets shifted."""
        def cut(a):
            part = a[start:start + length]
            if part.shape[0] < length:
                part = np.concatenate([part, np.zeros((length - part.shape[0],) + a.shape[1:], a.dtype)])
            return part

        on_t, off_t = cut(self.onset_time_roll), cut(self.offset_time_roll)
        active = cut(self.frame_roll) > 0
        on_t = np.where(active, on_t - time_shift, 0.0).astype(np.float32)
        off_t = np.where(active, off_t - time_shift, 0.0).astype(np.float32)
        return LabelTensors(cut(self.frame_roll), cut(self.onset_roll), cut(self.offset_roll),
                            cut(self.velocity_roll), on_t, off_t)

    @staticmethod
    def stack(items) -> "LabelTensors":
        return LabelTensors(*(np.stack([getattr(it, f) for it in items]) for f in (
            "frame_roll", "onset_roll", "offset_roll", "velocity_roll", "onset_time_roll", "offset_time_roll")))


def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def time_to_frame(t, hop, sr):
    """First frame whose start time is >= t (robust to float noise)."""
    return int(math.ceil(t * sr / hop - 1e-6))


# ---------------------------------------------------------------- WAV


def read_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormat(f"{path}: {msg} (only PCM is supported)") from exc
        raise ParseError(msg, path=str(path)) from exc
    except EOFError as exc:
        raise ParseError("truncated WAV header", path=str(path)) from exc
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples (only 16-bit PCM is supported)")
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{path}: {channels} channels (mono or stereo only)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(data, rate)


def write_wav(path, clip: AudioClip) -> None:
    ints = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(ints.tobytes())


# ---------------------------------------------------------------- text labels


def read_note_labels(path) -> list:
    """Parse ``onset<TAB>offset<TAB>pitch<TAB>velocity_0_127`` lines."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", path=str(path), line=n)
            try:
                onset, offset = float(parts[0]), float(parts[1])
                pitch_f = float(parts[2])
                vel = float(parts[3])
            except ValueError as exc:
                raise ParseError(f"non-numeric field: {exc}", path=str(path), line=n) from None
            if pitch_f != int(pitch_f):
                raise InvalidLabel(f"pitch {parts[2]} is not an integer", path=str(path), line=n)
            if not 0 <= vel <= 127:
                raise InvalidLabel(f"velocity {vel} outside 0..127", path=str(path), line=n)
            try:
                events.append(NoteEvent(int(pitch_f), onset, offset, vel / 127.0))
            except InvalidInput as exc:
                raise InvalidLabel(str(exc), path=str(path), line=n) from None
    return events


def format_note_labels(events) -> str:
    lines = ["# onset_sec\toffset_sec\tpitch\tvelocity_0_127"]
    for e in sorted(events, key=lambda e: (e.onset, e.pitch)):
        lines.append(f"{e.onset:.6f}\t{e.offset:.6f}\t{e.pitch}\t{int(round(e.velocity * 127))}")
    return "\n".join(lines) + "\n"


def write_note_labels(path, events) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_note_labels(events))


def read_phn(path, sample_rate, alphabet: PhonemeAlphabet | None = None) -> list:
    """Parse ``start_sample end_sample symbol`` lines into PhonemeSegments."""
    alphabet = alphabet if alphabet is not None else PhonemeAlphabet()
    segments = []
    last_end = None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 'start end symbol', got {line.strip()!r}", path=str(path), line=n)
            try:
                start, end = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError("sample positions must be integers", path=str(path), line=n) from None
            if start < 0 or end <= start:
                raise ParseError(f"bad segment {start}..{end}", path=str(path), line=n)
            if last_end is not None and start < last_end:
                raise ParseError(f"segment starting at {start} overlaps previous end {last_end}", path=str(path), line=n)
            last_end = end
            segments.append(PhonemeSegment(alphabet.intern(parts[2]), start / sample_rate, end / sample_rate))
    return segments


def write_phn(path, segments, sample_rate, alphabet: PhonemeAlphabet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in segments:
            fh.write(f"{int(round(s.start * sample_rate))} {int(round(s.end * sample_rate))} {alphabet[s.symbol]}\n")


# ---------------------------------------------------------------- targets


def _empty_rolls(n_frames, n_pitches):
    z = lambda: np.zeros((n_frames, n_pitches), np.float32)  # noqa: E731
    return LabelTensors(z(), z(), z(), z(), z(), z())


def _note_span(onset, offset, hop, sr):
    start = time_to_frame(onset, hop, sr)
    end = max(time_to_frame(offset, hop, sr), start + 1)
    return start, end


def events_to_rolls(events, n_frames, hop=512, sr=16000, onset_frames=2,
                    n_pitches=N_PITCHES, min_pitch=MIN_PITCH) -> LabelTensors:
    """Frame, onset, offset, velocity and time-regression targets (frames x pitches).

    A frame is active when its start time lies in [onset, offset).  Onset
    labels cover the first ``onset_frames`` frames of a note, offset labels
    the ``onset_frames`` frames starting at the first frame after it.
    """
    rolls = _empty_rolls(n_frames, n_pitches)
    limit = n_frames * hop / sr + 1e-9
    for e in events:
        if e.onset < 0 or e.offset > limit:
            raise InvalidLabel(f"event {e} outside clip [0, {n_frames * hop / sr:.6f}] s")
        col = e.pitch - min_pitch
        if not 0 <= col < n_pitches:
            raise InvalidLabel(f"pitch {e.pitch} outside roll range")
        start, end = _note_span(e.onset, e.offset, hop, sr)
        end = min(end, n_frames)
        if start >= n_frames:
            continue
        rolls.frame_roll[start:end, col] = 1
        rolls.onset_roll[start:min(start + onset_frames, end), col] = 1
        rolls.velocity_roll[start:min(start + onset_frames, end), col] = e.velocity
        rolls.offset_roll[end:min(end + onset_frames, n_frames), col] = 1
        rolls.onset_time_roll[start:end, col] = e.onset
        rolls.offset_time_roll[start:end, col] = e.offset
    return rolls


def segments_to_rolls(segments, n_frames, n_symbols, hop=512, sr=16000, onset_frames=2) -> LabelTensors:
    """Phoneme segments as rolls (symbol id takes the role of pitch)."""
    rolls = _empty_rolls(n_frames, n_symbols)
    for s in segments:
        start, end = _note_span(s.start, s.end, hop, sr)
        end = min(end, n_frames)
        if start >= n_frames:
            continue
        rolls.frame_roll[start:end, s.symbol] = 1
        rolls.onset_roll[start:min(start + onset_frames, end), s.symbol] = 1
        rolls.offset_roll[end:min(end + onset_frames, n_frames), s.symbol] = 1
        rolls.onset_time_roll[start:end, s.symbol] = s.start
        rolls.offset_time_roll[start:end, s.symbol] = s.end
    return rolls


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    n_harmonics: int = 6
    decay_rate: float = 3.0
    noise_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_harmonics < 1:
            raise InvalidInput("n_harmonics must be >= 1")
        if not self.decay_rate > 0:
            raise InvalidInput("decay_rate must be positive")
        if self.noise_floor < 0:
            raise InvalidInput("noise_floor must be >= 0")


def synth_clip(events, sr=16000, cfg: SynthConfig = SynthConfig(), duration=None) -> AudioClip:
    """Additive decaying-harmonic rendering of a score.

    The note mix is scaled to a peak of 0.9, then uniform noise of amplitude
    ``noise_floor`` is added.
    """
    events = list(events)
    if duration is None:
        duration = max((e.offset for e in events), default=0.0)
    n = int(math.ceil(duration * sr))
    mix = np.zeros(n)
    for e in events:
        i0 = int(round(e.onset * sr))
        i1 = min(int(round(e.offset * sr)), n)
        if i1 <= i0:
            continue
        t = np.arange(i1 - i0) / sr
        f0 = midi_to_hz(e.pitch)
        env = np.exp(-cfg.decay_rate * t)
        tone = np.zeros_like(t)
        for h in range(1, cfg.n_harmonics + 1):
            if h * f0 >= sr / 2:
                break
            tone += np.sin(2 * np.pi * h * f0 * t) / h
        mix[i0:i1] += e.velocity * env * tone
    peak = np.max(np.abs(mix)) if n else 0.0
    if peak > 0:
        mix *= 0.9 / peak
    rng = np.random.default_rng(cfg.seed)
    mix += rng.uniform(-cfg.noise_floor, cfg.noise_floor, size=n)
    return AudioClip(np.clip(mix, -1.0, 1.0), sr)


def gen_random_score(rng, duration, density, pitch_range=(MIN_PITCH, MAX_PITCH),
                     dur_range=(0.1, 0.5), vel_range=(0.3, 1.0)) -> list:
    """Random non-overlapping-per-pitch score.

    Each pitch in the inclusive ``pitch_range`` gets a Poisson stream of
    starts at ``density`` notes per second, so the expected total rate is
    density * number of pitches.
    """
    if not duration > 0:
        raise InvalidInput("duration must be positive")
    if not 0 <= density <= 1:
        raise InvalidInput("density must lie in (0, 1]")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    events = []
    if density == 0:
        return events
    lo, hi = pitch_range
    for pitch in range(lo, hi + 1):
        t = rng.exponential(1.0 / density)
        while True:
            length = rng.uniform(*dur_range)
            vel = rng.uniform(*vel_range)
            if t + length > duration:
                break
            events.append(NoteEvent(pitch, float(t), float(t + length), float(vel)))
            t = t + length + rng.exponential(1.0 / density)
    events.sort(key=lambda e: (e.onset, e.pitch))
    return events


# ---------------------------------------------------------------- corpora


@dataclass
class Example:
    """One clip with its targets; ``events`` are NoteEvents or PhonemeSegments."""

    clip: AudioClip
    events: list
    name: str = ""
    kind: str = "notes"
    n_symbols: int = N_PITCHES
    _rolls: dict = field(default_factory=dict, repr=False)

    def rolls(self, hop=512, onset_frames=2) -> LabelTensors:
        key = (hop, onset_frames)
        if key not in self._rolls:
            n_frames = -(-len(self.clip.samples) // hop)
            if self.kind == "notes":
                self._rolls[key] = events_to_rolls(self.events, n_frames, hop, self.clip.sample_rate, onset_frames)
            else:
                self._rolls[key] = segments_to_rolls(self.events, n_frames, self.n_symbols, hop,
                                                     self.clip.sample_rate, onset_frames)
        return self._rolls[key]


def synth_corpus(n_clips, seed, duration=2.0, density=0.05, pitch_range=(MIN_PITCH, MAX_PITCH),
                 sr=16000, synth_cfg: SynthConfig | None = None) -> list:
    """Deterministic list of synthetic :class:`Example` clips."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        events = gen_random_score(rng, duration, density, pitch_range)
        cfg = synth_cfg or SynthConfig()
        cfg = SynthConfig(cfg.n_harmonics, cfg.decay_rate, cfg.noise_floor, int(rng.integers(2**31)))
        clip = synth_clip(events, sr, cfg, duration=duration)
        out.append(Example(clip, events, name=f"synth_{seed}_{i:04d}"))
    return out


def load_split(directory, sample_rate=16000, alphabet: PhonemeAlphabet | None = None) -> list:
    """All ``*.wav`` files in a split directory with their ``.tsv`` (notes) or ``.phn`` labels."""
    from pathlib import Path

    out = []
    for wav in sorted(Path(directory).glob("*.wav")):
        clip = read_wav(wav)
        tsv, phn = wav.with_suffix(".tsv"), wav.with_suffix(".phn")
        if tsv.exists():
            out.append(Example(clip, read_note_labels(tsv), name=wav.stem))
        elif phn.exists():
            alphabet = alphabet if alphabet is not None else PhonemeAlphabet()
            segs = read_phn(phn, clip.sample_rate, alphabet)
            out.append(Example(clip, segs, name=wav.stem, kind="phonemes"))
        else:
            raise ParseError("no .tsv or .phn label file next to audio", path=str(wav))
    if alphabet is not None:
        for ex in out:
            ex.n_symbols = len(alphabet)
    return out
