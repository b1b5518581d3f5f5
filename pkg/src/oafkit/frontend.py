"""Waveform to log-mel spectrogram conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFilterbank, InvalidConfig, InvalidInput


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInput(f"audio must be mono, got shape {self.samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("audio contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise InvalidInput("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    n_mels: int = 229
    fmin: float = 20.0
    fmax: float = 8000.0
    sample_rate: int = 16000
    window_len: int = 2048
    hop: int = 512
    fft_len: int = 2048
    log_floor: float = 1e-5

    def validate(self) -> "SpectrogramConfig":
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        if not 0 < self.fmin < self.fmax <= self.sample_rate / 2:
            raise InvalidConfig(
                f"need 0 < fmin < fmax <= sr/2, got fmin={self.fmin} fmax={self.fmax} sr={self.sample_rate}"
            )
        if not 0 < self.hop <= self.window_len <= self.fft_len:
            raise InvalidConfig(
                f"need 0 < hop <= window_len <= fft_len, got {self.hop}, {self.window_len}, {self.fft_len}"
            )
        if not self.log_floor > 0:
            raise InvalidConfig("log_floor must be positive")
        return self

    @classmethod
    def speech(cls, **overrides) -> "SpectrogramConfig":
        """Narrow band used for speech input (30-300 Hz).

        229 bands do not fit into 30-300 Hz at 2048-point resolution, so the
        2048-sample frames are zero-padded to an 8192-point FFT.
        """
        kw = dict(fmin=30.0, fmax=300.0, fft_len=8192)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class Spectrogram:
    values: np.ndarray  # frames x n_mels
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop / self.sample_rate


def n_frames(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for overlapping STFT frames
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _check(clip: AudioClip, cfg: SpectrogramConfig):
    cfg.validate()
    if len(clip.samples) == 0:
        raise InvalidInput("empty audio clip")
    if clip.sample_rate != cfg.sample_rate:
        raise InvalidConfig(
            f"clip sample rate {clip.sample_rate} does not match config {cfg.sample_rate}"
        )


def frame_signal(samples: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Centered, reflect-padded frames of length window_len (F x window_len)."""
    half = cfg.window_len // 2
    padded = np.pad(samples, (half, half), mode="reflect")
    count = n_frames(len(samples), cfg.hop)
    starts = np.arange(count) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.window_len)[None, :]
    return padded[idx]


def stft(clip: AudioClip, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Magnitude STFT, shape ``(ceil(N/hop), fft_len//2 + 1)``."""
    _check(clip, cfg)
    frames = frame_signal(clip.samples, cfg) * hann_window(cfg.window_len)
    return np.abs(np.fft.rfft(frames, n=cfg.fft_len, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: SpectrogramConfig) -> np.ndarray:
    """n_mels + 2 edge frequencies in Hz; entries 1..n_mels are the filter centers."""
    cfg.validate()
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_centers(cfg: SpectrogramConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Peak-normalised triangular filters, shape ``(n_mels, fft_len//2 + 1)``."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.fft_len // 2 + 1) * cfg.sample_rate / cfg.fft_len
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise DegenerateFilterbank(
            f"{empty.size} of {cfg.n_mels} mel filters contain no FFT bin "
            f"(first empty filter {empty[0]}); lower n_mels or raise fft_len"
        )
    return fb / peaks[:, None]


_FB_CACHE: dict = {}


def _cached_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = mel_filterbank(cfg)
        fb.setflags(write=False)
        _FB_CACHE[cfg] = fb
    return fb


def log_mel(clip: AudioClip, cfg: SpectrogramConfig = SpectrogramConfig()) -> Spectrogram:
    mag = stft(clip, cfg)
    mel = mag @ _cached_filterbank(cfg).T
    return Spectrogram(np.log(mel + cfg.log_floor), cfg.hop, cfg.sample_rate)


def featurize(samples, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Convenience: raw sample array to float32 log-mel matrix."""
    return log_mel(AudioClip(samples, cfg.sample_rate), cfg).values.astype(np.float32)
