"""Waveform-to-spectrogram processing: log-mel analysis, whitening, snippets, segmentation.

Everything here is a pure function over immutable value types; the one random
operation (snippet extraction) takes a caller-supplied generator. The analysis
contract is fixed so that frame counts have an exact closed form:

* 32 kHz input only (no resampler; a wrong rate is an error),
* 1024-point FFT, hop 320, Hann window, no centering or reflection padding,
* 128 triangular mel filters from 0 Hz to Nyquist (2595*log10(1+f/700) scale),
* natural log with floor 1e-10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 32000
N_MELS = 128


class DspError(Exception):
    pass


class TooShort(DspError):
    pass


class WrongSampleRate(DspError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if samples.size and float(np.max(np.abs(samples))) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Log-energy matrix of shape (frames, 128), time-major."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[1] != N_MELS:
            raise ValueError(f"expected shape (frames, {N_MELS}), got {values.shape}")
        if values.shape[0] < 1:
            raise ValueError("spectrogram needs at least one frame")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram values must be finite")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WhiteningStats:
    """Global mean/std used to center and scale spectrogram cells."""

    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise ValueError("whitening stats must be finite")
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")


@dataclass(frozen=True)
class LogmelConfig:
    n_fft: int = 1024
    hop: int = 320
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE
    log_floor: float = 1e-10


DEFAULT_LOGMEL = LogmelConfig()


def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: LogmelConfig = DEFAULT_LOGMEL) -> np.ndarray:
    """Center frequency in Hz of each of the n_mels filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: LogmelConfig = DEFAULT_LOGMEL) -> np.ndarray:
    """Triangular filter matrix of shape (n_mels, n_fft//2 + 1).

    Filters are unnormalized triangles with feet on the neighboring centers,
    so rows are nonnegative and adjacent filters overlap: every FFT bin
    strictly between the first and last center gets positive total weight.
    """
    freqs = np.arange(cfg.n_fft // 2 + 1, dtype=np.float64) * cfg.sample_rate / cfg.n_fft
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    left = points[:-2, None]
    center = points[1:-1, None]
    right = points[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def frame_count(n_samples: int, cfg: LogmelConfig = DEFAULT_LOGMEL) -> int:
    """Number of analysis frames for a signal of n_samples: 1 + (n - n_fft) // hop."""
    if n_samples < cfg.n_fft:
        raise TooShort(f"need at least {cfg.n_fft} samples, got {n_samples}")
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def seconds_to_frames(seconds: float, cfg: LogmelConfig = DEFAULT_LOGMEL) -> int:
    """Segment length in frames for a duration in seconds, at the hop rate.

    The hop of 320 samples at 32 kHz gives 100 frames per second, so ten
    seconds maps to 1000 frames.
    """
    return int(round(seconds * cfg.sample_rate / cfg.hop))


def logmel(w: Waveform, cfg: LogmelConfig = DEFAULT_LOGMEL) -> Spectrogram:
    """Log-mel spectrogram of a 32 kHz waveform.

    Raises WrongSampleRate for any other rate (resampling is out of scope)
    and TooShort for signals shorter than one FFT window.
    """
    if w.sample_rate != cfg.sample_rate:
        raise WrongSampleRate(f"expected {cfg.sample_rate} Hz input, got {w.sample_rate} Hz")
    if len(w) < cfg.n_fft:
        raise TooShort(f"need at least {cfg.n_fft} samples, got {len(w)}")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.n_fft)[:: cfg.hop]
    window = np.hanning(cfg.n_fft)
    spectra = np.fft.rfft(frames * window, axis=1)
    power = spectra.real**2 + spectra.imag**2
    mel = power @ mel_filterbank(cfg).T
    return Spectrogram(np.log(np.maximum(mel, cfg.log_floor)))


def whiten(s: Spectrogram, stats: WhiteningStats) -> Spectrogram:
    """Elementwise (x - mean) / std."""
    return Spectrogram((s.values - stats.mean) / stats.std)


def compute_whitening_stats(specs: Iterable[Spectrogram]) -> WhiteningStats:
    """Streaming global mean/std (population) over all cells of all spectrograms."""
    count = 0
    total = 0.0
    total_sq = 0.0
    for s in specs:
        v = s.values
        count += v.size
        total += float(v.sum())
        total_sq += float((v * v).sum())
    if count == 0:
        raise DspError("no spectrograms supplied")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    if var == 0.0:
        raise DspError("spectrogram cells have zero variance; whitening undefined")
    return WhiteningStats(mean=mean, std=math.sqrt(var))


def snippet_or_pad(w: Waveform, max_seconds: float, rng: np.random.Generator) -> Waveform:
    """Return w unchanged if short enough, else a uniformly random contiguous snippet.

    The snippet is exactly round(max_seconds * sample_rate) samples long and
    its start offset is drawn from the supplied generator.
    """
    if max_seconds <= 0:
        raise ValueError(f"max_seconds must be positive, got {max_seconds}")
    max_len = int(round(max_seconds * w.sample_rate))
    if len(w) <= max_len:
        return w
    start = int(rng.integers(0, len(w) - max_len + 1))
    return Waveform(w.samples[start : start + max_len], w.sample_rate)


def pad(w: Waveform, target_len: int) -> Waveform:
    """Zero-pad to target_len samples; the batch loop uses this to equalize lengths."""
    if target_len < len(w):
        raise ValueError(f"target length {target_len} is shorter than the waveform ({len(w)})")
    if target_len == len(w):
        return w
    out = np.zeros(target_len, dtype=np.float64)
    out[: len(w)] = w.samples
    return Waveform(out, w.sample_rate)


def segment(s: Spectrogram, seg_frames: int) -> list[Spectrogram]:
    """Cut into consecutive non-overlapping chunks of seg_frames frames.

    The final chunk is zero-padded to full length, so the count is always
    ceil(frames / seg_frames).
    """
    if seg_frames < 1:
        raise ValueError(f"seg_frames must be >= 1, got {seg_frames}")
    n = math.ceil(s.frames / seg_frames)
    out = []
    for k in range(n):
        chunk = s.values[k * seg_frames : (k + 1) * seg_frames]
        if chunk.shape[0] < seg_frames:
            padded = np.zeros((seg_frames, s.bins), dtype=np.float64)
            padded[: chunk.shape[0]] = chunk
            chunk = padded
        out.append(Spectrogram(chunk))
    return out
