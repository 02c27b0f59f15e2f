"""Sample loading and preprocessing for the recognition pipeline."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
from scipy.signal import lfilter

PCM16_SCALE = 32768.0
DEFAULT_SILENCE_THRESHOLD = 0.01
DEFAULT_NOISE_CUTOFF_HZ = 2000.0


class UnsupportedFormat(ValueError):
    """Input the sample loader cannot handle (stereo, non-PCM16, ...)."""


class AllSilence(ValueError):
    """Silence removal left no samples."""


class FrameTooShort(ValueError):
    """Windowing needs at least two samples."""


class SampleFormat(str, Enum):
    WAV_PCM16 = "WavPcm16"
    RAW_F64 = "RawF64"
    SINE = "Sine"


@dataclass(frozen=True)
class Sample:
    """Mono audio, float64 amplitudes in [-1, 1]."""

    data: np.ndarray
    sample_rate: int
    format: SampleFormat

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 1:
            raise UnsupportedFormat("sample data must be one-dimensional")
        if data.size and not np.all(np.isfinite(data)):
            raise UnsupportedFormat("amplitudes must be finite")

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.sample_rate == other.sample_rate
                and self.format == other.format and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class SineSpec:
    """Synthetic source: sin(2*pi*freq*t/rate) for t = 0..n-1, plus optional
    seeded uniform noise so test subjects are reproducible."""

    freq: float
    rate: int = 8000
    n: int = 2048
    noise_amplitude: float = 0.0
    seed: int = 0


def synthesize_sine(spec: SineSpec) -> Sample:
    t = np.arange(spec.n, dtype=np.float64)
    data = np.sin(2.0 * math.pi * spec.freq * t / spec.rate)
    if spec.noise_amplitude:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, spec.n)
    return Sample(data=data, sample_rate=spec.rate, format=SampleFormat.SINE)


def load_wav(path: str) -> Sample:
    """PCM16 mono WAV only; amplitudes scaled by 1/32768."""
    try:
        with wave.open(path, "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            frames = wav.readframes(wav.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise UnsupportedFormat("cannot read WAV %s: %s" % (path, exc)) from exc
    if channels != 1:
        raise UnsupportedFormat("only mono WAV is supported, got %d channels" % channels)
    if width != 2:
        raise UnsupportedFormat("only PCM16 WAV is supported, got %d-byte samples" % width)
    pcm = np.frombuffer(frames, dtype="<i2").astype(np.float64)
    return Sample(data=pcm / PCM16_SCALE, sample_rate=rate, format=SampleFormat.WAV_PCM16)


def load_sample(source: Union[str, SineSpec, Sample]) -> Sample:
    """Resolve a source (WAV path, sine spec, or ready-made sample) to a Sample."""
    if isinstance(source, Sample):
        return source
    if isinstance(source, SineSpec):
        return synthesize_sine(source)
    if isinstance(source, str):
        return load_wav(source)
    raise UnsupportedFormat("unsupported sample source: %r" % (source,))


def normalize(sample: Sample) -> Sample:
    """Scale so the peak |amplitude| is 1; all-zero input returned unchanged."""
    if sample.data.size == 0:
        return sample
    peak = float(np.max(np.abs(sample.data)))
    if peak == 0.0:
        return sample
    return Sample(data=sample.data / peak, sample_rate=sample.sample_rate,
                  format=sample.format)


def remove_silence(sample: Sample, threshold: float = DEFAULT_SILENCE_THRESHOLD) -> Sample:
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must be in [0, 1)")
    kept = sample.data[np.abs(sample.data) >= threshold]
    if kept.size == 0 and sample.data.size > 0:
        raise AllSilence("every sample fell below the silence threshold")
    return Sample(data=kept, sample_rate=sample.sample_rate, format=sample.format)


def remove_noise(sample: Sample, cutoff_hz: float = DEFAULT_NOISE_CUTOFF_HZ) -> Sample:
    """Single-pole low-pass: y[n] = alpha*y[n-1] + (1-alpha)*x[n], DC gain 1."""
    alpha = math.exp(-2.0 * math.pi * cutoff_hz / sample.sample_rate)
    out = lfilter([1.0 - alpha], [1.0, -alpha], sample.data)
    return Sample(data=out, sample_rate=sample.sample_rate, format=sample.format)


def hamming_window(frame: np.ndarray) -> np.ndarray:
    """out[n] = in[n] * (0.54 - 0.46*cos(2*pi*n/(N-1)))"""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[0]
    if n < 2:
        raise FrameTooShort("window needs at least 2 samples")
    taper = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    return frame * taper
