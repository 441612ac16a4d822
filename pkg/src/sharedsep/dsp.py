"""Time-frequency front-end: STFT, magnitude, per-bin normalization, patches.

Signals are arrays shaped ``(channels, samples)``; spectrograms are shaped
``(channels, frames, bins)`` with ``bins = window_size // 2 + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

WINDOW_KINDS = ("hann", "boxcar")


def make_window(kind: str, size: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann: COLA at hops of size/4 and size/2
        n = np.arange(size)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)
    if kind == "boxcar":
        return np.ones(size)
    raise InvalidInputError(f"unknown window kind {kind!r}; expected one of {WINDOW_KINDS}")


def cola_deviation(window: np.ndarray, hop: int) -> float:
    """Peak-to-peak ripple of the overlap-added window, relative to its mean."""
    size = len(window)
    total = np.zeros(hop)
    for start in range(0, size, hop):
        chunk = window[start:start + hop]
        total[: len(chunk)] += chunk
    mean = total.mean()
    if mean == 0:
        return math.inf
    return float((total.max() - total.min()) / mean)


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop: int = 512
    window_kind: str = "hann"
    sample_rate: int = 44100
    center: bool = True

    def __post_init__(self):
        if self.window_size < 2 or self.window_size % 2:
            raise InvalidInputError(f"window_size must be even and >= 2, got {self.window_size}")
        if not 1 <= self.hop <= self.window_size:
            raise InvalidInputError(f"hop must lie in [1, window_size], got {self.hop}")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        dev = cola_deviation(make_window(self.window_kind, self.window_size), self.hop)
        if dev > 1e-10:
            raise InvalidInputError(
                f"{self.window_kind} window of {self.window_size} with hop {self.hop} "
                f"violates constant overlap-add (ripple {dev:.3g})"
            )

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return make_window(self.window_kind, self.window_size)

    def n_frames(self, n_samples: int) -> int:
        if self.center:
            return math.ceil(n_samples / self.hop)
        return 1 + (n_samples - self.window_size) // self.hop

    def to_dict(self) -> dict:
        return {
            "window_size": self.window_size,
            "hop": self.hop,
            "window_kind": self.window_kind,
            "sample_rate": self.sample_rate,
            "center": self.center,
        }


@dataclass
class ComplexSpectrogram:
    data: np.ndarray
    config: StftConfig
    n_samples: int

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MagnitudeSpectrogram:
    data: np.ndarray
    config: StftConfig
    n_samples: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass
class NormalizationStats:
    per_bin_std: np.ndarray
    epsilon: float = 1e-8

    def __post_init__(self):
        self.per_bin_std = np.maximum(np.asarray(self.per_bin_std, dtype=np.float64), self.epsilon)

    @property
    def n_bins(self) -> int:
        return len(self.per_bin_std)


def _as_channels(signal) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidInputError(f"signal must be (channels, samples), got shape {x.shape}")
    return x


def stft(signal, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Windowed DFT of every frame; output is ``(channels, frames, bins)``.

    With ``config.center`` the signal is reflect-padded by half a window on
    both sides and ``ceil(len / hop)`` frames are produced.
    """
    x = _as_channels(signal)
    n = x.shape[1]
    size, hop = config.window_size, config.hop
    if n < size:
        raise InvalidInputError(f"signal of {n} samples is shorter than one window ({size})")
    n_frames = config.n_frames(n)
    if config.center:
        half = size // 2
        x = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    frames = sliding_window_view(x, size, axis=1)[:, ::hop][:, :n_frames]
    return ComplexSpectrogram(np.fft.rfft(frames * config.window, axis=-1), config, n)


def magnitude(spec: ComplexSpectrogram) -> MagnitudeSpectrogram:
    return MagnitudeSpectrogram(np.abs(spec.data), spec.config, spec.n_samples)


def istft(data: np.ndarray, config: StftConfig, n_samples: int) -> np.ndarray:
    """Weighted overlap-add inverse with squared-window normalization."""
    size, hop = config.window_size, config.hop
    n_channels, n_frames, _ = data.shape
    window = config.window
    frames = np.fft.irfft(data, n=size, axis=-1) * window
    span = (n_frames - 1) * hop + size
    out = np.zeros((n_channels, span))
    norm = np.zeros(span)
    w2 = window ** 2
    for l in range(n_frames):
        out[:, l * hop: l * hop + size] += frames[:, l]
        norm[l * hop: l * hop + size] += w2
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    start = size // 2 if config.center else 0
    out = out[:, start: start + n_samples]
    if out.shape[1] < n_samples:
        out = np.pad(out, ((0, 0), (0, n_samples - out.shape[1])))
    return out


def reconstruct(estimate: MagnitudeSpectrogram, mixture_phase: ComplexSpectrogram) -> np.ndarray:
    """Synthesize a waveform from an estimated magnitude and the mixture phase."""
    est = estimate.data if isinstance(estimate, MagnitudeSpectrogram) else np.asarray(estimate)
    if est.shape != mixture_phase.data.shape:
        raise InvalidInputError(
            f"estimate shape {est.shape} does not match mixture spectrogram {mixture_phase.data.shape}"
        )
    phase = np.exp(1j * np.angle(mixture_phase.data))
    return istft(est * phase, mixture_phase.config, mixture_phase.n_samples)


@dataclass
class _BinMoments:
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def update(self, values: np.ndarray):
        # values: (..., bins); Chan et al. pairwise merge keeps precision
        flat = values.reshape(-1, values.shape[-1]).astype(np.float64)
        n_b = flat.shape[0]
        if n_b == 0:
            return
        mean_b = flat.mean(axis=0)
        m2_b = ((flat - mean_b) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        if mean_b.shape != self.mean.shape:
            raise InvalidInputError("spectrograms in the stream disagree on bin count")
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n_b / total)
        self.count = total


def fit_normalization(training_spectrograms: Iterable, epsilon: float = 1e-8) -> NormalizationStats:
    """Population standard deviation of every frequency bin over a stream."""
    moments = _BinMoments()
    for spec in training_spectrograms:
        data = spec.data if isinstance(spec, MagnitudeSpectrogram) else np.asarray(spec)
        moments.update(data)
    if moments.count == 0:
        raise InvalidInputError("cannot fit normalization on an empty stream")
    return NormalizationStats(np.sqrt(moments.m2 / moments.count), epsilon)


def _scale(spec, factor: np.ndarray, stats: NormalizationStats):
    data = spec.data if isinstance(spec, MagnitudeSpectrogram) else np.asarray(spec)
    if data.shape[-1] != stats.n_bins:
        raise InvalidInputError(
            f"spectrogram has {data.shape[-1]} bins, normalization stats have {stats.n_bins}"
        )
    out = data * factor.astype(data.dtype if data.dtype.kind == "f" else np.float64)
    if isinstance(spec, MagnitudeSpectrogram):
        return MagnitudeSpectrogram(out, spec.config, spec.n_samples)
    return out


def normalize(spec, stats: NormalizationStats):
    return _scale(spec, 1.0 / stats.per_bin_std, stats)


def denormalize(spec, stats: NormalizationStats):
    return _scale(spec, stats.per_bin_std, stats)


def patch_offsets(n_frames: int, patch_frames: int, hop_frames: int) -> list[int]:
    if patch_frames < 1 or hop_frames < 1:
        raise InvalidInputError("patch_frames and hop_frames must be >= 1")
    if n_frames < patch_frames:
        return []
    return list(range(0, n_frames - patch_frames + 1, hop_frames))


def extract_patches(spec: MagnitudeSpectrogram, patch_frames: int, hop_frames: int) -> list[MagnitudeSpectrogram]:
    return [
        MagnitudeSpectrogram(spec.data[:, o: o + patch_frames], spec.config)
        for o in patch_offsets(spec.n_frames, patch_frames, hop_frames)
    ]
