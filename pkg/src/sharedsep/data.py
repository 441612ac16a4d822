"""Corpus I/O: RIFF/WAVE files, stem directories and a synthetic corpus."""
from __future__ import annotations

import struct
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ChannelCountError, InvalidInputError, MalformedWavError, UnsupportedWavError
from .model import SOURCES

_PCM, _FLOAT, _EXTENSIBLE = 0x0001, 0x0003, 0xFFFE
SUBTYPES = ("float32", "pcm16", "pcm24")


class CorpusWarning(UserWarning):
    pass


# --------------------------------------------------------------------------- WAV


def read_wav(path, channels: int | None = None) -> tuple[np.ndarray, int]:
    """Read a WAV file into float32 buffers shaped ``(channels, samples)``.

    Accepts 16/24-bit PCM and 32-bit IEEE float (plain or extensible headers).
    PCM is scaled by ``1 / 2**(bits-1)``.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = blob[pos:pos + 4], struct.unpack_from("<I", blob, pos + 4)[0]
        body = blob[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = body
        elif cid == b"data":
            if len(body) < size:
                raise MalformedWavError(f"{path}: data chunk truncated ({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, n_ch, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedWavError(f"{path}: extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if n_ch < 1 or block_align != n_ch * bits // 8:
        raise MalformedWavError(f"{path}: inconsistent block alignment")
    if tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4", count=len(data) // 4).astype(np.float32)
    elif tag == _PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2", count=len(data) // 2).astype(np.float32) / 32768.0
    elif tag == _PCM and bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8, count=len(data) // 3 * 3).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float32) / np.float32(1 << 23)
    else:
        raise UnsupportedWavError(f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits)")
    n = len(samples) // n_ch
    buffers = np.ascontiguousarray(samples[: n * n_ch].reshape(n, n_ch).T)
    if channels is not None and n_ch != channels:
        raise ChannelCountError(f"{path}: has {n_ch} channel(s), {channels} requested")
    return buffers, rate


def write_wav(path, buffers, sample_rate: int, subtype: str = "float32"):
    x = np.asarray(buffers)
    if x.ndim == 1:
        x = x[None, :]
    n_ch = x.shape[0]
    if not 1 <= n_ch <= 2:
        raise InvalidInputError(f"only mono or stereo files are written, got {n_ch} channels")
    inter = x.T.reshape(-1)
    if subtype == "float32":
        tag, bits, payload = _FLOAT, 32, inter.astype("<f4").tobytes()
    elif subtype == "pcm16":
        q = np.clip(np.round(inter * 32768.0), -32768, 32767).astype("<i2")
        tag, bits, payload = _PCM, 16, q.tobytes()
    elif subtype == "pcm24":
        q = np.clip(np.round(inter * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        b = q.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
        tag, bits, payload = _PCM, 24, b.tobytes()
    else:
        raise InvalidInputError(f"unknown subtype {subtype!r}; choose from {SUBTYPES}")
    block = n_ch * bits // 8
    fmt = struct.pack("<HHIIHH", tag, n_ch, int(sample_rate), int(sample_rate) * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --------------------------------------------------------------------------- corpus


@dataclass
class Song:
    song_id: str
    stems: dict[str, np.ndarray]
    mixture: np.ndarray
    sample_rate: int

    @property
    def n_samples(self) -> int:
        return self.mixture.shape[1]

    @property
    def n_channels(self) -> int:
        return self.mixture.shape[0]

    def has_all_stems(self) -> bool:
        return all(s in self.stems for s in SOURCES)


def scan_corpus(root) -> list[Song]:
    """Load ``root/<song>/{mixture,vocals,drums,bass,other}.wav`` in lexicographic order.

    Songs without a mixture are skipped with a :class:`CorpusWarning`; missing
    stems are allowed and simply absent from ``Song.stems``.
    """
    root = Path(root)
    songs = []
    if not root.is_dir():
        return songs
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        mix_path = d / "mixture.wav"
        if not mix_path.exists():
            warnings.warn(f"{d.name}: no mixture.wav, song skipped", CorpusWarning, stacklevel=2)
            continue
        mixture, rate = read_wav(mix_path)
        stems = {}
        for s in SOURCES:
            p = d / f"{s}.wav"
            if not p.exists():
                continue
            buf, r = read_wav(p)
            if r != rate or buf.shape != mixture.shape:
                warnings.warn(f"{d.name}: {s}.wav does not match the mixture format, stem ignored",
                              CorpusWarning, stacklevel=2)
                continue
            stems[s] = buf
        songs.append(Song(d.name, stems, mixture, rate))
    return songs


def write_corpus(songs, root, subtype: str = "float32"):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for song in songs:
        d = root / song.song_id
        d.mkdir(exist_ok=True)
        write_wav(d / "mixture.wav", song.mixture, song.sample_rate, subtype)
        for s, buf in song.stems.items():
            write_wav(d / f"{s}.wav", buf, song.sample_rate, subtype)


# --------------------------------------------------------------------------- synthetic corpus


@dataclass
class SynthSpec:
    n_songs: int = 24
    duration_s: float = 6.0
    sample_rate: int = 8000
    seed: int = 7
    stem_rms: float = 0.05
    bass_f0_hz: tuple[float, float] = (41.0, 130.0)
    vocal_f0_hz: tuple[float, float] = (200.0, 1000.0)
    other_f_hz: tuple[float, float] = (300.0, 1800.0)
    drum_events_per_s: float = 4.0
    vocal_phrase_s: tuple[float, float] = (0.5, 1.5)
    other_chord_s: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        if self.duration_s < 2.0:
            raise InvalidInputError("synthetic songs must last at least 2 s")
        if self.n_songs < 1:
            raise InvalidInputError("n_songs must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _fade(n: int, sr: int, attack_s: float, release_s: float) -> np.ndarray:
    env = np.ones(n)
    a = min(n // 2, max(1, int(attack_s * sr)))
    r = min(n // 2, max(1, int(release_s * sr)))
    env[:a] = 0.5 - 0.5 * np.cos(np.pi * np.arange(a) / a)
    env[n - r:] *= 0.5 + 0.5 * np.cos(np.pi * np.arange(r) / r)
    return env


def _harmonic(freq: np.ndarray, sr: int, amps, phase0: float) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(freq) / sr + phase0
    return sum(a * np.sin((h + 1) * phase) for h, a in enumerate(amps))


def _synth_bass(rng, n, sr, spec):
    out = np.zeros(n)
    t = 0
    lo, hi = np.log(spec.bass_f0_hz[0]), np.log(spec.bass_f0_hz[1])
    while t < n:
        dur = int(sr * rng.choice([0.25, 0.5, 0.75]))
        seg = min(dur, n - t)
        if rng.random() < 0.85:
            f0 = np.exp(rng.uniform(lo, hi))
            tone = _harmonic(np.full(seg, f0), sr, (1.0, 0.4, 0.15), rng.uniform(0, 2 * np.pi))
            decay = np.exp(-np.arange(seg) / (sr * rng.uniform(0.2, 0.6)))
            out[t:t + seg] = tone * decay * _fade(seg, sr, 0.02, 0.03)
        t += dur
    return out


def _synth_drums(rng, n, sr, spec):
    out = np.zeros(n)
    grid = int(sr / (2 * spec.drum_events_per_s))
    for start in range(0, n, grid):
        if rng.random() > 0.5:
            continue
        length = min(int(0.15 * sr), n - start)
        k = np.arange(length)
        kind = rng.integers(3)
        if kind == 0:
            f = 120.0 * np.exp(-k / (0.03 * sr)) + 45.0
            burst = np.sin(2 * np.pi * np.cumsum(f) / sr) * np.exp(-k / (0.06 * sr))
            burst += 0.3 * rng.standard_normal(length) * np.exp(-k / (0.01 * sr))
        elif kind == 1:
            burst = rng.standard_normal(length) * np.exp(-k / (0.04 * sr))
        else:
            noise = rng.standard_normal(length)
            noise[1:] -= noise[:-1].copy()
            burst = 0.7 * noise * np.exp(-k / (0.015 * sr))
        out[start:start + length] += rng.uniform(0.6, 1.0) * burst
    return out


def _synth_vocals(rng, n, sr, spec):
    out = np.zeros(n)
    lo, hi = np.log(spec.vocal_f0_hz[0]), np.log(spec.vocal_f0_hz[1])
    t = int(sr * rng.uniform(0.0, 0.3))
    while t < n:
        seg = min(int(sr * rng.uniform(*spec.vocal_phrase_s)), n - t)
        if seg > sr // 20:
            k = np.arange(seg) / sr
            f_a, f_b = np.exp(rng.uniform(lo, hi, size=2))
            glide = np.exp(np.log(f_a) + (np.log(f_b) - np.log(f_a)) * k / k[-1])
            vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * k)
            f = np.minimum(glide * vib, 0.24 * sr)
            amps = (1.0, 0.5) if f.max() * 2 < 0.45 * sr else (1.0,)
            out[t:t + seg] = _harmonic(f, sr, amps, rng.uniform(0, 2 * np.pi)) * _fade(seg, sr, 0.05, 0.08)
        t += seg + int(sr * rng.uniform(0.1, 0.5))
    return out


def _synth_other(rng, n, sr, spec):
    out = np.zeros(n)
    lo, hi = np.log(spec.other_f_hz[0]), np.log(spec.other_f_hz[1])
    t = 0
    while t < n:
        seg = min(int(sr * rng.uniform(*spec.other_chord_s)), n - t)
        chord = np.zeros(seg)
        for f in np.exp(rng.uniform(lo, hi, size=rng.integers(2, 4))):
            amps = (1.0, 0.3) if 2 * f < 0.45 * sr else (1.0,)
            chord += _harmonic(np.full(seg, f), sr, amps, rng.uniform(0, 2 * np.pi))
        out[t:t + seg] = chord * _fade(seg, sr, 0.1, 0.1)
        t += seg
    return out


_GENERATORS = {
    "vocals": _synth_vocals,
    "drums": _synth_drums,
    "bass": _synth_bass,
    "other": _synth_other,
}


def synth_song(spec: SynthSpec, index: int) -> Song:
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    stems = {}
    for j, s in enumerate(SOURCES):
        rng = np.random.default_rng([spec.seed, index, j])
        mono = _GENERATORS[s](rng, n, sr, spec)
        rms = np.sqrt(np.mean(mono ** 2))
        if rms > 0:
            gain = spec.stem_rms * 10 ** (rng.uniform(-2, 2) / 20) / rms
            mono *= min(gain, 0.5 / np.abs(mono).max())
        theta = rng.uniform(np.pi / 8, 3 * np.pi / 8)
        stereo = np.sqrt(2.0) * np.stack([np.cos(theta) * mono, np.sin(theta) * mono])
        stems[s] = stereo.astype(np.float32)
    mixture = stems["vocals"] + stems["drums"] + stems["bass"] + stems["other"]
    return Song(f"synth{index:03d}", stems, mixture, sr)


def synth_corpus(spec: SynthSpec = SynthSpec(), out_dir=None, subtype: str = "float32") -> list[Song]:
    """Generate a deterministic corpus; optionally write it in the stem-directory layout."""
    songs = [synth_song(spec, i) for i in range(spec.n_songs)]
    if out_dir is not None:
        write_corpus(songs, out_dir, subtype)
    return songs
