"""BSS metrics from orthogonal projections, scored per one-second segment.

The decomposition is time-invariant: the estimate is projected onto the
target reference and onto the span of all references, without the
distortion-filter family of the full BSS Eval toolbox.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateReferenceError, InvalidInputError
from .model import SOURCES

ENERGY_FLOOR = 1e-12
DB_CAP = 100.0
SILENCE_PER_SAMPLE = 1e-10


@dataclass
class Components:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray

    @property
    def degenerate(self) -> bool:
        """The estimate carries no energy along the target reference."""
        return float(self.s_target @ self.s_target) < ENERGY_FLOOR


def bss_decompose(estimate, references, target_index: int) -> Components:
    """Split ``estimate`` into target, interference and artifact components.

    ``references`` is ``(n_sources, n_samples)``; all vectors are 1-D in time.
    """
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if refs.shape[1] != est.shape[0]:
        raise InvalidInputError(f"estimate has {est.shape[0]} samples, references have {refs.shape[1]}")
    if not 0 <= target_index < refs.shape[0]:
        raise InvalidInputError(f"target_index {target_index} out of range for {refs.shape[0]} references")
    q, r = np.linalg.qr(refs.T)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= 1e-10 * max(diag.max(), ENERGY_FLOOR):
        raise DegenerateReferenceError("reference signals are linearly dependent or silent")
    target = refs[target_index]
    s_target = (target @ est) / (target @ target) * target
    p_all = q @ (q.T @ est)
    return Components(s_target, p_all - s_target, est - p_all)


def _ratio_db(num: float, den: float) -> float:
    value = 10.0 * math.log10(max(num, ENERGY_FLOOR) / max(den, ENERGY_FLOOR))
    return float(min(DB_CAP, max(-DB_CAP, value)))


def _energy(x: np.ndarray) -> float:
    return float(x @ x)


def sdr(c: Components) -> float:
    return _ratio_db(_energy(c.s_target), _energy(c.e_interf + c.e_artif))


def sir(c: Components) -> float:
    return _ratio_db(_energy(c.s_target), _energy(c.e_interf))


def sar(c: Components) -> float:
    return _ratio_db(_energy(c.s_target + c.e_interf), _energy(c.e_artif))


@dataclass
class SegmentScore:
    song_id: str
    source_id: str
    segment_index: int
    sdr: float | None
    sir: float | None
    sar: float | None
    silent: bool


@dataclass
class BssScore:
    song_id: str
    source_id: str
    median_sdr: float
    median_sir: float
    n_segments_used: int
    median_sar: float | None = None


@dataclass
class SongResult:
    scores: dict[str, BssScore]
    segments: list[SegmentScore]


def _is_silent(x: np.ndarray) -> bool:
    return _energy(x) < SILENCE_PER_SAMPLE * x.size


def song_score(estimates: dict, references: dict, sample_rate: int, song_id: str = "song",
               with_sar: bool = False) -> SongResult:
    """Median segment metrics of one song.

    Each signal is ``(channels, samples)``; channels are concatenated inside a
    segment before the projection. Sources whose reference segment is silent
    are left out of that segment's interference span and get no score there.
    """
    sources = [s for s in SOURCES if s in references] + [s for s in references if s not in SOURCES]
    missing = [s for s in sources if s not in estimates]
    if missing:
        raise InvalidInputError(f"no estimate for {missing}")
    length = None
    for s in sources:
        for x in (references[s], estimates[s]):
            n = np.asarray(x).shape[-1]
            if length is None:
                length = n
            elif n != length:
                raise InvalidInputError("estimates and references must all have the same length")
    n_segments = length // sample_rate
    if n_segments < 1:
        raise InvalidInputError(f"song {song_id} is shorter than one second")

    segments: list[SegmentScore] = []
    per_source: dict[str, list[tuple[float, float, float]]] = {s: [] for s in sources}
    for k in range(n_segments):
        sl = slice(k * sample_rate, (k + 1) * sample_rate)
        refs = {s: np.atleast_2d(references[s])[:, sl].reshape(-1).astype(np.float64) for s in sources}
        active = [s for s in sources if not _is_silent(refs[s])]
        ref_matrix = np.stack([refs[s] for s in active]) if active else None
        for s in sources:
            if s not in active:
                segments.append(SegmentScore(song_id, s, k, None, None, None, True))
                continue
            est = np.atleast_2d(estimates[s])[:, sl].reshape(-1)
            comp = bss_decompose(est, ref_matrix, active.index(s))
            row = (sdr(comp), sir(comp), sar(comp))
            per_source[s].append(row)
            segments.append(SegmentScore(song_id, s, k, *row[:2], row[2] if with_sar else None, False))

    scores = {}
    for s, rows in per_source.items():
        if not rows:
            continue
        arr = np.array(rows)
        scores[s] = BssScore(
            song_id, s, float(np.median(arr[:, 0])), float(np.median(arr[:, 1])), len(rows),
            float(np.median(arr[:, 2])) if with_sar else None,
        )
    return SongResult(scores, segments)


@dataclass
class DatabaseScore:
    """Mean of per-song medians, one value per (source, metric)."""

    values: dict[tuple[str, str], float]
    n_songs: dict[str, int]

    METRICS = ("SDR", "SIR")

    def columns(self) -> list[str]:
        return [f"{s}_{m}" for m in self.METRICS for s in SOURCES]

    def row(self) -> dict[str, float]:
        return {f"{s}_{m}": self.values.get((s, m), float("nan")) for m in self.METRICS for s in SOURCES}

    def format_table(self, label: str = "model") -> str:
        head = "".join(f"{s.capitalize():>8}" for s in SOURCES)
        lines = [
            f"{'':<14}|{'SDR in dB':^32}|{'SIR in dB':^32}",
            f"{'':<14}|{head}|{head}",
        ]
        cells = []
        for m in self.METRICS:
            cells.append("".join(
                f"{self.values[(s, m)]:>8.2f}" if (s, m) in self.values else f"{'-':>8}" for s in SOURCES
            ))
        lines.append(f"{label:<14}|{cells[0]}|{cells[1]}")
        return "\n".join(lines)


def database_score(song_scores) -> DatabaseScore:
    """Average per-song median scores; accepts BssScore objects or per-song dicts of them."""
    flat: list[BssScore] = []
    for item in song_scores:
        if isinstance(item, BssScore):
            flat.append(item)
        elif isinstance(item, SongResult):
            flat.extend(item.scores.values())
        else:
            flat.extend(item.values())
    if not flat:
        raise InvalidInputError("no song scores to aggregate")
    values, counts = {}, {}
    for s in {b.source_id for b in flat}:
        rows = [b for b in flat if b.source_id == s]
        values[(s, "SDR")] = float(np.mean([b.median_sdr for b in rows]))
        values[(s, "SIR")] = float(np.mean([b.median_sir for b in rows]))
        counts[s] = len(rows)
    return DatabaseScore(values, counts)


def evaluate_corpus(songs, estimate_fn, with_sar: bool = False) -> list[SongResult]:
    """Score ``estimate_fn(song) -> {source: (C, n)}`` on every song with all four references.

    Songs missing a reference stem are skipped with a warning.
    """
    results = []
    for song in songs:
        missing = [s for s in SOURCES if s not in song.stems]
        if missing:
            warnings.warn(f"{song.song_id}: missing reference stem(s) {missing}, song skipped", stacklevel=2)
            continue
        estimates = estimate_fn(song)
        results.append(song_score(estimates, song.stems, song.sample_rate, song.song_id, with_sar))
    return results


def write_segment_csv(path, segments):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["song", "source", "segment", "sdr", "sir", "sar", "silent"])
        for g in segments:
            w.writerow([g.song_id, g.source_id, g.segment_index,
                        "" if g.sdr is None else f"{g.sdr:.6f}",
                        "" if g.sir is None else f"{g.sir:.6f}",
                        "" if g.sar is None else f"{g.sar:.6f}", int(g.silent)])


def write_song_csv(path, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["song", "source", "median_sdr", "median_sir", "n_segments"])
        for b in scores:
            w.writerow([b.song_id, b.source_id, f"{b.median_sdr:.6f}", f"{b.median_sir:.6f}", b.n_segments_used])


def write_summary(out_dir, db: DatabaseScore, label: str = "model"):
    out_dir = Path(out_dir)
    row = db.row()
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *db.columns()])
        w.writerow([label, *(f"{row[c]:.4f}" for c in db.columns())])
    (out_dir / "summary.txt").write_text(db.format_table(label) + "\n")
