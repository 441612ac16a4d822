"""Training regimes for the shared-encoder separator.

Four regimes are supported:

* ``independent``: one full network per source, nothing shared.
* ``simultaneous``: shared encoder, summed loss over all four decoders per batch.
* ``interleaved``: per-task mini-batches alternate; every task step updates the
  encoder and that task's decoder.
* ``interleaved_acc``: as above, but encoder gradients are summed over one
  mini-batch of every task and applied once.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .data import Song
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .model import (
    DEFAULT_IO_SHAPES,
    SOURCES,
    IndependentNetworks,
    SharedModel,
    build_independent_networks,
    build_shared_model,
)
from .tensor import Adam, add, backward, l1_loss

log = logging.getLogger(__name__)

REGIMES = ("independent", "simultaneous", "interleaved", "interleaved_acc")
ALL = "all"


def canonical_regime(name: str) -> str:
    key = name.replace("-", "_").lower()
    if key not in REGIMES:
        raise ConfigError(f"unknown regime {name!r}; choose from {', '.join(REGIMES)}")
    return key


@dataclass
class TrainConfig:
    regime: str = "interleaved"
    profile: str = "base"
    lr: float = 2e-4
    batch_size: int = 32
    patience_epochs: int = 30
    max_epochs: int | None = None
    max_batches_per_epoch: int | None = None
    seed: int = 0
    patch_frames: int = 128
    patch_hop_frames: int = 64
    val_fraction: float = 1 / 6
    augment_gain: bool = False
    augment_pan: bool = False
    augment_filter: bool = False
    shuffle_task_order: bool = False
    fm_avg: str = "fixed"
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)

    def __post_init__(self):
        self.regime = canonical_regime(self.regime)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be >= 1")
        if isinstance(self.stft, dict):
            self.stft = dsp.StftConfig(**self.stft)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small settings that train on the synthetic 8 kHz corpus in minutes on one core."""
        base = dict(
            profile="desk",
            lr=3e-3,
            batch_size=8,
            patience_epochs=6,
            max_epochs=150,
            max_batches_per_epoch=8,
            patch_frames=32,
            patch_hop_frames=16,
            stft=dsp.StftConfig(window_size=256, hop=64, sample_rate=8000),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def io_shape(self) -> tuple[int, int, int]:
        c = DEFAULT_IO_SHAPES.get(self.profile, (2,))[0]
        return (c, self.patch_frames, self.stft.n_bins)

    @property
    def any_augmentation(self) -> bool:
        return self.augment_gain or self.augment_pan or self.augment_filter

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stft"] = self.stft.to_dict()
        if d["max_epochs"] is None:
            del d["max_epochs"]
        if d["max_batches_per_epoch"] is None:
            del d["max_batches_per_epoch"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- databases


@dataclass
class TaskDatabase:
    """Ordered (song, first frame) patch references for one or all sources."""

    source_ids: tuple[str, ...]
    pairs: list[tuple[str, int]]
    split: str
    seed: int

    def __len__(self):
        return len(self.pairs)

    @property
    def key(self) -> str:
        return self.source_ids[0] if len(self.source_ids) == 1 else ALL

    def songs(self) -> list[str]:
        return sorted({p[0] for p in self.pairs})


@dataclass
class Databases:
    mode: str
    train: dict[str, TaskDatabase]
    validation: dict[str, TaskDatabase]

    def training_songs(self) -> list[str]:
        return sorted({s for db in self.train.values() for s in db.songs()})

    def all_songs(self) -> list[str]:
        dbs = list(self.train.values()) + list(self.validation.values())
        return sorted({s for db in dbs for s in db.songs()})


def _split_songs(song_ids, rng, val_fraction):
    order = [song_ids[i] for i in rng.permutation(len(song_ids))]
    n_val = 0 if len(order) < 2 else max(1, int(round(len(order) * val_fraction)))
    return order[n_val:], order[:n_val]


def _pairs(songs_by_id, ids, stft_cfg, patch_frames, hop_frames):
    out = []
    for sid in ids:
        frames = stft_cfg.n_frames(songs_by_id[sid].n_samples)
        out.extend((sid, o) for o in dsp.patch_offsets(frames, patch_frames, hop_frames))
    return out


def make_databases(corpus: list[Song], mode: str, seed: int, *, stft: dsp.StftConfig,
                   patch_frames: int, hop_frames: int, val_fraction: float = 1 / 6) -> Databases:
    """Build the simultaneous database or four independent per-source databases."""
    if not corpus:
        raise InvalidInputError("cannot build databases from an empty corpus")
    by_id = {s.song_id: s for s in corpus}
    ids = sorted(by_id)
    if mode == "simultaneous":
        incomplete = [s for s in ids if not by_id[s].has_all_stems()]
        if incomplete:
            raise ConfigError(f"simultaneous training needs all four stems; incomplete songs: {incomplete}")
        rng = np.random.default_rng([seed, len(SOURCES)])
        train_ids, val_ids = _split_songs(ids, rng, val_fraction)
        tr = _pairs(by_id, train_ids, stft, patch_frames, hop_frames)
        va = _pairs(by_id, val_ids, stft, patch_frames, hop_frames)
        tr = [tr[i] for i in rng.permutation(len(tr))]
        return Databases(
            mode,
            {ALL: TaskDatabase(SOURCES, tr, "train", seed)},
            {ALL: TaskDatabase(SOURCES, va, "validation", seed)},
        )
    if mode != "independent":
        raise InvalidInputError(f"mode must be 'simultaneous' or 'independent', got {mode!r}")
    train, val = {}, {}
    for i, src in enumerate(SOURCES):
        have = [s for s in ids if src in by_id[s].stems]
        if not have:
            raise ConfigError(f"no song in the corpus provides a {src} stem")
        rng = np.random.default_rng([seed, i])
        train_ids, val_ids = _split_songs(have, rng, val_fraction)
        tr = _pairs(by_id, train_ids, stft, patch_frames, hop_frames)
        va = _pairs(by_id, val_ids, stft, patch_frames, hop_frames)
        tr = [tr[j] for j in rng.permutation(len(tr))]
        train[src] = TaskDatabase((src,), tr, "train", seed)
        val[src] = TaskDatabase((src,), va, "validation", seed)
    return Databases(mode, train, val)


# --------------------------------------------------------------------------- augmentation


def _shelf_coefficients(gain_db: float, freq: float, sample_rate: int, kind: str):
    a = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * freq / sample_rate
    cos_w, alpha = np.cos(w0), np.sin(w0) / 2 * np.sqrt(2.0)
    sa = 2 * np.sqrt(a) * alpha
    if kind == "low":
        b = [a * ((a + 1) - (a - 1) * cos_w + sa), 2 * a * ((a - 1) - (a + 1) * cos_w),
             a * ((a + 1) - (a - 1) * cos_w - sa)]
        den = [(a + 1) + (a - 1) * cos_w + sa, -2 * ((a - 1) + (a + 1) * cos_w),
               (a + 1) + (a - 1) * cos_w - sa]
    else:
        b = [a * ((a + 1) + (a - 1) * cos_w + sa), -2 * a * ((a - 1) + (a + 1) * cos_w),
             a * ((a + 1) + (a - 1) * cos_w - sa)]
        den = [(a + 1) - (a - 1) * cos_w + sa, 2 * ((a - 1) - (a + 1) * cos_w),
               (a + 1) - (a - 1) * cos_w - sa]
    return np.array(b) / den[0], np.array(den) / den[0]


def augment(stems: dict[str, np.ndarray], rng: np.random.Generator, *, gain=True, pan=True,
            filter=True, sample_rate: int = 44100, gains: dict[str, float] | None = None):
    """Randomly rescale, pan and shelf-filter each stereo stem independently.

    Every random draw happens whatever the switches, so toggling one switch
    does not change the values drawn for the others. ``gains`` forces the gain
    of the named stems.
    """
    out = {}
    for src in sorted(stems):
        x = np.asarray(stems[src], dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != 2:
            raise InvalidInputError(f"augment expects stereo (2, n) stems, {src} is {x.shape}")
        g = rng.uniform(0.5, 1.5)
        theta = rng.uniform(np.pi / 8, 3 * np.pi / 8)
        shelf_db = rng.uniform(-6.0, 6.0)
        shelf_hz = np.exp(rng.uniform(np.log(100.0), np.log(0.3 * sample_rate)))
        shelf_kind = "low" if rng.random() < 0.5 else "high"
        use_gain = gain
        if gains and src in gains:
            g, use_gain = gains[src], True
        if not (use_gain or pan or filter):
            out[src] = np.asarray(stems[src])
            continue
        y = x
        if filter:
            b, a = _shelf_coefficients(shelf_db, shelf_hz, sample_rate, shelf_kind)
            y = lfilter(b, a, y, axis=1)
        if pan:
            y = y * (np.sqrt(2.0) * np.array([[np.cos(theta)], [np.sin(theta)]]))
        if use_gain:
            y = y * g
        out[src] = y.astype(np.asarray(stems[src]).dtype)
    return out


def augment_song(song: Song, rng, **switches) -> Song:
    stems = augment(song.stems, rng, sample_rate=song.sample_rate, **switches)
    mixture = None
    for s in SOURCES:
        if s in stems:
            mixture = stems[s].copy() if mixture is None else mixture + stems[s]
    return Song(song.song_id, stems, mixture, song.sample_rate)


# --------------------------------------------------------------------------- spectrogram store


class SpectrogramStore:
    """Normalized magnitude spectrograms of every song, ready for batching."""

    def __init__(self, songs: list[Song], stft_cfg: dsp.StftConfig, norm: dsp.NormalizationStats,
                 dtype=np.float32):
        self.stft = stft_cfg
        self.norm = norm
        self.dtype = np.dtype(dtype)
        self.mixture: dict[str, np.ndarray] = {}
        self.targets: dict[str, dict[str, np.ndarray]] = {}
        for song in songs:
            self.add(song)

    def add(self, song: Song):
        scale = (1.0 / self.norm.per_bin_std)
        mag = np.abs(dsp.stft(song.mixture, self.stft).data)
        self.mixture[song.song_id] = (mag * scale).astype(self.dtype)
        self.targets[song.song_id] = {
            s: (np.abs(dsp.stft(x, self.stft).data) * scale).astype(self.dtype) for s, x in song.stems.items()
        }

    def batch(self, db: TaskDatabase, indices, patch_frames: int):
        mix, tgt = [], {s: [] for s in db.source_ids}
        for i in indices:
            sid, o = db.pairs[i]
            mix.append(self.mixture[sid][:, o:o + patch_frames])
            for s in db.source_ids:
                tgt[s].append(self.targets[sid][s][:, o:o + patch_frames])
        return np.stack(mix), {s: np.stack(v) for s, v in tgt.items()}


def mixture_magnitudes(songs: list[Song], stft_cfg: dsp.StftConfig):
    for song in songs:
        yield np.abs(dsp.stft(song.mixture, stft_cfg).data)


# --------------------------------------------------------------------------- epoch plans


@dataclass
class EpochPlan:
    n_batches: int
    task_order: list[str]
    batches: dict[str, list[np.ndarray]]


def make_epoch_plan(dbs: dict[str, TaskDatabase], batch_size: int, epoch: int, seed: int, *,
                    max_batches: int | None = None, shuffle_task_order: bool = False) -> EpochPlan:
    """Draw B batches per task, B set by the smallest database.

    Larger databases contribute a random subset that is redrawn every epoch;
    the generator for each task is seeded from (seed, epoch, task index).
    """
    keys = list(dbs)
    sizes = [len(dbs[k]) for k in keys]
    if min(sizes) == 0:
        empty = [k for k in keys if not len(dbs[k])]
        raise InvalidInputError(f"empty training database(s): {empty}")
    bs = min(batch_size, min(sizes))
    n_batches = min(sizes) // bs
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)
    batches = {}
    for i, k in enumerate(keys):
        rng = np.random.default_rng([seed, epoch, i])
        chosen = rng.permutation(sizes[i])[: n_batches * bs]
        batches[k] = [chosen[b * bs:(b + 1) * bs] for b in range(n_batches)]
    order = [k for k in SOURCES if k in dbs] + [k for k in keys if k not in SOURCES]
    if shuffle_task_order:
        rng = np.random.default_rng([seed, epoch, len(keys)])
        order = [order[j] for j in rng.permutation(len(order))]
    return EpochPlan(n_batches, order, batches)


# --------------------------------------------------------------------------- epochs

StepHook = Callable[[str, int, str, object], None]


def _finite(loss, task, b):
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} for task {task} at batch {b}")
    return value


def _task_loss(model, x, y, source):
    est = model.forward_single(x, source)
    return l1_loss(est, y)


def epoch_interleaved(model: SharedModel, store: SpectrogramStore, dbs, plan: EpochPlan, optimizers,
                      patch_frames: int, step_hook: StepHook | None = None) -> dict[str, float]:
    """One epoch in which every task mini-batch updates the encoder and its own decoder."""
    losses = {k: [] for k in plan.task_order}
    enc = optimizers["encoder"]
    for b in range(plan.n_batches):
        for src in plan.task_order:
            x, ys = store.batch(dbs[src], plan.batches[src][b], patch_frames)
            if step_hook:
                step_hook("before", b, src, model)
            enc.zero_grad()
            optimizers[src].zero_grad()
            loss = _task_loss(model, x, ys[src], src)
            losses[src].append(_finite(loss, src, b))
            backward(loss)
            enc.step()
            optimizers[src].step()
            if step_hook:
                step_hook("after", b, src, model)
    return {k: float(np.mean(v)) for k, v in losses.items()}


def epoch_interleaved_acc(model: SharedModel, store: SpectrogramStore, dbs, plan: EpochPlan, optimizers,
                          patch_frames: int, step_hook: StepHook | None = None) -> dict[str, float]:
    """One epoch in which encoder gradients are summed over a batch of every task before one update."""
    losses = {k: [] for k in plan.task_order}
    enc = optimizers["encoder"]
    for b in range(plan.n_batches):
        enc.zero_grad()
        for src in plan.task_order:
            x, ys = store.batch(dbs[src], plan.batches[src][b], patch_frames)
            if step_hook:
                step_hook("before", b, src, model)
            optimizers[src].zero_grad()
            loss = _task_loss(model, x, ys[src], src)
            losses[src].append(_finite(loss, src, b))
            backward(loss)
            optimizers[src].step()
            if step_hook:
                step_hook("after", b, src, model)
        enc.step()
    return {k: float(np.mean(v)) for k, v in losses.items()}


def epoch_simultaneous(model: SharedModel, store: SpectrogramStore, db: TaskDatabase, plan: EpochPlan,
                       optimizers, patch_frames: int, step_hook: StepHook | None = None) -> dict[str, float]:
    """One epoch on the summed loss of all decoders; every parameter is updated once per batch."""
    losses = {s: [] for s in model.sources}
    groups = ["encoder", *model.sources]
    for b in range(plan.n_batches):
        x, ys = store.batch(db, plan.batches[db.key][b], patch_frames)
        if step_hook:
            step_hook("before", b, ALL, model)
        for g in groups:
            optimizers[g].zero_grad()
        outs = model.forward(x)
        total = None
        for s in model.sources:
            ls = l1_loss(outs[s], ys[s])
            losses[s].append(_finite(ls, s, b))
            total = ls if total is None else add(total, ls)
        backward(total)
        for g in groups:
            optimizers[g].step()
        if step_hook:
            step_hook("after", b, ALL, model)
    return {k: float(np.mean(v)) for k, v in losses.items()}


def epoch_single(network: SharedModel, store: SpectrogramStore, db: TaskDatabase, plan: EpochPlan,
                 optimizer, patch_frames: int, step_hook: StepHook | None = None) -> dict[str, float]:
    """One epoch of a stand-alone network on its own source."""
    src = db.key
    losses = []
    for b in range(plan.n_batches):
        x, ys = store.batch(db, plan.batches[src][b], patch_frames)
        if step_hook:
            step_hook("before", b, src, network)
        optimizer.zero_grad()
        loss = _task_loss(network, x, ys[src], src)
        losses.append(_finite(loss, src, b))
        backward(loss)
        optimizer.step()
        if step_hook:
            step_hook("after", b, src, network)
    return {src: float(np.mean(losses))}


def validation_losses(model, store: SpectrogramStore, dbs: dict[str, TaskDatabase], patch_frames: int,
                      chunk: int = 64) -> dict[str, float]:
    """Mean L1 error of every source over its validation database, in eval mode."""
    model.eval()
    try:
        totals: dict[str, list[float]] = {}
        for db in dbs.values():
            for lo in range(0, len(db), chunk):
                idx = range(lo, min(lo + chunk, len(db)))
                x, ys = store.batch(db, idx, patch_frames)
                outs = model.forward(x, db.source_ids)
                for s in db.source_ids:
                    err = np.abs(outs[s].data.astype(np.float64) - ys[s]).sum()
                    acc = totals.setdefault(s, [0.0, 0.0])
                    acc[0] += err
                    acc[1] += ys[s].size
        return {s: v[0] / v[1] for s, v in totals.items() if v[1] > 0}
    finally:
        model.train()


# --------------------------------------------------------------------------- logs, early stopping


@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict[str, float]
    val_loss: dict[str, float]
    criterion: float
    encoder_updates: int
    decoder_updates: dict[str, int]
    seconds: float = 0.0


@dataclass
class TrainLog:
    name: str = "model"
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def criteria(self) -> list[float]:
        return [r.criterion for r in self.records]

    def csv_rows(self):
        for r in self.records:
            for task, tl in r.train_loss.items():
                yield {
                    "epoch": r.epoch,
                    "task": task,
                    "train_loss": f"{tl:.9g}",
                    "val_loss": f"{r.val_loss.get(task, float('nan')):.9g}",
                    "encoder_updates": r.encoder_updates,
                    "decoder_updates": r.decoder_updates.get(task, 0),
                }


CSV_FIELDS = ["epoch", "task", "train_loss", "val_loss", "encoder_updates", "decoder_updates"]


def write_log_csv(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for lg in logs:
            for row in lg.csv_rows():
                w.writerow(row)


def write_timing_csv(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log", "epoch", "seconds"])
        for lg in logs:
            for r in lg.records:
                w.writerow([lg.name, r.epoch, f"{r.seconds:.3f}"])


def early_stopping(log: TrainLog, patience: int) -> tuple[bool, int]:
    """Return (stop, best epoch); ties go to the earlier epoch."""
    crit = log.criteria()
    if not crit:
        raise InvalidInputError("early stopping needs at least one completed epoch")
    best_idx = int(np.argmin(crit))  # argmin returns the first minimum
    stop = (len(crit) - 1 - best_idx) >= patience
    return stop, log.records[best_idx].epoch


# --------------------------------------------------------------------------- drivers


@dataclass
class TrainResult:
    model: SharedModel | IndependentNetworks
    logs: list[TrainLog]
    normalization: dsp.NormalizationStats
    databases: Databases
    optimizers: dict
    config: TrainConfig


def default_optimizer(params, lr):
    return Adam(params, lr=lr)


def make_optimizers(model, lr, factory=default_optimizer) -> dict:
    if isinstance(model, IndependentNetworks):
        return {s: factory(net.parameters(), lr) for s, net in model.networks.items()}
    opts = {"encoder": factory(model.encoder_parameters(), lr)}
    for s in model.sources:
        opts[s] = factory(model.decoder_parameters(s), lr)
    return opts


def check_corpus(songs: list[Song], cfg: TrainConfig):
    """Reject corpora that cannot be used with the configuration, before any training."""
    if not songs:
        raise ConfigError("corpus is empty")
    rates = {s.sample_rate for s in songs}
    if rates != {cfg.stft.sample_rate}:
        raise ConfigError(f"corpus sample rate(s) {sorted(rates)} differ from STFT rate {cfg.stft.sample_rate}")
    chans = {s.n_channels for s in songs}
    if chans != {cfg.io_shape[0]}:
        raise ConfigError(f"corpus has {sorted(chans)} channel(s), model expects {cfg.io_shape[0]}")
    if cfg.regime == "simultaneous":
        incomplete = [s.song_id for s in songs if not s.has_all_stems()]
        if incomplete:
            raise ConfigError(f"simultaneous regime needs all four stems; incomplete songs: {incomplete}")


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _fit(name, model, run_epoch, validate, optimizers, enc_key, dec_keys, cfg: TrainConfig,
         on_epoch=None) -> TrainLog:
    lg = TrainLog(name)
    best_state = None
    max_epochs = cfg.max_epochs if cfg.max_epochs is not None else 10 ** 9
    for epoch in range(1, max_epochs + 1):
        t0 = time.perf_counter()
        before = {k: opt.step_count for k, opt in optimizers.items()}
        train_loss = run_epoch(epoch)
        val = validate()
        after = {k: opt.step_count for k, opt in optimizers.items()}
        rec = EpochRecord(
            epoch,
            train_loss,
            val,
            float(np.mean(list(val.values()))) if val else float(np.mean(list(train_loss.values()))),
            after[enc_key] - before[enc_key],
            {s: after[k] - before[k] for s, k in dec_keys.items()},
            time.perf_counter() - t0,
        )
        lg.records.append(rec)
        stop, best = early_stopping(lg, cfg.patience_epochs)
        if best == epoch:
            best_state = _snapshot(model)
        lg.best_epoch = best
        log.info("%s epoch %d: train %s val %.5f (best epoch %d)", name, epoch,
                 " ".join(f"{k}={v:.4f}" for k, v in train_loss.items()), rec.criterion, best)
        if on_epoch:
            on_epoch(lg, model)
        if stop:
            lg.stopped_early = True
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return lg


def train(songs: list[Song], cfg: TrainConfig, *, optimizer_factory=default_optimizer,
          step_hook: StepHook | None = None, on_epoch=None, dtype=np.float32) -> TrainResult:
    """Train a model under ``cfg.regime`` until early stopping; returns the best parameters."""
    check_corpus(songs, cfg)
    mode = "simultaneous" if cfg.regime == "simultaneous" else "independent"
    dbs = make_databases(songs, mode, cfg.seed, stft=cfg.stft, patch_frames=cfg.patch_frames,
                         hop_frames=cfg.patch_hop_frames, val_fraction=cfg.val_fraction)
    by_id = {s.song_id: s for s in songs}
    train_songs = [by_id[s] for s in dbs.training_songs()]
    norm = dsp.fit_normalization(mixture_magnitudes(train_songs, cfg.stft))
    used = [by_id[s] for s in dbs.all_songs()]
    store = SpectrogramStore(used, cfg.stft, norm, dtype)

    def train_store(epoch):
        if not cfg.any_augmentation:
            return store
        aug = []
        for i, song in enumerate(train_songs):
            rng = np.random.default_rng([cfg.seed, epoch, 7919, i])
            aug.append(augment_song(song, rng, gain=cfg.augment_gain, pan=cfg.augment_pan,
                                    filter=cfg.augment_filter))
        return SpectrogramStore(aug, cfg.stft, norm, dtype)

    io_shape = cfg.io_shape
    if cfg.regime == "independent":
        model = build_independent_networks(cfg.profile, io_shape, fm_avg=cfg.fm_avg, seed=cfg.seed, dtype=dtype)
        optimizers = make_optimizers(model, cfg.lr, optimizer_factory)
        logs = []
        for i, src in enumerate(model.sources):
            net = model.networks[src]
            tr_db = {src: dbs.train[src]}

            def run_epoch(epoch, src=src, net=net, tr_db=tr_db):
                plan = make_epoch_plan(tr_db, cfg.batch_size, epoch, cfg.seed * 31 + i,
                                       max_batches=cfg.max_batches_per_epoch)
                return epoch_single(net, train_store(epoch), tr_db[src], plan, optimizers[src],
                                    cfg.patch_frames, step_hook)

            def validate(net=net, src=src):
                return validation_losses(net, store, {src: dbs.validation[src]}, cfg.patch_frames)

            logs.append(_fit(src, net, run_epoch, validate, {src: optimizers[src]}, src, {src: src}, cfg, on_epoch))
        return TrainResult(model, logs, norm, dbs, optimizers, cfg)

    model = build_shared_model(cfg.profile, io_shape, fm_avg=cfg.fm_avg, seed=cfg.seed, dtype=dtype)
    optimizers = make_optimizers(model, cfg.lr, optimizer_factory)
    epoch_fn = {
        "interleaved": epoch_interleaved,
        "interleaved_acc": epoch_interleaved_acc,
    }.get(cfg.regime)

    def run_epoch(epoch):
        plan = make_epoch_plan(dbs.train, cfg.batch_size, epoch, cfg.seed,
                               max_batches=cfg.max_batches_per_epoch,
                               shuffle_task_order=cfg.shuffle_task_order)
        st = train_store(epoch)
        if cfg.regime == "simultaneous":
            return epoch_simultaneous(model, st, dbs.train[ALL], plan, optimizers, cfg.patch_frames, step_hook)
        return epoch_fn(model, st, dbs.train, plan, optimizers, cfg.patch_frames, step_hook)

    def validate():
        return validation_losses(model, store, dbs.validation, cfg.patch_frames)

    lg = _fit(cfg.regime, model, run_epoch, validate, optimizers, "encoder",
              {s: s for s in model.sources}, cfg, on_epoch)
    return TrainResult(model, [lg], norm, dbs, optimizers, cfg)


# --------------------------------------------------------------------------- inference


def separate_magnitudes(model, mixture_mag: np.ndarray, norm: dsp.NormalizationStats,
                        patch_frames: int, chunk: int = 16) -> dict[str, np.ndarray]:
    """Estimate every source magnitude for a full-length ``(C, L, K)`` mixture magnitude.

    The spectrogram is cut into non-overlapping patches (the last one
    zero-padded), run in eval mode and stitched back.
    """
    c, frames, bins = mixture_mag.shape
    n_patches = max(1, math.ceil(frames / patch_frames))
    padded = np.zeros((c, n_patches * patch_frames, bins), dtype=model.dtype)
    padded[:, :frames] = dsp.normalize(mixture_mag, norm)
    patches = padded.reshape(c, n_patches, patch_frames, bins).transpose(1, 0, 2, 3)
    model.eval()
    try:
        outs = {s: [] for s in model.sources}
        for lo in range(0, n_patches, chunk):
            est = model.forward(patches[lo:lo + chunk])
            for s in model.sources:
                outs[s].append(est[s].data)
    finally:
        model.train()
    result = {}
    for s, parts in outs.items():
        full = np.concatenate(parts).transpose(1, 0, 2, 3).reshape(c, n_patches * patch_frames, bins)
        result[s] = dsp.denormalize(full[:, :frames].astype(np.float64), norm)
    return result


def separate_signal(model, mixture: np.ndarray, norm: dsp.NormalizationStats, stft_cfg: dsp.StftConfig,
                    patch_frames: int | None = None) -> dict[str, np.ndarray]:
    """Separate a ``(C, n)`` waveform into per-source waveforms using the mixture phase."""
    spec = dsp.stft(mixture, stft_cfg)
    mags = separate_magnitudes(model, np.abs(spec.data), norm, patch_frames or model.io_shape[1])
    return {s: dsp.reconstruct(m, spec) for s, m in mags.items()}
