"""``sharedsep`` command line: synth, train, separate, evaluate, inspect, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; results go to files or stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dsp, evaluation, report, training
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthSpec, read_wav, scan_corpus, synth_corpus, write_corpus, write_wav
from .errors import CheckpointError, ConfigError, InvalidInputError, TrainingDivergedError, WavError
from .model import (
    DEFAULT_IO_SHAPES,
    PROFILES,
    SOURCES,
    build_shared_model,
    format_layer_table,
    param_count,
)

log = logging.getLogger("sharedsep")

CHECKPOINT_NAME = "model.ssck"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


# --------------------------------------------------------------------------- synth


def cmd_synth(args, conf):
    settings = cfgmod.section(conf, "synth")
    if args.spec:
        settings = cfgmod.merge(settings, cfgmod.section(cfgmod.load_config(args.spec), "synth"))
    settings = cfgmod.merge(settings, {"seed": args.seed, "n_songs": args.n_songs, "duration_s": args.duration})
    try:
        spec = SynthSpec.from_dict(settings)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"bad synth spec: {exc}") from exc
    out = _out_dir(args.out)
    songs = synth_corpus(spec)
    write_corpus(songs, out, args.subtype)
    cfgmod.write_resolved(out / "config.toml", {"synth": dataclasses.asdict(spec), "subtype": args.subtype})
    log.info("wrote %d songs to %s", len(songs), out)
    return 0


# --------------------------------------------------------------------------- train


def _train_config(args, conf) -> training.TrainConfig:
    settings = cfgmod.section(conf, "train")
    flags = {
        "regime": args.regime,
        "profile": args.profile,
        "seed": args.seed,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "patience_epochs": args.patience,
        "max_epochs": args.max_epochs,
        "max_batches_per_epoch": args.max_batches,
    }
    settings = cfgmod.merge(settings, flags)
    profile = settings.get("profile", "base")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    try:
        if profile == "desk":
            stft = settings.pop("stft", None)
            cfg = training.TrainConfig.desk(**settings)
            if stft:
                cfg.stft = dsp.StftConfig(**cfgmod.merge(cfg.stft.to_dict(), stft))
        else:
            cfg = training.TrainConfig.from_dict(settings)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"bad training settings: {exc}") from exc
    return cfg


def cmd_train(args, conf):
    cfg = _train_config(args, conf)
    songs = scan_corpus(args.corpus)
    if not songs:
        raise ConfigError(f"no songs found under {args.corpus}")
    training.check_corpus(songs, cfg)
    out = _out_dir(args.out)
    cfgmod.write_resolved(out / "config.toml", {"train": cfg.to_dict(), "corpus": str(args.corpus)})
    result = training.train(songs, cfg)
    save_checkpoint(result.model, out / CHECKPOINT_NAME, normalization=result.normalization,
                    stft_config=cfg.stft, optimizers=result.optimizers,
                    extra={"regime": cfg.regime, "best_epochs": {lg.name: lg.best_epoch for lg in result.logs}})
    training.write_log_csv(out / "log.csv", result.logs)
    training.write_timing_csv(out / "timing.csv", result.logs)
    report.plot_loss_curves(result.logs, out / "loss_curves.png")
    log.info("best epoch(s): %s", {lg.name: lg.best_epoch for lg in result.logs})
    return 0


# --------------------------------------------------------------------------- separate


def _load_model(path):
    ck = load_checkpoint(path)
    if ck.normalization is None or ck.stft_config is None:
        raise CheckpointError(f"{path}: checkpoint lacks normalization or STFT settings")
    return ck


def _estimator(ck):
    def run(mixture):
        return training.separate_signal(ck.model, mixture, ck.normalization, ck.stft_config)
    return run


def cmd_separate(args, conf):
    ck = _load_model(args.model)
    mixture, rate = read_wav(args.input)
    if rate != ck.stft_config.sample_rate:
        raise InvalidInputError(f"{args.input} is sampled at {rate} Hz, model expects {ck.stft_config.sample_rate} Hz")
    if mixture.shape[0] != ck.model.io_shape[0]:
        raise InvalidInputError(f"{args.input} has {mixture.shape[0]} channel(s), model expects {ck.model.io_shape[0]}")
    out = _out_dir(args.out)
    stems = _estimator(ck)(mixture)
    for s, y in stems.items():
        write_wav(out / f"{s}.wav", y.astype(np.float32), rate)
    cfgmod.write_resolved(out / "config.toml", {"separate": {"model": str(args.model), "input": str(args.input)}})
    return 0


# --------------------------------------------------------------------------- evaluate


def _estimates_from_dir(root):
    root = Path(root)

    def run(song):
        d = root / song.song_id
        est = {}
        for s in SOURCES:
            buf, rate = read_wav(d / f"{s}.wav", channels=song.n_channels)
            if rate != song.sample_rate:
                raise InvalidInputError(f"{d / s}.wav: rate {rate} differs from reference {song.sample_rate}")
            est[s] = buf
        return est
    return run


def cmd_evaluate(args, conf):
    if (args.model is None) == (args.estimates is None):
        raise ConfigError("evaluate needs exactly one of --model or --estimates")
    songs = scan_corpus(args.corpus)
    if not songs:
        raise ConfigError(f"no songs found under {args.corpus}")
    if args.model:
        ck = _load_model(args.model)
        sep = _estimator(ck)
        estimate_fn = lambda song: sep(song.mixture)  # noqa: E731
        label = args.label or ck.meta.get("extra", {}).get("regime", "model")
    else:
        estimate_fn = _estimates_from_dir(args.estimates)
        label = args.label or Path(args.estimates).name
    out = _out_dir(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = evaluation.evaluate_corpus(songs, estimate_fn, with_sar=args.sar)
    for w in caught:
        log.warning("%s", w.message)
    if not results:
        raise InvalidInputError("no song had a complete set of reference stems")
    db = evaluation.database_score(results)
    evaluation.write_segment_csv(out / "segments.csv", [g for r in results for g in r.segments])
    evaluation.write_song_csv(out / "songs.csv", [b for r in results for b in r.scores.values()])
    evaluation.write_summary(out, db, label)
    report.plot_scores(report.read_summary_csv(out / "summary.csv"), out / "scores.png")
    cfgmod.write_resolved(out / "config.toml", {"evaluate": {
        "corpus": str(args.corpus), "model": args.model, "estimates": args.estimates, "label": label}})
    print(db.format_table(label))
    return 0


# --------------------------------------------------------------------------- inspect


def _parse_shape(text):
    try:
        shape = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--io-shape must be C,L,K integers, got {text!r}") from exc
    if len(shape) != 3:
        raise ConfigError("--io-shape needs three values C,L,K")
    return shape


def _counts(model) -> dict[str, int]:
    if hasattr(model, "networks"):
        counts = {f"network[{s}]": param_count(n) for s, n in model.networks.items()}
    else:
        counts = {"encoder": int(sum(p.data.size for p in model.encoder_parameters()))}
        for s in model.sources:
            counts[f"decoder[{s}]"] = int(sum(p.data.size for p in model.decoder_parameters(s)))
    counts["total"] = param_count(model)
    return counts


def cmd_inspect(args, conf):
    if (args.model is None) == (args.profile is None):
        raise ConfigError("inspect needs exactly one of --model or --profile")
    if args.model:
        model = load_checkpoint(args.model).model
        name = model.profile.name
    else:
        if args.profile not in PROFILES:
            raise ConfigError(f"unknown profile {args.profile!r}; choose from {', '.join(PROFILES)}")
        shape = _parse_shape(args.io_shape) if args.io_shape else DEFAULT_IO_SHAPES[args.profile]
        model = build_shared_model(args.profile, shape)
        name = args.profile
    print(f"profile {name}, io shape {tuple(model.io_shape)}")
    print(format_layer_table(model.layer_table()))
    print()
    counts = _counts(model)
    for k, v in counts.items():
        print(f"{k:<18} {v:>12,d}")
    if args.compare:
        if args.compare not in PROFILES:
            raise ConfigError(f"unknown profile {args.compare!r}")
        other = build_shared_model(args.compare, model.io_shape)
        delta = param_count(other) - counts["total"]
        print(f"{args.compare} minus {name}: {delta:+,d} parameters")
    return 0


# --------------------------------------------------------------------------- report


def cmd_report(args, conf):
    rows = []
    for path in args.summary:
        rows.extend(report.read_summary_csv(path))
    if not rows:
        raise InvalidInputError("no summary rows to compare")
    csv_path, png_path = report.write_comparison(rows, _out_dir(args.out))
    print(csv_path)
    print(png_path)
    return 0


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sharedsep", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"TOML config file (default: ${cfgmod.CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--spec", help="TOML file with a [synth] table")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-songs", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--subtype", default="float32", choices=["float32", "pcm16", "pcm24"])
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train under one regime until early stopping")
    t.add_argument("--corpus", required=True)
    t.add_argument("--regime", choices=["independent", "simultaneous", "interleaved", "interleaved-acc"])
    t.add_argument("--profile", choices=list(PROFILES))
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--max-batches", type=int, help="cap on batches per task per epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("separate", help="split a mixture WAV into four stems")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_separate)

    v = sub.add_parser("evaluate", help="SDR/SIR of a model or of estimate files")
    v.add_argument("--corpus", required=True)
    v.add_argument("--model")
    v.add_argument("--estimates", help="directory of <song>/<source>.wav estimates")
    v.add_argument("--out", required=True)
    v.add_argument("--label")
    v.add_argument("--sar", action="store_true", help="also record SAR per segment")
    v.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="layer table and parameter counts")
    i.add_argument("--model")
    i.add_argument("--profile")
    i.add_argument("--io-shape", help="C,L,K (profile mode only)")
    i.add_argument("--compare", help="print the parameter delta to this profile")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("report", help="compare several summary.csv files")
    r.add_argument("--summary", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        logging.getLogger("sharedsep").setLevel(logging.INFO if args.verbose or args.command == "train" else logging.WARNING)
        conf = cfgmod.load_config(args.config)
        return args.func(args, conf)
    except ConfigError as exc:
        print(f"sharedsep: error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, WavError, CheckpointError, TrainingDivergedError, OSError) as exc:
        print(f"sharedsep: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
