import csv

import numpy as np
import pytest

from sharedsep import dsp
from sharedsep import training as tr
from sharedsep.data import Song, SynthSpec, synth_corpus
from sharedsep.errors import ConfigError, InvalidInputError, TrainingDivergedError
from sharedsep.model import SOURCES, build_independent_networks, build_shared_model
from sharedsep.tensor import SGD, add, backward, l1_loss

DESK_STFT = dsp.StftConfig(window_size=256, hop=64, sample_rate=8000)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthSpec(n_songs=6, duration_s=2.0, seed=11))


@pytest.fixture(scope="module")
def setup(corpus):
    dbs = tr.make_databases(corpus, "independent", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)
    norm = dsp.fit_normalization(tr.mixture_magnitudes(corpus, DESK_STFT))
    store = tr.SpectrogramStore(corpus, DESK_STFT, norm, np.float64)
    return dbs, store


def snapshot(params):
    return [p.data.copy() for p in params]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestDatabases:
    def test_independent_partitions_differ(self):
        songs = [Song(f"s{i:02d}", {s: np.zeros((2, 8000), np.float32) for s in SOURCES},
                      np.zeros((2, 8000), np.float32), 8000) for i in range(20)]
        dbs = tr.make_databases(songs, "independent", 3, stft=DESK_STFT, patch_frames=32, hop_frames=16)
        parts = [frozenset(dbs.validation[s].songs()) for s in SOURCES]
        assert all(len(p) > 0 for p in parts)
        assert len(set(parts)) == 4
        for s in SOURCES:
            assert not set(dbs.train[s].songs()) & set(dbs.validation[s].songs())
            assert len(dbs.train[s].songs()) + len(dbs.validation[s].songs()) == 20

    def test_simultaneous_has_four_targets(self, corpus):
        dbs = tr.make_databases(corpus, "simultaneous", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)
        assert list(dbs.train) == [tr.ALL] and dbs.train[tr.ALL].source_ids == SOURCES

    def test_deterministic(self, corpus):
        kw = dict(stft=DESK_STFT, patch_frames=32, hop_frames=16)
        a = tr.make_databases(corpus, "independent", 5, **kw)
        b = tr.make_databases(corpus, "independent", 5, **kw)
        assert all(a.train[s].pairs == b.train[s].pairs for s in SOURCES)
        c = tr.make_databases(corpus, "independent", 6, **kw)
        assert any(a.train[s].pairs != c.train[s].pairs for s in SOURCES)

    def test_empty_corpus(self):
        with pytest.raises(InvalidInputError):
            tr.make_databases([], "independent", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)

    def test_missing_stems(self, corpus):
        songs = [Song(s.song_id, dict(s.stems), s.mixture, s.sample_rate) for s in corpus]
        del songs[0].stems["drums"]
        dbs = tr.make_databases(songs, "independent", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)
        used = set(dbs.train["drums"].songs()) | set(dbs.validation["drums"].songs())
        assert songs[0].song_id not in used
        with pytest.raises(ConfigError):
            tr.make_databases(songs, "simultaneous", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)
        with pytest.raises(ConfigError):
            tr.check_corpus(songs, tr.TrainConfig.desk(regime="simultaneous"))
        tr.check_corpus(songs, tr.TrainConfig.desk(regime="interleaved"))


class TestAugment:
    def stems(self, rng):
        return {s: rng.standard_normal((2, 4000)).astype(np.float32) for s in SOURCES}

    def test_all_off_is_identity(self, rng):
        x = self.stems(rng)
        out = tr.augment(x, np.random.default_rng(0), gain=False, pan=False, filter=False)
        assert all(np.array_equal(out[s], x[s]) for s in SOURCES)

    def test_forced_gain_doubles(self, rng):
        x = self.stems(rng)
        out = tr.augment(x, np.random.default_rng(0), gain=False, pan=False, filter=False, gains={"bass": 2.0})
        assert np.array_equal(out["bass"], 2 * x["bass"])
        assert np.array_equal(out["vocals"], x["vocals"])

    def test_reproducible(self, rng):
        x = self.stems(rng)
        a = tr.augment(x, np.random.default_rng(9), sample_rate=8000)
        b = tr.augment(x, np.random.default_rng(9), sample_rate=8000)
        assert all(np.array_equal(a[s], b[s]) for s in SOURCES)

    def test_pan_preserves_power_of_identical_channels(self, rng):
        mono = rng.standard_normal(4000)
        x = {"vocals": np.stack([mono, mono])}
        out = tr.augment(x, np.random.default_rng(1), gain=False, pan=True, filter=False)["vocals"]
        assert (out ** 2).sum() == pytest.approx((x["vocals"] ** 2).sum(), rel=1e-12)

    def test_gain_range(self, rng):
        x = {"vocals": np.ones((2, 10))}
        gains = [tr.augment(x, np.random.default_rng(i), pan=False, filter=False)["vocals"][0, 0] for i in range(200)]
        assert 0.5 <= min(gains) and max(gains) <= 1.5

    def test_shelf_gain_at_extremes(self):
        b, a = tr._shelf_coefficients(6.0, 500.0, 8000, "low")
        dc = b.sum() / a.sum()
        nyq = (b[0] - b[1] + b[2]) / (a[0] - a[1] + a[2])
        assert 20 * np.log10(dc) == pytest.approx(6.0, abs=1e-9)
        assert 20 * np.log10(abs(nyq)) == pytest.approx(0.0, abs=0.05)

    def test_song_mixture_recomputed(self, corpus):
        song = tr.augment_song(corpus[0], np.random.default_rng(3))
        total = sum(song.stems[s] for s in SOURCES)
        assert np.allclose(song.mixture, total, atol=1e-6)
        with pytest.raises(InvalidInputError):
            tr.augment({"bass": np.zeros((1, 5))}, np.random.default_rng(0))


class TestEpochPlan:
    def test_b_from_smallest(self):
        dbs = {s: tr.TaskDatabase((s,), [("x", i) for i in range(n)], "train", 0)
               for s, n in zip(SOURCES, (40, 17, 25, 90))}
        plan = tr.make_epoch_plan(dbs, 4, 1, 0)
        assert plan.n_batches == 4 and plan.task_order == list(SOURCES)
        assert all(len(plan.batches[s]) == 4 and all(len(b) == 4 for b in plan.batches[s]) for s in SOURCES)
        assert tr.make_epoch_plan(dbs, 4, 1, 0, max_batches=2).n_batches == 2

    def test_subsets_resampled_each_epoch(self):
        dbs = {s: tr.TaskDatabase((s,), [("x", i) for i in range(n)], "train", 0)
               for s, n in zip(SOURCES, (40, 16, 25, 90))}
        chosen = [frozenset(np.concatenate(tr.make_epoch_plan(dbs, 4, e, 0).batches["other"]).tolist())
                  for e in (1, 2, 3)]
        assert len(set(chosen)) == 3
        again = tr.make_epoch_plan(dbs, 4, 2, 0)
        assert all(np.array_equal(a, b) for a, b in zip(again.batches["other"], tr.make_epoch_plan(dbs, 4, 2, 0).batches["other"]))

    def test_shuffled_task_order_is_a_permutation(self):
        dbs = {s: tr.TaskDatabase((s,), [("x", 0)] * 8, "train", 0) for s in SOURCES}
        orders = {tuple(tr.make_epoch_plan(dbs, 2, e, 0, shuffle_task_order=True).task_order) for e in range(10)}
        assert all(sorted(o) == sorted(SOURCES) for o in orders) and len(orders) > 1


class TestEarlyStopping:
    def log(self, vals):
        lg = tr.TrainLog()
        for i, v in enumerate(vals, 1):
            lg.records.append(tr.EpochRecord(i, {}, {"vocals": v}, v, 0, {}))
        return lg

    def test_decreasing_never_stops(self):
        assert tr.early_stopping(self.log([5, 4, 3, 2, 1]), 2) == (False, 5)

    def test_flat_stops_at_first(self):
        assert tr.early_stopping(self.log([1.0] * 4), 3) == (True, 1)
        assert tr.early_stopping(self.log([1.0] * 3), 3) == (False, 1)

    def test_ties_go_earlier(self):
        assert tr.early_stopping(self.log([3, 1, 2, 1, 2]), 10) == (False, 2)

    def test_needs_an_epoch(self):
        with pytest.raises(InvalidInputError):
            tr.early_stopping(tr.TrainLog(), 3)


class TestRegimes:
    def run(self, regime, setup, max_batches=2, optimizer=None, hook=None):
        dbs, store = setup
        model = build_shared_model("desk", seed=1, dtype=np.float64)
        factory = optimizer or tr.default_optimizer
        opts = tr.make_optimizers(model, 1e-3, factory)
        if regime == "simultaneous":
            sdbs = tr.make_databases(store_songs(store), "simultaneous", 0, stft=DESK_STFT, patch_frames=32, hop_frames=16)
            plan = tr.make_epoch_plan(sdbs.train, 4, 1, 0, max_batches=max_batches)
            losses = tr.epoch_simultaneous(model, store, sdbs.train[tr.ALL], plan, opts, 32, hook)
        else:
            plan = tr.make_epoch_plan(dbs.train, 4, 1, 0, max_batches=max_batches)
            fn = tr.epoch_interleaved if regime == "interleaved" else tr.epoch_interleaved_acc
            losses = fn(model, store, dbs.train, plan, opts, 32, hook)
        return model, opts, losses

    @pytest.mark.parametrize("regime,enc,dec", [("interleaved", 8, 2), ("interleaved_acc", 2, 2), ("simultaneous", 2, 2)])
    def test_update_counts(self, setup, regime, enc, dec):
        _, opts, losses = self.run(regime, setup)
        assert opts["encoder"].step_count == enc
        assert all(opts[s].step_count == dec for s in SOURCES)
        assert set(losses) == set(SOURCES) and all(np.isfinite(v) for v in losses.values())

    def test_interleaved_decoder_isolation(self, setup):
        seen = []

        def hook(phase, b, task, model):
            if phase == "before":
                hook.prev = {s: snapshot(model.decoder_parameters(s)) for s in SOURCES}
                hook.enc = snapshot(model.encoder_parameters())
            else:
                for s in SOURCES:
                    unchanged = same(hook.prev[s], snapshot(model.decoder_parameters(s)))
                    assert unchanged == (s != task)
                assert not same(hook.enc, snapshot(model.encoder_parameters()))
                seen.append(task)

        self.run("interleaved", setup, hook=hook)
        assert seen == list(SOURCES) * 2

    def test_simultaneous_encoder_gradient_is_sum(self, setup):
        dbs, store = setup
        model = build_shared_model("desk", seed=2, dtype=np.float64)
        x = store.mixture[dbs.train["vocals"].pairs[0][0]][None, :, :32]
        ys = {s: store.targets[dbs.train["vocals"].pairs[0][0]][s][None, :, :32] for s in SOURCES}
        enc = model.encoder_parameters()
        total_expected = [np.zeros_like(p.data) for p in enc]
        individual = 0.0
        for s in SOURCES:
            for p in model.parameters():
                p.zero_grad()
            loss = l1_loss(model.forward_single(x, s), ys[s])
            individual += float(loss.data)
            backward(loss)
            for acc, p in zip(total_expected, enc):
                acc += p.grad
        for p in model.parameters():
            p.zero_grad()
        outs = model.forward(x)
        total = None
        for s in SOURCES:
            ls = l1_loss(outs[s], ys[s])
            total = ls if total is None else add(total, ls)
        assert abs(float(total.data) - individual) < 1e-9
        backward(total)
        got = np.concatenate([p.grad.ravel() for p in enc])
        want = np.concatenate([a.ravel() for a in total_expected])
        assert np.linalg.norm(got - want) <= 1e-6 * np.linalg.norm(want)

    def test_non_finite_loss_aborts(self, setup):
        dbs, store = setup
        bad = tr.SpectrogramStore([], DESK_STFT, store.norm, np.float64)
        bad.mixture = {k: v.copy() for k, v in store.mixture.items()}
        bad.targets = {k: {s: v.copy() for s, v in d.items()} for k, d in store.targets.items()}
        for d in bad.targets.values():
            d["drums"][...] = np.nan
        model = build_shared_model("desk", seed=1, dtype=np.float64)
        plan = tr.make_epoch_plan(dbs.train, 4, 1, 0, max_batches=1)
        with pytest.raises(TrainingDivergedError, match="drums"):
            tr.epoch_interleaved(model, bad, dbs.train, plan, tr.make_optimizers(model, 1e-3), 32)

    def test_independent_networks_disjoint(self, setup):
        dbs, store = setup
        nets = build_independent_networks("desk", seed=1, dtype=np.float64)
        opts = tr.make_optimizers(nets, 1e-3)
        before = {s: snapshot(nets.networks[s].parameters()) for s in SOURCES}
        plan = tr.make_epoch_plan({"bass": dbs.train["bass"]}, 4, 1, 0, max_batches=2)
        tr.epoch_single(nets.networks["bass"], store, dbs.train["bass"], plan, opts["bass"], 32)
        assert opts["bass"].step_count == 2
        for s in SOURCES:
            assert same(before[s], snapshot(nets.networks[s].parameters())) == (s != "bass")


def store_songs(store):
    """Rebuild the Song list the module-level store was made from."""
    return _CORPUS


_CORPUS = synth_corpus(SynthSpec(n_songs=6, duration_s=2.0, seed=11))


class TestTrainDriver:
    CFG = dict(max_epochs=3, max_batches_per_epoch=2, batch_size=4, patience_epochs=5, seed=4)

    @pytest.mark.parametrize("regime", tr.REGIMES)
    def test_runs_and_logs(self, corpus, regime, tmp_path):
        res = tr.train(corpus, tr.TrainConfig.desk(regime=regime, **self.CFG))
        logs = res.logs
        assert len(logs) == (4 if regime == "independent" else 1)
        assert all(len(lg.records) == 3 and lg.best_epoch is not None for lg in logs)
        tr.write_log_csv(tmp_path / "log.csv", logs)
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert list(rows[0]) == tr.CSV_FIELDS and len(rows) == 12
        ratio = {"interleaved": 4, "interleaved_acc": 1, "simultaneous": 1, "independent": 1}[regime]
        assert all(int(r["encoder_updates"]) == ratio * int(r["decoder_updates"]) for r in rows)

    def test_deterministic(self, corpus, tmp_path):
        a = tr.train(corpus, tr.TrainConfig.desk(regime="interleaved_acc", augment_gain=True, **self.CFG))
        b = tr.train(corpus, tr.TrainConfig.desk(regime="interleaved_acc", augment_gain=True, **self.CFG))
        tr.write_log_csv(tmp_path / "a.csv", a.logs)
        tr.write_log_csv(tmp_path / "b.csv", b.logs)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_best_state_restored(self, corpus):
        snaps = {}

        def on_epoch(lg, model):
            snaps[lg.records[-1].epoch] = {k: v.copy() for k, v in model.state_dict().items()}

        res = tr.train(corpus, tr.TrainConfig.desk(regime="interleaved", **self.CFG), on_epoch=on_epoch)
        best = snaps[res.logs[0].best_epoch]
        assert all(np.array_equal(best[k], v) for k, v in res.model.state_dict().items())

    def test_rejects_bad_corpus(self, corpus):
        with pytest.raises(ConfigError):
            tr.train(corpus, tr.TrainConfig(regime="interleaved"))  # 44.1 kHz config vs 8 kHz corpus
        with pytest.raises(ConfigError):
            tr.TrainConfig(regime="alternating")

    def test_config_round_trip(self):
        cfg = tr.TrainConfig.desk(regime="interleaved-acc")
        assert cfg.regime == "interleaved_acc"
        assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_separate_signal_shapes(corpus):
    model = build_shared_model("desk", seed=0)
    norm = dsp.fit_normalization(tr.mixture_magnitudes(corpus[:2], DESK_STFT))
    x = corpus[0].mixture[:, :10001]
    out = tr.separate_signal(model, x, norm, DESK_STFT)
    assert set(out) == set(SOURCES) and all(y.shape == x.shape for y in out.values())
