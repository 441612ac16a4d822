import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedsep import dsp
from sharedsep.errors import InvalidInputError

from conftest import rel_err


def dft_oracle(frame, window):
    """Direct O(N^2) windowed DFT sum, bins 0..N/2."""
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (frame * window * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


class TestConfig:
    def test_defaults_give_1025_bins(self):
        cfg = dsp.StftConfig()
        assert (cfg.window_size, cfg.hop, cfg.n_bins) == (2048, 512, 1025)

    @pytest.mark.parametrize("kw", [{"window_size": 2047}, {"hop": 0}, {"hop": 4096}, {"hop": 300}])
    def test_rejects_bad_configs(self, kw):
        with pytest.raises(InvalidInputError):
            dsp.StftConfig(**kw)

    def test_hann_cola_at_quarter_and_half_hop(self):
        w = dsp.make_window("hann", 1024)
        assert dsp.cola_deviation(w, 256) < 1e-12
        assert dsp.cola_deviation(w, 512) < 1e-12
        assert dsp.cola_deviation(w, 300) > 1e-3


class TestStft:
    def test_zero_signal(self):
        spec = dsp.stft(np.zeros((2, 5000)))
        assert spec.shape == (2, 10, 1025)
        assert not spec.data.any()

    def test_frame_count_centered(self):
        cfg = dsp.StftConfig()
        for n in (2048, 2049, 44100):
            assert dsp.stft(np.ones(n), cfg).shape[1] == -(-n // 512)

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            dsp.stft(np.zeros(100))

    def test_impulse_frame0_magnitudes_equal_window(self):
        cfg = dsp.StftConfig(window_size=64, hop=16, center=False)
        n0 = 21
        x = np.zeros(256)
        x[n0] = 1.0
        mag = np.abs(dsp.stft(x, cfg).data[0, 0])
        oracle = np.abs(dft_oracle(x[:64], cfg.window))
        assert np.allclose(mag, oracle, atol=1e-12)
        assert np.allclose(mag, cfg.window[n0], atol=1e-12)

    def test_bin_centred_cosine_peaks_at_k0(self):
        cfg = dsp.StftConfig(window_size=128, hop=32, sample_rate=8000, center=False)
        k0 = 13
        t = np.arange(2048)
        x = np.cos(2 * np.pi * k0 * cfg.sample_rate / cfg.window_size * t / cfg.sample_rate)
        spec = dsp.stft(x, cfg).data[0]
        assert (np.abs(spec).argmax(axis=1) == k0).all()
        for l in (0, 5, spec.shape[0] - 1):
            frame = x[l * cfg.hop: l * cfg.hop + cfg.window_size]
            assert np.allclose(spec[l], dft_oracle(frame, cfg.window), atol=1e-9)

    def test_linearity(self, rng):
        a, b = rng.standard_normal((2, 2, 6000))
        lhs = dsp.stft(2.5 * a - 0.7 * b).data
        rhs = 2.5 * dsp.stft(a).data - 0.7 * dsp.stft(b).data
        assert np.abs(lhs - rhs).max() < 1e-9


class TestMagnitudeAndReconstruct:
    def test_pythagorean(self):
        cfg = dsp.StftConfig()
        spec = dsp.ComplexSpectrogram(np.array([[[3 + 4j, 0j]]]), cfg, 0)
        assert dsp.magnitude(spec).data.tolist() == [[[5.0, 0.0]]]

    def test_elementwise_oracle(self, rng):
        z = rng.standard_normal((2, 3, 5)) + 1j * rng.standard_normal((2, 3, 5))
        mag = dsp.magnitude(dsp.ComplexSpectrogram(z, dsp.StftConfig(), 0)).data
        assert np.allclose(mag, np.sqrt(z.real ** 2 + z.imag ** 2), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("cfg", [dsp.StftConfig(), dsp.StftConfig(window_size=256, hop=64, sample_rate=8000),
                                     dsp.StftConfig(window_size=512, hop=256)])
    def test_round_trip_interior(self, rng, cfg):
        x = rng.standard_normal((2, 3 * 8000 + 123))
        spec = dsp.stft(x, cfg)
        y = dsp.reconstruct(dsp.magnitude(spec), spec)
        assert y.shape == x.shape
        inner = slice(cfg.window_size, -cfg.window_size)
        assert rel_err(y[:, inner], x[:, inner]) < 1e-6

    def test_zero_estimate(self, rng):
        spec = dsp.stft(rng.standard_normal(4096))
        assert not dsp.reconstruct(np.zeros(spec.shape), spec).any()

    def test_foreign_phase_is_deterministic(self, rng):
        x, y = rng.standard_normal((2, 1, 6000))
        mag, other = dsp.magnitude(dsp.stft(x)), dsp.stft(y)
        a, b = dsp.reconstruct(mag, other), dsp.reconstruct(mag, other)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self, rng):
        spec = dsp.stft(rng.standard_normal(4096))
        with pytest.raises(InvalidInputError):
            dsp.reconstruct(np.zeros((1, 3, 3)), spec)


class TestNormalization:
    def test_zero_two_bin_gives_unit_std(self):
        spec = np.zeros((1, 4, 3))
        spec[0, ::2, 1] = 2.0
        stats = dsp.fit_normalization([spec])
        assert stats.per_bin_std[1] == pytest.approx(1.0)

    def test_constant_bin_hits_floor(self):
        stats = dsp.fit_normalization([np.full((2, 10, 4), 3.0)], epsilon=1e-8)
        assert np.all(stats.per_bin_std == 1e-8)

    def test_empty_stream(self):
        with pytest.raises(InvalidInputError):
            dsp.fit_normalization(iter([]))

    def test_streaming_matches_two_pass(self, rng):
        parts = [np.abs(rng.standard_normal((2, int(rng.integers(1, 40)), 17))) * 10 + 100 for _ in range(9)]
        stats = dsp.fit_normalization(iter(parts))
        flat = np.concatenate([p.reshape(-1, 17) for p in parts])
        mean = flat.sum(axis=0) / len(flat)
        oracle = np.sqrt(((flat - mean) ** 2).sum(axis=0) / len(flat))
        assert np.abs(stats.per_bin_std - oracle).max() < 1e-9

    def test_normalized_training_set_has_unit_std(self, rng):
        parts = [np.abs(rng.standard_normal((2, 30, 9))) * rng.uniform(0.1, 5, 9) for _ in range(4)]
        stats = dsp.fit_normalization(parts)
        normed = dsp.fit_normalization([dsp.normalize(p, stats) for p in parts])
        assert np.abs(normed.per_bin_std - 1).max() < 1e-6

    def test_identity_and_round_trip(self, rng):
        x = np.abs(rng.standard_normal((2, 5, 7)))
        assert np.array_equal(dsp.normalize(x, dsp.NormalizationStats(np.ones(7))), x)
        stats = dsp.NormalizationStats(rng.uniform(0.01, 10, 7))
        assert np.abs(dsp.denormalize(dsp.normalize(x, stats), stats) - x).max() < 1e-12

    def test_bin_mismatch(self):
        with pytest.raises(InvalidInputError):
            dsp.normalize(np.ones((1, 2, 3)), dsp.NormalizationStats(np.ones(4)))

    def test_magnitude_container_preserved(self):
        spec = dsp.MagnitudeSpectrogram(np.ones((1, 2, 3)), dsp.StftConfig(), 99)
        out = dsp.normalize(spec, dsp.NormalizationStats(np.full(3, 2.0)))
        assert isinstance(out, dsp.MagnitudeSpectrogram) and out.n_samples == 99
        assert np.allclose(out.data, 0.5)


class TestPatches:
    def spec(self, frames):
        return dsp.MagnitudeSpectrogram(np.arange(frames * 3.0).reshape(1, frames, 3), dsp.StftConfig())

    def test_single_patch_equals_input(self):
        s = self.spec(128)
        (p,) = dsp.extract_patches(s, 128, 128)
        assert np.array_equal(p.data, s.data)

    @pytest.mark.parametrize("hop,starts", [(128, [0, 128]), (64, [0, 64, 128])])
    def test_offsets(self, hop, starts):
        patches = dsp.extract_patches(self.spec(300), 128, hop)
        assert [int(p.data[0, 0, 0]) // 3 for p in patches] == starts
        assert all(p.shape == (1, 128, 3) for p in patches)

    def test_too_short_is_empty(self):
        assert dsp.extract_patches(self.spec(10), 128, 64) == []

    @given(st.integers(0, 500), st.integers(1, 64), st.integers(1, 64))
    @settings(max_examples=60, deadline=None)
    def test_offsets_property(self, frames, patch, hop):
        offs = dsp.patch_offsets(frames, patch, hop)
        brute = [o for o in range(frames) if o % hop == 0 and o + patch <= frames]
        assert offs == brute
