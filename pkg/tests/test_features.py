import math

import numpy as np
import pytest

from voiceshift.errors import (ConfigMismatchError, ExtractionError,
                               InvalidInputError)
from voiceshift.features import (EPS_ENERGY, EPS_MEL, DspPitchExtractor,
                                 EnergyContour, MelConfig, MelSpectrogram,
                                 PitchContour, Waveform, compute_energy,
                                 compute_mel, extract_pitch, hz_to_mel,
                                 mel_filter_centers, mel_to_hz,
                                 normalize_curve, normalize_energy,
                                 normalize_pitch)

SR = 24000


def tone(freq, seconds=1.0, amp=0.8, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.cos(2 * np.pi * freq * t), sr)


def sawtooth(freq, n, amp=0.6, sr=SR):
    t = np.arange(n) / sr
    return Waveform(amp * (2 * ((freq * t) % 1.0) - 1.0), sr)


class TestComputeMel:
    def test_silence_hits_log_floor(self, mel_config):
        m = compute_mel(Waveform(np.zeros(3000), SR), mel_config)
        assert m.n_frames == 11
        assert np.all(m.values == math.log(EPS_MEL))

    def test_pure_tone_argmax_is_nearest_filter(self, mel_config):
        # independent oracle: recompute the filter centers from the mel
        # formula and find the one closest to the tone frequency
        pts = np.linspace(0.0, 2595.0 * math.log10(1.0 + (SR / 2) / 700.0),
                          mel_config.n_mels + 2)
        centers = 700.0 * (10.0 ** (pts / 2595.0) - 1.0)[1:-1]
        expected = int(np.argmin(np.abs(centers - 440.0)))

        m = compute_mel(tone(440.0), mel_config)
        argmax = m.values.argmax(axis=0)
        assert np.all(argmax == expected)

    def test_frame_count_of_concatenation(self, mel_config):
        rng = np.random.default_rng(0)
        a = rng.uniform(-0.5, 0.5, 2500)
        b = rng.uniform(-0.5, 0.5, 3700)
        hop = mel_config.hop
        ta = compute_mel(Waveform(a, SR), mel_config).n_frames
        tb = compute_mel(Waveform(b, SR), mel_config).n_frames
        tcat = compute_mel(Waveform(np.concatenate([a, b]), SR), mel_config).n_frames
        assert ta == 1 + len(a) // hop
        assert tb == 1 + len(b) // hop
        assert tcat == 1 + (len(a) + len(b)) // hop
        # the two separate runs double-count the leading center-pad frame
        assert tcat == ta + tb - 1 + (len(a) % hop + len(b) % hop) // hop

    def test_deterministic(self, mel_config):
        w = sawtooth(150.0, 7000)
        m1 = compute_mel(w, mel_config)
        m2 = compute_mel(w, mel_config)
        assert np.array_equal(m1.values, m2.values)

    def test_empty_waveform_rejected(self, mel_config):
        with pytest.raises(InvalidInputError):
            compute_mel(Waveform(np.zeros(0), SR), mel_config)

    def test_sample_rate_mismatch_rejected(self, mel_config):
        with pytest.raises(ConfigMismatchError):
            compute_mel(Waveform(np.zeros(1000), 16000), mel_config)

    def test_mel_scale_roundtrip(self):
        freqs = np.array([0.0, 440.0, 1000.0, 11999.0])
        assert np.allclose(mel_to_hz(hz_to_mel(freqs)), freqs)


class TestComputeEnergy:
    def test_single_unit_bin(self, mel_config):
        col = np.full((80, 1), -60.0)  # exp(-60) ~ 0
        col[5, 0] = 0.0  # linear amplitude exactly 1
        e = compute_energy(MelSpectrogram(col, mel_config))
        assert abs(e.values[0]) < 1e-8

    def test_uniform_bins(self, mel_config):
        x = MelSpectrogram(np.full((80, 3), math.log(0.1)), mel_config)
        expected = math.log(math.sqrt(80 * 0.1 ** 2))
        assert np.allclose(compute_energy(x).values, expected)

    def test_zero_frame_hits_floor(self, mel_config):
        x = MelSpectrogram(np.full((80, 2), -100.0), mel_config)
        assert np.allclose(compute_energy(x).values, math.log(EPS_ENERGY))

    def test_log_shift_property(self, mel_config):
        rng = np.random.default_rng(1)
        vals = rng.uniform(math.log(0.05), 1.0, size=(80, 9))
        x = MelSpectrogram(vals, mel_config)
        shifted = MelSpectrogram(vals + 0.7, mel_config)
        assert np.allclose(compute_energy(shifted).values,
                           compute_energy(x).values + 0.7, atol=1e-9)

    def test_matches_scalar_oracle(self, mel_config):
        rng = np.random.default_rng(2)
        vals = rng.normal(-3.0, 1.0, size=(80, 4))
        e = compute_energy(MelSpectrogram(vals, mel_config)).values
        for t in range(4):
            acc = sum(math.exp(v) ** 2 for v in vals[:, t])
            assert abs(e[t] - math.log(max(math.sqrt(acc), EPS_ENERGY))) < 1e-9


class TestNormalizeCurve:
    def test_constant_curve_goes_to_zero(self):
        out = normalize_curve(np.array([5.0, 5.0, 5.0]))
        assert np.array_equal(out.values, np.zeros(3))
        assert np.allclose(out.denormalize(), [5.0, 5.0, 5.0])

    def test_simple_zscore(self):
        out = normalize_curve(np.array([1.0, 2.0, 3.0]))
        std = math.sqrt(2.0 / 3.0)  # population std
        expected = [(v - 2.0) / std for v in (1.0, 2.0, 3.0)]
        assert np.allclose(out.values, expected, atol=1e-12)
        assert np.allclose(out.values, [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_partial_support(self):
        out = normalize_curve(np.array([0.0, 100.0, 300.0]),
                              support=np.array([False, True, True]))
        # stats over {100, 300}: mean 200, population std 100
        assert out.values[0] == 0.0
        assert np.allclose(out.values[1:], [-1.0, 1.0])

    def test_roundtrip_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            curve = rng.normal(0, 5, n)
            support = rng.random(n) < 0.7
            if not support.any():
                support[0] = True
            curve = np.where(support, curve, 0.0)
            out = normalize_curve(curve, support)
            assert np.allclose(out.denormalize()[support], curve[support],
                               atol=1e-5)

    def test_empty_support_rejected_unless_zero(self):
        zero = normalize_curve(np.zeros(4), np.zeros(4, dtype=bool))
        assert np.array_equal(zero.values, np.zeros(4))
        with pytest.raises(InvalidInputError):
            normalize_curve(np.array([1.0, 0.0]), np.zeros(2, dtype=bool))

    def test_mean_and_std_on_support(self):
        rng = np.random.default_rng(4)
        curve = rng.normal(3.0, 2.0, 200)
        out = normalize_curve(curve)
        assert abs(out.values.mean()) < 1e-5
        assert abs(out.values.std() - 1.0) < 1e-4


class TestExtractPitch:
    def test_silence_is_unvoiced(self, mel_config):
        p = extract_pitch(Waveform(np.zeros(SR), SR), mel_config)
        assert not p.voiced_mask.any()
        assert np.all(p.f0 == 0)
        assert len(p.f0) == mel_config.n_frames(SR)

    def test_sawtooth_matches_spectral_oracle(self, mel_config):
        w = sawtooth(220.0, SR)
        p = extract_pitch(w, mel_config)
        assert p.voiced_mask.mean() > 0.8
        median = np.median(p.f0[p.voiced_mask])
        oracle = spectral_peak_f0(w.samples, SR)
        assert abs(median - oracle) <= 0.05 * oracle
        assert abs(median - 220.0) <= 0.05 * 220.0

    def test_octave_step(self, mel_config):
        w = Waveform(np.concatenate([sawtooth(220.0, SR // 2).samples,
                                     sawtooth(440.0, SR // 2).samples]), SR)
        p = extract_pitch(w, mel_config)
        half = len(p.f0) // 2
        lo = np.median(p.f0[:half][p.voiced_mask[:half]])
        hi = np.median(p.f0[half:][p.voiced_mask[half:]])
        for measured, target in ((lo, spectral_peak_f0(w.samples[: SR // 2], SR)),
                                 (hi, spectral_peak_f0(w.samples[SR // 2 :], SR))):
            assert abs(measured - target) <= 0.05 * target
        assert abs(hi / lo - 2.0) <= 0.1

    def test_invariant_enforced_on_sloppy_extractor(self, mel_config):
        import types

        class Sloppy:
            def from_waveform(self, w, config):
                n = config.n_frames(len(w.samples))
                f0 = np.zeros(n)
                f0[1] = 100.0
                mask = np.ones(n, dtype=bool)  # claims voiced everywhere
                return types.SimpleNamespace(f0=f0, voiced_mask=mask)

            def from_mel(self, x):
                raise NotImplementedError

        p = extract_pitch(Waveform(np.zeros(3000), SR), mel_config, Sloppy())
        assert np.all((p.f0 == 0) == ~p.voiced_mask)
        assert p.voiced_mask.sum() == 1

    def test_extractor_failure_wrapped(self, mel_config):
        class Broken:
            def from_waveform(self, w, config):
                raise RuntimeError("boom")

            def from_mel(self, x):
                raise RuntimeError("boom")

        with pytest.raises(ExtractionError) as err:
            extract_pitch(Waveform(np.zeros(3000), SR), mel_config, Broken())
        assert err.value.frame_range is not None

    def test_mel_domain_estimator_on_harmonic_tone(self, mel_config):
        w = sawtooth(200.0, SR)
        mel = compute_mel(w, mel_config)
        p = DspPitchExtractor().from_mel(mel)
        assert p.voiced_mask.mean() > 0.5
        median = np.median(p.f0[p.voiced_mask])
        assert abs(median - 200.0) <= 0.1 * 200.0


def spectral_peak_f0(samples, sr, lo_hz=50.0, hi_hz=600.0):
    """Strongest FFT magnitude in the F0 band over the whole signal.

    Lives in the frequency domain, so it shares nothing with the
    time-domain autocorrelation path it double-checks; for the harmonic
    test signals (1/k amplitude falloff) the fundamental dominates.
    """
    spectrum = np.abs(np.fft.rfft(samples - samples.mean()))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sr)
    band = (freqs >= lo_hz) & (freqs <= hi_hz)
    return freqs[band][int(np.argmax(spectrum[band]))]


class TestNormalizedProsody:
    def test_pitch_normalized_over_voiced_only(self):
        p = PitchContour(f0=np.array([0.0, 100.0, 300.0]),
                         voiced_mask=np.array([False, True, True]))
        out = normalize_pitch(p)
        assert out.values[0] == 0.0
        assert np.allclose(out.values[1:], [-1.0, 1.0])

    def test_all_unvoiced_pitch(self):
        p = PitchContour(f0=np.zeros(5), voiced_mask=np.zeros(5, dtype=bool))
        assert np.array_equal(normalize_pitch(p).values, np.zeros(5))

    def test_energy_normalized_over_all_frames(self):
        e = EnergyContour(values=np.array([1.0, 2.0, 3.0]))
        out = normalize_energy(e)
        assert abs(out.values.mean()) < 1e-12
