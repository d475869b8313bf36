import numpy as np
import pytest

from speechlab import dsp
from speechlab.dsp import AudioBuffer, BandSpec
from speechlab.errors import ConfigError, FormatError, UndefinedRetentionError


def sine(freq, duration=1.0, rate=24000, amp=0.9):
    t = np.arange(int(duration * rate)) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate)


def fft_peak_hz(buf):
    spec = np.abs(np.fft.rfft(buf.samples * np.hanning(buf.samples.size)))
    return np.fft.rfftfreq(buf.samples.size, 1.0 / buf.sample_rate)[np.argmax(spec)]


class TestWavIO:
    def test_roundtrip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        buf = AudioBuffer(rng.uniform(-1, 1, 4000), 24000)
        p = tmp_path / "x.wav"
        dsp.write_wav(p, buf)
        back = dsp.read_wav(p)
        assert back.sample_rate == 24000
        assert np.max(np.abs(back.samples - buf.samples)) <= 1.0 / 32768.0

    def test_sine_roundtrip_preserves_peak_bin(self, tmp_path):
        buf = sine(440.0)
        p = tmp_path / "sine.wav"
        dsp.write_wav(p, buf)
        assert abs(fft_peak_hz(dsp.read_wav(p)) - 440.0) <= 1.0

    def test_zero_length_data_chunk(self, tmp_path):
        buf = AudioBuffer(np.zeros(0), 8000)
        p = tmp_path / "empty.wav"
        dsp.write_wav(p, buf)
        back = dsp.read_wav(p)
        assert back.samples.size == 0

    def test_stereo_averaged(self, tmp_path):
        import struct
        rate = 8000
        left = np.array([0.5, -0.5, 0.25], dtype=np.float64)
        right = np.array([0.25, 0.5, 0.25], dtype=np.float64)
        inter = np.empty(6)
        inter[0::2], inter[1::2] = left, right
        ints = np.round(inter * 32768).astype("<i2")
        payload = ints.tobytes()
        raw = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        raw += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, rate, rate * 4, 4, 16)
        raw += b"data" + struct.pack("<I", len(payload)) + payload
        p = tmp_path / "st.wav"
        p.write_bytes(raw)
        back = dsp.read_wav(p)
        np.testing.assert_allclose(back.samples, (left + right) / 2, atol=1e-4)

    def test_non_pcm_reports_chunk(self, tmp_path):
        import struct
        raw = b"RIFF" + struct.pack("<I", 28) + b"WAVE"
        raw += b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 8000, 16000, 2, 16)
        p = tmp_path / "f32.wav"
        p.write_bytes(raw)
        with pytest.raises(FormatError, match="fmt"):
            dsp.read_wav(p)

    def test_corrupt_header(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(FormatError, match="RIFF"):
            dsp.read_wav(p)


class TestResample:
    def test_same_rate_identity(self):
        buf = sine(440.0, 0.25)
        out = dsp.resample(buf, 24000)
        np.testing.assert_array_equal(out.samples, buf.samples)

    def test_output_length_contract(self):
        # round-half-up: 1001 * 24000/48000 = 500.5 -> 501
        buf = AudioBuffer(np.zeros(1001), 48000)
        out = dsp.resample(buf, 24000)
        assert out.samples.size == int(np.floor(1001 * 24000 / 48000 + 0.5))

    def test_downsample_keeps_tone(self):
        buf = sine(1000.0, 1.0, rate=48000)
        out = dsp.resample(buf, 24000)
        assert out.sample_rate == 24000
        # peak within one bin of 1 kHz
        assert abs(fft_peak_hz(out) - 1000.0) <= out.sample_rate / out.samples.size
        band = BandSpec(1000.0, 100.0)
        frac_in = dsp.band_energy(buf, band) / dsp.total_energy(buf)
        frac_out = dsp.band_energy(out, band) / dsp.total_energy(out)
        assert abs(frac_out / frac_in - 1.0) < 0.01

    def test_antialias_rejection(self):
        buf = sine(10000.0, 1.0, rate=48000)
        out = dsp.resample(buf, 16000)
        e_in = dsp.band_energy(buf, BandSpec(10000.0, 200.0))
        # 10 kHz is above the new 8 kHz Nyquist; look for any residual
        # energy aliased to 16000-10000=6000 Hz
        e_alias = dsp.band_energy(out, BandSpec(6000.0, 200.0))
        assert 10 * np.log10(e_in / max(e_alias, 1e-300)) > 40.0

    def test_rate_transitivity_within_tolerance(self):
        buf = sine(3000.0, 0.5, rate=48000)
        direct = dsp.resample(buf, 24000)
        staged = dsp.resample(dsp.resample(buf, 32000), 24000)
        band = BandSpec(3000.0, 200.0)
        assert abs(dsp.band_energy(direct, band) / dsp.band_energy(staged, band) - 1) < 0.02


class TestStft:
    def test_dc_energy_in_bin0(self):
        buf = AudioBuffer(np.ones(2048) * 0.5, 8000)
        spec = dsp.stft(buf, 256, 256, window="rect")
        mags = np.abs(spec).mean(axis=0)
        assert mags[0] > 1e6 * mags[1:].max()

    def test_roundtrip_snr_on_noise(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 0.3, 8192)
        buf = AudioBuffer(x, 16000)
        spec = dsp.stft(buf, 512, 128)
        back = dsp.istft(spec, 512, 128, 16000)
        lo, hi = 512, back.samples.size - 512
        err = x[lo:hi] - back.samples[lo:hi]
        snr = 10 * np.log10(np.sum(x[lo:hi] ** 2) / np.sum(err ** 2))
        assert snr > 60.0

    def test_parseval_rect_window(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 0.4, 1024)
        buf = AudioBuffer(x, 8000)
        wl = 256
        spec = dsp.stft(buf, wl, wl, window="rect")
        # rfft: double the energy of non-DC, non-Nyquist bins
        e = np.abs(spec) ** 2
        e_frames = (2 * e.sum() - e[:, 0].sum() - e[:, -1].sum()) / wl
        e_signal = np.sum(x[:spec.shape[0] * wl] ** 2)
        assert abs(e_frames / e_signal - 1.0) < 1e-6

    def test_non_invertible_pair_rejected(self):
        buf = AudioBuffer(np.zeros(4096), 8000)
        with pytest.raises(ConfigError, match="not invertible"):
            dsp.stft(buf, 512, 512, window="hann")  # hann at hop=wl has zeros

    def test_hop_exceeding_window_rejected(self):
        with pytest.raises(ConfigError, match="hop"):
            dsp.stft(AudioBuffer(np.zeros(1024), 8000), 256, 512)


class TestMel:
    def test_silence_floor(self):
        buf = AudioBuffer(np.zeros(4096), 24000)
        mel = dsp.mel_spectrogram(buf, 512, 128, 40)
        np.testing.assert_allclose(mel.frames, np.log(1e-5))

    def test_filterbank_rows_nonneg_and_peak_at_center(self):
        sr, wl, m = 24000, 1024, 30
        fb = dsp.mel_filterbank(sr, wl, m, 50.0, 11000.0)
        freqs = np.fft.rfftfreq(wl, 1.0 / sr)
        pts = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(50.0), dsp.hz_to_mel(11000.0), m + 2))
        assert np.all(fb >= 0.0)
        for row in range(m):
            peak_bin = np.argmax(fb[row])
            center_bin = np.argmin(np.abs(freqs - pts[row + 1]))
            assert abs(int(peak_bin) - int(center_bin)) <= 1

    def test_tone_lands_in_nearest_mel_bin(self):
        buf = sine(1000.0, 0.5)
        mel = dsp.mel_spectrogram(buf, 1024, 256, 40, fmin=50.0, fmax=11000.0)
        energy = mel.frames.mean(axis=0)
        pts = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(50.0), dsp.hz_to_mel(11000.0), 42))
        expect = np.argmin(np.abs(pts[1:-1] - 1000.0))
        assert abs(int(np.argmax(energy)) - int(expect)) <= 1

    def test_fmax_above_nyquist_rejected(self):
        with pytest.raises(ConfigError, match="Nyquist"):
            dsp.mel_spectrogram(AudioBuffer(np.zeros(2048), 8000), 256, 64, 20, fmax=5000.0)


class TestProbes:
    def test_sine_peak(self):
        buf = dsp.make_probe("sine", {"freq_hz": 2000.0}, 1.0, 24000)
        assert abs(fft_peak_hz(buf) - 2000.0) <= 1.0

    def test_multitone_equal_peaks(self):
        buf = dsp.make_probe("multitone", {"freqs_hz": [2000.0, 5000.0, 8000.0]}, 1.0, 24000, seed=3)
        spec = np.abs(np.fft.rfft(buf.samples))
        freqs = np.fft.rfftfreq(buf.samples.size, 1 / 24000)
        peaks = [spec[np.argmin(np.abs(freqs - f))] for f in (2000.0, 5000.0, 8000.0)]
        assert max(peaks) / min(peaks) < 1.01

    def test_zero_duration(self):
        buf = dsp.make_probe("sine", {"freq_hz": 100.0}, 0.0, 8000)
        assert buf.samples.size == 0

    def test_above_nyquist_rejected(self):
        with pytest.raises(ConfigError, match="Nyquist"):
            dsp.make_probe("sine", {"freq_hz": 5000.0}, 0.1, 8000)

    def test_deterministic_given_seed(self):
        a = dsp.make_probe("harmonic_tone", {"f0_hz": 220.0}, 0.5, 24000, seed=9)
        b = dsp.make_probe("harmonic_tone", {"f0_hz": 220.0}, 0.5, 24000, seed=9)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestBandEnergy:
    def test_sine_at_center(self):
        buf = sine(5000.0)
        band = BandSpec(5000.0, 500.0)
        assert dsp.band_energy(buf, band) / dsp.total_energy(buf) >= 0.99

    def test_silence(self):
        assert dsp.band_energy(AudioBuffer(np.zeros(1000), 24000), BandSpec(2000, 500)) == 0.0

    def test_sine_outside_band(self):
        buf = sine(2000.0)
        band = BandSpec(8000.0, 500.0)
        assert dsp.band_energy(buf, band) / dsp.total_energy(buf) < 0.01

    def test_band_beyond_nyquist_rejected(self):
        with pytest.raises(ConfigError, match="Nyquist"):
            dsp.band_energy(AudioBuffer(np.zeros(100), 8000), BandSpec(4000.0, 500.0))


class TestRetention:
    def test_identity_system(self):
        buf = sine(2000.0)
        assert dsp.retention(buf, buf, BandSpec(2000, 500)) == pytest.approx(1.0)

    def test_half_amplitude_gives_quarter_energy(self):
        buf = sine(2000.0)
        half = AudioBuffer(0.5 * buf.samples, buf.sample_rate)
        assert dsp.retention(buf, half, BandSpec(2000, 500)) == pytest.approx(0.25)

    def test_scale_covariance(self):
        rng = np.random.default_rng(5)
        x = AudioBuffer(rng.normal(0, 0.3, 24000), 24000)
        y = AudioBuffer(rng.normal(0, 0.3, 24000), 24000)
        band = BandSpec(3000, 400)
        base = dsp.retention(x, y, band)
        scaled = dsp.retention(x, AudioBuffer(1.7 * y.samples, 24000), band)
        assert scaled == pytest.approx(1.7 ** 2 * base, rel=1e-9)

    def test_lag_alignment_recovers_delay(self):
        buf = sine(2000.0, 0.5)
        delayed = AudioBuffer(np.concatenate([np.zeros(300), buf.samples]), 24000)
        r = dsp.retention(buf, delayed, BandSpec(2000, 500))
        assert r == pytest.approx(1.0, rel=1e-2)

    def test_zero_input_band_energy_raises(self):
        buf = sine(2000.0)
        with pytest.raises(UndefinedRetentionError):
            dsp.retention(buf, buf, BandSpec(9000.0, 200.0))


class TestLowpass:
    def test_passband_energy_preserved(self):
        buf = sine(1000.0)
        out = dsp.lowpass(buf, 2000.0)
        band = BandSpec(1000.0, 200.0)
        assert dsp.band_energy(out, band) / dsp.band_energy(buf, band) > 0.99

    def test_stopband_rejection_at_twice_cutoff(self):
        buf = sine(4000.0)
        out = dsp.lowpass(buf, 2000.0)
        band = BandSpec(4000.0, 200.0)
        atten = 10 * np.log10(dsp.band_energy(buf, band) / max(dsp.band_energy(out, band), 1e-300))
        assert atten > 40.0

    def test_dc_preserved(self):
        buf = AudioBuffer(np.full(8000, 0.25), 8000)
        out = dsp.lowpass(buf, 1000.0)
        mid = out.samples[2000:6000]
        np.testing.assert_allclose(mid, 0.25, rtol=1e-3)

    def test_cutoff_at_nyquist_rejected(self):
        with pytest.raises(ConfigError, match="Nyquist"):
            dsp.lowpass(AudioBuffer(np.zeros(100), 8000), 4000.0)
