"""Audio I/O, resampling, spectral transforms, probes, and band energetics.

Everything here is a pure function of its inputs; probe synthesis takes an
explicit seed. Band "retention" — the output/input band-energy ratio after
lag alignment — is the measurement primitive behind the frequency-response
and robustness analyses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, FormatError, UndefinedRetentionError

PCM16_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """Mono sample vector (nominally in [-1, 1]) plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ConfigError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0


@dataclass
class BandSpec:
    """Frequency band [center - half_width, center + half_width] in Hz."""

    center_hz: float
    half_width_hz: float

    def __post_init__(self):
        if self.half_width_hz <= 0:
            raise ConfigError(f"band half-width must be positive, got {self.half_width_hz}")
        if self.center_hz - self.half_width_hz <= 0:
            raise ConfigError(
                f"band [{self.center_hz} +- {self.half_width_hz}] extends to or below 0 Hz")

    def check_against(self, sample_rate: int):
        if self.center_hz + self.half_width_hz > sample_rate / 2.0:
            raise ConfigError(
                f"band [{self.center_hz} +- {self.half_width_hz}] exceeds the "
                f"Nyquist frequency {sample_rate / 2.0} Hz")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x M log-mel energies
    hop: int
    window: int
    sample_rate: int
    mel_bins: int


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM16)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioBuffer:
    """Read 16-bit PCM WAV (mono, or stereo averaged to mono)."""
    raw = open(path, "rb").read()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise FormatError(f"{path}: RIFF: missing or corrupt header")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: WAVE: wrong RIFF form type {raw[8:12]!r}")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: {cid.decode('ascii', 'replace')}: truncated chunk")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt : chunk too short ({size} bytes)")
            audio_format, n_ch, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if audio_format != 1:
                raise FormatError(f"{path}: fmt : non-PCM audio format {audio_format}")
            if bits != 16:
                raise FormatError(f"{path}: fmt : only 16-bit PCM supported, got {bits}")
            if n_ch not in (1, 2):
                raise FormatError(f"{path}: fmt : {n_ch} channels unsupported (mono/stereo only)")
            fmt = (n_ch, rate)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None:
        raise FormatError(f"{path}: fmt : chunk missing")
    if data is None:
        raise FormatError(f"{path}: data: chunk missing")
    n_ch, rate = fmt
    ints = np.frombuffer(data[:len(data) - (len(data) % (2 * n_ch))], dtype="<i2")
    x = ints.astype(np.float64) / PCM16_SCALE
    if n_ch == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return AudioBuffer(x, rate)


def write_wav(path, buf: AudioBuffer, bit_depth: int = 16):
    """Write 16-bit PCM WAV; samples are clipped to [-1, 1]."""
    if bit_depth != 16:
        raise ConfigError(f"only 16-bit PCM output is supported, got bit_depth={bit_depth}")
    x = np.clip(buf.samples, -1.0, 1.0)
    ints = np.clip(np.round(x * PCM16_SCALE), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, buf.sample_rate,
                                 buf.sample_rate * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(hdr + payload)


# ---------------------------------------------------------------------------
# resampling and filtering
# ---------------------------------------------------------------------------

def resample(buf: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling; identity at equal rates.

    Output length is round(n * target / source).
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ConfigError(f"target sample rate must be positive, got {target_hz}")
    if target_hz == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)
    n_out = int(np.floor(buf.samples.size * target_hz / buf.sample_rate + 0.5))
    if buf.samples.size == 0:
        return AudioBuffer(np.zeros(0), target_hz)
    g = np.gcd(target_hz, buf.sample_rate)
    y = sps.resample_poly(buf.samples, target_hz // g, buf.sample_rate // g,
                          window=("kaiser", 14.0))
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return AudioBuffer(y[:n_out], target_hz)


def lowpass(buf: AudioBuffer, cutoff_hz: float, transition_hz: float | None = None) -> AudioBuffer:
    """Linear-phase FIR windowed-sinc low-pass (Kaiser design, 70 dB stopband).

    The passband edge sits at ``cutoff_hz``; the stopband starts at
    ``cutoff_hz + transition_hz`` (default: min(25% of cutoff, 60% of the
    room up to Nyquist)).
    """
    ny = buf.nyquist
    if cutoff_hz >= ny:
        raise ConfigError(f"lowpass cutoff {cutoff_hz} Hz must be below Nyquist {ny} Hz")
    if cutoff_hz <= 0:
        raise ConfigError(f"lowpass cutoff must be positive, got {cutoff_hz}")
    if buf.samples.size == 0:
        return AudioBuffer(np.zeros(0), buf.sample_rate)
    if transition_hz is None:
        transition_hz = min(0.25 * cutoff_hz, 0.6 * (ny - cutoff_hz))
    numtaps, beta = sps.kaiserord(70.0, transition_hz / ny)
    numtaps |= 1  # odd length -> integer group delay, exact 'same' alignment
    taps = sps.firwin(numtaps, cutoff_hz + transition_hz / 2.0,
                      window=("kaiser", beta), fs=buf.sample_rate)
    y = sps.fftconvolve(buf.samples, taps, mode="same")
    return AudioBuffer(y, buf.sample_rate)


# ---------------------------------------------------------------------------
# STFT / mel
# ---------------------------------------------------------------------------

def make_window(name: str, window_len: int) -> np.ndarray:
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window_len) / window_len)
    if name == "rect":
        return np.ones(window_len)
    raise ConfigError(f"unknown window {name!r} (use 'hann' or 'rect')")


def _check_invertible(window: np.ndarray, hop: int):
    """Overlap-add of the squared window must be bounded away from zero."""
    w2 = window * window
    ola = np.zeros(hop)
    for start in range(0, window.size, hop):
        chunk = w2[start:start + hop]
        ola[:chunk.size] += chunk
    if ola.min() < 1e-8 * max(ola.max(), 1e-300):
        raise ConfigError(
            f"window/hop pair ({window.size}, {hop}) is not invertible: "
            "overlap-add of the squared window reaches zero")


def stft(buf: AudioBuffer, window_len: int, hop: int, window: str = "hann") -> np.ndarray:
    """Short-time Fourier transform; returns complex (frames x bins)."""
    if hop <= 0 or window_len <= 1:
        raise ConfigError(f"need window_len > 1 and hop > 0, got ({window_len}, {hop})")
    if hop > window_len:
        raise ConfigError(f"hop {hop} exceeds window length {window_len}")
    w = make_window(window, window_len)
    _check_invertible(w, hop)
    x = buf.samples
    if x.size < window_len:
        return np.zeros((0, window_len // 2 + 1), dtype=complex)
    nf = 1 + (x.size - window_len) // hop
    idx = hop * np.arange(nf)[:, None] + np.arange(window_len)[None, :]
    return np.fft.rfft(x[idx] * w, axis=1)


def istft(frames: np.ndarray, window_len: int, hop: int, sample_rate: int,
          window: str = "hann", length: int | None = None) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft` (exact in the interior)."""
    w = make_window(window, window_len)
    _check_invertible(w, hop)
    nf = frames.shape[0]
    if nf == 0:
        return AudioBuffer(np.zeros(0), sample_rate)
    n = (nf - 1) * hop + window_len
    num = np.zeros(n)
    den = np.zeros(n)
    chunks = np.fft.irfft(frames, n=window_len, axis=1)
    for t in range(nf):
        lo = t * hop
        num[lo:lo + window_len] += chunks[t] * w
        den[lo:lo + window_len] += w * w
    y = num / np.maximum(den, 1e-12)
    if length is not None:
        y = y[:length] if y.size >= length else np.pad(y, (0, length - y.size))
    return AudioBuffer(y, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, window_len: int, mel_bins: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the mel scale, peak 1, shape (mel_bins, F)."""
    freqs = np.fft.rfftfreq(window_len, 1.0 / sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    fb = np.zeros((mel_bins, freqs.size))
    for m in range(mel_bins):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - left) / max(center - left, 1e-12)
        down = (right - freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_spectrogram(buf: AudioBuffer, window_len: int, hop: int, mel_bins: int,
                    fmin: float = 0.0, fmax: float | None = None) -> MelSpectrogram:
    """Log-compressed mel power spectrogram: log(power @ filterbank + 1e-5)."""
    ny = buf.nyquist
    if fmax is None:
        fmax = ny
    if fmax > ny:
        raise ConfigError(f"mel fmax {fmax} Hz exceeds Nyquist {ny} Hz")
    spec = stft(buf, window_len, hop, window="hann")
    power = np.abs(spec) ** 2
    fb = mel_filterbank(buf.sample_rate, window_len, mel_bins, fmin, fmax)
    frames = np.log(power @ fb.T + 1e-5)
    return MelSpectrogram(frames, hop, window_len, buf.sample_rate, mel_bins)


# ---------------------------------------------------------------------------
# probe synthesis
# ---------------------------------------------------------------------------

def _peak_normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    return x * (peak / m) if m > 0 else x


def make_probe(kind: str, params: dict, duration_s: float, sample_rate: int,
               seed: int = 0) -> AudioBuffer:
    """Deterministic probe signal: sine, multitone, chirp, or harmonic tone."""
    n = int(round(duration_s * sample_rate))
    if n == 0:
        return AudioBuffer(np.zeros(0), sample_rate)
    ny = sample_rate / 2.0
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)

    def check(freqs):
        bad = [f for f in np.atleast_1d(freqs) if f > ny]
        if bad:
            raise ConfigError(f"probe frequencies {bad} exceed Nyquist {ny} Hz")

    if kind == "sine":
        f = float(params["freq_hz"])
        check(f)
        x = float(params.get("amplitude", 0.9)) * np.sin(2 * np.pi * f * t)
    elif kind == "multitone":
        freqs = np.asarray(params["freqs_hz"], dtype=np.float64)
        check(freqs)
        phases = rng.uniform(0, 2 * np.pi, freqs.size)
        x = np.sum(np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]), axis=0)
        x = _peak_normalize(x, float(params.get("peak", 0.9)))
    elif kind == "chirp":
        f0, f1 = float(params["f_start_hz"]), float(params["f_end_hz"])
        check([f0, f1])
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * duration_s))
        x = float(params.get("amplitude", 0.9)) * np.sin(phase)
    elif kind == "harmonic_tone":
        f0 = float(params["f0_hz"])
        if "n_harmonics" in params:
            h_max = int(params["n_harmonics"])
        else:
            h_max = int(params.get("max_freq_hz", 0.95 * ny) // f0)
        h_max = max(1, h_max)
        check(f0 * h_max)
        rolloff = float(params.get("rolloff", 0.7))
        h = np.arange(1, h_max + 1, dtype=np.float64)
        phases = rng.uniform(0, 2 * np.pi, h_max)
        x = np.sum((h[:, None] ** -rolloff)
                   * np.sin(2 * np.pi * f0 * h[:, None] * t[None, :] + phases[:, None]), axis=0)
        x = _peak_normalize(x, float(params.get("peak", 0.9)))
    else:
        raise ConfigError(f"unknown probe kind {kind!r}")
    return AudioBuffer(x, sample_rate)


# ---------------------------------------------------------------------------
# band energy and retention
# ---------------------------------------------------------------------------

def band_energy(buf: AudioBuffer, band: BandSpec) -> float:
    """Energy (sum |FFT|^2, both spectral halves) inside the band.

    The full signal is Hann-windowed once before the FFT.
    """
    band.check_against(buf.sample_rate)
    x = buf.samples
    if x.size == 0:
        return 0.0
    spec = np.fft.fft(x * make_window("hann", x.size))
    freqs = np.abs(np.fft.fftfreq(x.size, 1.0 / buf.sample_rate))
    mask = (freqs >= band.center_hz - band.half_width_hz) & \
           (freqs <= band.center_hz + band.half_width_hz)
    return float(np.sum(np.abs(spec[mask]) ** 2))


def total_energy(buf: AudioBuffer) -> float:
    x = buf.samples
    if x.size == 0:
        return 0.0
    spec = np.fft.fft(x * make_window("hann", x.size))
    return float(np.sum(np.abs(spec) ** 2))


def lag_align(ref: AudioBuffer, out: AudioBuffer) -> tuple[np.ndarray, np.ndarray, int]:
    """Align by cross-correlation peak; returns truncated (ref, out, lag)."""
    if ref.sample_rate != out.sample_rate:
        raise ConfigError(
            f"lag_align needs equal sample rates, got {ref.sample_rate} and {out.sample_rate}")
    x, y = ref.samples, out.samples
    if x.size == 0 or y.size == 0:
        return x[:0], y[:0], 0
    corr = sps.correlate(y, x, mode="full", method="fft")
    lag = int(np.argmax(np.abs(corr))) - (x.size - 1)
    if lag >= 0:
        y = y[lag:]
    else:
        x = x[-lag:]
    n = min(x.size, y.size)
    return x[:n], y[:n], lag


def retention(input_buf: AudioBuffer, output_buf: AudioBuffer, band: BandSpec) -> float:
    """Output/input band-energy ratio after lag alignment (not clamped)."""
    if input_buf.sample_rate != output_buf.sample_rate:
        raise ConfigError(
            f"retention needs equal sample rates, got {input_buf.sample_rate} "
            f"and {output_buf.sample_rate}")
    x, y, _ = lag_align(input_buf, output_buf)
    rate = input_buf.sample_rate
    xb = AudioBuffer(x, rate)
    e_in = band_energy(xb, band)
    # spectral-leakage floor: treat anything below 1e-12 of the total as empty
    if e_in <= 1e-12 * total_energy(xb):
        raise UndefinedRetentionError(
            f"input has no energy in band [{band.center_hz} +- {band.half_width_hz}] Hz")
    e_out = band_energy(AudioBuffer(y, rate), band)
    return e_out / e_in
