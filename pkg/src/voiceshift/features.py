"""Signal-level feature extraction: mel-spectrograms, energy, pitch, curve normalization.

All functions here are pure and deterministic; mel values are natural-log
amplitudes floored at ``EPS_MEL`` so silence stays finite.
"""

from dataclasses import dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ConfigMismatchError, ExtractionError, InvalidInputError

EPS_MEL = 1e-5
EPS_ENERGY = 1e-5

F0_FLOOR_HZ = 50.0
F0_CEIL_HZ = 600.0
VOICING_THRESHOLD = 0.45


@dataclass(frozen=True)
class MelConfig:
    """STFT / mel-filterbank parameters. Defaults target 24 kHz speech."""

    fft_size: int = 2048
    hop: int = 300
    win_length: int = 1200
    n_mels: int = 80
    sample_rate: int = 24000
    fmin: float = 0.0
    fmax: Optional[float] = None

    def __post_init__(self):
        if not (self.win_length <= self.fft_size):
            raise InvalidInputError("win_length must not exceed fft_size")
        if not (0 < self.hop <= self.win_length):
            raise InvalidInputError("hop must be in (0, win_length]")
        if self.n_mels < 1:
            raise InvalidInputError("n_mels must be >= 1")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")

    @property
    def effective_fmax(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    def n_frames(self, n_samples: int) -> int:
        """Frame count under center padding."""
        return 1 + n_samples // self.hop

    def to_dict(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "hop": self.hop,
            "win_length": self.win_length,
            "n_mels": self.n_mels,
            "sample_rate": self.sample_rate,
            "fmin": self.fmin,
            "fmax": self.fmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        return cls(**d)


@dataclass
class Waveform:
    """Mono audio. Samples are float amplitudes, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("waveform must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Natural-log amplitude mel matrix, shape [n_mels, n_frames]."""

    values: np.ndarray
    config: MelConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("mel values must be a 2-D matrix")
        if self.values.shape[0] != self.config.n_mels:
            raise InvalidInputError(
                f"mel has {self.values.shape[0]} rows, config says {self.config.n_mels}"
            )
        if self.values.shape[1] < 1:
            raise InvalidInputError("mel must have at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("mel contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class PitchContour:
    """Per-frame F0 in Hz; zero exactly on unvoiced frames."""

    f0: np.ndarray
    voiced_mask: np.ndarray

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced_mask = np.asarray(self.voiced_mask, dtype=bool)
        if self.f0.shape != self.voiced_mask.shape or self.f0.ndim != 1:
            raise InvalidInputError("f0 and voiced_mask must be 1-D and equal length")
        if np.any(self.f0 < 0) or not np.all(np.isfinite(self.f0)):
            raise InvalidInputError("f0 must be finite and non-negative")
        if np.any((self.f0 == 0) == self.voiced_mask):
            raise InvalidInputError("voiced_mask must be true exactly where f0 > 0")


@dataclass
class EnergyContour:
    """Per-frame log magnitude of the linear-amplitude mel columns."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidInputError("energy must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("energy contains non-finite entries")


@dataclass
class NormalizedCurve:
    """Z-scored curve plus the statistics needed to undo the scaling."""

    values: np.ndarray
    source_mean: float
    source_std: float
    support: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=bool)

    def denormalize(self) -> np.ndarray:
        """Recover the original curve on the support; zero elsewhere."""
        out = self.values * self.source_std + self.source_mean
        return np.where(self.support, out, 0.0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape [n_mels, fft_size//2 + 1].

    Filters are unit-peak (no area normalization), so a pure tone responds
    most strongly in the filter whose center lies nearest its frequency.
    """
    n_bins = config.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * config.sample_rate / config.fft_size
    mel_pts = np.linspace(
        hz_to_mel(config.fmin), hz_to_mel(config.effective_fmax), config.n_mels + 2
    )
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_filter_centers(config: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    mel_pts = np.linspace(
        hz_to_mel(config.fmin), hz_to_mel(config.effective_fmax), config.n_mels + 2
    )
    return mel_to_hz(mel_pts)[1:-1]


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _stft_magnitude(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Center-padded STFT magnitude, shape [fft_size//2 + 1, 1 + n//hop]."""
    pad = config.fft_size // 2
    mode = "reflect" if len(samples) > pad else "constant"
    padded = np.pad(samples, pad, mode=mode)
    n_frames = config.n_frames(len(samples))
    window = np.zeros(config.fft_size)
    off = (config.fft_size - config.win_length) // 2
    window[off : off + config.win_length] = _periodic_hann(config.win_length)
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.fft_size)
    frames = frames[:: config.hop][:n_frames]
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def compute_mel(w: Waveform, c: MelConfig) -> MelSpectrogram:
    """Natural-log amplitude mel-spectrogram with 1 + n//hop frames.

    Raises InvalidInputError on empty input and ConfigMismatchError when the
    waveform's sample rate differs from the config's.
    """
    if len(w.samples) == 0:
        raise InvalidInputError("cannot compute mel of an empty waveform")
    if w.sample_rate != c.sample_rate:
        raise ConfigMismatchError(
            f"waveform rate {w.sample_rate} != config rate {c.sample_rate}"
        )
    spec = _stft_magnitude(w.samples, c)
    mel = mel_filterbank(c) @ spec
    return MelSpectrogram(values=np.log(mel + EPS_MEL), config=c)


def linear_amplitude(x: MelSpectrogram) -> np.ndarray:
    """Undo the natural log; entries are mel amplitudes plus the log floor."""
    return np.exp(x.values)


def compute_energy(x: MelSpectrogram) -> EnergyContour:
    """Per-frame log L2 norm of the linear-amplitude mel column."""
    a = linear_amplitude(x)
    norms = np.sqrt(np.sum(a * a, axis=0))
    return EnergyContour(values=np.log(np.maximum(norms, EPS_ENERGY)))


def normalize_curve(values, support=None) -> NormalizedCurve:
    """Z-score a curve over its support; off-support entries become zero.

    Uses the population standard deviation. A support with std below 1e-8
    (constant curve) yields all zeros, which ``denormalize`` maps back to
    the constant. An empty support is only legal for an all-zero curve.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise InvalidInputError("curve must be 1-D")
    if support is None:
        support = np.ones(len(values), dtype=bool)
    support = np.asarray(support, dtype=bool)
    if support.shape != values.shape:
        raise InvalidInputError("support mask must match curve length")
    if not support.any():
        if np.any(values != 0):
            raise InvalidInputError("empty support on a non-zero curve")
        return NormalizedCurve(np.zeros_like(values), 0.0, 0.0, support)
    sel = values[support]
    mean = float(sel.mean())
    std = float(sel.std())  # population std
    if std < 1e-8:
        out = np.zeros_like(values)
    else:
        out = np.where(support, (values - mean) / std, 0.0)
    return NormalizedCurve(out, mean, std, support)


def normalize_pitch(p: PitchContour) -> NormalizedCurve:
    """Pitch is z-scored over voiced frames only; unvoiced frames stay zero."""
    if not p.voiced_mask.any():
        return NormalizedCurve(np.zeros_like(p.f0), 0.0, 0.0, p.voiced_mask)
    return normalize_curve(p.f0 * p.voiced_mask, p.voiced_mask)


def normalize_energy(e: EnergyContour) -> NormalizedCurve:
    """Energy is z-scored over all frames."""
    return normalize_curve(e.values)


@runtime_checkable
class PitchExtractor(Protocol):
    """Pluggable F0 estimator; a pretrained neural tracker satisfies this too."""

    def from_waveform(self, w: Waveform, config: MelConfig) -> PitchContour: ...

    def from_mel(self, x: MelSpectrogram) -> PitchContour: ...


class DspPitchExtractor:
    """Classical fallback tracker.

    ``from_waveform`` runs per-frame autocorrelation with peak picking;
    ``from_mel`` scores a harmonic comb against the linear spectrum
    reconstructed through the filterbank pseudoinverse (needed for mels that
    have no underlying waveform, e.g. decoder outputs).
    """

    def __init__(self, f0_floor=F0_FLOOR_HZ, f0_ceil=F0_CEIL_HZ,
                 voicing_threshold=VOICING_THRESHOLD, n_harmonics=6):
        self.f0_floor = f0_floor
        self.f0_ceil = f0_ceil
        self.voicing_threshold = voicing_threshold
        self.n_harmonics = n_harmonics
        self._pinv_cache = {}

    def from_waveform(self, w: Waveform, config: MelConfig) -> PitchContour:
        sr = w.sample_rate
        n_frames = config.n_frames(len(w.samples))
        half = config.win_length // 2
        lag_min = max(2, int(sr / self.f0_ceil))
        lag_max = min(config.win_length - 2, int(np.ceil(sr / self.f0_floor)))
        f0 = np.zeros(n_frames)
        voiced = np.zeros(n_frames, dtype=bool)
        padded = np.pad(w.samples, half)
        nfft = 1
        while nfft < 2 * config.win_length:
            nfft *= 2
        for t in range(n_frames):
            center = t * config.hop + half
            frame = padded[center - half : center + half]
            frame = frame - frame.mean()
            if np.sqrt(np.mean(frame * frame)) < 1e-4:
                continue
            spectrum = np.fft.rfft(frame, nfft)
            r = np.fft.irfft(spectrum * np.conj(spectrum))[: lag_max + 2]
            if r[0] <= 0:
                continue
            nacf = r / r[0]
            seg = nacf[lag_min : lag_max + 1]
            best = float(seg.max())
            if best < self.voicing_threshold:
                continue
            # prefer the smallest lag among near-best local maxima (octave guard)
            interior = (seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])
            candidates = np.nonzero(interior & (seg[1:-1] >= 0.9 * best))[0] + 1
            idx = int(candidates[0]) if len(candidates) else int(np.argmax(seg))
            lag = idx + lag_min
            # parabolic refinement around the peak
            if 1 <= lag - lag_min and lag < lag_max:
                y0, y1, y2 = nacf[lag - 1], nacf[lag], nacf[lag + 1]
                denom = y0 - 2 * y1 + y2
                if abs(denom) > 1e-12:
                    lag = lag + 0.5 * (y0 - y2) / denom
            f0[t] = sr / lag
            voiced[t] = True
        f0[~voiced] = 0.0
        return PitchContour(f0=f0, voiced_mask=voiced)

    def _pinv_filterbank(self, config: MelConfig) -> np.ndarray:
        key = (config.fft_size, config.n_mels, config.sample_rate,
               config.fmin, config.effective_fmax)
        if key not in self._pinv_cache:
            self._pinv_cache[key] = np.linalg.pinv(mel_filterbank(config))
        return self._pinv_cache[key]

    def from_mel(self, x: MelSpectrogram) -> PitchContour:
        config = x.config
        spec = np.clip(self._pinv_filterbank(config) @ linear_amplitude(x), 0.0, None)
        n_bins, n_frames = spec.shape
        bin_hz = config.sample_rate / config.fft_size
        grid = np.geomspace(self.f0_floor, self.f0_ceil, 160)
        harmonics = np.arange(1, self.n_harmonics + 1)
        # fractional bin index of each (candidate, harmonic) pair
        pos = grid[:, None] * harmonics[None, :] / bin_hz
        valid = pos < n_bins - 1
        pos = np.clip(pos, 0, n_bins - 2)
        lo = pos.astype(int)
        frac = pos - lo
        weights = (1.0 / harmonics)[None, :] * valid
        f0 = np.zeros(n_frames)
        voiced = np.zeros(n_frames, dtype=bool)
        for t in range(n_frames):
            col = spec[:, t]
            total = col.sum()
            if total < 20 * EPS_MEL * n_bins:
                continue
            interp = col[lo] * (1 - frac) + col[lo + 1] * frac
            scores = (interp * weights).sum(axis=1) / (total + 1e-12)
            best = int(np.argmax(scores))
            if scores[best] < 0.05:
                continue
            f0[t] = grid[best]
            voiced[t] = True
        f0[~voiced] = 0.0
        return PitchContour(f0=f0, voiced_mask=voiced)


def extract_pitch(w: Waveform, config: MelConfig,
                  extractor: Optional[PitchExtractor] = None) -> PitchContour:
    """One F0 value per mel frame; enforces the f0==0 <=> unvoiced invariant."""
    if extractor is None:
        extractor = DspPitchExtractor()
    try:
        raw = extractor.from_waveform(w, config)
    except (InvalidInputError, ConfigMismatchError):
        raise
    except Exception as exc:
        raise ExtractionError(
            f"pitch extractor failed: {exc}",
            frame_range=(0, config.n_frames(len(w.samples))),
        ) from exc
    f0 = np.where(raw.voiced_mask, raw.f0, 0.0)
    voiced = raw.voiced_mask & (f0 > 0)
    f0 = np.where(voiced, f0, 0.0)
    expected = config.n_frames(len(w.samples))
    if len(f0) != expected:
        raise ExtractionError(
            f"extractor produced {len(f0)} frames, expected {expected}",
            frame_range=(min(len(f0), expected), expected),
        )
    return PitchContour(f0=f0, voiced_mask=voiced)


def load_waveform(path, target_rate: int = 24000) -> Waveform:
    """Read a PCM audio file, mix to mono, and resample to ``target_rate``."""
    rate, data = scipy.io.wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / max(abs(np.iinfo(data.dtype).min), 1)
    else:
        data = data.astype(np.float64)
    if rate != target_rate:
        g = np.gcd(int(rate), int(target_rate))
        data = scipy.signal.resample_poly(data, target_rate // g, rate // g)
    data = np.clip(data, -1.0, 1.0)
    return Waveform(samples=data, sample_rate=target_rate)


def save_waveform(path, w: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(w.samples, -1.0, 1.0)
    scipy.io.wavfile.write(path, w.sample_rate, (pcm * 32767).astype(np.int16))
