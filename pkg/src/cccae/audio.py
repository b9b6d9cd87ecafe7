"""Audio ingestion, waveform framing and speech feature extraction.

Everything runs on 4 kHz audio framed with 25 ms windows (100 samples)
and a 10 ms hop (40 samples), giving 100 frames per second so that every
feature stream lines up 1:1 with 100 Hz head motion.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from .errors import DataError, FormatError, UnsupportedOperation

logger = logging.getLogger(__name__)

SAMPLE_RATE = 4000
FRAME_LEN = 100
FRAME_HOP = 40
FRAME_RATE = 100.0

NFFT = 128
N_MELS = 26
MEL_FMAX = 2000.0
N_CEPS = 12
LOG_FLOOR_ENERGY = 1e-10
LOG_FLOOR = float(np.log(LOG_FLOOR_ENERGY))

F0_MIN = 60.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.3

DELTA_HALF_WIDTH = 2

# kind tag -> expected width (None: any width)
KIND_WIDTHS = {
    "mfcc39": 39,
    "fbank27": 27,
    "f0e6": 6,
    "wave100": 100,
    "embed": None,
    # base tracks before deltas
    "mfcc13": 13,
    "f0e2": 2,
}
_DELTA_KIND = {"mfcc13": "mfcc39", "f0e2": "f0e6"}


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise DataError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    """A T x D feature stream with a kind tag.

    Waveform frames are represented as kind ``"wave100"``.
    """

    data: np.ndarray
    kind: str
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.kind not in KIND_WIDTHS:
            raise DataError(f"unknown feature kind {self.kind!r}")
        width = KIND_WIDTHS[self.kind]
        if width is not None and self.data.shape[1] != width:
            raise DataError(f"kind {self.kind} needs {width} columns, got {self.data.shape[1]}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{self.kind} features contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data, kind=None) -> "FeatureMatrix":
        return FeatureMatrix(data, kind or self.kind, self.frame_rate)


@dataclass
class NormStats:
    """Per-dimension normalisation statistics estimated on training data."""

    mean: np.ndarray
    std: np.ndarray
    center: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.std = np.asarray(self.std, dtype=np.float64).ravel()
        if self.mean.shape != self.std.shape:
            raise DataError("NormStats mean/std length mismatch")
        if np.any(self.std <= 0):
            raise DataError("NormStats std entries must be positive")

    def apply(self, data: np.ndarray) -> np.ndarray:
        if data.shape[1] != self.std.size:
            raise DataError(f"stats cover {self.std.size} dims, data has {data.shape[1]}")
        if self.center:
            return (data - self.mean) / self.std
        return data / self.std

    def invert(self, data: np.ndarray) -> np.ndarray:
        out = data * self.std
        return out + self.mean if self.center else out


# --------------------------------------------------------------------------
# WAV I/O

def read_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file into [-1, 1) floats."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if n_channels != 1:
        raise DataError(f"{path}: expected mono audio, got {n_channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# resampling and framing

def resample(audio: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Downsample with a Kaiser-windowed sinc low-pass (cutoff 0.45 * target rate).

    Output length is ``floor(N * target / source)``. Upsampling is refused.
    """
    src = audio.sample_rate
    if target_rate <= 0:
        raise DataError("target rate must be positive")
    if target_rate > src:
        raise UnsupportedOperation(f"upsampling {src} Hz -> {target_rate} Hz is not supported")
    n_out = (audio.samples.size * target_rate) // src
    if audio.samples.size == 0:
        return AudioClip(np.zeros(0), target_rate)
    if target_rate == src:
        return AudioClip(audio.samples.copy(), src)
    ratio = Fraction(target_rate, src)
    up, down = ratio.numerator, ratio.denominator
    half_len = 10 * max(up, down)
    taps = sp_signal.firwin(
        2 * half_len + 1, 0.45 * target_rate, window=("kaiser", 5.0), fs=float(up * src)
    )
    # resample_poly applies the upsampling gain itself
    out = sp_signal.resample_poly(audio.samples, up, down, window=taps)
    return AudioClip(out[:n_out], target_rate)


def n_frames_for(n_samples: int) -> int:
    return (n_samples - FRAME_LEN) // FRAME_HOP + 1


def _frames(audio: AudioClip) -> np.ndarray:
    if audio.sample_rate != SAMPLE_RATE:
        raise DataError(f"framing expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz")
    if audio.samples.size < FRAME_LEN:
        raise DataError(
            f"clip has {audio.samples.size} samples; at least {FRAME_LEN} are required for one frame"
        )
    view = np.lib.stride_tricks.sliding_window_view(audio.samples, FRAME_LEN)
    return np.array(view[::FRAME_HOP])


def frame_waveform(audio: AudioClip) -> FeatureMatrix:
    """Raw 100-sample frames, no analysis window."""
    return FeatureMatrix(_frames(audio), "wave100")


# --------------------------------------------------------------------------
# spectral features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_edges(n_mels=N_MELS, fmax=MEL_FMAX):
    return mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))


def mel_filter_centers(n_mels=N_MELS, fmax=MEL_FMAX):
    return mel_filter_edges(n_mels, fmax)[1:-1]


def mel_filterbank(n_mels=N_MELS, nfft=NFFT, sample_rate=SAMPLE_RATE, fmax=MEL_FMAX):
    """Triangular filters evaluated at the FFT bin frequencies, shape (n_mels, nfft//2+1)."""
    edges = mel_filter_edges(n_mels, fmax)
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m : m + 3]
        rising = (freqs - lo) / (c - lo)
        falling = (hi - freqs) / (hi - c)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


_HAMMING = np.hamming(FRAME_LEN)
_MEL_FB = mel_filterbank()


def _log(x):
    return np.log(np.maximum(x, LOG_FLOOR_ENERGY))


def _log_energy(frames):
    return _log(np.sum(frames * frames, axis=1))


def _log_mel(frames):
    spec = np.abs(np.fft.rfft(frames * _HAMMING, n=NFFT, axis=1)) ** 2
    return _log(spec @ _MEL_FB.T)


def compute_fbank(audio: AudioClip) -> FeatureMatrix:
    """26 log mel filterbank energies followed by the log frame energy."""
    frames = _frames(audio)
    return FeatureMatrix(np.column_stack([_log_mel(frames), _log_energy(frames)]), "fbank27")


def compute_mfcc(audio: AudioClip, deltas: bool = True) -> FeatureMatrix:
    """Log energy + c1..c12, plus delta and delta-delta when ``deltas``.

    c0 of the orthonormal DCT-II is replaced by the log frame energy.
    """
    frames = _frames(audio)
    ceps = sp_fft.dct(_log_mel(frames), type=2, norm="ortho", axis=1)[:, 1 : N_CEPS + 1]
    base = FeatureMatrix(np.column_stack([_log_energy(frames), ceps]), "mfcc13")
    return append_deltas(base) if deltas else base


def estimate_f0(audio: AudioClip, threshold: float = VOICING_THRESHOLD) -> np.ndarray:
    """Per-frame F0 in Hz from the normalised cross-correlation, 0 where unvoiced."""
    frames_n = n_frames_for(audio.samples.size)
    _frames(audio)  # validation only
    lag_min = int(np.ceil(SAMPLE_RATE / F0_MAX))
    lag_max = int(np.floor(SAMPLE_RATE / F0_MIN))
    padded = np.concatenate([audio.samples, np.zeros(lag_max)])
    seg = np.lib.stride_tricks.sliding_window_view(padded, FRAME_LEN + lag_max)[::FRAME_HOP][:frames_n]
    seg = seg - seg[:, :FRAME_LEN].mean(axis=1, keepdims=True)
    head = seg[:, :FRAME_LEN]
    e0 = np.sum(head * head, axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    ncc = np.zeros((frames_n, lags.size))
    for i, lag in enumerate(lags):
        tail = seg[:, lag : lag + FRAME_LEN]
        den = np.sqrt(e0 * np.sum(tail * tail, axis=1))
        num = np.sum(head * tail, axis=1)
        ncc[:, i] = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)

    f0 = np.zeros(frames_n)
    for t in range(frames_n):
        r = ncc[t]
        best = r.max()
        if best <= threshold:
            continue
        # first local peak close to the global maximum; avoids picking sub-harmonics
        is_peak = np.ones(r.size, dtype=bool)
        is_peak[1:] &= r[1:] >= r[:-1]
        is_peak[:-1] &= r[:-1] >= r[1:]
        cand = np.flatnonzero(is_peak & (r >= 0.85 * best))
        i = int(cand[0]) if cand.size else int(np.argmax(r))
        lag = float(lags[i])
        if 0 < i < r.size - 1:
            denom = r[i - 1] - 2 * r[i] + r[i + 1]
            if denom < 0:
                lag += 0.5 * (r[i - 1] - r[i + 1]) / denom
        f0[t] = SAMPLE_RATE / lag
    return f0


def compute_f0_energy(audio: AudioClip, smooth_window: int = 10) -> FeatureMatrix:
    """F0 (Hz, 0 when unvoiced) and log energy, smoothed, with deltas: 6 dims."""
    frames = _frames(audio)
    base = FeatureMatrix(np.column_stack([estimate_f0(audio), _log_energy(frames)]), "f0e2")
    return append_deltas(smooth_moving_average(base, smooth_window))


def energy_speaking_mask(audio: AudioClip, percentile: float = 30.0) -> np.ndarray:
    """Frames whose log energy exceeds the given percentile count as speaking."""
    energy = _log_energy(_frames(audio))
    return energy > np.percentile(energy, percentile)


# --------------------------------------------------------------------------
# temporal post-processing

def _deltas(x: np.ndarray) -> np.ndarray:
    n = DELTA_HALF_WIDTH
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], n, axis=0), x, np.repeat(x[-1:], n, axis=0)])
    out = np.zeros_like(x)
    for k in range(1, n + 1):
        out += k * (padded[n + k : n + k + T] - padded[n - k : n - k + T])
    return out / (2 * sum(k * k for k in range(1, n + 1)))


def append_deltas(features: FeatureMatrix) -> FeatureMatrix:
    """Append regression deltas (window +-2, edge replication) and delta-deltas."""
    if features.n_frames < 2 * DELTA_HALF_WIDTH + 1:
        raise DataError(f"deltas need at least {2 * DELTA_HALF_WIDTH + 1} frames, got {features.n_frames}")
    d1 = _deltas(features.data)
    d2 = _deltas(d1)
    kind = _DELTA_KIND.get(features.kind, "embed")
    return features.with_data(np.column_stack([features.data, d1, d2]), kind)


def smooth_moving_average(features: FeatureMatrix, window: int = 10) -> FeatureMatrix:
    """Centred box filter; near the edges the mean is over the frames that exist.

    Frame t averages frames ``t - window//2 .. t + (window-1)//2``.
    """
    if window < 1:
        raise DataError("window must be >= 1")
    x = features.data
    T = x.shape[0]
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    t = np.arange(T)
    lo = np.maximum(t - window // 2, 0)
    hi = np.minimum(t + (window - 1) // 2 + 1, T)
    out = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return features.with_data(out)


def variance_normalize(features: FeatureMatrix, stats: NormStats | None = None):
    """Scale every column to unit variance using training-set statistics.

    Waveform frames are only scaled; derived features are also centred.
    Returns ``(normalized, stats)``; supplied ``stats`` are applied unchanged.
    """
    if stats is None:
        if features.n_frames < 2:
            raise DataError("need at least 2 frames to estimate normalisation stats")
        x = features.data
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flat = std <= 1e-12
        if np.any(flat):
            logger.warning("zero-variance columns %s: std clamped to 1", np.flatnonzero(flat).tolist())
            std = np.where(flat, 1.0, std)
        stats = NormStats(mean, std, center=features.kind != "wave100")
    return features.with_data(stats.apply(features.data)), stats


def extract(audio: AudioClip, kind: str) -> FeatureMatrix:
    """Dispatch by feature kind; ``embed`` is produced by a trained model instead."""
    if kind == "wave100":
        return frame_waveform(audio)
    if kind == "mfcc39":
        return compute_mfcc(audio)
    if kind == "fbank27":
        return compute_fbank(audio)
    if kind == "f0e6":
        return compute_f0_energy(audio)
    raise DataError(f"cannot extract {kind!r} features directly from audio")
