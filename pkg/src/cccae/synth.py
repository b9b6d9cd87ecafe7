"""Synthetic paired speech / head-motion corpus.

Each utterance is driven by a smooth 3-dim latent trajectory z(t). Head
motion is a scaled copy of z plus noise. The audio mixes three band-limited
noise sources whose log gains follow z (overall level, low/high tilt and
mid-band emphasis) with a harmonic "voice" whose pitch and level follow an
independent nuisance process, so raw frames carry a lot of structure that
says nothing about motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sp_signal

from .audio import SAMPLE_RATE, AudioClip
from .errors import DataError
from .headmotion import MOTION_RATE, HeadMotionSequence

BANDS = ((150.0, 500.0), (700.0, 1100.0), (1300.0, 1800.0))


@dataclass
class SyntheticSpec:
    duration: float = 600.0  # seconds, whole corpus
    n_utterances: int = 10
    latent_dim: int = 3
    latent_cutoff: float = 5.0  # Hz
    nuisance_dim: int = 4
    motion_scale: float = 0.1  # rad
    motion_noise: float = 0.01  # rad
    coupling: float = 0.6  # log-gain per unit latent
    nuisance_level: float = 0.5
    harmonic_level: float = 0.7
    speaking_duty: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim != 3:
            raise DataError("the latent must be 3-dimensional (one per rotation axis)")
        if self.n_utterances < 1 or self.duration <= 0:
            raise DataError("need a positive duration and at least one utterance")
        if not 0 < self.speaking_duty <= 1:
            raise DataError("speaking duty cycle must be in (0, 1]")


@dataclass
class Utterance:
    audio: AudioClip
    motion: HeadMotionSequence
    mask: np.ndarray
    latent: np.ndarray


def smooth_noise(rng, n, dims, cutoff, rate=MOTION_RATE):
    """Unit-variance low-pass Gaussian noise, shape (n, dims)."""
    pad = int(4 * rate / cutoff)
    sos = sp_signal.butter(4, cutoff, fs=rate, output="sos")
    x = sp_signal.sosfiltfilt(sos, rng.standard_normal((n + 2 * pad, dims)), axis=0)[pad : pad + n]
    return (x - x.mean(axis=0)) / x.std(axis=0)


def speaking_mask(rng, n, duty, rate=MOTION_RATE):
    if duty >= 1:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    mean_talk = 3.0
    mean_pause = mean_talk * (1 - duty) / duty
    t = 0
    talking = bool(rng.random() < duty)
    while t < n:
        mean = mean_talk if talking else mean_pause
        length = max(1, int(rng.uniform(0.5, 1.5) * mean * rate))
        mask[t : t + length] = talking
        t += length
        talking = not talking
    return mask


def _band_noise(rng, n, lo, hi):
    sos = sp_signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    x = sp_signal.sosfilt(sos, rng.standard_normal(n + 2000))[2000:]
    return x / x.std()


def _harmonic(f0, max_freq=1900.0):
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    out = np.zeros_like(f0)
    for k in range(1, int(max_freq / f0.min()) + 1):
        out += np.where(k * f0 < max_freq, np.sin(k * phase) / k, 0.0)
    return out / out.std()


def generate_utterance(spec: SyntheticSpec, duration: float, rng) -> Utterance:
    n_frames = int(round(duration * MOTION_RATE))
    n_samples = int(round(duration * SAMPLE_RATE))
    z = smooth_noise(rng, n_frames, 3, spec.latent_cutoff)
    nu = smooth_noise(rng, n_frames, spec.nuisance_dim, spec.latent_cutoff)
    motion = spec.motion_scale * z + spec.motion_noise * rng.standard_normal(z.shape)
    mask = speaking_mask(rng, n_frames, spec.speaking_duty)

    frame_t = np.arange(n_frames) / MOTION_RATE
    sample_t = np.arange(n_samples) / SAMPLE_RATE

    def at_samples(track):
        return np.interp(sample_t, frame_t, track)

    g, k = spec.coupling, spec.nuisance_level
    log_gains = (
        g * (z[:, 0] + z[:, 1]) + k * nu[:, 0],
        g * (z[:, 0] + z[:, 2]) + k * nu[:, 1],
        g * (z[:, 0] - z[:, 1]) + k * nu[:, 2 % spec.nuisance_dim],
    )
    audio = np.zeros(n_samples)
    for (lo, hi), lg in zip(BANDS, log_gains):
        audio += np.exp(at_samples(lg)) * _band_noise(rng, n_samples, lo, hi)
    f0 = 140.0 * np.exp(0.2 * at_samples(nu[:, 3 % spec.nuisance_dim]))
    voice_gain = spec.harmonic_level * np.exp(k * at_samples(nu[:, 3 % spec.nuisance_dim][::-1]))
    audio += voice_gain * _harmonic(f0)

    env = np.where(mask, 1.0, 0.02)
    # 10 ms ramps between talk and pause
    env = np.convolve(env, np.ones(3) / 3, mode="same")
    audio *= at_samples(env)
    audio += 1e-3 * rng.standard_normal(n_samples)
    audio *= 0.9 / np.max(np.abs(audio))
    return Utterance(AudioClip(audio, SAMPLE_RATE), HeadMotionSequence(motion), mask, z)


def generate(spec: SyntheticSpec):
    """Yield ``(utterance_id, split, Utterance)`` with a 60/20/20 split."""
    per = spec.duration / spec.n_utterances
    n_train = max(1, int(round(0.6 * spec.n_utterances)))
    n_valid = max(0, int(round(0.2 * spec.n_utterances)))
    for u in range(spec.n_utterances):
        rng = np.random.default_rng([spec.seed, u])
        split = "train" if u < n_train else ("valid" if u < n_train + n_valid else "test")
        yield f"utt{u:03d}", split, generate_utterance(spec, per, rng)
