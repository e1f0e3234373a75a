"""Synthetic phone-aligned corpora and MFCC front-end.

The synthetic generator stands in for real speech plus forced alignment: a
sticky Markov chain draws a phone per frame and each frame is sampled from a
per-phone Gaussian, so ground-truth frame labels are exact.  Optionally a
harmonic waveform is rendered per phone and frames are then computed with
:func:`compute_mfcc` + :func:`add_deltas`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigError, EmptyInputError

LOG_FLOOR = 1e-10


@dataclass
class SyntheticCorpusConfig:
    num_phones: int = 8
    feature_dim: int = 12
    num_utterances: int = 200
    min_frames: int = 60
    max_frames: int = 140
    stickiness: float = 0.9
    mean_spread: float = 1.0
    noise_scale: float = 1.0
    # Dirichlet concentration of the phone-to-phone transition rows; small
    # values give a peaky "phonotactic" structure.
    transition_concentration: float = 0.5
    seed: int = 0
    means: np.ndarray | None = None
    scales: np.ndarray | None = None
    waveform: bool = False
    sample_rate: int = 16000
    f0: tuple[float, ...] | None = None

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"{key}: {why}", key=key)

        if self.num_phones < 2:
            bad("num_phones", f"need at least 2 phones, got {self.num_phones}")
        if self.feature_dim < 1:
            bad("feature_dim", f"must be >= 1, got {self.feature_dim}")
        if self.num_utterances < 1:
            bad("num_utterances", f"must be >= 1, got {self.num_utterances}")
        if not 1 <= self.min_frames <= self.max_frames:
            bad("min_frames", f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")
        if not 0.0 <= self.stickiness < 1.0:
            bad("stickiness", f"must lie in [0, 1), got {self.stickiness}")
        if self.noise_scale < 0:
            bad("noise_scale", f"must be >= 0, got {self.noise_scale}")
        if self.transition_concentration <= 0:
            bad("transition_concentration", "must be > 0")
        if self.means is not None:
            means = np.asarray(self.means, dtype=float)
            if means.shape != (self.num_phones, self.feature_dim):
                bad("means", f"expected shape {(self.num_phones, self.feature_dim)}, got {means.shape}")
            diff = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diff**2).sum(-1)) + np.eye(self.num_phones)
            if np.any(dist == 0):
                bad("means", "per-phone means must be pairwise distinct")
        if self.scales is not None and np.any(np.asarray(self.scales) < 0):
            bad("scales", "per-phone scales must be >= 0")
        if self.f0 is not None and len(self.f0) != self.num_phones:
            bad("f0", f"need one fundamental frequency per phone, got {len(self.f0)}")
        if self.waveform and self.sample_rate <= 0:
            bad("sample_rate", "must be positive")


@dataclass
class AlignedUtterance:
    utt_id: str
    frames: np.ndarray  # T x D
    phones: np.ndarray  # T, ints in [0, P)
    waveform: np.ndarray | None = None
    sample_rate: int | None = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class MfccConfig:
    preemphasis: float = 0.97
    win_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hamming"
    n_fft: int = 512
    n_mels: int = 26
    n_ceps: int = 13
    delta_window: int = 2
    fmin: float = 0.0
    fmax: float | None = None

    def frame_sizes(self, sample_rate: int) -> tuple[int, int]:
        return int(round(self.win_ms * sample_rate / 1000)), int(round(self.hop_ms * sample_rate / 1000))

    def validate(self, sample_rate: int) -> None:
        win, hop = self.frame_sizes(sample_rate)
        if hop < 1 or win < hop:
            raise ConfigError(f"window ({win} samples) must be >= hop ({hop} samples) >= 1", key="win_ms")
        if self.n_fft < win:
            raise ConfigError(f"n_fft={self.n_fft} smaller than window of {win} samples", key="n_fft")
        if not 1 <= self.n_ceps <= self.n_mels:
            raise ConfigError(f"n_ceps={self.n_ceps} must lie in [1, n_mels={self.n_mels}]", key="n_ceps")
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}", key="window")


_WINDOWS = {
    "hamming": np.hamming,
    "hann": np.hanning,
    "rect": np.ones,
}


# --- synthetic corpus ----------------------------------------------------


def phone_means(config: SyntheticCorpusConfig) -> np.ndarray:
    if config.means is not None:
        return np.asarray(config.means, dtype=np.float64)
    rng = np.random.default_rng([config.seed, 0xA1])
    return rng.normal(0.0, config.mean_spread, size=(config.num_phones, config.feature_dim))


def transition_matrix(config: SyntheticCorpusConfig) -> np.ndarray:
    """Row-stochastic phone transition matrix with ``stickiness`` on the diagonal."""
    P = config.num_phones
    rng = np.random.default_rng([config.seed, 0xA2])
    off = rng.dirichlet(np.full(P - 1, config.transition_concentration), size=P)
    trans = np.zeros((P, P))
    for y in range(P):
        others = [j for j in range(P) if j != y]
        trans[y, others] = (1.0 - config.stickiness) * off[y]
        trans[y, y] = config.stickiness
    return trans


def sample_phones(T: int, trans: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    P = trans.shape[0]
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(T)
    phones = np.empty(T, dtype=np.int64)
    phones[0] = rng.integers(P)
    for t in range(1, T):
        phones[t] = int(np.searchsorted(cdf[phones[t - 1]], u[t], side="right"))
    return phones


def default_f0(num_phones: int) -> np.ndarray:
    return 110.0 * 1.22 ** np.arange(num_phones)


def synth_waveform(
    phones: np.ndarray,
    sample_rate: int,
    f0: np.ndarray,
    amplitudes: np.ndarray,
    noise: float,
    rng: np.random.Generator,
    mfcc: MfccConfig,
) -> np.ndarray:
    """Render a harmonic waveform whose MFCC frames align 1:1 with ``phones``."""
    win, hop = mfcc.frame_sizes(sample_rate)
    T = len(phones)
    n = win + (T - 1) * hop
    centre = (np.arange(n) - win / 2) / hop
    frame_of_sample = np.clip(np.rint(centre).astype(np.int64), 0, T - 1)
    sample_phone = phones[frame_of_sample]
    inst_f0 = f0[sample_phone]
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate
    wave = np.zeros(n)
    for h in range(amplitudes.shape[1]):
        wave += amplitudes[sample_phone, h] * np.sin((h + 1) * phase)
    wave += noise * rng.normal(size=n)
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= 0.9 / peak
    # quantize to 16-bit so the in-memory waveform equals what a WAV stores
    return np.round(wave * 32767) / 32767


def synth_corpus(config: SyntheticCorpusConfig, mfcc: MfccConfig | None = None) -> list[AlignedUtterance]:
    """Generate ``config.num_utterances`` phone-aligned utterances, deterministic in the seed."""
    config.validate()
    means = phone_means(config)
    trans = transition_matrix(config)
    P, D = means.shape
    if config.scales is None:
        scales = np.full(P, config.noise_scale)
    else:
        scales = np.asarray(config.scales, dtype=np.float64)
    if config.waveform:
        mfcc = mfcc or MfccConfig()
        mfcc.validate(config.sample_rate)
        f0 = np.asarray(config.f0, dtype=float) if config.f0 is not None else default_f0(P)
        amp_rng = np.random.default_rng([config.seed, 0xA3])
        amplitudes = amp_rng.uniform(0.2, 1.0, size=(P, 4))

    children = np.random.SeedSequence([config.seed, 0xA4]).spawn(config.num_utterances)
    width = len(str(config.num_utterances - 1))
    out = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        T = int(rng.integers(config.min_frames, config.max_frames + 1))
        phones = sample_phones(T, trans, rng)
        utt_id = f"utt{i:0{width}d}"
        if config.waveform:
            wave = synth_waveform(phones, config.sample_rate, f0, amplitudes, config.noise_scale, rng, mfcc)
            frames = add_deltas(compute_mfcc(wave, config.sample_rate, mfcc), mfcc.delta_window)
            out.append(AlignedUtterance(utt_id, frames, phones, wave, config.sample_rate))
        else:
            noise = rng.normal(size=(T, D)) * scales[phones][:, None]
            out.append(AlignedUtterance(utt_id, means[phones] + noise, phones))
    return out


# --- MFCC ----------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Band edges in Hz: ``n_mels + 2`` points evenly spaced on the mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1) evaluated at the FFT bin frequencies."""
    edges = mel_centers(n_mels, sample_rate, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(signal: np.ndarray, win: int, hop: int) -> np.ndarray:
    if len(signal) < win:
        raise EmptyInputError(f"waveform of {len(signal)} samples is shorter than one {win}-sample window")
    return np.lib.stride_tricks.sliding_window_view(signal, win)[::hop]


def log_mel_energies(waveform, sample_rate: int, config: MfccConfig | None = None) -> np.ndarray:
    config = config or MfccConfig()
    config.validate(sample_rate)
    win, hop = config.frame_sizes(sample_rate)
    x = np.asarray(waveform, dtype=np.float64)
    if len(x) < win:
        raise EmptyInputError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    x = np.concatenate([x[:1], x[1:] - config.preemphasis * x[:-1]])
    frames = frame_signal(x, win, hop) * _WINDOWS[config.window](win)
    power = np.abs(np.fft.rfft(frames, config.n_fft)) ** 2 / config.n_fft
    fb = mel_filterbank(config.n_mels, config.n_fft, sample_rate, config.fmin, config.fmax)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


def compute_mfcc(waveform, sample_rate: int = 16000, config: MfccConfig | None = None) -> np.ndarray:
    """Static MFCCs, one row per frame: ``1 + (len - win) // hop`` rows."""
    config = config or MfccConfig()
    logmel = log_mel_energies(waveform, sample_rate, config)
    return dct(logmel, type=2, axis=1, norm="ortho")[:, : config.n_ceps]


def deltas(frames: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas sum_n n (c[t+n] - c[t-n]) / (2 sum_n n^2), edges replicated."""
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    padded = np.pad(frames, ((window, window), (0, 0)), mode="edge")
    out = np.zeros_like(frames)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + T] - padded[window - n : window - n + T])
    return out / (2 * sum(n * n for n in range(1, window + 1)))


def add_deltas(frames: np.ndarray, delta_window: int = 2) -> np.ndarray:
    """Append first and second derivatives: T x D -> T x 3D."""
    d1 = deltas(frames, delta_window)
    return np.concatenate([np.asarray(frames, dtype=np.float64), d1, deltas(d1, delta_window)], axis=1)
