"""Log-mel front end: 100 Hz log-magnitude mel spectrogram.

Framing is left-aligned and non-centered so that prepending exactly k hops of
silence shifts the frame matrix by exactly k rows, bit for bit. That property
is what the padding analysis leans on, so it is load-bearing, not cosmetic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio_io import CANONICAL_RATE, Waveform
from .errors import ConfigError


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if not (0 <= self.fmin < self.fmax <= sample_rate / 2):
            raise ConfigError(f"bad mel band [{self.fmin}, {self.fmax}]")
        for name in ("window_ms", "hop_ms"):
            ms = getattr(self, name)
            if ms <= 0 or (ms * sample_rate) % 1000 != 0:
                raise ConfigError(f"{name}={ms} not an integral number of samples")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class MelFeatures:
    frames: np.ndarray  # T x F, log-mel power
    frame_rate: float
    n_mels: int
    hop: int
    window: int
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(hz):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = hz >= 1000.0
    return np.where(above, 15.0 + np.log(np.maximum(hz, 1000.0) / 1000.0) / log_step, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    hz = mel * (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = mel >= 15.0
    return np.where(above, 1000.0 * np.exp(log_step * (mel - 15.0)), hz)


def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-style triangular filterbank, area-normalized. Shape n_mels x (n_fft//2+1)."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (hi - lo)  # equal-area normalization
    return fb


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Left-aligned non-centered framing: floor((len - window)/hop) + 1, or 0."""
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def mel_spectrogram(w: Waveform, cfg: MelConfig | None = None) -> MelFeatures:
    """Waveform -> T x F log-magnitude mel matrix at 100 Hz (for 25/10 ms)."""
    cfg = cfg or MelConfig()
    if w.sample_rate != CANONICAL_RATE:
        raise ConfigError(f"expected {CANONICAL_RATE} Hz input, got {w.sample_rate}")
    cfg.validate(w.sample_rate)
    window = int(cfg.window_ms * w.sample_rate / 1000)
    hop = int(cfg.hop_ms * w.sample_rate / 1000)
    rate = 1000.0 / cfg.hop_ms
    t = frame_count(len(w), window, hop)
    if t == 0:
        frames = np.zeros((0, cfg.n_mels))
        return MelFeatures(frames, rate, cfg.n_mels, hop, window, cfg)
    idx = np.arange(window)[None, :] + hop * np.arange(t)[:, None]
    framed = w.samples[idx]
    # periodic Hann
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spec = np.abs(np.fft.rfft(framed * hann, axis=1)) ** 2
    fb = mel_filterbank(window, cfg.n_mels, w.sample_rate, cfg.fmin, cfg.fmax)
    # broadcast-multiply + reduce instead of gemm: BLAS blocking makes matmul
    # results depend on the total row count, which would break bit-exact
    # frame-shift invariance
    energies = (spec[:, None, :] * fb[None, :, :]).sum(axis=2)
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    return MelFeatures(logmel, rate, cfg.n_mels, hop, window, cfg)


def dump_features(mel: MelFeatures, path) -> None:
    """Flat little-endian float32 dump with a JSON sidecar describing it."""
    path = str(path)
    mel.frames.astype("<f4").tofile(path)
    sidecar = {
        "T": int(mel.num_frames),
        "F": int(mel.n_mels),
        "frame_rate": mel.frame_rate,
        "cfg_hash": mel.config.hash(),
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True)
