"""Waveform I/O (PCM16 mono WAV) and the leading-silence padding transform."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ExtractionError, FormatError, RangeError, UnsupportedFormatError

CANONICAL_RATE = 16000
_SCALE = 32768.0


@dataclass
class Waveform:
    """Mono PCM audio. Samples are float64 amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise RangeError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise UnsupportedFormatError("only mono waveforms are supported")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise RangeError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM 16-bit mono file into a Waveform.

    int16 codes are scaled by 1/32768, order preserved.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            sr = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a valid WAV file ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV file") from exc
    if comptype != "NONE":
        raise UnsupportedFormatError(f"{path}: compressed WAV ({comptype}) not supported")
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    codes = np.frombuffer(raw, dtype="<i2")
    return Waveform(codes.astype(np.float64) / _SCALE, sr)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Float samples in [-1, 1] -> int16 codes, round half away from zero.

    +1.0 maps to the clamped max code 32767.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
        raise RangeError("samples outside [-1, 1]; refusing to clip silently")
    scaled = samples * _SCALE
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    """Write a Waveform as PCM 16-bit mono WAV."""
    codes = quantize_pcm16(w.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(codes.tobytes())


def _lowest_rms_window(samples: np.ndarray, n: int) -> int:
    """Start index of the length-n window with minimal RMS."""
    sq = np.concatenate([[0.0], np.cumsum(samples**2)])
    window_energy = sq[n:] - sq[:-n]
    return int(np.argmin(window_energy))


def pad_with_silence(w: Waveform, duration: float, mode: str = "zeros") -> Waveform:
    """Prepend `duration` seconds of silence; the original samples occupy the suffix.

    mode="zeros" prepends digital zeros; mode="extracted" prepends the
    lowest-RMS window of the requested length found in the input.
    """
    if duration < 0:
        raise RangeError(f"padding duration must be >= 0, got {duration}")
    n = int(np.floor(duration * w.sample_rate + 0.5))
    if n == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    if mode == "zeros":
        prefix = np.zeros(n)
    elif mode == "extracted":
        if len(w) < n:
            raise ExtractionError(
                f"need a low-energy window of {n} samples, input has {len(w)}"
            )
        start = _lowest_rms_window(w.samples, n)
        prefix = w.samples[start : start + n].copy()
    else:
        raise RangeError(f"unknown padding mode {mode!r}")
    return Waveform(np.concatenate([prefix, w.samples]), w.sample_rate)
