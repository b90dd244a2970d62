"""Synthetic paired speech-text corpora: a toy tonal language (consonant +
vowel + lexically contrastive F0 tone per syllable) and a toy non-tonal
language (multi-syllable words, flat F0, amplitude stress). Ground-truth
alignments fall out of construction.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .audio_io import CANONICAL_RATE, Waveform, write_wav
from .ctc import AlignmentSegment
from .errors import FormatError, RangeError, ValidationError

CONSONANTS = ["p", "t", "k", "b", "d", "g", "s", "m"]
VOWELS = ["a", "e", "i", "u"]
TONES = [1, 2, 3, 4]  # level, rising, falling, dipping

# two-formant targets (Hz) per vowel
FORMANTS = {
    "a": (730.0, 1090.0),
    "e": (530.0, 1840.0),
    "i": (270.0, 2290.0),
    "u": (300.0, 870.0),
}

# noise-burst band (Hz) per consonant
BURST_BANDS = {
    "p": (400.0, 1200.0),
    "t": (2600.0, 4400.0),
    "k": (1300.0, 2400.0),
    "b": (250.0, 700.0),
    "d": (1900.0, 3100.0),
    "g": (800.0, 1600.0),
    "s": (4500.0, 7200.0),
    "m": (150.0, 500.0),
}


@dataclass(frozen=True)
class LanguageSpec:
    language: str  # "tonal" | "nontonal"
    lexicon_seed: int = 20260101
    lexicon_size: int = 64  # nontonal word inventory
    syllables_per_word: tuple[int, int] = (2, 4)
    tonal_unit_dur: tuple[float, float] = (0.15, 0.25)
    nontonal_word_dur: tuple[float, float] = (0.30, 0.60)
    inter_unit_silence: tuple[float, float] = (0.0, 0.08)
    edge_silence: tuple[float, float] = (0.08, 0.12)
    f0_base: tuple[float, float] = (120.0, 220.0)
    units_per_utt: tuple[int, int] = (3, 6)

    def __post_init__(self):
        if self.language not in ("tonal", "nontonal"):
            raise RangeError(f"unknown language {self.language!r}")


@dataclass
class Utterance:
    utt_id: str
    path: str
    transcript: list[str]
    alignments: list[AlignmentSegment]
    language: str
    split: str = "train"


@dataclass
class SynthResult:
    waveform: Waveform
    units: list[str]
    alignments: list[AlignmentSegment]


def tonal_vocab() -> list[str]:
    return [c + v + str(t) for c in CONSONANTS for v in VOWELS for t in TONES]


def nontonal_lexicon(spec: LanguageSpec) -> list[str]:
    """Deterministic word inventory: 2-4 toneless CV syllables per word."""
    rng = np.random.default_rng(spec.lexicon_seed)
    lo, hi = spec.syllables_per_word
    words: list[str] = []
    seen = set()
    while len(words) < spec.lexicon_size:
        n = int(rng.integers(lo, hi + 1))
        word = "".join(
            CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
            for _ in range(n)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def build_vocab(spec: LanguageSpec) -> list[str]:
    return tonal_vocab() if spec.language == "tonal" else nontonal_lexicon(spec)


def tone_contour(tone: int, f0: float, n: int) -> np.ndarray:
    """Per-sample F0 trajectory over a vowel of n samples."""
    u = np.linspace(0.0, 1.0, n, endpoint=False)
    if tone == 1:
        return np.full(n, f0)
    if tone == 2:
        return f0 * (0.85 + 0.30 * u)
    if tone == 3:
        return f0 * (1.15 - 0.30 * u)
    if tone == 4:
        return f0 * (1.05 - 0.80 * u * (1.0 - u))
    raise RangeError(f"unknown tone {tone}")


def _formant_gain(freq: np.ndarray, vowel: str, bandwidth: float = 110.0) -> np.ndarray:
    f1, f2 = FORMANTS[vowel]
    g = np.zeros_like(freq)
    for fc in (f1, f2):
        g += 1.0 / (1.0 + ((freq - fc) / bandwidth) ** 2)
    return g


def _ramp_envelope(n: int, sr: int, ramp_s: float = 0.008) -> np.ndarray:
    r = min(int(ramp_s * sr), max(n // 4, 1))
    env = np.ones(n)
    env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
    env[n - r:] = np.linspace(1.0, 0.0, r, endpoint=False)
    return env


def _noise_burst(consonant: str, dur: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = max(int(dur * sr), 8)
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    lo, hi = BURST_BANDS[consonant]
    mask = (freqs >= lo) & (freqs <= hi)
    spec = spec * mask
    burst = np.fft.irfft(spec, n)
    peak = np.abs(burst).max()
    if peak > 0:
        burst = burst / peak
    return 0.55 * burst * _ramp_envelope(n, sr, 0.004)


def _harmonic_vowel(f0_traj: np.ndarray, vowel: str, sr: int) -> np.ndarray:
    n = len(f0_traj)
    if n == 0:
        return np.zeros(0)
    phase = 2.0 * np.pi * np.cumsum(f0_traj) / sr
    f0_ref = float(f0_traj.mean())
    n_harm = max(int(7400.0 // f0_ref), 1)
    h = np.arange(1, n_harm + 1)
    amps = _formant_gain(h * f0_ref, vowel) * h ** -0.5
    sig = np.sin(phase[:, None] * h[None, :]) @ amps
    peak = np.abs(sig).max()
    if peak > 0:
        sig = sig / peak
    return sig * _ramp_envelope(n, sr)


def _synth_syllable(consonant: str, vowel: str, f0_traj_fn, dur: float, sr: int,
                    rng: np.random.Generator, amplitude: float = 1.0) -> np.ndarray:
    burst_dur = float(rng.uniform(0.020, 0.040))
    burst_dur = min(burst_dur, dur * 0.4)
    vowel_n = int((dur - burst_dur) * sr)
    burst = _noise_burst(consonant, burst_dur, sr, rng)
    f0_traj = f0_traj_fn(vowel_n)
    voiced = _harmonic_vowel(f0_traj, vowel, sr)
    return amplitude * np.concatenate([burst, voiced])


def _render_tonal_unit(label: str, f0: float, dur: float, sr: int,
                       rng: np.random.Generator) -> np.ndarray:
    consonant, vowel, tone = label[0], label[1], int(label[2])
    return _synth_syllable(consonant, vowel,
                           lambda n: tone_contour(tone, f0, n), dur, sr, rng)


def _render_nontonal_unit(word: str, f0: float, dur: float, sr: int,
                          rng: np.random.Generator) -> np.ndarray:
    sylls = [word[i : i + 2] for i in range(0, len(word), 2)]
    syl_dur = dur / len(sylls)
    parts = []
    for k, syl in enumerate(sylls):
        # flat F0 with slight declination across the word; stress = amplitude
        decl = 1.0 - 0.05 * (k / max(len(sylls) - 1, 1))
        amp = 1.0 if k == 0 else 0.55
        parts.append(_synth_syllable(syl[0], syl[1],
                                     lambda n, d=decl: np.full(n, f0 * d),
                                     syl_dur, sr, rng, amplitude=amp))
    return np.concatenate(parts)


def synthesize_utterance(spec: LanguageSpec, seed: int, n_units: int | None = None,
                         units: list[str] | None = None) -> SynthResult:
    """Render one utterance; same seed => bit-identical waveform."""
    rng = np.random.default_rng(seed)
    vocab = build_vocab(spec)
    if units is None:
        if n_units is None or n_units < 1:
            raise RangeError("n_units must be >= 1 when units not given")
        units = [vocab[rng.integers(len(vocab))] for _ in range(n_units)]
    sr = CANONICAL_RATE
    f0 = float(rng.uniform(*spec.f0_base))
    lead = float(rng.uniform(*spec.edge_silence))
    parts = [np.zeros(int(lead * sr))]
    cursor = len(parts[0]) / sr
    alignments = []
    for k, unit in enumerate(units):
        if spec.language == "tonal":
            dur = float(rng.uniform(*spec.tonal_unit_dur))
            sig = _render_tonal_unit(unit, f0, dur, sr, rng)
        else:
            dur = float(rng.uniform(*spec.nontonal_word_dur))
            sig = _render_nontonal_unit(unit, f0, dur, sr, rng)
        alignments.append(AlignmentSegment(unit, cursor, cursor + len(sig) / sr))
        parts.append(sig)
        cursor += len(sig) / sr
        if k < len(units) - 1:
            gap = float(rng.uniform(*spec.inter_unit_silence))
            parts.append(np.zeros(int(gap * sr)))
            cursor += int(gap * sr) / sr
    parts.append(np.zeros(int(float(rng.uniform(*spec.edge_silence)) * sr)))
    samples = np.concatenate(parts)
    peak = np.abs(samples).max()
    if peak > 0:
        samples = samples * (0.7 / peak)
    return SynthResult(Waveform(samples, sr), list(units), alignments)


def _split_of(utt_id: str) -> str:
    digest = hashlib.sha1(utt_id.encode()).hexdigest()
    bucket = int(digest, 16) % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def _utt_seed(corpus_seed: int, utt_id: str) -> int:
    digest = hashlib.sha256(f"{corpus_seed}:{utt_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_corpus(spec: LanguageSpec, n_utts: int, out_dir, seed: int = 0) -> str:
    """Write n_utts WAVs plus a JSONL manifest; returns the manifest path."""
    out_dir = str(out_dir)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    rng = np.random.default_rng(seed)
    lo, hi = spec.units_per_utt
    with open(manifest_path, "w") as mf:
        for i in range(n_utts):
            utt_id = f"{spec.language}_{i:05d}"
            n_units = int(rng.integers(lo, hi + 1))
            res = synthesize_utterance(spec, _utt_seed(seed, utt_id), n_units)
            rel = os.path.join("wav", utt_id + ".wav")
            try:
                write_wav(res.waveform, os.path.join(out_dir, rel))
            except OSError as exc:
                raise OSError(f"writing {os.path.join(out_dir, rel)}: {exc}") from exc
            record = {
                "utt_id": utt_id,
                "path": rel,
                "transcript": res.units,
                "alignments": [
                    {"unit": a.unit, "start": round(a.start, 6), "end": round(a.end, 6)}
                    for a in res.alignments
                ],
                "language": spec.language,
                "split": _split_of(utt_id),
            }
            mf.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> list[Utterance]:
    """Parse and validate a JSONL manifest."""
    utts = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = {"utt_id", "path", "transcript", "alignments", "language"} - set(rec)
            if missing:
                raise FormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            alignments = [AlignmentSegment(a["unit"], a["start"], a["end"])
                          for a in rec["alignments"]]
            _validate_alignments(rec["transcript"], alignments, f"{path}:{lineno}")
            utts.append(Utterance(rec["utt_id"], rec["path"], list(rec["transcript"]),
                                  alignments, rec["language"],
                                  rec.get("split", _split_of(rec["utt_id"]))))
    return utts


def _validate_alignments(transcript, alignments, where):
    if [a.unit for a in alignments] != list(transcript):
        raise ValidationError(f"{where}: alignment units do not match transcript")
    prev_end = 0.0
    for a in alignments:
        if not (0 <= a.start < a.end) or not (math.isfinite(a.start) and math.isfinite(a.end)):
            raise ValidationError(f"{where}: bad segment [{a.start}, {a.end})")
        if a.start < prev_end - 1e-9:
            raise ValidationError(f"{where}: overlapping segments")
        prev_end = a.end


def labels_for(transcript: list[str], vocab: list[str]) -> list[int]:
    """Map unit strings to 1-based CTC label ids (blank strictly at 0)."""
    index = {u: i + 1 for i, u in enumerate(vocab)}
    try:
        return [index[u] for u in transcript]
    except KeyError as exc:
        raise ValidationError(f"unit {exc.args[0]!r} not in vocabulary") from exc
