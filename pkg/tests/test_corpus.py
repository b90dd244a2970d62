import json

import numpy as np
import pytest

from tokrate.audio_io import read_wav
from tokrate.corpus import (
    LanguageSpec,
    build_vocab,
    generate_corpus,
    labels_for,
    load_manifest,
    nontonal_lexicon,
    synthesize_utterance,
    tonal_vocab,
    tone_contour,
)
from tokrate.errors import FormatError, ValidationError

TONAL = LanguageSpec("tonal")
NONTONAL = LanguageSpec("nontonal")


def estimate_f0(samples, sr, fmin=80.0, fmax=400.0):
    """Independent autocorrelation pitch tracker (test oracle)."""
    x = samples - samples.mean()
    if np.all(x == 0):
        return 0.0
    ac = np.correlate(x, x, mode="full")[len(x) - 1 :]
    lo, hi = int(sr / fmax), int(sr / fmin)
    lag = lo + int(np.argmax(ac[lo : hi + 1]))
    return sr / lag


def test_vocab_sizes():
    assert len(tonal_vocab()) == 8 * 4 * 4 == 128
    lex = nontonal_lexicon(NONTONAL)
    assert len(lex) == 64
    assert len(set(lex)) == 64


def test_tone_contours():
    level = tone_contour(1, 150.0, 100)
    assert np.all(np.abs(level - 150.0) <= 2.0)
    rising = tone_contour(2, 150.0, 100)
    falling = tone_contour(3, 150.0, 100)
    assert rising[-1] > rising[0]
    assert falling[-1] < falling[0]
    dipping = tone_contour(4, 150.0, 100)
    assert dipping[50] < dipping[0] and dipping[50] < dipping[-1]


def test_synthesis_deterministic():
    a = synthesize_utterance(TONAL, 42, 3)
    b = synthesize_utterance(TONAL, 42, 3)
    np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
    assert a.units == b.units


def test_rising_vs_falling_pitch_oracle():
    sr = 16000
    # minimal pair: identical (consonant, vowel), tones rising vs falling
    rise = synthesize_utterance(TONAL, 7, units=["ma2"])
    fall = synthesize_utterance(TONAL, 7, units=["ma3"])
    f0s = []
    for res in (rise, fall):
        seg = res.alignments[0]
        s0, s1 = int(seg.start * sr), int(seg.end * sr)
        tail = res.waveform.samples[s1 - int(0.05 * sr) : s1 - int(0.01 * sr)]
        f0s.append(estimate_f0(tail, sr))
    assert abs(f0s[0] - f0s[1]) >= 30.0


def test_minimal_pair_differs_only_in_tone():
    a = synthesize_utterance(TONAL, 9, units=["ka1"])
    b = synthesize_utterance(TONAL, 9, units=["ka4"])
    # same seed: same durations/F0 base; waveforms differ only through pitch
    assert len(a.waveform) == len(b.waveform)
    assert not np.array_equal(a.waveform.samples, b.waveform.samples)


def test_alignments_cover_units_in_order():
    res = synthesize_utterance(NONTONAL, 3, 4)
    assert [a.unit for a in res.alignments] == res.units
    prev = 0.0
    for seg in res.alignments:
        assert seg.start >= prev
        assert seg.end > seg.start
        prev = seg.end
    assert res.alignments[-1].end <= res.waveform.duration + 1e-9


def test_duration_contrast_tonal_shorter():
    rng = np.random.default_rng(0)
    def mean_unit_dur(spec, seeds):
        durs = []
        for s in seeds:
            res = synthesize_utterance(spec, int(s), 3)
            durs.extend(a.end - a.start for a in res.alignments)
        return np.mean(durs)
    seeds = rng.integers(0, 10_000, 20)
    assert mean_unit_dur(TONAL, seeds) < mean_unit_dur(NONTONAL, seeds)


def test_generate_corpus_and_roundtrip(tmp_path):
    manifest = generate_corpus(TONAL, 10, tmp_path, seed=1)
    utts = load_manifest(manifest)
    assert len(utts) == 10
    for utt in utts:
        w = read_wav(tmp_path / utt.path)
        assert w.sample_rate == 16000
        assert len(w) > 0
    # round-trip preserves fields
    raw = [json.loads(l) for l in open(manifest)]
    for rec, utt in zip(raw, utts):
        assert rec["utt_id"] == utt.utt_id
        assert rec["transcript"] == utt.transcript
        assert rec["language"] == utt.language
        assert rec["split"] == utt.split


def test_split_determinism(tmp_path):
    m1 = generate_corpus(TONAL, 20, tmp_path / "a", seed=5)
    m2 = generate_corpus(TONAL, 20, tmp_path / "b", seed=5)
    s1 = [json.loads(l)["split"] for l in open(m1)]
    s2 = [json.loads(l)["split"] for l in open(m2)]
    assert s1 == s2
    w1 = (tmp_path / "a/wav/tonal_00003.wav").read_bytes()
    w2 = (tmp_path / "b/wav/tonal_00003.wav").read_bytes()
    assert w1 == w2


def test_load_manifest_empty(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_load_manifest_missing_field(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"utt_id": "x", "path": "x.wav"}\n')
    with pytest.raises(FormatError) as exc:
        load_manifest(p)
    assert ":1:" in str(exc.value)


def test_load_manifest_bad_json_line_number(tmp_path):
    p = tmp_path / "m.jsonl"
    good = json.dumps({"utt_id": "a", "path": "a.wav", "transcript": [],
                       "alignments": [], "language": "tonal"})
    p.write_text(good + "\n{broken\n")
    with pytest.raises(FormatError) as exc:
        load_manifest(p)
    assert ":2:" in str(exc.value)


def test_load_manifest_alignment_mismatch(tmp_path):
    p = tmp_path / "m.jsonl"
    rec = {"utt_id": "a", "path": "a.wav", "transcript": ["ka1"],
           "alignments": [{"unit": "ma1", "start": 0.0, "end": 0.2}],
           "language": "tonal"}
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValidationError):
        load_manifest(p)


def test_labels_for_unknown_unit():
    with pytest.raises(ValidationError):
        labels_for(["zz9"], build_vocab(TONAL))


def test_vocab_coverage_small():
    # at modest corpus size every label id is resolvable
    vocab = build_vocab(TONAL)
    ids = labels_for(vocab, vocab)
    assert ids == list(range(1, 129))
