import csv
import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch

from tokrate.analysis import (DEFAULT_SWEEP_GRID, align_counts, emit_histogram,
                              emit_line_plot, error_rate, padding_sweep,
                              segment_token_frequency, tokens_for_segment,
                              usage_compare, write_json)
from tokrate.audio_io import Waveform
from tokrate.ctc import AlignmentSegment
from tokrate.dsp import MelConfig
from tokrate.errors import ShapeError
from tokrate.model import ModelConfig, TokenizerASR
from tokrate.nn_core import set_determinism


def brute_force_edit_distance(ref, hyp):
    """Independent O(2^n)-free oracle: plain Wagner-Fischer cost only."""
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i][j] = min(dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                           dp[i][j - 1] + 1, dp[i - 1][j] + 1)
    return dp[n][m]


def test_error_rate_hand_case():
    rep = error_rate([["a", "b", "c"]], [["a", "x", "c", "d"]])
    assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 1, 0)
    assert rep.error_rate == pytest.approx(2 / 3)


def test_align_counts_vs_edit_distance_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = list(rng.integers(0, 4, int(rng.integers(0, 8))))
        hyp = list(rng.integers(0, 4, int(rng.integers(0, 8))))
        s, i, d = align_counts(ref, hyp)
        assert s + i + d == brute_force_edit_distance(ref, hyp)
        assert len(ref) + i - d == len(hyp)


def test_align_counts_exhaustive_short():
    for ref_len, hyp_len in itertools.product(range(4), range(4)):
        for ref in itertools.product("ab", repeat=ref_len):
            for hyp in itertools.product("ab", repeat=hyp_len):
                s, i, d = align_counts(list(ref), list(hyp))
                assert s + i + d == brute_force_edit_distance(ref, hyp)


def test_error_rate_edge_cases():
    assert error_rate([[]], [[]]).error_rate == 0.0
    assert error_rate([[]], [["a"]]).error_rate == float("inf")
    assert error_rate([["a"]], [[]]).error_rate == 1.0
    with pytest.raises(ShapeError):
        error_rate([[1]], [])


def test_error_rate_corpus_pooling():
    # corpus rate pools counts, it is not the mean of per-pair rates
    rep = error_rate([["a"], ["a", "b", "c", "d"]], [["b"], ["a", "b", "c", "d"]])
    assert rep.error_rate == pytest.approx(1 / 5)


def seg(unit, start, end):
    return AlignmentSegment(unit=unit, start=start, end=end)


def test_tokens_for_segment_overlap_rule():
    # 10 Hz tokens: spans [0,0.1), [0.1,0.2), [0.2,0.3)
    toks = [7, 8, 9]
    # segment [0.04, 0.16): covers 60% of token 0, 60% of token 1
    assert tokens_for_segment(toks, 10.0, seg("x", 0.04, 0.16)) == [7, 8]
    # exactly 50% overlap is excluded (strict >)
    assert tokens_for_segment(toks, 10.0, seg("x", 0.05, 0.15)) == []
    # tiny segment inside one token span
    assert tokens_for_segment(toks, 10.0, seg("x", 0.21, 0.29)) == [9]


def test_segment_token_frequency_hand_case():
    streams = [
        ([5, 5, 6], 10.0, [seg("ta", 0.0, 0.2), seg("mi", 0.2, 0.3)]),
        ([5, 7], 10.0, [seg("ta", 0.0, 0.1), seg("ta", 0.1, 0.2)]),
    ]
    stats = segment_token_frequency("ta", streams)
    # "ta" mappings: [5,5] from first stream, [5] and [7] from second -> 5:3, 7:1
    assert stats.total_mappings == 4
    assert stats.frequencies[5] == pytest.approx(0.75)
    assert stats.frequencies[7] == pytest.approx(0.25)
    assert sum(stats.frequencies.values()) == pytest.approx(1.0)
    empty = segment_token_frequency("zz", streams)
    assert empty.total_mappings == 0 and empty.frequencies == {}


TINY = dict(vocab_size=6, n_mels=8, d_model=8, n_heads=2, enc_layers=3,
            enc_split=1, dec_layers=1, ffn_dim=16, codebook_size=4)


def tiny_model(seed=0, **kw):
    set_determinism(seed)
    return TokenizerASR(ModelConfig(**{**TINY, **kw}), stage=2)


def test_usage_compare_resets_between_corpora():
    m = tiny_model()
    rng = np.random.default_rng(1)
    a = [rng.standard_normal((40, 8)).astype(np.float32) for _ in range(3)]
    b = [rng.standard_normal((40, 8)).astype(np.float32)]
    rep = usage_compare(m, {"a": a, "b": b})
    ra, rb = rep["per_corpus"]["a"], rep["per_corpus"]["b"]
    # token_length(40 mel frames, d=4) = ceil(ceil(40/2)/4) = 5 tokens each
    assert sum(ra["histogram"]) == 3 * 5 and sum(rb["histogram"]) == 5
    assert rep["delta_percent"]["a-b"] == pytest.approx(ra["percent"] - rb["percent"])
    # silence corpus touches at most one code per frame value pattern
    silence = [np.full((40, 8), -23.0, dtype=np.float32)]
    rep2 = usage_compare(m, {"sil": silence})
    assert rep2["per_corpus"]["sil"]["used"] == 1


def test_default_sweep_grid():
    assert len(DEFAULT_SWEEP_GRID) == 41
    assert DEFAULT_SWEEP_GRID[0] == 0.0
    assert DEFAULT_SWEEP_GRID[-1] == 0.40
    steps = np.diff(DEFAULT_SWEEP_GRID)
    assert np.allclose(steps, 0.01)


def test_padding_sweep_rows_and_identity_at_zero():
    m = tiny_model(seed=2)
    rng = np.random.default_rng(3)
    w = Waveform(rng.uniform(-0.5, 0.5, 8000), 16000)
    mel_cfg = MelConfig(n_mels=8)
    grid = [0.0, 0.05, 0.1]
    rep = padding_sweep(m, w, [1, 2], grid=grid, mode="zeros", mel_cfg=mel_cfg)
    assert [r.padding_s for r in rep.rows] == grid
    # row at 0.00 must equal decoding the unpadded waveform
    from tokrate.dsp import mel_spectrogram
    direct = m.decode_attention(mel_spectrogram(w, mel_cfg).frames)
    assert rep.rows[0].hyp == direct
    # deterministic across reruns
    rep2 = padding_sweep(m, w, [1, 2], grid=grid, mode="zeros", mel_cfg=mel_cfg)
    assert [r.hyp for r in rep.rows] == [r.hyp for r in rep2.rows]
    with pytest.raises(ShapeError):
        padding_sweep(m, w, [1], grid=[0.0], decode="nope", mel_cfg=mel_cfg)


def test_emit_line_plot_roundtrip(tmp_path):
    xs = [0.0, 0.01, 0.02]
    ys = [0.5, 1 / 3, 0.25]
    svg, csvp = tmp_path / "p.svg", tmp_path / "p.csv"
    emit_line_plot(xs, ys, svg, csvp, x_label="pad", y_label="err")
    with open(csvp) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["pad", "err"]
    back_y = [float(r[1]) for r in rows[1:]]
    assert back_y == ys  # repr() round-trips floats exactly
    ET.fromstring(svg.read_text())  # well-formed XML
    emit_line_plot(xs, ys, tmp_path / "q.svg", tmp_path / "q.csv",
                   x_label="pad", y_label="err")
    assert svg.read_bytes() == (tmp_path / "q.svg").read_bytes()


def test_emit_histogram_roundtrip(tmp_path):
    counts = [3, 0, 7, 1]
    svg, csvp = tmp_path / "h.svg", tmp_path / "h.csv"
    emit_histogram(counts, svg, csvp)
    with open(csvp) as f:
        rows = list(csv.reader(f))
    assert [int(r[1]) for r in rows[1:]] == counts
    ET.fromstring(svg.read_text())
    emit_histogram([], tmp_path / "e.svg", tmp_path / "e.csv")
    ET.fromstring((tmp_path / "e.svg").read_text())


def test_write_json_deterministic(tmp_path):
    write_json({"b": 1, "a": [1, 2]}, tmp_path / "x.json")
    write_json({"a": [1, 2], "b": 1}, tmp_path / "y.json")
    assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
