"""Measurement procedures: error rates, codebook-usage comparison, token
distribution stats, segment-to-token frequency mapping, and the
leading-silence padding sweep."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio_io import Waveform, pad_with_silence
from .ctc import AlignmentSegment
from .dsp import MelConfig, mel_spectrogram
from .errors import ShapeError

# ---------------------------------------------------------------------------
# Error rate


@dataclass
class PairResult:
    ref: list
    hyp: list
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions


@dataclass
class EvalReport:
    pairs: list[PairResult]
    substitutions: int
    insertions: int
    deletions: int
    ref_units: int
    error_rate: float

    def to_dict(self):
        return {
            "error_rate": self.error_rate,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_units": self.ref_units,
            "pairs": [
                {"ref": p.ref, "hyp": p.hyp, "S": p.substitutions,
                 "I": p.insertions, "D": p.deletions}
                for p in self.pairs
            ],
        }


def align_counts(ref: list, hyp: list) -> tuple[int, int, int]:
    """Levenshtein alignment; returns (S, I, D) counts."""
    n, m = len(ref), len(hyp)
    # dp[i][j] = (cost, S, I, D) for ref[:i] vs hyp[:j]
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            cands = (
                (prev[j - 1][0] + sub_cost, prev[j - 1][1] + sub_cost, prev[j - 1][2], prev[j - 1][3]),
                (cur[j - 1][0] + 1, cur[j - 1][1], cur[j - 1][2] + 1, cur[j - 1][3]),
                (prev[j][0] + 1, prev[j][1], prev[j][2], prev[j][3] + 1),
            )
            cur.append(min(cands))
        prev = cur
    _, s, i_, d = prev[m]
    return s, i_, d


def error_rate(refs: list[list], hyps: list[list]) -> EvalReport:
    """Corpus error rate (S+I+D)/ref_units over aligned pairs."""
    if len(refs) != len(hyps):
        raise ShapeError(f"got {len(refs)} refs but {len(hyps)} hyps")
    pairs = []
    tot_s = tot_i = tot_d = tot_n = 0
    for ref, hyp in zip(refs, hyps):
        s, i, d = align_counts(list(ref), list(hyp))
        pairs.append(PairResult(list(ref), list(hyp), s, i, d))
        tot_s += s
        tot_i += i
        tot_d += d
        tot_n += len(ref)
    rate = (tot_s + tot_i + tot_d) / tot_n if tot_n else (0.0 if tot_i + tot_s == 0 else float("inf"))
    return EvalReport(pairs, tot_s, tot_i, tot_d, tot_n, rate)


# ---------------------------------------------------------------------------
# Codebook usage comparison


def usage_compare(model, corpora: dict[str, list[np.ndarray]]) -> dict:
    """Per-corpus usage reports on a frozen model; counters reset per corpus.

    corpora: name -> list of mel frame matrices.
    """
    out = {}
    for name, mels in corpora.items():
        model.codebook.reset_usage()
        for mel in mels:
            model.tokenize_mel(mel)
        out[name] = model.codebook.usage_report().to_dict()
    names = list(out)
    delta = {}
    for a in names:
        for b in names:
            if a < b:
                delta[f"{a}-{b}"] = out[a]["percent"] - out[b]["percent"]
    return {"per_corpus": out, "delta_percent": delta}


# ---------------------------------------------------------------------------
# Segment-to-token frequency


@dataclass
class SegmentTokenStats:
    target_unit: str
    frequencies: dict[int, float] = field(default_factory=dict)
    total_mappings: int = 0

    def to_dict(self):
        return {"target_unit": self.target_unit,
                "frequencies": {str(k): v for k, v in sorted(self.frequencies.items())},
                "total_mappings": self.total_mappings}


def tokens_for_segment(tokens: list[int], frame_rate: float,
                       segment: AlignmentSegment) -> list[int]:
    """Token indices whose span [t/r, (t+1)/r) overlaps the segment by > 50%."""
    out = []
    period = 1.0 / frame_rate
    for t, tok in enumerate(tokens):
        lo, hi = t * period, (t + 1) * period
        overlap = min(hi, segment.end) - max(lo, segment.start)
        if overlap > 0.5 * period:
            out.append(tok)
    return out


def segment_token_frequency(target_unit: str,
                            token_streams: list[tuple[list[int], float, list[AlignmentSegment]]]
                            ) -> SegmentTokenStats:
    """Frequency of each codebook entry over all target-unit segments.

    token_streams: per utterance (tokens, frame_rate, alignments).
    """
    counts: dict[int, int] = {}
    total = 0
    for tokens, rate, alignments in token_streams:
        for seg in alignments:
            if seg.unit != target_unit:
                continue
            for tok in tokens_for_segment(tokens, rate, seg):
                counts[tok] = counts.get(tok, 0) + 1
                total += 1
    stats = SegmentTokenStats(target_unit, total_mappings=total)
    if total:
        stats.frequencies = {k: v / total for k, v in counts.items()}
    return stats


# ---------------------------------------------------------------------------
# Padding sweep


DEFAULT_SWEEP_GRID = [round(0.01 * i, 2) for i in range(41)]  # 0.00 .. 0.40


@dataclass
class SweepRow:
    padding_s: float
    hyp: list
    error_rate: float


@dataclass
class SweepReport:
    rows: list[SweepRow]
    grid: list[float]
    reference: list
    decode_mode: str

    def to_dict(self):
        return {"grid": self.grid, "reference": self.reference,
                "decode_mode": self.decode_mode,
                "rows": [asdict(r) for r in self.rows]}


def padding_sweep(model, w: Waveform, reference: list[int],
                  grid: list[float] | None = None, mode: str = "zeros",
                  decode: str = "attention",
                  mel_cfg: MelConfig | None = None) -> SweepReport:
    """Pad -> tokenize path -> decode -> per-row error rate vs reference."""
    grid = DEFAULT_SWEEP_GRID if grid is None else grid
    mel_cfg = mel_cfg or MelConfig(n_mels=model.cfg.n_mels)
    rows = []
    for pad in grid:
        padded = pad_with_silence(w, pad, mode=mode)
        mel = mel_spectrogram(padded, mel_cfg)
        if decode == "attention":
            hyp = model.decode_attention(mel.frames)
        elif decode == "ctc":
            hyp = model.decode_ctc(mel.frames)
        else:
            raise ShapeError(f"unknown decode mode {decode!r}")
        rate = error_rate([reference], [hyp]).error_rate
        rows.append(SweepRow(pad, hyp, rate))
    return SweepReport(rows, list(grid), list(reference), decode)


# ---------------------------------------------------------------------------
# Plot + CSV emission


def _svg_polyline(points, width, height):
    if not points:
        return ""
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="black" points="{coords}"/>'


def emit_line_plot(xs: list[float], ys: list[float], svg_path, csv_path,
                   x_label: str = "x", y_label: str = "y") -> None:
    """Deterministic SVG line plot; the CSV carries the exact values."""
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([x_label, y_label])
        for x, y in zip(xs, ys):
            writer.writerow([repr(x), repr(y)])
    width, height, margin = 640, 360, 40
    body = []
    if xs:
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        xs_span = (x1 - x0) or 1.0
        ys_span = (y1 - y0) or 1.0
        pts = [
            (margin + (x - x0) / xs_span * (width - 2 * margin),
             height - margin - (y - y0) / ys_span * (height - 2 * margin))
            for x, y in zip(xs, ys)
        ]
        body.append(_svg_polyline(pts, width, height))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>'
        + "".join(body)
        + f'<text x="{width // 2}" y="{height - 8}" font-size="12">{x_label}</text>'
        f'<text x="12" y="{height // 2}" font-size="12" transform="rotate(-90 12 {height // 2})">{y_label}</text>'
        "</svg>"
    )
    with open(svg_path, "w") as f:
        f.write(svg)


def emit_histogram(counts: list[int], svg_path, csv_path,
                   x_label: str = "bin", y_label: str = "count") -> None:
    """Deterministic SVG bar plot with an exact CSV of the bins."""
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([x_label, y_label])
        for i, c in enumerate(counts):
            writer.writerow([i, c])
    width, height, margin = 640, 360, 40
    bars = []
    if counts:
        top = max(max(counts), 1)
        bw = (width - 2 * margin) / len(counts)
        for i, c in enumerate(counts):
            h = c / top * (height - 2 * margin)
            bars.append(
                f'<rect x="{margin + i * bw:.2f}" y="{height - margin - h:.2f}" '
                f'width="{max(bw, 0.5):.2f}" height="{h:.2f}" fill="black"/>'
            )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>'
        + "".join(bars)
        + "</svg>"
    )
    with open(svg_path, "w") as f:
        f.write(svg)


def write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
