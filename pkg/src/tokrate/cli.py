"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 validation/config error,
4 numerical-health error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .audio_io import read_wav
from .config import ExperimentConfig
from .corpus import LanguageSpec, build_vocab, generate_corpus, labels_for, load_manifest
from .dsp import MelConfig, mel_spectrogram
from .errors import (
    ConfigError,
    FormatError,
    NumericalHealthError,
    RangeError,
    TokrateError,
)
from .model import TokenizerASR
from .trainer import prepare_examples, train_stage1, train_stage2

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def _spec_for(language: str) -> LanguageSpec:
    return LanguageSpec(language)


def _load_model(path) -> TokenizerASR:
    return TokenizerASR.load(path)


def _manifest_utts(manifest, split):
    utts = load_manifest(manifest)
    if split:
        utts = [u for u in utts if u.split == split]
    return utts


def cmd_gen_corpus(args) -> int:
    spec = _spec_for(args.language)
    manifest = generate_corpus(spec, args.n, args.out, seed=args.seed)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.stage is not None:
        cfg.stage = args.stage
    if cfg.stage == 2 and not args.init_from:
        raise ConfigError("stage 2 training requires --init-from <stage-1 checkpoint>")
    run_dir = cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        f.write(cfg.canonical_json())
    spec = _spec_for(args.language)
    mel_cfg = MelConfig(n_mels=cfg.mel_n_mels or cfg.model.n_mels)
    data = prepare_examples(cfg.manifest, spec, mel_cfg)
    ckpt = os.path.join(run_dir, f"stage{cfg.stage}.ckpt")
    log = os.path.join(run_dir, f"stage{cfg.stage}_train.jsonl")
    if cfg.stage == 1:
        train_stage1(data, cfg.model, cfg.train, ckpt, log_path=log)
    else:
        train_stage2(args.init_from, data, cfg.model, cfg.train, ckpt, log_path=log)
    print(ckpt)
    return 0


def _decode_corpus(model, manifest, spec, split, mel_cfg, decode):
    vocab = build_vocab(spec)
    base = os.path.dirname(os.path.abspath(manifest))
    refs, hyps, ids = [], [], []
    for utt in _manifest_utts(manifest, split):
        w = read_wav(os.path.join(base, utt.path))
        mel = mel_spectrogram(w, mel_cfg)
        hyp = model.decode_attention(mel.frames) if decode == "attention" \
            else model.decode_ctc(mel.frames)
        refs.append(labels_for(utt.transcript, vocab))
        hyps.append(hyp)
        ids.append(utt.utt_id)
    return refs, hyps, ids


def cmd_tokenize(args) -> int:
    model = _load_model(args.checkpoint)
    mel_cfg = MelConfig(n_mels=model.cfg.n_mels)
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w") as f:
        for utt in _manifest_utts(args.manifest, args.split):
            w = read_wav(os.path.join(base, utt.path))
            toks = model.tokenize(w, mel_cfg)
            f.write(json.dumps({"utt_id": utt.utt_id,
                                "frame_rate": toks.frame_rate,
                                "tokens": toks.indices}, sort_keys=True) + "\n")
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    spec = _spec_for(args.language)
    mel_cfg = MelConfig(n_mels=model.cfg.n_mels)
    refs, hyps, _ = _decode_corpus(model, args.manifest, spec, args.split,
                                   mel_cfg, args.decode)
    report = analysis.error_rate(refs, hyps)
    analysis.write_json(report.to_dict(), args.out)
    print(f"{args.out} error_rate={report.error_rate:.4f}")
    return 0


def cmd_usage(args) -> int:
    model = _load_model(args.checkpoint)
    mel_cfg = MelConfig(n_mels=model.cfg.n_mels)
    corpora = {}
    for manifest in args.manifests:
        name = os.path.basename(os.path.dirname(os.path.abspath(manifest))) or manifest
        base = os.path.dirname(os.path.abspath(manifest))
        mels = []
        for utt in _manifest_utts(manifest, args.split):
            w = read_wav(os.path.join(base, utt.path))
            mels.append(mel_spectrogram(w, mel_cfg).frames)
        corpora[name] = mels
    report = analysis.usage_compare(model, corpora)
    analysis.write_json(report, args.out)
    for name, rep in report["per_corpus"].items():
        hist_base = os.path.splitext(args.out)[0] + f"_{name}_hist"
        analysis.emit_histogram(rep["histogram"], hist_base + ".svg", hist_base + ".csv",
                                x_label="entry", y_label="hits")
    print(args.out)
    return 0


def cmd_seg_freq(args) -> int:
    model = _load_model(args.checkpoint)
    mel_cfg = MelConfig(n_mels=model.cfg.n_mels)
    base = os.path.dirname(os.path.abspath(args.manifest))
    streams = []
    for utt in _manifest_utts(args.manifest, args.split):
        w = read_wav(os.path.join(base, utt.path))
        toks = model.tokenize(w, mel_cfg)
        streams.append((toks.indices, toks.frame_rate, utt.alignments))
    stats = analysis.segment_token_frequency(args.unit, streams)
    analysis.write_json(stats.to_dict(), args.out)
    print(f"{args.out} total_mappings={stats.total_mappings}")
    return 0


def cmd_pad_sweep(args) -> int:
    model = _load_model(args.checkpoint)
    spec = _spec_for(args.language)
    vocab = build_vocab(spec)
    mel_cfg = MelConfig(n_mels=model.cfg.n_mels)
    base = os.path.dirname(os.path.abspath(args.manifest))
    utts = {u.utt_id: u for u in load_manifest(args.manifest)}
    if args.utt_id not in utts:
        raise ConfigError(f"utt_id {args.utt_id!r} not in manifest")
    utt = utts[args.utt_id]
    w = read_wav(os.path.join(base, utt.path))
    grid = None
    if args.grid:
        grid = [float(x) for x in args.grid.split(",")]
    report = analysis.padding_sweep(model, w, labels_for(utt.transcript, vocab),
                                    grid=grid, mode=args.mode, decode=args.decode)
    analysis.write_json(report.to_dict(), args.out)
    csv_base = os.path.splitext(args.out)[0]
    analysis.emit_line_plot([r.padding_s for r in report.rows],
                            [r.error_rate for r in report.rows],
                            csv_base + ".svg", csv_base + ".csv",
                            x_label="padding_s", y_label="error_rate")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokrate",
                                description="speech tokenizer frame-rate laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    g.add_argument("--language", choices=["tonal", "nontonal"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=[1, 2])
    t.add_argument("--init-from", help="stage-1 checkpoint (required for stage 2)")
    t.add_argument("--language", choices=["tonal", "nontonal"], required=True)
    t.set_defaults(func=cmd_train)

    tk = sub.add_parser("tokenize", help="dump token sequences as JSONL")
    tk.add_argument("--checkpoint", required=True)
    tk.add_argument("--manifest", required=True)
    tk.add_argument("--split", default=None)
    tk.add_argument("--out", required=True)
    tk.set_defaults(func=cmd_tokenize)

    e = sub.add_parser("eval", help="decode a corpus and report the error rate")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--language", choices=["tonal", "nontonal"], required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--decode", choices=["attention", "ctc"], default="attention")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("usage", help="codebook usage per corpus")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--manifests", nargs="+", required=True)
    u.add_argument("--split", default="test")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_usage)

    s = sub.add_parser("seg-freq", help="segment-to-token frequency for one unit")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--unit", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_seg_freq)

    ps = sub.add_parser("pad-sweep", help="leading-silence padding sweep")
    ps.add_argument("--checkpoint", required=True)
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--language", choices=["tonal", "nontonal"], required=True)
    ps.add_argument("--utt-id", required=True)
    ps.add_argument("--grid", help="comma-separated seconds; default 0.00..0.40 step 0.01")
    ps.add_argument("--mode", choices=["zeros", "extracted"], default="zeros")
    ps.add_argument("--decode", choices=["attention", "ctc"], default="attention")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_pad_sweep)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except NumericalHealthError as exc:
        print(f"numerical-health error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, RangeError, TokrateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
