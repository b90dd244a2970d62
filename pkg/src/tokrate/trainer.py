"""Two-stage training: stage 1 trains the plain ASR; stage 2 splits the
encoder, inserts the down-sample/VQ/up-sample bottleneck (codebook seeded by
k-means over warmup encoder outputs), and fine-tunes the joint objective.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ValidationError
from .model import ModelConfig, TokenizerASR, ceil_div
from .nn_core import ScheduledAdam, WarmupLinearSchedule, set_determinism
from .vq import kmeans_init


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    seed: int = 0
    threads: int = 1
    grad_clip: float = 1.0
    log_every: int = 25
    kmeans_warmup_utts: int = 256
    kmeans_iters: int = 8
    revive_every: int = 200  # steps; 0 disables dead-code revival
    revive_threshold: float = 1e-3
    bypass_quantizer: bool = False  # debug: stage 2 behaves like stage 1
    beta_override: float | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class Example:
    """One training item: precomputed log-mel features plus label ids."""
    utt_id: str
    mel: np.ndarray  # T x F float32
    labels: list[int]


def prepare_examples(manifest_path, spec, mel_cfg=None, splits=("train",)) -> list[Example]:
    """Load a manifest, read audio, compute log-mels, map labels to ids."""
    import os

    from .audio_io import read_wav
    from .corpus import build_vocab, labels_for, load_manifest
    from .dsp import MelConfig, mel_spectrogram

    mel_cfg = mel_cfg or MelConfig()
    vocab = build_vocab(spec)
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for utt in load_manifest(manifest_path):
        if splits is not None and utt.split not in splits:
            continue
        w = read_wav(os.path.join(base, utt.path))
        mel = mel_spectrogram(w, mel_cfg)
        out.append(Example(utt.utt_id, mel.frames.astype(np.float32),
                           labels_for(utt.transcript, vocab)))
    return out


def _batches(data: list[Example], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        yield [data[i] for i in order[start : start + batch_size]]


def _collate(batch: list[Example]):
    t_max = max(ex.mel.shape[0] for ex in batch)
    f = batch[0].mel.shape[1]
    mel = torch.zeros(len(batch), t_max, f)
    lens = []
    for i, ex in enumerate(batch):
        mel[i, : ex.mel.shape[0]] = torch.from_numpy(ex.mel)
        lens.append(ex.mel.shape[0])
    return mel, lens, [ex.labels for ex in batch]


def _train_loop(model: TokenizerASR, data: list[Example], cfg: TrainConfig,
                log_path=None, on_step=None) -> list[dict]:
    model.train()
    schedule = WarmupLinearSchedule(cfg.peak_lr, cfg.warmup_steps, cfg.steps)
    opt = ScheduledAdam([p for p in model.parameters() if p.requires_grad], schedule)
    rng = np.random.default_rng(cfg.seed)
    log = []
    logf = open(log_path, "w") if log_path else None
    step = 0
    epoch = 0
    try:
        while step < cfg.steps:
            epoch += 1
            for batch in _batches(data, cfg.batch_size, rng):
                step += 1
                opt.zero_grad()
                mel, lens, labels = _collate(batch)
                loss, breakdown, enc = model.forward_joint(mel, lens, labels)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                lr = opt.step()
                if on_step:
                    on_step(step, model, enc)
                if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
                    row = {"step": step, "epoch": epoch, "lr": lr, **breakdown.to_dict()}
                    log.append(row)
                    if logf:
                        logf.write(json.dumps(row, sort_keys=True) + "\n")
                if step >= cfg.steps:
                    break
    finally:
        if logf:
            logf.close()
    model.eval()
    return log


def train_stage1(data: list[Example], model_cfg: ModelConfig, cfg: TrainConfig,
                 ckpt_path, log_path=None) -> TokenizerASR:
    set_determinism(cfg.seed, cfg.threads)
    model = TokenizerASR(model_cfg, stage=1)
    _train_loop(model, data, cfg, log_path=log_path)
    model.save(ckpt_path, extra={"train": cfg.to_dict()})
    return model


def _collect_prequant(model: TokenizerASR, data: list[Example], n_utts: int) -> np.ndarray:
    """Encoder-A + down-sampler outputs from the first n_utts, for k-means."""
    model.eval()
    vecs = []
    with torch.no_grad():
        for ex in data[:n_utts]:
            mel = torch.from_numpy(ex.mel[None])
            x = model.extractor(model._normalize(mel))
            x = model._add_positions(x)
            mask = torch.zeros(1, x.shape[1], dtype=torch.bool)
            for layer in model.enc_layers[: model.cfg.enc_split]:
                x = layer(x, key_padding_mask=mask)
            h = model.downsampler(x)
            vecs.append(h[0].numpy())
    return np.concatenate(vecs, axis=0)


def train_stage2(stage1_ckpt, data: list[Example], model_cfg: ModelConfig,
                 cfg: TrainConfig, ckpt_path, log_path=None) -> TokenizerASR:
    set_determinism(cfg.seed, cfg.threads)
    if cfg.beta_override is not None:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "beta": cfg.beta_override})
    model = TokenizerASR(model_cfg, stage=2)
    model.init_from_stage1(stage1_ckpt)
    model.bypass_quantizer = cfg.bypass_quantizer

    if not cfg.bypass_quantizer:
        samples = _collect_prequant(model, data, cfg.kmeans_warmup_utts)
        if samples.shape[0] < model_cfg.codebook_size:
            raise ValidationError(
                f"k-means warmup produced {samples.shape[0]} vectors, need {model_cfg.codebook_size}")
        kmeans_init(model.codebook, samples, iters=cfg.kmeans_iters, seed=cfg.seed)

    revived_log = []

    def on_step(step, m, enc):
        if m.bypass_quantizer:
            return
        keep = ~enc["tok_mask"].reshape(-1)
        h = enc["h_pre"].detach().reshape(-1, m.cfg.d_model)[keep]
        idx = enc["indices"].reshape(-1)[keep]
        m.codebook.ema_update(h, idx)
        if cfg.revive_every and step % cfg.revive_every == 0:
            n = m.codebook.revive_dead(h, threshold=cfg.revive_threshold,
                                       seed=cfg.seed + step)
            if n:
                revived_log.append({"step": step, "revived": n})

    _train_loop(model, data, cfg, log_path=log_path, on_step=on_step)
    model.save(ckpt_path, extra={"train": cfg.to_dict(), "revivals": revived_log})
    return model
