"""Full architecture: conv feature extractor -> encoder A -> strided
down-sampler -> vector quantizer -> encoder B -> {CTC head, attention
decoder}, with a transposed-conv up-sampler reconstructing the log-mel input.

Stage 1 is the plain encoder-decoder ASR (no quantizer); stage 2 splits the
encoder stack and inserts the down-sample/VQ/up-sample bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import Waveform
from .ctc import LabelSequence, ctc_greedy_decode, ctc_loss_batched
from .dsp import MelConfig, MelFeatures, mel_spectrogram
from .errors import ConfigError, ValidationError
from .nn_core import (
    DecoderLayer,
    EncoderLayer,
    StridedConv1d,
    UpsampleBlock,
    check_finite,
    load_checkpoint,
    load_params_into,
    module_params_numpy,
    save_checkpoint,
    sinusoidal_positions,
)
from .vq import Codebook, TokenSequence, commitment_loss, straight_through


def _factorize(n: int) -> tuple[int, ...]:
    """Stride factorization, largest factor first; 4->(2,2), 6->(3,2), etc."""
    factors = []
    d = n
    for p in (5, 3, 2):
        while d % p == 0:
            factors.append(p)
            d //= p
    if d != 1:
        raise ConfigError(f"stride product {n} has prime factors other than 2/3/5")
    return tuple(factors)


def _down_kernel(stride: int) -> int:
    return 3 if stride == 2 else 5


@dataclass
class ModelConfig:
    vocab_size: int  # |V| without blank
    n_mels: int = 64
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 6
    enc_split: int = 2  # encoder A depth in stage 2
    dec_layers: int = 2
    ffn_dim: int = 256
    codebook_size: int = 256
    target_frame_rate: float = 12.5
    encoder_rate: float = 50.0
    alpha: float = 0.3
    beta: float = 1.0
    commit_weight: float = 0.25
    ema_decay: float = 0.99
    mel_mean: float = -12.0
    mel_std: float = 8.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not (0 < self.enc_split < self.enc_layers):
            raise ConfigError("enc_split must split the encoder stack in two")
        d = self.encoder_rate / self.target_frame_rate
        if abs(d - round(d)) > 0.01 or round(d) < 1:
            raise ConfigError(
                f"{self.encoder_rate} Hz / {self.target_frame_rate} Hz is not an integer stride product")

    @property
    def downsample_factor(self) -> int:
        return int(round(self.encoder_rate / self.target_frame_rate))

    @property
    def down_strides(self) -> tuple[int, ...]:
        return _factorize(self.downsample_factor)

    @property
    def up_strides(self) -> tuple[int, ...]:
        return _factorize(2 * self.downsample_factor)  # r Hz -> 100 Hz

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    l_ctc: float
    l_att: float
    l_rec: float
    l_commit: float
    l_all: float
    alpha: float
    beta: float
    n_infeasible: int = 0

    def to_dict(self):
        return asdict(self)


class FeatureExtractor(nn.Module):
    """Two conv layers with GELU; the second halves the rate (100 -> 50 Hz)."""

    def __init__(self, n_mels: int, d_model: int):
        super().__init__()
        self.conv1 = StridedConv1d(n_mels, d_model, 3, 1)
        self.conv2 = StridedConv1d(d_model, d_model, 3, 2)

    def forward(self, x):
        return F.gelu(self.conv2(F.gelu(self.conv1(x))))


class Downsampler(nn.Module):
    def __init__(self, d_model: int, strides: tuple[int, ...]):
        super().__init__()
        self.blocks = nn.ModuleList(
            [StridedConv1d(d_model, d_model, _down_kernel(s), s) for s in strides])

    def forward(self, x):
        for block in self.blocks:
            x = F.gelu(block(x))
        return x


class Upsampler(nn.Module):
    def __init__(self, d_model: int, n_mels: int, strides: tuple[int, ...]):
        super().__init__()
        self.blocks = nn.ModuleList(
            [UpsampleBlock(d_model, 2 * s, s) for s in strides])
        self.out = nn.Linear(d_model, n_mels)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.out(x)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def token_length(t_mel: int, downsample_factor: int) -> int:
    """Closed-form token count: ceil(ceil(T_mel/2)/d)."""
    if t_mel <= 0:
        return 0
    return ceil_div(ceil_div(t_mel, 2), downsample_factor)


def _pad_mask(lengths: list[int], t: int) -> torch.Tensor:
    mask = torch.ones(len(lengths), t, dtype=torch.bool)
    for i, l in enumerate(lengths):
        mask[i, :l] = False
    return mask  # True where padded


class TokenizerASR(nn.Module):
    def __init__(self, cfg: ModelConfig, stage: int):
        super().__init__()
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        self.cfg = cfg
        self.stage = stage
        d = cfg.d_model
        v = cfg.vocab_size
        self.extractor = FeatureExtractor(cfg.n_mels, d)
        self.enc_layers = nn.ModuleList(
            [EncoderLayer(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.enc_layers)])
        self.enc_norm = nn.LayerNorm(d)
        self.ctc_head = nn.Linear(d, v + 1)
        # decoder vocabulary: 0 pad, 1..V labels, V+1 bos, V+2 eos
        self.bos_id = v + 1
        self.eos_id = v + 2
        self.dec_embed = nn.Embedding(v + 3, d)
        self.dec_layers = nn.ModuleList(
            [DecoderLayer(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.dec_layers)])
        self.dec_norm = nn.LayerNorm(d)
        self.dec_out = nn.Linear(d, v + 3)
        if stage == 2:
            self.downsampler = Downsampler(d, cfg.down_strides)
            self.codebook = Codebook(cfg.codebook_size, d, decay=cfg.ema_decay)
            self.post_proj = nn.Linear(d, d)
            self.upsampler = Upsampler(d, cfg.n_mels, cfg.up_strides)
        self.bypass_quantizer = False  # debug: straight-through -> identity

    # ----------------------------------------------------------------- encode

    def _add_positions(self, x):
        return x + sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype)

    def _normalize(self, mel):
        return (mel - self.cfg.mel_mean) / self.cfg.mel_std

    def encode(self, mel: torch.Tensor, mel_lens: list[int]):
        """mel: B x T x F. Returns dict with encoder memory and VQ byproducts."""
        cfg = self.cfg
        x = self.extractor(self._normalize(mel))
        lens50 = [ceil_div(l, 2) for l in mel_lens]
        x = self._add_positions(x)
        mask50 = _pad_mask(lens50, x.shape[1])
        split = cfg.enc_split if self.stage == 2 else len(self.enc_layers)
        for layer in self.enc_layers[:split]:
            x = layer(x, key_padding_mask=mask50)
        out = {"lens50": lens50}
        if self.stage == 1:
            memory = self.enc_norm(x)
            out.update(memory=memory, mem_lens=lens50, mem_mask=mask50)
            return out
        h_pre = self.downsampler(x)
        d = cfg.downsample_factor
        tok_lens = [ceil_div(l, d) for l in lens50]
        tok_mask = _pad_mask(tok_lens, h_pre.shape[1])
        flat = h_pre.reshape(-1, cfg.d_model)
        keep = (~tok_mask).reshape(-1)
        indices_flat = torch.zeros(flat.shape[0], dtype=torch.long)
        quant_flat = flat.detach().clone()
        if keep.any():
            idx, q = self.codebook.quantize(flat[keep], count_usage=not self.training)
            indices_flat[keep] = idx
            quant_flat[keep] = q
        quantized = quant_flat.view_as(h_pre)
        if self.bypass_quantizer:
            h_q = h_pre
        else:
            h_q = straight_through(h_pre, quantized)
        y = self._add_positions(self.post_proj(h_q))
        for layer in self.enc_layers[split:]:
            y = layer(y, key_padding_mask=tok_mask)
        memory = self.enc_norm(y)
        out.update(memory=memory, mem_lens=tok_lens, mem_mask=tok_mask,
                   h_pre=h_pre, quantized=quantized, h_q=h_q,
                   indices=indices_flat.view(h_pre.shape[:2]), tok_mask=tok_mask)
        return out

    # ------------------------------------------------------------------ heads

    def ctc_log_probs(self, memory):
        return F.log_softmax(self.ctc_head(memory), dim=-1)

    def decoder_logits(self, memory, mem_mask, tokens):
        """tokens: B x L decoder input ids (BOS-prefixed)."""
        x = self.dec_embed(tokens) * math.sqrt(self.cfg.d_model)
        x = self._add_positions(x)
        for layer in self.dec_layers:
            x = layer(x, memory, memory_padding_mask=mem_mask)
        return self.dec_out(self.dec_norm(x))

    # ---------------------------------------------------------------- losses

    def forward_joint(self, mel: torch.Tensor, mel_lens: list[int],
                      labels: list[list[int]]):
        """Joint loss: alpha*ctc + (1-alpha)*att + beta*rec + commit.

        Returns (loss tensor, LossBreakdown, encode dict).
        """
        cfg = self.cfg
        enc = self.encode(mel, mel_lens)
        memory, mem_lens, mem_mask = enc["memory"], enc["mem_lens"], enc["mem_mask"]
        b = mel.shape[0]
        vocab_plus_blank = cfg.vocab_size + 1

        log_probs = self.ctc_log_probs(memory)
        targets = [LabelSequence(l, vocab_plus_blank) for l in labels]
        l_ctc, feas = ctc_loss_batched(log_probs, mem_lens, targets)
        n_bad = sum(1 for f in feas if not f)
        if not any(feas):
            l_ctc = torch.zeros((), dtype=mel.dtype)

        # teacher-forced decoder cross-entropy
        max_n = max(len(l) for l in labels)
        dec_in = torch.zeros(b, max_n + 1, dtype=torch.long)
        dec_tgt = torch.zeros(b, max_n + 1, dtype=torch.long)  # 0 = pad, ignored
        for i, l in enumerate(labels):
            dec_in[i, 0] = self.bos_id
            dec_in[i, 1 : len(l) + 1] = torch.tensor(l)
            dec_tgt[i, : len(l)] = torch.tensor(l)
            dec_tgt[i, len(l)] = self.eos_id
        logits = self.decoder_logits(memory, mem_mask, dec_in)
        l_att = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                dec_tgt.reshape(-1), ignore_index=0)

        if self.stage == 2:
            recon = self.upsampler(enc["h_q"])[:, : mel.shape[1]]
            target = self._normalize(mel)
            frame_valid = ~_pad_mask(mel_lens, mel.shape[1])
            diff2 = ((recon - target) ** 2).mean(dim=2)
            l_rec = (diff2 * frame_valid).sum() / frame_valid.sum().clamp(min=1)
            keep = ~enc["tok_mask"]
            l_commit = commitment_loss(enc["h_pre"][keep], enc["quantized"][keep],
                                       cfg.commit_weight)
        else:
            l_rec = torch.zeros((), dtype=mel.dtype)
            l_commit = torch.zeros((), dtype=mel.dtype)

        loss = cfg.alpha * l_ctc + (1 - cfg.alpha) * l_att + cfg.beta * l_rec + l_commit
        check_finite(loss, "joint loss")
        breakdown = LossBreakdown(
            float(l_ctc.detach()), float(l_att.detach()), float(l_rec.detach()),
            float(l_commit.detach()), float(loss.detach()), cfg.alpha, cfg.beta,
            n_infeasible=n_bad)
        return loss, breakdown, enc

    # ------------------------------------------------------------- inference

    @torch.no_grad()
    def tokenize_mel(self, mel_frames: np.ndarray) -> TokenSequence:
        """Log-mel T x F -> discrete token indices at the target frame rate."""
        if self.stage != 2:
            raise ConfigError("tokenize requires a stage-2 model")
        if mel_frames.shape[0] == 0:
            return TokenSequence([], self.cfg.target_frame_rate)
        mel = torch.from_numpy(mel_frames[None].astype(np.float32))
        x = self.extractor(self._normalize(mel))
        x = self._add_positions(x)
        mask = _pad_mask([x.shape[1]], x.shape[1])
        for layer in self.enc_layers[: self.cfg.enc_split]:
            x = layer(x, key_padding_mask=mask)
        h = self.downsampler(x)
        idx, _ = self.codebook.quantize(h.reshape(-1, self.cfg.d_model))
        return TokenSequence(idx.tolist(), self.cfg.target_frame_rate)

    @torch.no_grad()
    def tokenize(self, w: Waveform, mel_cfg: MelConfig | None = None) -> TokenSequence:
        mel_cfg = mel_cfg or MelConfig(n_mels=self.cfg.n_mels)
        mel = mel_spectrogram(w, mel_cfg)
        return self.tokenize_mel(mel.frames)

    @torch.no_grad()
    def decode_attention(self, mel_frames: np.ndarray, max_len: int | None = None) -> list[int]:
        """Greedy teacher-free attention decode; returns label ids."""
        if mel_frames.shape[0] == 0:
            return []
        mel = torch.from_numpy(mel_frames[None].astype(np.float32))
        enc = self.encode(mel, [mel.shape[1]])
        memory, mem_mask = enc["memory"], enc["mem_mask"]
        if max_len is None:
            max_len = max(16, 2 * memory.shape[1])
        tokens = [self.bos_id]
        out = []
        for _ in range(max_len):
            tin = torch.tensor(tokens)[None]
            logits = self.decoder_logits(memory, mem_mask, tin)
            nxt = int(logits[0, -1, 1:].argmax()) + 1  # never emit pad
            if nxt == self.eos_id:
                break
            if nxt == self.bos_id:
                break
            out.append(nxt)
            tokens.append(nxt)
        return out

    @torch.no_grad()
    def decode_ctc(self, mel_frames: np.ndarray) -> list[int]:
        mel = torch.from_numpy(mel_frames[None].astype(np.float32))
        enc = self.encode(mel, [mel.shape[1]])
        lp = self.ctc_log_probs(enc["memory"])[0]
        return ctc_greedy_decode(lp)

    # ------------------------------------------------------------ checkpoint

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"stage": self.stage, "model": self.cfg.to_dict()}
        save_checkpoint(path, meta, module_params_numpy(self), extra=extra)

    @classmethod
    def load(cls, path) -> "TokenizerASR":
        meta, params, _ = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model"]), meta["stage"])
        load_params_into(model, params)
        model.eval()
        return model

    def init_from_stage1(self, path) -> None:
        """Copy stage-1 weights into the shared submodules of a stage-2 model."""
        meta, params, _ = load_checkpoint(path)
        if meta["stage"] != 1:
            raise ValidationError(f"{path}: expected a stage-1 checkpoint")
        ref = ModelConfig.from_dict(meta["model"])
        for f in ("n_mels", "d_model", "n_heads", "enc_layers", "dec_layers",
                  "ffn_dim", "vocab_size"):
            if getattr(ref, f) != getattr(self.cfg, f):
                raise ValidationError(
                    f"checkpoint {f}={getattr(ref, f)} incompatible with model {getattr(self.cfg, f)}")
        state = self.state_dict()
        for name, arr in params.items():
            if name in state and tuple(state[name].shape) == tuple(arr.shape):
                state[name] = torch.from_numpy(np.array(arr)).to(state[name].dtype)
        self.load_state_dict(state)
