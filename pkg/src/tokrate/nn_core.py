"""Neural building blocks, optimizer schedule, checkpoints, gradient checking.

Torch supplies tensors and autograd; the layers here pin down the shape
contracts the rest of the model relies on (ceil-length strided convolutions,
pre-LN transformer blocks) and the warmup/linear-decay Adam schedule.
"""

from __future__ import annotations

import io
import json
import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalHealthError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"TKRCKPT"
CHECKPOINT_VERSION = 1


def set_determinism(seed: int, threads: int = 1) -> None:
    """Fixed-threads deterministic configuration for reproducible training."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalHealthError(f"non-finite values in {what}")
    return t


class StridedConv1d(nn.Module):
    """Conv1d over T x C sequences, left-padded so output length is ceil(T/s).

    Output frame t sees only input frames <= t*s + k - 1.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride)

    def pad_for(self, t: int) -> int:
        out_t = -(-t // self.stride)
        return (out_t - 1) * self.stride + self.kernel - t

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: B x T x C
        if x.shape[1] < 1:
            raise ShapeError("StridedConv1d needs at least one input frame")
        pad = self.pad_for(x.shape[1])
        h = F.pad(x.transpose(1, 2), (pad, 0))
        return self.conv(h).transpose(1, 2)


class UpsampleBlock(nn.Module):
    """Transposed conv (exact factor-s length growth) plus a residual conv."""

    def __init__(self, channels: int, kernel: int, stride: int):
        super().__init__()
        if kernel < stride:
            raise ConfigError("kernel must be >= stride for exact length growth")
        self.stride = stride
        self.up = nn.ConvTranspose1d(channels, channels, kernel, stride=stride)
        self.res = StridedConv1d(channels, channels, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        h = self.up(x.transpose(1, 2)).transpose(1, 2)[:, : t * self.stride]
        return h + self.res(F.gelu(h))


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, q, kv, key_padding_mask=None, causal=False):
        # q: B x Tq x D, kv: B x Tk x D, key_padding_mask: B x Tk (True = pad)
        b, tq, _ = q.shape
        tk = kv.shape[1]

        def split(t):
            return t.view(b, -1, self.n_heads, self.d_head).transpose(1, 2)

        qh, kh, vh = split(self.q_proj(q)), split(self.k_proj(kv)), split(self.v_proj(kv))
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        if causal:
            mask = torch.triu(torch.ones(tq, tk, dtype=torch.bool, device=q.device), 1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, tq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-LN self-attention block."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, key_padding_mask=key_padding_mask)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    """Pre-LN causal self-attention + cross-attention block."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x, memory, memory_padding_mask=None, self_padding_mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, key_padding_mask=self_padding_mask, causal=True)
        x = x + self.cross_attn(self.norm2(x), memory, key_padding_mask=memory_padding_mask)
        return x + self.ffn(self.norm3(x))


def sinusoidal_positions(t: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    dim = torch.arange(0, d, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, dim / d)
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


# ---------------------------------------------------------------------------
# Optimizer


class WarmupLinearSchedule:
    """lr(step) = peak * step/warmup for step <= warmup, then linear to 0."""

    def __init__(self, peak_lr: float, warmup_steps: int, total_steps: int):
        if warmup_steps < 1 or total_steps <= warmup_steps:
            raise ConfigError("need 1 <= warmup_steps < total_steps")
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps

    def lr(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        frac = (self.total_steps - step) / (self.total_steps - self.warmup_steps)
        return self.peak_lr * max(frac, 0.0)


class ScheduledAdam:
    """Adam with the warmup/linear-decay schedule. beta2/eps fixed in-repo."""

    def __init__(self, params, schedule: WarmupLinearSchedule,
                 betas=(0.9, 0.999), eps=1e-8):
        self.schedule = schedule
        self.step_count = 0
        self.opt = torch.optim.Adam(params, lr=schedule.lr(1), betas=betas, eps=eps)

    def step(self):
        self.step_count += 1
        lr = self.schedule.lr(self.step_count)
        for group in self.opt.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NumericalHealthError("non-finite gradient in adam step")
            group["lr"] = lr
        self.opt.step()
        return lr

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, config: dict, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Versioned container: JSON header + named little-endian float32 blobs.

    Byte-stable for identical inputs: names sorted, header canonical JSON.
    """
    names = sorted(params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "extra": extra or {},
        "params": [
            {"name": n, "shape": list(params[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (config, params dict of float32 arrays, extra)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<BQ", buf.read(9))
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen))
    params = {}
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
        params[meta["name"]] = arr.copy()
    return header["config"], params, header.get("extra", {})


def module_params_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, p in module.state_dict().items():
        t = p.detach().cpu()
        out[name] = t.numpy().astype(np.float32) if t.is_floating_point() else t.numpy().astype(np.float32)
    return out


def load_params_into(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    if set(state) != set(params):
        missing = set(state) - set(params)
        extra = set(params) - set(state)
        raise ValidationError(f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    new_state = {}
    for name, arr in params.items():
        ref = state[name]
        if tuple(ref.shape) != tuple(arr.shape):
            raise ValidationError(f"shape mismatch for {name}: {tuple(ref.shape)} vs {arr.shape}")
        new_state[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(new_state)


# ---------------------------------------------------------------------------
# Gradient checking

def finite_difference_check(fn, tensors, eps: float = 1e-5, rel_tol: float = 1e-4,
                            max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central-difference check of autograd gradients, element by element.

    fn() must return a scalar tensor computed from `tensors` (leaf float64
    tensors with requires_grad=True); they are perturbed in place. Returns
    the worst relative error; raises AssertionError past rel_tol.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, g in zip(tensors, grads):
        flat = t.detach().reshape(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            picks = rng.choice(n, size=max_entries, replace=False)
        else:
            picks = range(n)
        gflat = g.reshape(-1)
        with torch.no_grad():
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                # absolute floor keeps FD round-off noise on zero gradients
                # from registering as relative error
                denom = max(abs(fd), abs(gflat[i].item()), 1e-6)
                rel = abs(fd - gflat[i].item()) / denom
                worst = max(worst, rel)
                if rel > rel_tol:
                    raise AssertionError(
                        f"gradient mismatch at entry {i}: analytic={gflat[i].item():.8g} fd={fd:.8g} rel={rel:.3g}"
                    )
    return worst


def directional_gradient_check(fn, tensors, eps: float = 1e-6, rel_tol: float = 1e-4,
                               seed: int = 0):
    """Directional derivative vs <grad, v>, one random unit direction per tensor.

    Same contract as finite_difference_check: fn() reads `tensors` directly.
    """
    rng = np.random.default_rng(seed)
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    for idx, (t, g) in enumerate(zip(tensors, grads)):
        v = torch.from_numpy(rng.standard_normal(tuple(t.shape))).to(t.dtype)
        v = v / v.norm().clamp_min(1e-12)
        orig = t.detach().clone()
        with torch.no_grad():
            t.copy_(orig + eps * v)
            hi = fn().item()
            t.copy_(orig - eps * v)
            lo = fn().item()
            t.copy_(orig)
        fd = (hi - lo) / (2 * eps)
        analytic = (g * v).sum().item()
        denom = max(abs(fd), abs(analytic), 1e-6)
        rel = abs(fd - analytic) / denom
        worst = max(worst, rel)
        if rel > rel_tol:
            raise AssertionError(
                f"directional gradient mismatch on tensor {idx}: analytic={analytic:.8g} fd={fd:.8g} rel={rel:.3g}"
            )
    return worst
