"""Vector quantizer: nearest-neighbor codebook lookup, straight-through
gradients, commitment loss, EMA codebook updates, k-means init, usage stats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InitError, ShapeError


@dataclass
class TokenSequence:
    indices: list[int]
    frame_rate: float

    def __len__(self):
        return len(self.indices)


@dataclass
class UsageReport:
    used: int
    total: int
    percent: float
    histogram: list[int]

    def to_dict(self):
        return {"used": self.used, "total": self.total,
                "percent": self.percent, "histogram": self.histogram}


class Codebook(nn.Module):
    """K x D embedding table with EMA statistics and inference hit counters."""

    def __init__(self, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.size = size
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.register_buffer("entries", torch.randn(size, dim) * 0.1)
        self.register_buffer("ema_counts", torch.zeros(size))
        self.register_buffer("ema_sums", torch.zeros(size, dim))
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))

    def quantize(self, h: torch.Tensor, count_usage: bool = True):
        """h: N x D -> (indices N, quantized N x D). Ties go to the lowest index.

        torch.argmin returns the first minimal index, matching the tie rule.
        """
        if h.shape[-1] != self.dim:
            raise ShapeError(f"expected dim {self.dim}, got {h.shape[-1]}")
        entries = self.entries.to(h.dtype)
        d2 = (h.detach() ** 2).sum(1, keepdim=True) - 2 * h.detach() @ entries.T \
            + (entries**2).sum(1)[None, :]
        indices = torch.argmin(d2, dim=1)
        quantized = entries[indices]
        if count_usage and indices.numel():
            self.usage_counts += torch.bincount(indices, minlength=self.size)
        return indices, quantized

    def ema_update(self, h: torch.Tensor, indices: torch.Tensor) -> None:
        """Exponential-moving-average codebook learning step."""
        with torch.no_grad():
            h = h.detach().to(self.ema_sums.dtype)
            hits = torch.bincount(indices, minlength=self.size).to(self.ema_counts.dtype)
            sums = torch.zeros_like(self.ema_sums)
            sums.index_add_(0, indices, h)
            self.ema_counts.mul_(self.decay).add_(hits, alpha=1 - self.decay)
            self.ema_sums.mul_(self.decay).add_(sums, alpha=1 - self.decay)
            self.entries.copy_(self.ema_sums / (self.ema_counts[:, None] + self.eps))

    def revive_dead(self, replacements: torch.Tensor, threshold: float = 1e-3,
                    seed: int = 0) -> int:
        """Re-seed entries whose EMA count fell below threshold.

        replacements: pool of encoder outputs (N x D). Returns number revived.
        """
        with torch.no_grad():
            dead = torch.nonzero(self.ema_counts < threshold).flatten()
            if dead.numel() == 0 or replacements.shape[0] == 0:
                return 0
            rng = np.random.default_rng(seed)
            picks = rng.integers(0, replacements.shape[0], size=dead.numel())
            chosen = replacements.detach()[torch.from_numpy(picks)].to(self.entries.dtype)
            self.entries[dead] = chosen
            self.ema_sums[dead] = chosen * (self.ema_counts[dead, None] + self.eps)
            return int(dead.numel())

    def usage_report(self) -> UsageReport:
        hist = self.usage_counts.tolist()
        used = int((self.usage_counts > 0).sum())
        return UsageReport(used, self.size, 100.0 * used / self.size, hist)

    def reset_usage(self) -> None:
        self.usage_counts.zero_()


def straight_through(h: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value = quantized; gradient w.r.t. h = identity."""
    if h.shape != quantized.shape:
        raise ShapeError(f"shape mismatch {tuple(h.shape)} vs {tuple(quantized.shape)}")
    return h + (quantized - h).detach()


def commitment_loss(h: torch.Tensor, quantized: torch.Tensor,
                    commit_weight: float) -> torch.Tensor:
    """commit_weight * mean ||h - stopgrad(quantized)||^2 (per element)."""
    if h.shape != quantized.shape:
        raise ShapeError(f"shape mismatch {tuple(h.shape)} vs {tuple(quantized.shape)}")
    return commit_weight * ((h - quantized.detach()) ** 2).mean()


def kmeans(samples: np.ndarray, k: int, iters: int = 10, seed: int = 0) -> np.ndarray:
    """k-means++ seeding plus Lloyd iterations; returns k x D centroids."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < k:
        raise InitError(f"k-means needs at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, samples.shape[1]))
    centroids[0] = samples[rng.integers(n)]
    d2 = ((samples - centroids[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = samples[rng.integers(n)]
        else:
            centroids[i] = samples[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((samples - centroids[i]) ** 2).sum(1))
    for _ in range(iters):
        dist = ((samples[:, None, :] - centroids[None, :, :]) ** 2).sum(2) \
            if n * k <= 2_000_000 else None
        if dist is None:
            dist = (samples**2).sum(1)[:, None] - 2 * samples @ centroids.T + (centroids**2).sum(1)[None]
        assign = dist.argmin(1)
        for j in range(k):
            mask = assign == j
            if mask.any():
                centroids[j] = samples[mask].mean(0)
    return centroids


def kmeans_inertia(samples: np.ndarray, centroids: np.ndarray) -> float:
    d2 = (samples**2).sum(1)[:, None] - 2 * samples @ centroids.T + (centroids**2).sum(1)[None]
    return float(d2.min(1).sum())


def kmeans_init(cb: Codebook, samples: np.ndarray, iters: int = 10, seed: int = 0) -> Codebook:
    """Initialize codebook entries to k-means centroids of encoder outputs."""
    centroids = kmeans(samples, cb.size, iters=iters, seed=seed)
    with torch.no_grad():
        cb.entries.copy_(torch.from_numpy(centroids).to(cb.entries.dtype))
        cb.ema_counts.fill_(1.0)
        cb.ema_sums.copy_(cb.entries * (1.0 + cb.eps))
    return cb
