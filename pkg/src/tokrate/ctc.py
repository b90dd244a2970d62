"""CTC loss (log-space forward algorithm), greedy decoding, and Viterbi
forced alignment over the blank-augmented lattice. Blank index is 0."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import AlignmentError, ShapeError

BLANK = 0
NEG_INF = float("-inf")


@dataclass
class LabelSequence:
    """Transcript labels over a closed vocabulary; no blanks, labels >= 1."""

    labels: list[int]
    vocab_size: int  # |V| + 1 including blank at 0

    def __post_init__(self):
        for l in self.labels:
            if not (1 <= l < self.vocab_size):
                raise ShapeError(f"label {l} outside [1, {self.vocab_size})")

    def __len__(self):
        return len(self.labels)


@dataclass
class AlignmentSegment:
    unit: int | str
    start: float
    end: float


def _expand(labels: list[int]) -> list[int]:
    """Blank-augmented state sequence: blank, l1, blank, l2, ..., blank."""
    out = [BLANK]
    for l in labels:
        out.extend([l, BLANK])
    return out


def min_frames(labels: list[int]) -> int:
    """Minimum number of frames needed to emit labels (extra frame per repeat)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_feasible(t: int, labels: list[int]) -> bool:
    return t >= min_frames(labels)


def ctc_loss(log_probs: torch.Tensor, target: LabelSequence) -> torch.Tensor:
    """-log P(target | log_probs) for one sequence; log_probs is T x (|V|+1).

    Infeasible targets yield +inf (detached), not an exception.
    """
    t_max, v = log_probs.shape
    if v != target.vocab_size:
        raise ShapeError(f"vocab mismatch: logits {v} vs target {target.vocab_size}")
    labels = target.labels
    if not ctc_feasible(t_max, labels):
        return torch.tensor(float("inf"), dtype=log_probs.dtype)
    states = _expand(labels)
    s = len(states)
    state_ids = torch.tensor(states, dtype=torch.long)
    # allow skip from s-2 when the states two apart differ (non-blank, non-repeat)
    skip_ok = torch.zeros(s, dtype=torch.bool)
    for i in range(2, s):
        skip_ok[i] = states[i] != BLANK and states[i] != states[i - 2]

    alpha = torch.full((s,), NEG_INF, dtype=log_probs.dtype)
    alpha[0] = log_probs[0, states[0]]
    if s > 1:
        alpha[1] = log_probs[0, states[1]]
    for t in range(1, t_max):
        stay = alpha
        prev1 = torch.cat([alpha.new_full((1,), NEG_INF), alpha[:-1]])[:s]
        prev2 = torch.cat([alpha.new_full((2,), NEG_INF), alpha[:-2]])[:s]
        prev2 = torch.where(skip_ok, prev2, torch.full_like(prev2, NEG_INF))
        alpha = torch.logsumexp(torch.stack([stay, prev1, prev2]), dim=0) \
            + log_probs[t, state_ids]
    total = torch.logsumexp(alpha[-2:], dim=0) if s > 1 else alpha[-1]
    return -total


def ctc_loss_batch(log_probs: torch.Tensor, lengths: list[int],
                   targets: list[LabelSequence]):
    """Mean CTC loss over feasible items; returns (loss, feasible mask)."""
    losses = []
    feas = []
    for b, target in enumerate(targets):
        lp = log_probs[b, : lengths[b]]
        l = ctc_loss(lp, target)
        ok = bool(torch.isfinite(l))
        feas.append(ok)
        if ok:
            losses.append(l / max(len(target), 1))
    if not losses:
        return torch.tensor(float("inf")), feas
    return torch.stack(losses).mean(), feas


def ctc_loss_batched(log_probs: torch.Tensor, lengths: list[int],
                     targets: list[LabelSequence]):
    """Vectorized batch CTC: mean per-label loss over feasible items.

    Matches ctc_loss item for item; exists so the training loop does one
    recursion over time for the whole batch. Returns (loss, feasible mask).
    """
    b, t_max, _ = log_probs.shape
    feas = [ctc_feasible(lengths[i], targets[i].labels) for i in range(b)]
    keep = [i for i in range(b) if feas[i]]
    if not keep:
        return torch.tensor(float("inf")), feas
    lp = log_probs[keep]
    lens = [lengths[i] for i in keep]
    tgts = [targets[i] for i in keep]
    n = len(keep)
    s_max = max(2 * len(t) + 1 for t in tgts)
    state_ids = torch.zeros(n, s_max, dtype=torch.long)
    valid = torch.zeros(n, s_max, dtype=torch.bool)
    skip_ok = torch.zeros(n, s_max, dtype=torch.bool)
    s_len = []
    for j, tgt in enumerate(tgts):
        states = _expand(tgt.labels)
        s = len(states)
        s_len.append(s)
        state_ids[j, :s] = torch.tensor(states)
        valid[j, :s] = True
        for i in range(2, s):
            skip_ok[j, i] = states[i] != BLANK and states[i] != states[i - 2]
    # Finite floor instead of -inf: logsumexp over an all--inf triple has a
    # nan gradient (0/0), which would poison every upstream parameter. At
    # -1e30 the exp underflows to exactly 0, so forward values are unchanged
    # while gradients stay finite.
    neg = torch.full((n, s_max), -1e30, dtype=lp.dtype)
    alpha = neg.clone()
    alpha[:, 0] = lp[:, 0, BLANK]
    alpha[torch.arange(n), 1] = lp[torch.arange(n), 0, state_ids[:, 1]]
    len_t = torch.tensor(lens)
    for t in range(1, t_max):
        prev1 = torch.cat([neg[:, :1], alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg[:, :2], alpha[:, :-2]], dim=1)
        prev2 = torch.where(skip_ok, prev2, neg)
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) \
            + lp[:, t].gather(1, state_ids)
        new = torch.where(valid, new, neg)
        active = (t < len_t)[:, None]
        alpha = torch.where(active, new, alpha)
    idx = torch.tensor(s_len)
    last = alpha.gather(1, (idx - 1)[:, None]).squeeze(1)
    prev = alpha.gather(1, (idx - 2)[:, None]).squeeze(1)
    totals = torch.logsumexp(torch.stack([last, prev]), dim=0)
    per_label = -totals / torch.tensor([max(len(t), 1) for t in tgts], dtype=lp.dtype)
    return per_label.mean(), feas


def ctc_greedy_decode(log_probs: torch.Tensor | np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.detach().cpu().numpy() if isinstance(log_probs, torch.Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=1)
    out = []
    prev = BLANK
    for b in best:
        if b != prev and b != BLANK:
            out.append(int(b))
        prev = b
    return out


def ctc_forced_align(log_probs: torch.Tensor | np.ndarray, target: LabelSequence,
                     frame_rate: float,
                     units: list[str] | None = None,
                     absorb_blanks: bool = False) -> list[AlignmentSegment]:
    """Viterbi max-probability alignment; segments in seconds at frame_rate.

    By default each label's segment spans its emission frames,
    [first_frame/rate, (last_frame+1)/rate). With absorb_blanks=True, blank
    frames join the preceding label's segment (leading blanks join the first
    label), so the segments tile [0, T/frame_rate) exactly.
    Viterbi ties are broken toward earlier emission (prefer advancing).
    """
    lp = log_probs.detach().cpu().numpy() if isinstance(log_probs, torch.Tensor) else np.asarray(log_probs, dtype=np.float64)
    t_max = lp.shape[0]
    labels = target.labels
    if not labels:
        return []
    if not ctc_feasible(t_max, labels):
        raise AlignmentError(
            f"target needs {min_frames(labels)} frames, only {t_max} available")
    states = _expand(labels)
    s = len(states)
    delta = np.full((t_max, s), NEG_INF)
    back = np.zeros((t_max, s), dtype=np.int64)
    delta[0, 0] = lp[0, states[0]]
    delta[0, 1] = lp[0, states[1]]
    back[0, :] = -1
    for t in range(1, t_max):
        for i in range(s):
            # candidates ordered so that on ties we keep the one that
            # advanced furthest (earlier emission of later labels)
            cands = [(delta[t - 1, i], i)]
            if i >= 1:
                cands.append((delta[t - 1, i - 1], i - 1))
            if i >= 2 and states[i] != BLANK and states[i] != states[i - 2]:
                cands.append((delta[t - 1, i - 2], i - 2))
            best_val, best_j = cands[0]
            for val, j in cands[1:]:
                if val > best_val:
                    best_val, best_j = val, j
            delta[t, i] = best_val + lp[t, states[i]]
            back[t, i] = best_j
    end_states = [s - 1, s - 2] if s > 1 else [s - 1]
    final = max(end_states, key=lambda i: (delta[t_max - 1, i], i))
    if not np.isfinite(delta[t_max - 1, final]):
        raise AlignmentError("no feasible alignment path")
    path = np.zeros(t_max, dtype=np.int64)
    path[t_max - 1] = final
    for t in range(t_max - 1, 0, -1):
        path[t - 1] = back[t, path[t]]

    if absorb_blanks:
        # every frame attributed to a label; blanks join the previous label,
        # leading blanks join the first
        occurrence = np.where(path % 2 == 1, path // 2, path // 2 - 1)
        occurrence = np.maximum(occurrence, 0)
        occurrence = np.minimum(occurrence, len(labels) - 1)
    else:
        occurrence = np.where(path % 2 == 1, path // 2, -1)
    segments = []
    for n, label in enumerate(labels):
        frames = np.nonzero(occurrence == n)[0]
        unit = units[n] if units is not None else label
        segments.append(AlignmentSegment(unit, frames[0] / frame_rate,
                                         (frames[-1] + 1) / frame_rate))
    return segments


def viterbi_path_logprob(log_probs: np.ndarray, target: LabelSequence) -> float:
    """Log-probability of the best alignment path (for oracle comparisons)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    states = _expand(target.labels)
    s = len(states)
    t_max = lp.shape[0]
    delta = np.full(s, NEG_INF)
    delta[0] = lp[0, states[0]]
    if s > 1:
        delta[1] = lp[0, states[1]]
    for t in range(1, t_max):
        new = np.full(s, NEG_INF)
        for i in range(s):
            best = delta[i]
            if i >= 1:
                best = max(best, delta[i - 1])
            if i >= 2 and states[i] != BLANK and states[i] != states[i - 2]:
                best = max(best, delta[i - 2])
            new[i] = best + lp[t, states[i]]
        delta = new
    return float(max(delta[-1], delta[-2] if s > 1 else NEG_INF))
