"""CTC, attention cross-entropy, the hybrid objective, and downstream losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .models import TaskKind
from .tensor import Tensor, _result

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """The label cannot be aligned to the available frames."""


@dataclass(frozen=True)
class LossConfig:
    ctc_weight: float = 0.5          # hybrid weight on the CTC term
    reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"hybrid weight {self.ctc_weight} outside [0, 1]")


def ctc_min_frames(labels: Sequence[int]) -> int:
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _ctc_batch(lp: np.ndarray, lengths: np.ndarray, labels: Sequence[Sequence[int]], blank: int):
    """Negative log-likelihoods and their gradients w.r.t. ``lp`` (B, T, C).

    Log-space forward-backward; alpha includes the emission at t, beta excludes it.
    """
    B, Tmax, C = lp.shape
    Ls = [len(l) for l in labels]
    S = 2 * max(max(Ls), 1) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)            # may jump from s-2 to s
    for b, lab in enumerate(labels):
        lab = list(lab)
        ext[b, 1:2 * len(lab):2] = lab
        for s in range(3, 2 * len(lab), 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    Sb = np.array([2 * L + 1 for L in Ls])
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, Tmax, S)), axis=2)  # B, T, S
    alpha = np.full((B, Tmax, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = np.where(np.array(Ls) > 0, emit[:, 0, 1], NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(1, Tmax):
            prev = alpha[:, t - 1]
            a = prev.copy()
            a[:, 1:] = np.logaddexp(a[:, 1:], prev[:, :-1])
            a[:, 2:] = np.where(skip[:, 2:], np.logaddexp(a[:, 2:], prev[:, :-2]), a[:, 2:])
            alpha[:, t] = a + emit[:, t]
        last = np.asarray(lengths) - 1
        aT = alpha[np.arange(B), last]                                   # B, S
        end1 = aT[np.arange(B), Sb - 1]
        end2 = np.where(Sb >= 2, aT[np.arange(B), np.maximum(Sb - 2, 0)], NEG_INF)
        logp = np.logaddexp(end1, end2)
        beta = np.full((B, Tmax, S), NEG_INF)
        for t in range(Tmax - 1, -1, -1):
            if t < Tmax - 1:
                nxt = beta[:, t + 1] + emit[:, t + 1]
                bt = nxt.copy()
                bt[:, :-1] = np.logaddexp(bt[:, :-1], nxt[:, 1:])
                bt[:, :-2] = np.where(skip[:, 2:], np.logaddexp(bt[:, :-2], nxt[:, 2:]), bt[:, :-2])
                beta[:, t] = bt
            start = np.nonzero(last == t)[0]
            if start.size:
                beta[start, t] = NEG_INF
                beta[start, t, Sb[start] - 1] = 0.0
                beta[start, t, Sb[start] - 2] = 0.0
        gamma = np.exp(alpha + beta - logp[:, None, None])              # B, T, S
    gamma = np.nan_to_num(gamma, nan=0.0)
    grad = np.zeros_like(lp)
    bi = np.broadcast_to(np.arange(B)[:, None, None], gamma.shape)
    ti = np.broadcast_to(np.arange(Tmax)[None, :, None], gamma.shape)
    np.add.at(grad, (bi, ti, np.broadcast_to(ext[:, None, :], gamma.shape)), -gamma)
    valid = (np.arange(Tmax)[None, :] < np.asarray(lengths)[:, None])[..., None]
    return -logp, grad * valid


def ctc_loss_batch(log_probs: Tensor, lengths: np.ndarray, labels: Sequence[Sequence[int]],
                   blank: int | None = None) -> Tensor:
    """Mean CTC loss over a padded batch ``(B, T, A+1)`` of log-softmax outputs."""
    B, Tmax, C = log_probs.shape
    blank = C - 1 if blank is None else blank
    lengths = np.asarray(lengths)
    for b, lab in enumerate(labels):
        need = ctc_min_frames(lab)
        if len(lab) == 0:
            raise CtcInfeasibleError(f"sequence {b}: empty label")
        if lengths[b] < need:
            raise CtcInfeasibleError(
                f"sequence {b}: label of length {len(lab)} needs {need} frames, only {lengths[b]} available")
    nll, grad = _ctc_batch(log_probs.data.astype(np.float64), lengths, labels, blank)
    if not np.isfinite(nll).all():
        raise CtcInfeasibleError("no valid alignment (all paths have zero probability)")
    grad = (grad / B).astype(log_probs.dtype)
    return _result(np.asarray(nll.mean(), dtype=log_probs.dtype), (log_probs,), lambda g: (g * grad,))


def ctc_loss(log_probs: Tensor, labels: Sequence[int], blank: int | None = None) -> Tensor:
    """CTC negative log-likelihood for one ``(T, A+1)`` log-prob matrix."""
    lp = log_probs.reshape(1, *log_probs.shape)
    return ctc_loss_batch(lp, np.array([log_probs.shape[0]]), [list(labels)], blank)


def attention_ce(logits: Tensor, labels: np.ndarray, label_lengths: np.ndarray | None = None) -> Tensor:
    """Mean per-step cross-entropy; batched input is averaged per sequence, then over the batch."""
    labels = np.asarray(labels)
    if logits.ndim == 2:
        if logits.shape[0] != labels.shape[0]:
            raise ValueError(f"{logits.shape[0]} decode steps but {labels.shape[0]} labels")
        logits = logits.reshape(1, *logits.shape)
        labels = labels[None]
    B, L, A = logits.shape
    if labels.shape != (B, L):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    lengths = np.full(B, L) if label_lengths is None else np.asarray(label_lengths)
    logp = T.log_softmax(logits, axis=-1)
    bi = np.broadcast_to(np.arange(B)[:, None], (B, L))
    li = np.broadcast_to(np.arange(L)[None, :], (B, L))
    picked = logp[bi, li, np.clip(labels, 0, A - 1)]                     # B, L
    weights = (np.arange(L)[None, :] < lengths[:, None]) / (lengths[:, None] * B)
    return -(picked * Tensor(weights.astype(logits.dtype))).sum()


def hybrid_loss(ctc, att, weight: float):
    """weight * ctc + (1 - weight) * att."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"hybrid weight {weight} outside [0, 1]")
    if weight == 1.0:
        return ctc
    if weight == 0.0:
        return att
    return ctc * weight + att * (1.0 - weight)


def downstream_loss(prediction: Tensor, target, task: TaskKind) -> Tensor:
    """Mean logistic cross-entropy on logits, or mean squared error."""
    y = np.asarray(target, dtype=prediction.dtype).reshape(prediction.shape)
    task = TaskKind(task)
    if task is TaskKind.CLASSIFICATION:
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("classification targets must be 0 or 1")
        return (T.softplus(prediction) - prediction * Tensor(y)).mean()
    if (y < 0).any() or (y > 24).any():
        raise ValueError("regression targets must lie in [0, 24]")
    diff = prediction - Tensor(y)
    return (diff * diff).mean()
