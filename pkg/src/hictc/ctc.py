"""Connectionist temporal classification: loss, gradient, and decoding.

A label sequence z over classes 1..C-1 (0 is reserved for blank) is scored
against per-frame class log-probabilities by summing over every frame-level
path that collapses to z, where collapsing merges consecutive repeats and
then removes blanks. The sum runs over the blank-extended state sequence
(blank, z1, blank, z2, ..., blank) with the usual three transitions: stay,
advance by one, and skip a blank when the two labels it separates differ.

Everything is computed in log space with -inf as the "no path" sentinel.
The core lattice is batched (states padded to the widest utterance) because
the training loop calls it on whole buckets; the per-utterance functions are
thin wrappers around the same code. ``brute_force_log_likelihood`` is an
independent oracle that enumerates all C**T paths and must stay that way.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from . import numeric as nm

BLANK = 0

_NEG = -np.inf


class CtcInputError(ValueError):
    """Log-probabilities or labels violate the input contract."""


class AlignmentInfeasibleError(ValueError):
    """No frame-level path of the given length collapses to the labels."""


@dataclass
class CtcResult:
    log_likelihood: float
    grad_logits: np.ndarray


def collapse(path: Sequence[int]) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        if p != prev:
            if p != BLANK:
                out.append(int(p))
            prev = p
    return out


def extend_with_blanks(z: Sequence[int]) -> list[int]:
    """Interleave blanks around every label: length 2*len(z) + 1."""
    out = [BLANK]
    for label in z:
        out.append(int(label))
        out.append(BLANK)
    return out


def min_frames(z: Sequence[int]) -> int:
    """Fewest frames any path collapsing to z can occupy."""
    repeats = sum(1 for a, b in zip(z, z[1:]) if a == b)
    return len(z) + repeats


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Elementwise log(exp(a)+exp(b)+exp(c)) that short-circuits -inf inputs."""
    m = np.maximum(np.maximum(a, b), c)
    finite = m > _NEG
    safe_m = np.where(finite, m, 0.0)
    total = (
        np.exp(np.where(finite, a - safe_m, _NEG))
        + np.exp(np.where(finite, b - safe_m, _NEG))
        + np.exp(np.where(finite, c - safe_m, _NEG))
    )
    with np.errstate(divide="ignore"):
        return np.where(finite, safe_m + np.log(total), _NEG)


def _logsumexp2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = np.maximum(a, b)
    finite = m > _NEG
    safe_m = np.where(finite, m, 0.0)
    total = np.exp(np.where(finite, a - safe_m, _NEG)) + np.exp(np.where(finite, b - safe_m, _NEG))
    with np.errstate(divide="ignore"):
        return np.where(finite, safe_m + np.log(total), _NEG)


def _shift_right(x: np.ndarray, by: int) -> np.ndarray:
    pad = np.full(x.shape[:-1] + (by,), _NEG)
    return np.concatenate([pad, x[..., :-by]], axis=-1)


def _shift_left(x: np.ndarray, by: int) -> np.ndarray:
    pad = np.full(x.shape[:-1] + (by,), _NEG)
    return np.concatenate([x[..., by:], pad], axis=-1)


def _validate_labels(z: Sequence[int], num_classes: int) -> None:
    for label in z:
        if not 1 <= int(label) < num_classes:
            raise CtcInputError(f"label id {label} outside [1, {num_classes - 1}]")


class _Lattice:
    """Batched forward/backward state for a set of label sequences."""

    def __init__(self, labels: Sequence[Sequence[int]], num_classes: int):
        batch = len(labels)
        for z in labels:
            _validate_labels(z, num_classes)
        self.num_classes = num_classes
        self.state_len = np.array([2 * len(z) + 1 for z in labels], dtype=np.int64)
        width = int(self.state_len.max())
        ext = np.zeros((batch, width), dtype=np.int64)
        for b, z in enumerate(labels):
            ext[b, 1 : 2 * len(z) + 1 : 2] = np.asarray(z, dtype=np.int64)
        self.ext = ext
        cols = np.arange(width)
        self.valid = cols[None, :] < self.state_len[:, None]
        skip = np.zeros((batch, width), dtype=bool)
        skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
        self.skip = skip & self.valid

    def emissions(self, log_probs: np.ndarray) -> np.ndarray:
        # em[t, b, s] = log_probs[t, b, ext[b, s]]
        batch = self.ext.shape[0]
        return log_probs[:, np.arange(batch)[:, None], self.ext]

    def forward(self, em: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        frames, batch, width = em.shape
        alpha = np.full((frames, batch, width), _NEG)
        alpha[0, :, 0] = em[0, :, 0]
        has_second = self.state_len > 1
        alpha[0, has_second, 1] = em[0, has_second, 1]
        for t in range(1, frames):
            prev = alpha[t - 1]
            stay = prev
            step = _shift_right(prev, 1)
            skip = np.where(self.skip, _shift_right(prev, 2), _NEG)
            nxt = _logsumexp3(stay, step, skip) + em[t]
            nxt = np.where(self.valid, nxt, _NEG)
            # freeze rows whose utterance already ended so the last frame
            # of every row holds its own final column
            active = (t < lengths)[:, None]
            alpha[t] = np.where(active, nxt, prev)
        last = alpha[frames - 1]
        rows = np.arange(batch)
        final = last[rows, self.state_len - 1]
        second = np.where(
            self.state_len >= 2, last[rows, np.maximum(self.state_len - 2, 0)], _NEG
        )
        return alpha, _logsumexp2(final, second)

    def backward(self, em: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        frames, batch, width = em.shape
        beta = np.full((frames, batch, width), _NEG)
        rows = np.arange(batch)
        terminal = np.full((batch, width), _NEG)
        terminal[rows, self.state_len - 1] = 0.0
        terminal[rows, np.maximum(self.state_len - 2, 0)] = 0.0
        for t in range(frames - 1, -1, -1):
            at_end = t == lengths - 1
            if t + 1 < frames:
                nxt = beta[t + 1] + em[t + 1]
                stay = nxt
                step = _shift_left(nxt, 1)
                # a state may jump to s+2 only when the destination allows skips
                skip = np.where(_shift_left_bool(self.skip, 2), _shift_left(nxt, 2), _NEG)
                rec = _logsumexp3(stay, step, skip)
                rec = np.where(self.valid, rec, _NEG)
            else:
                rec = np.full((batch, width), _NEG)
            running = t < lengths - 1
            beta[t] = np.where(
                at_end[:, None], terminal, np.where(running[:, None], rec, _NEG)
            )
        return beta

    def posteriors(
        self, alpha: np.ndarray, beta: np.ndarray, log_like: np.ndarray, lengths: np.ndarray
    ) -> np.ndarray:
        """Per-frame class occupancy gamma, zero outside each utterance."""
        frames, batch, width = alpha.shape
        joint = alpha + beta
        with np.errstate(invalid="ignore"):
            gam = np.exp(joint - log_like[None, :, None])
        time_ok = np.arange(frames)[:, None] < lengths[None, :]
        gam = np.where(time_ok[:, :, None] & self.valid[None, :, :], gam, 0.0)
        t_idx, b_idx = np.meshgrid(np.arange(frames), np.arange(batch), indexing="ij")
        flat = (
            t_idx[:, :, None] * (batch * self.num_classes)
            + b_idx[:, :, None] * self.num_classes
            + self.ext[None, :, :]
        )
        out = np.bincount(
            flat.ravel(), weights=gam.ravel(), minlength=frames * batch * self.num_classes
        )
        return out.reshape(frames, batch, self.num_classes)


def _shift_left_bool(x: np.ndarray, by: int) -> np.ndarray:
    pad = np.zeros(x.shape[:-1] + (by,), dtype=bool)
    return np.concatenate([x[..., by:], pad], axis=-1)


def _batch_forward(
    log_probs: np.ndarray,
    lengths: np.ndarray,
    labels: Sequence[Sequence[int]],
    want_grad: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Log-likelihood per utterance and, optionally, class posteriors."""
    lattice = _Lattice(labels, log_probs.shape[-1])
    em = lattice.emissions(log_probs)
    alpha, log_like = lattice.forward(em, lengths)
    if not want_grad:
        return log_like, None
    beta = lattice.backward(em, lengths)
    gamma = lattice.posteriors(alpha, beta, log_like, lengths)
    return log_like, gamma


def _check_normalized(log_probs: np.ndarray) -> None:
    sums = np.logaddexp.reduce(log_probs, axis=-1)
    worst = np.abs(sums).max() if sums.size else 0.0
    if worst > 1e-6:
        raise CtcInputError(f"log-probability rows are not normalized (|logsumexp| = {worst:.3g})")


def ctc_log_likelihood(log_probs: np.ndarray, z: Sequence[int]) -> float:
    """log p(z | x) for one utterance; -inf when z is infeasible at this length.

    ``log_probs`` is [T, C] with log-normalized rows (checked to 1e-6).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise CtcInputError(f"expected [T, C] log-probabilities, got shape {lp.shape}")
    _check_normalized(lp)
    if len(z) == 0:
        # only the all-blank path survives collapsing to the empty sequence
        return float(lp[:, BLANK].sum())
    lengths = np.array([lp.shape[0]], dtype=np.int64)
    log_like, _ = _batch_forward(lp[:, None, :], lengths, [list(z)], want_grad=False)
    return float(log_like[0])


def ctc_grad(logits: np.ndarray, z: Sequence[int]) -> CtcResult:
    """Loss -log p(z | x) and its gradient with respect to pre-softmax logits.

    The gradient is softmax(logits) - gamma, where gamma is the per-frame
    class occupancy; each row therefore sums to zero.
    """
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim != 2 or lg.shape[0] < 1:
        raise CtcInputError(f"expected [T, C] logits, got shape {lg.shape}")
    if not np.isfinite(lg).all():
        raise FloatingPointError("non-finite logits")
    if len(z) == 0:
        raise CtcInputError("empty label sequence")
    lp = nm._log_softmax_np(lg)
    lengths = np.array([lg.shape[0]], dtype=np.int64)
    log_like, gamma = _batch_forward(lp[:, None, :], lengths, [list(z)], want_grad=True)
    ll = float(log_like[0])
    if ll == _NEG:
        raise AlignmentInfeasibleError(
            f"labels of length {len(z)} (min {min_frames(z)} frames) cannot align to {lg.shape[0]} frames"
        )
    grad = np.exp(lp) - gamma[:, 0, :]
    return CtcResult(log_likelihood=ll, grad_logits=grad)


def brute_force_log_likelihood(log_probs: np.ndarray, z: Sequence[int]) -> float:
    """Oracle: enumerate every path, keep those collapsing to z, sum in log space.

    Refuses instances beyond C**T = 10**6 paths. Independent of the lattice
    code on purpose; keep it that way.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    frames, classes = lp.shape
    if classes**frames > 10**6:
        raise ValueError(f"{classes}**{frames} paths exceed the enumeration guard")
    target = [int(v) for v in z]
    total = _NEG
    for path in product(range(classes), repeat=frames):
        if collapse(path) != target:
            continue
        score = sum(lp[t, k] for t, k in enumerate(path))
        total = np.logaddexp(total, score)
    return float(total)


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Collapse the frame-wise argmax path (ties resolve to the lowest id)."""
    ids = np.asarray(log_probs).argmax(axis=-1)
    return collapse(ids.tolist())


def greedy_path(log_probs: np.ndarray) -> list[int]:
    """Frame-wise argmax ids without collapsing (for alignment dumps)."""
    return np.asarray(log_probs).argmax(axis=-1).tolist()


def ctc_loss_node(
    logits: nm.Tensor,
    lengths: np.ndarray,
    labels: Sequence[Sequence[int]],
    head: str = "ctc",
    utt_ids: Sequence[str] | None = None,
) -> nm.Tensor:
    """Tape node: per-utterance -log p(z | x) over a padded batch.

    ``logits`` is [T, B, C]; rows past each utterance's length are ignored
    and receive zero gradient. Raises when any utterance's labels cannot
    align, naming the head and the utterance.
    """
    data = logits.data
    if data.ndim != 3:
        raise CtcInputError(f"expected [T, B, C] logits, got shape {data.shape}")
    if not np.isfinite(data).all():
        # numerical divergence, not a data problem; the trainer maps this
        # to a did-not-converge status instead of skipping utterances
        raise FloatingPointError("non-finite logits in CTC batch")
    frames, batch, classes = data.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,) or lengths.min() < 1 or lengths.max() > frames:
        raise CtcInputError("lengths must lie in [1, T] and match the batch")
    if len(labels) != batch:
        raise CtcInputError("one label sequence per batch row required")
    for b, z in enumerate(labels):
        if len(z) == 0:
            raise CtcInputError(f"empty label sequence at batch row {b}")
        if min_frames(z) > lengths[b]:
            who = utt_ids[b] if utt_ids else f"row {b}"
            raise AlignmentInfeasibleError(
                f"{head}: utterance {who} needs {min_frames(z)} frames, has {int(lengths[b])}"
            )

    flat = data.reshape(frames * batch, classes)
    lp = nm._log_softmax_np(flat).reshape(frames, batch, classes)
    log_like, gamma = _batch_forward(lp, lengths, labels, want_grad=nm.grad_enabled())
    bad = np.nonzero(~np.isfinite(log_like))[0]
    if bad.size:
        b = int(bad[0])
        who = utt_ids[b] if utt_ids else f"row {b}"
        raise AlignmentInfeasibleError(f"{head}: no feasible alignment for utterance {who}")

    if gamma is None:
        return nm.Tensor(-log_like)

    time_ok = (np.arange(frames)[:, None] < lengths[None, :]).astype(np.float64)
    base = (np.exp(lp) - gamma) * time_ok[:, :, None]

    def vjp(g):
        return (base * g[None, :, None],)

    return nm.Tensor(-log_like, (logits,), vjp)
