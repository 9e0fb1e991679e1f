"""Optimization loop: Adam, LR halving schedule, early stopping, WER/PER eval.

The trainer is model-agnostic. It drives any object exposing
``parameters()``, ``forward_loss(batch, rng)``, ``decode_words(utts)``,
``decode_phones(utts)`` and the two capability flags ``has_phone_head`` /
``eval_phone_metrics``; the multitask module supplies such models. Keeping
the dependency one-way (models import the trainer, never the reverse) lets
the schedule and metric code be tested on stubs.

Metrics logs are deterministic byte-for-byte for a fixed seed: wall-clock
timings go to a separate sidecar file, never into the metrics log itself.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as datamod
from . import numeric
from .util import substream


class CapabilityError(RuntimeError):
    """The model lacks the head a metric or command requires."""


class NonFiniteGradientError(RuntimeError):
    """A gradient went non-finite; names the parameter and the batch."""


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # updates before the schedule may reduce lr; 25000 reproduces the
    # published regime, desk runs use far less
    warm_updates: int = 25000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def slot(self, p: numeric.Parameter) -> tuple[np.ndarray, np.ndarray]:
        if p.name not in self.m:
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)
        return self.m[p.name], self.v[p.name]


def adam_step(
    params: Sequence[numeric.Parameter],
    state: AdamState,
    cfg: AdamConfig,
    lr: float,
    batch_id: str = "",
) -> None:
    """One in-place Adam update with bias correction at the given lr.

    Parameters with no gradient this step decay their moments toward zero
    and stay put, which is exactly what a dead loss side needs.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for {p.name!r} on batch {batch_id!r}"
            )
        m, v = state.slot(p)
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class ScheduleConfig:
    checkpoint_interval: int = 500  # updates between dev evaluations
    patience: int = 10  # consecutive non-improving checkpoints before stopping
    window: int = 3  # previous checkpoints consulted for the halving rule
    max_checkpoints: int | None = None  # hard cap for budgeted desk runs

    def __post_init__(self):
        if self.checkpoint_interval < 1 or self.patience < 1 or self.window < 1:
            raise ValueError("schedule intervals must be positive")


@dataclass
class ScheduleState:
    lr: float
    history: list[float] = field(default_factory=list)
    best_score: float = float("inf")
    best_index: int = -1  # checkpoint index of the best score
    bad_streak: int = 0

    def record(self, score: float) -> None:
        self.history.append(score)
        if score < self.best_score:
            self.best_score = score
            self.best_index = len(self.history) - 1
            self.bad_streak = 0
        else:
            self.bad_streak += 1


def lr_update(state: ScheduleState, cfg: ScheduleConfig, adam: AdamConfig, update_count: int) -> None:
    """Halve lr when the newest dev score is worse than all of the previous
    ``window`` checkpoints. Frozen during the warm period; at most one
    halving per checkpoint."""
    if update_count <= adam.warm_updates:
        return
    if len(state.history) < cfg.window + 1:
        return
    current = state.history[-1]
    previous = state.history[-1 - cfg.window : -1]
    if current > max(previous):
        state.lr /= 2.0


def should_stop(state: ScheduleState, cfg: ScheduleConfig) -> bool:
    return state.bad_streak >= cfg.patience


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(ref) == 0:
        return len(hyp)
    if len(hyp) == 0:
        return len(ref)
    prev = np.arange(len(hyp) + 1)
    cur = np.empty_like(prev)
    for i, r in enumerate(ref, start=1):
        cur[0] = i
        for j, h in enumerate(hyp, start=1):
            sub = prev[j - 1] + (r != h)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev, cur = cur, prev
    return int(prev[len(hyp)])


def error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus-level error rate: total edit distance over total reference
    length, as a percentage."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("empty reference corpus")
    total_edit = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return 100.0 * total_edit / total_ref


def _batched(utterances: Sequence[datamod.Utterance], size: int):
    for start in range(0, len(utterances), size):
        yield utterances[start : start + size]


def evaluate(
    model,
    utterances: Sequence[datamod.Utterance],
    level: str = "word",
    batch_size: int = 64,
) -> float:
    """Greedy-decoding corpus error rate, %. ``level`` is word or phone.

    Order-invariant: the corpus totals do not depend on utterance order or
    batch boundaries.
    """
    if level not in ("word", "phone"):
        raise ValueError(f"unknown eval level {level!r}")
    if level == "phone" and not model.has_phone_head:
        raise CapabilityError("model has no phone head, cannot compute PER")
    if level == "word" and not model.has_subword_head:
        raise CapabilityError("model has no subword head, cannot compute WER")
    refs, hyps = [], []
    with numeric.no_grad():
        for chunk in _batched(utterances, batch_size):
            if level == "word":
                refs.extend(list(u.transcript) for u in chunk)
                hyps.extend(model.decode_words(chunk))
            else:
                refs.extend(list(u.phone_ids) for u in chunk)
                hyps.extend(model.decode_phones(chunk))
    return error_rate(refs, hyps)


# Checkpoints are a parameter container plus a JSON sidecar holding the
# schedule position. Optimizer moments are deliberately not persisted:
# the fidelity contract is about evaluation, which depends on parameters
# alone.
def save_checkpoint(path, model, state: ScheduleState, update_count: int, select_by: str) -> None:
    numeric.save_parameters(path, model.parameters())
    sidecar = {
        "update_count": update_count,
        "lr": state.lr,
        "history": state.history,
        "best_score": state.best_score,
        "best_index": state.best_index,
        "bad_streak": state.bad_streak,
        "select_by": select_by,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, model) -> dict:
    numeric.assign_parameters(model.parameters(), numeric.load_parameters(path))
    with open(str(path) + ".json", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class TrainResult:
    status: str  # converged | stopped_early | max_checkpoints | did_not_converge
    best_score: float
    best_update: int
    select_by: str
    metrics: list[dict]
    updates_run: int


class _MetricsLog:
    """JSONL metrics plus an optional wall-clock sidecar.

    Seconds never enter the main log so that two runs with the same seed
    produce byte-identical metrics files.
    """

    def __init__(self, path=None, timing_path=None):
        self.rows: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._timing = open(timing_path, "w", encoding="utf-8") if timing_path else None
        self._t0 = time.monotonic()

    def emit(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()
        if self._timing is not None:
            stamp = {"update_count": row.get("update_count"), "seconds": time.monotonic() - self._t0}
            self._timing.write(json.dumps(stamp, sort_keys=True) + "\n")
            self._timing.flush()

    def close(self):
        if self._fh:
            self._fh.close()
        if self._timing:
            self._timing.close()


def run_training(
    model,
    prepared: datamod.PreparedData,
    adam_cfg: AdamConfig,
    sched_cfg: ScheduleConfig,
    seed: int,
    select_by: str = "wer",
    metrics_path=None,
    timing_path=None,
    checkpoint_path=None,
    max_epochs: int = 10_000,
    stream: str = "train",
) -> TrainResult:
    """Train until early stop, the checkpoint cap, or divergence.

    Selection metric: dev WER, or dev PER for phone-only pretraining. The
    model is left holding the best checkpoint's parameters. On divergence
    the run ends with status did_not_converge instead of raising, keeping
    the last good parameters. ``stream`` namespaces the shuffle/dropout
    random streams so a pretraining phase and its main phase stay decoupled
    under one seed.
    """
    if select_by not in ("wer", "per"):
        raise ValueError(f"select_by must be wer or per, got {select_by!r}")
    if select_by == "per" and not model.has_phone_head:
        raise CapabilityError("per-selection needs a phone head")
    if select_by == "wer" and not model.has_subword_head:
        raise CapabilityError("wer-selection needs a subword head")

    shuffle_rng = substream(seed, f"{stream}/shuffle")
    dropout_rng = substream(seed, f"{stream}/dropout")
    params = model.parameters()
    adam_state = AdamState()
    state = ScheduleState(lr=adam_cfg.lr)
    log = _MetricsLog(metrics_path, timing_path)

    best_params: dict[str, np.ndarray] = {p.name: p.data.copy() for p in params}
    best_update = 0
    update_count = 0
    status = "converged"
    loss_sums: dict[str, float] = {}
    loss_batches = 0

    def dev_score() -> dict:
        row: dict = {"dev_wer": None, "dev_per": None}
        if model.has_subword_head:
            row["dev_wer"] = evaluate(model, prepared.dev, "word")
        if model.eval_phone_metrics:
            row["dev_per"] = evaluate(model, prepared.dev, "phone")
        return row

    try:
        done = False
        for _ in range(max_epochs):
            if done:
                break
            batches = datamod.epoch_batches(
                prepared.train, prepared.plan, prepared.assignment, shuffle_rng
            )
            for batch in batches:
                loss, parts = model.forward_loss(batch, dropout_rng)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at update {update_count + 1}")
                loss.backward()
                adam_step(params, adam_state, adam_cfg, state.lr, batch_id=str(update_count + 1))
                numeric.zero_grads(params)
                update_count += 1
                for k, v in parts.items():
                    loss_sums[k] = loss_sums.get(k, 0.0) + v
                loss_batches += 1

                if update_count % sched_cfg.checkpoint_interval != 0:
                    continue
                scores = dev_score()
                score = scores["dev_wer"] if select_by == "wer" else scores["dev_per"]
                state.record(score)
                lr_update(state, sched_cfg, adam_cfg, update_count)
                row = {
                    "update_count": update_count,
                    "lr": state.lr,
                    "train_loss": {k: v / loss_batches for k, v in sorted(loss_sums.items())},
                }
                row.update(scores)
                log.emit(row)
                loss_sums, loss_batches = {}, 0
                if state.best_index == len(state.history) - 1:
                    best_params = {p.name: p.data.copy() for p in params}
                    best_update = update_count
                    if checkpoint_path is not None:
                        save_checkpoint(checkpoint_path, model, state, update_count, select_by)
                if should_stop(state, sched_cfg):
                    status = "stopped_early"
                    done = True
                    break
                if sched_cfg.max_checkpoints is not None and len(state.history) >= sched_cfg.max_checkpoints:
                    status = "max_checkpoints"
                    done = True
                    break
    except (FloatingPointError, NonFiniteGradientError) as err:
        status = "did_not_converge"
        log.emit({"update_count": update_count, "error": str(err)})

    for p in params:
        p.data[...] = best_params[p.name]
    log.emit(
        {
            "event": "end",
            "status": status,
            "best_update": best_update,
            "best_score": state.best_score if np.isfinite(state.best_score) else None,
            "select_by": select_by,
        }
    )
    log.close()
    return TrainResult(
        status=status,
        best_score=state.best_score,
        best_update=best_update,
        select_by=select_by,
        metrics=log.rows,
        updates_run=update_count,
    )
