"""Loss interpolation, auxiliary phone head placement, and training regimes.

The model couples a subword CTC head on the top encoder layer with an
optional phone CTC head on an intermediate layer. The training loss is the
convex combination

    L = lam * L_subword + (1 - lam) * L_phone

with each term a per-utterance negative log-likelihood averaged over the
batch, so lam means the same thing at any batch size. A side whose weight
is exactly zero is skipped entirely, never evaluated: a lam=1 multitask run
is the baseline run, reproducible byte for byte.

Regimes:
  baseline            subword head only, lam fixed at 1
  multitask           both heads trained jointly at the given lam
  pretrain            phase one trains a truncated encoder with the phone
                      loss alone (selection by dev PER), then the full model
                      trains from those weights with lam=1, no phone head
  pretrain_multitask  same phase one, then joint training; the phone head
                      carries over, the subword head is always fresh
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import ctc
from . import data as datamod
from . import numeric as nm
from . import tokenizer as tok
from . import train as trainmod
from .encoder import (
    EncoderConfig,
    LayerTaps,
    LstmLayerParams,
    encoder_forward,
    encoder_forward_paired,
    encoder_parameters,
    init_encoder,
)
from .util import substream

REGIMES = ("baseline", "multitask", "pretrain", "pretrain_multitask")


class RegimeError(ValueError):
    """The regime/lambda/layer combination is not a legal configuration."""


class CompatibilityError(ValueError):
    """A pretraining checkpoint does not fit the requested model."""


@dataclass(frozen=True)
class MultitaskSpec:
    regime: str = "multitask"
    lam: float = 0.5  # weight on the subword loss
    aux_layer: int = 3  # encoder layer feeding the phone head

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise RegimeError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if not 0.0 <= self.lam <= 1.0:
            raise RegimeError(f"lam must lie in [0, 1], got {self.lam}")
        if self.regime == "baseline" and self.lam != 1.0:
            raise RegimeError("baseline fixes lam at 1")
        if self.regime == "pretrain" and self.lam != 1.0:
            raise RegimeError("the pretrain regime trains its main phase at lam=1")
        if self.aux_layer < 1:
            raise RegimeError(f"aux_layer must be at least 1, got {self.aux_layer}")

    @property
    def uses_phone_head(self) -> bool:
        return self.regime in ("multitask", "pretrain_multitask")


@dataclass
class HeadParams:
    """Linear projection from a tap to per-frame logits (blank included)."""

    w: nm.Parameter  # [tap_width, classes]
    b: nm.Parameter  # [classes]

    def parameters(self) -> list[nm.Parameter]:
        return [self.w, self.b]

    @property
    def num_classes(self) -> int:
        return self.w.data.shape[1]


def make_head(kind: str, in_width: int, num_classes: int, seed: int) -> HeadParams:
    if num_classes < 2:
        raise RegimeError(f"{kind} head needs at least blank plus one label")
    name = f"head.{kind}"
    rng = substream(seed, f"init/{name}.w")
    w = nm.Parameter(f"{name}.w", rng.uniform(-0.05, 0.05, size=(in_width, num_classes)))
    b = nm.Parameter(f"{name}.b", np.zeros(num_classes))
    return HeadParams(w=w, b=b)


def apply_head(tap: nm.Tensor, head: HeadParams) -> nm.Tensor:
    """[T, B, H] tap -> [T, B, C] logits."""
    frames, batch, width = tap.shape
    flat = nm.reshape(tap, (frames * batch, width))
    logits = nm.add(nm.matmul(flat, head.w), head.b)
    return nm.reshape(logits, (frames, batch, head.num_classes))


def combined_loss(
    taps: LayerTaps,
    subword_head: HeadParams | None,
    phone_head: HeadParams | None,
    subword_labels: Sequence[Sequence[int]] | None,
    phone_labels: Sequence[Sequence[int]] | None,
    lam: float,
    aux_layer: int,
    utt_ids: Sequence[str] | None = None,
) -> tuple[nm.Tensor, dict[str, float]]:
    """Convex combination of the two batch-mean CTC losses.

    A side with weight exactly zero is skipped, not multiplied by zero, so
    it cannot raise infeasibility errors or disturb determinism.
    """
    if not 0.0 <= lam <= 1.0:
        raise RegimeError(f"lam must lie in [0, 1], got {lam}")
    parts: dict[str, float] = {}
    terms: list[nm.Tensor] = []
    top = len(taps.taps)
    if lam > 0.0:
        if subword_head is None:
            raise trainmod.CapabilityError("subword loss requested but there is no subword head")
        logits = apply_head(taps.tap(top), subword_head)
        per_utt = ctc.ctc_loss_node(
            logits, taps.lengths, subword_labels, head="subword", utt_ids=utt_ids
        )
        l_sub = nm.mean_all(per_utt)
        parts["subword"] = l_sub.item()
        terms.append(l_sub if lam == 1.0 else nm.scale(l_sub, lam))
    if lam < 1.0:
        if phone_head is None:
            raise trainmod.CapabilityError("phone loss requested but there is no phone head")
        if not 1 <= aux_layer <= top:
            raise RegimeError(f"aux_layer {aux_layer} outside 1..{top}")
        logits = apply_head(taps.tap(aux_layer), phone_head)
        per_utt = ctc.ctc_loss_node(
            logits, taps.lengths, phone_labels, head="phone", utt_ids=utt_ids
        )
        l_ph = nm.mean_all(per_utt)
        parts["phone"] = l_ph.item()
        terms.append(l_ph if lam == 0.0 else nm.scale(l_ph, 1.0 - lam))
    loss = terms[0] if len(terms) == 1 else nm.add(terms[0], terms[1])
    parts["total"] = loss.item()
    return loss, parts


def dead_gradient_set(spec: MultitaskSpec, num_layers: int) -> set[str]:
    """Parameter names guaranteed an identically zero training gradient."""
    dead: set[str] = set()
    if spec.lam == 0.0:
        for k in range(spec.aux_layer + 1, num_layers + 1):
            for direction in ("fwd", "bwd"):
                for leaf in ("wx", "wh", "b"):
                    dead.add(f"enc.l{k}.{direction}.{leaf}")
        dead.update({"head.subword.w", "head.subword.b"})
    if spec.lam == 1.0 and spec.uses_phone_head:
        dead.update({"head.phone.w", "head.phone.b"})
    return dead


class MultitaskModel:
    """Encoder stack plus one or two CTC heads, with greedy decoders.

    Decoding touches only the encoder and the subword head; the phone head
    is a training-time device (plus the phone decoder used for PER).
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        layers: Sequence[LstmLayerParams],
        subword_head: HeadParams | None,
        phone_head: HeadParams | None,
        aux_layer: int,
        lam: float,
        vocab: tok.WordpieceVocab | None = None,
    ):
        self.cfg = cfg
        self.layers = list(layers)
        self.subword_head = subword_head
        self.phone_head = phone_head
        self.aux_layer = aux_layer
        self.lam = lam
        self.vocab = vocab

    @property
    def has_subword_head(self) -> bool:
        return self.subword_head is not None

    @property
    def has_phone_head(self) -> bool:
        return self.phone_head is not None

    @property
    def eval_phone_metrics(self) -> bool:
        """Log PER only when the phone loss actually participates."""
        return self.has_phone_head and self.lam < 1.0

    def parameters(self) -> list[nm.Parameter]:
        out = encoder_parameters(self.layers)
        if self.subword_head is not None:
            out.extend(self.subword_head.parameters())
        if self.phone_head is not None:
            out.extend(self.phone_head.parameters())
        return out

    def forward_loss(self, batch: datamod.Batch, rng: np.random.Generator):
        taps = encoder_forward_paired(
            batch.x, batch.lengths, self.cfg, self.layers, mode="train", rng=rng
        )
        return combined_loss(
            taps,
            self.subword_head,
            self.phone_head,
            batch.subword_labels,
            batch.phone_labels,
            self.lam,
            self.aux_layer,
            utt_ids=batch.utt_ids,
        )

    def _eval_logits(self, utterances: Sequence[datamod.Utterance], layer: int, head: HeadParams):
        with nm.no_grad():
            taps = encoder_forward(
                [u.features for u in utterances], self.cfg, self.layers, mode="eval"
            )
            logits = apply_head(taps.tap(layer), head)
        return logits.data, taps.lengths

    def decode_words(self, utterances: Sequence[datamod.Utterance]) -> list[list[str]]:
        if self.subword_head is None:
            raise trainmod.CapabilityError("model has no subword head")
        if self.vocab is None:
            raise trainmod.CapabilityError("model has no wordpiece vocabulary attached")
        logits, lengths = self._eval_logits(utterances, len(self.layers), self.subword_head)
        out = []
        for b, t in enumerate(lengths):
            ids = ctc.greedy_decode(logits[: int(t), b, :])
            out.append(tok.decode_words(ids, self.vocab))
        return out

    def decode_phones(self, utterances: Sequence[datamod.Utterance]) -> list[list[int]]:
        if self.phone_head is None:
            raise trainmod.CapabilityError("model has no phone head")
        logits, lengths = self._eval_logits(utterances, self.aux_layer, self.phone_head)
        return [
            ctc.greedy_decode(logits[: int(t), b, :]) for b, t in enumerate(lengths)
        ]


def build_model(
    cfg: EncoderConfig,
    spec: MultitaskSpec,
    num_subwords: int,
    num_phones: int,
    seed: int,
    vocab: tok.WordpieceVocab | None = None,
) -> MultitaskModel:
    """Fresh full-depth model for the given regime."""
    if not 1 <= spec.aux_layer <= cfg.num_layers:
        raise RegimeError(
            f"aux_layer {spec.aux_layer} outside 1..{cfg.num_layers}"
        )
    layers = init_encoder(cfg, seed)
    width = 2 * cfg.hidden_per_direction
    subword_head = make_head("subword", width, num_subwords, seed)
    phone_head = (
        make_head("phone", width, num_phones, seed) if spec.uses_phone_head else None
    )
    return MultitaskModel(
        cfg, layers, subword_head, phone_head, spec.aux_layer, spec.lam, vocab=vocab
    )


def build_phone_model(cfg: EncoderConfig, num_phones: int, seed: int) -> MultitaskModel:
    """Truncated phone-only model for the pretraining phase: the phone head
    sits on the top layer of an encoder cut off at the auxiliary depth."""
    layers = init_encoder(cfg, seed)
    phone_head = make_head("phone", 2 * cfg.hidden_per_direction, num_phones, seed)
    return MultitaskModel(
        cfg, layers, None, phone_head, cfg.num_layers, lam=0.0, vocab=None
    )


@dataclass
class PretrainCheckpoint:
    aux_layer: int
    dev_per: float
    seed: int
    params: dict[str, np.ndarray]  # enc.l1..enc.l{i} plus head.phone.{w,b}

    def __post_init__(self):
        layer_ids = {
            int(name.split(".")[1][1:]) for name in self.params if name.startswith("enc.l")
        }
        if layer_ids != set(range(1, self.aux_layer + 1)):
            raise CompatibilityError(
                f"checkpoint claims {self.aux_layer} layers but holds {sorted(layer_ids)}"
            )


def save_pretrain_checkpoint(path, ckpt: PretrainCheckpoint) -> None:
    params = [nm.Parameter(name, arr) for name, arr in sorted(ckpt.params.items())]
    nm.save_parameters(path, params)
    meta = {"aux_layer": ckpt.aux_layer, "dev_per": ckpt.dev_per, "seed": ckpt.seed}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_pretrain_checkpoint(path) -> PretrainCheckpoint:
    params = nm.load_parameters(path)
    with open(str(path) + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return PretrainCheckpoint(
        aux_layer=int(meta["aux_layer"]),
        dev_per=float(meta["dev_per"]),
        seed=int(meta["seed"]),
        params=params,
    )


def pretrain_phase(
    prepared: datamod.PreparedData,
    aux_layer: int,
    cfg: EncoderConfig,
    adam_cfg: trainmod.AdamConfig,
    sched_cfg: trainmod.ScheduleConfig,
    seed: int,
    metrics_path=None,
    timing_path=None,
) -> tuple[PretrainCheckpoint, trainmod.TrainResult]:
    """Phone-only training of the first ``aux_layer`` encoder layers.

    Checkpoint selection and early stopping run on dev PER.
    """
    if not 1 <= aux_layer <= cfg.num_layers:
        raise RegimeError(f"aux_layer {aux_layer} outside 1..{cfg.num_layers}")
    truncated = replace(cfg, num_layers=aux_layer)
    model = build_phone_model(truncated, _num_phones(prepared), seed)
    result = trainmod.run_training(
        model,
        prepared,
        adam_cfg,
        sched_cfg,
        seed,
        select_by="per",
        metrics_path=metrics_path,
        timing_path=timing_path,
        stream="pretrain",
    )
    ckpt = PretrainCheckpoint(
        aux_layer=aux_layer,
        dev_per=result.best_score,
        seed=seed,
        params={p.name: p.data.copy() for p in model.parameters()},
    )
    return ckpt, result


def _num_phones(prepared: datamod.PreparedData) -> int:
    return prepared.lexicon.num_phones


def _num_subwords(prepared: datamod.PreparedData) -> int:
    return prepared.vocab.size


def init_from_pretrained(
    ckpt: PretrainCheckpoint,
    cfg: EncoderConfig,
    spec: MultitaskSpec,
    num_subwords: int,
    num_phones: int,
    seed: int,
    vocab: tok.WordpieceVocab | None = None,
) -> MultitaskModel:
    """Full model with layers 1..i copied bit for bit from the checkpoint.

    Layers above i and the subword head are fresh random draws. The phone
    head carries over only in the pretrain_multitask regime; plain pretrain
    drops it and trains subword-only.
    """
    if spec.regime not in ("pretrain", "pretrain_multitask"):
        raise RegimeError(f"init_from_pretrained applies to pretrain regimes, not {spec.regime!r}")
    if ckpt.aux_layer > cfg.num_layers:
        raise CompatibilityError(
            f"checkpoint depth {ckpt.aux_layer} exceeds model depth {cfg.num_layers}"
        )
    if spec.uses_phone_head and spec.aux_layer != ckpt.aux_layer:
        raise CompatibilityError(
            f"phone head pretrained at layer {ckpt.aux_layer} cannot attach at {spec.aux_layer}"
        )
    model = build_model(cfg, spec, num_subwords, num_phones, seed, vocab=vocab)
    copied = encoder_parameters(model.layers[: ckpt.aux_layer])
    if spec.uses_phone_head:
        copied.extend(model.phone_head.parameters())
    try:
        nm.assign_parameters(copied, ckpt.params)
    except (KeyError, nm.ShapeError) as err:
        raise CompatibilityError(str(err)) from None
    return model


@dataclass
class RegimeResult:
    model: MultitaskModel
    result: trainmod.TrainResult
    pretrain_result: trainmod.TrainResult | None = None
    pretrain_ckpt: PretrainCheckpoint | None = None


def run_regime(
    prepared: datamod.PreparedData,
    cfg: EncoderConfig,
    spec: MultitaskSpec,
    adam_cfg: trainmod.AdamConfig,
    sched_cfg: trainmod.ScheduleConfig,
    seed: int,
    metrics_path=None,
    timing_path=None,
    checkpoint_path=None,
    pretrain_metrics_path=None,
) -> RegimeResult:
    """End-to-end training under the requested regime.

    The optimizer starts fresh in the main phase of the pretrain regimes;
    only parameters cross the phase boundary.
    """
    num_subwords = _num_subwords(prepared)
    num_phones = _num_phones(prepared)
    pre_ckpt = None
    pre_result = None
    if spec.regime in ("pretrain", "pretrain_multitask"):
        pre_ckpt, pre_result = pretrain_phase(
            prepared, spec.aux_layer, cfg, adam_cfg, sched_cfg, seed,
            metrics_path=pretrain_metrics_path,
        )
        if pre_result.status == "did_not_converge":
            return RegimeResult(
                model=None, result=pre_result,
                pretrain_result=pre_result, pretrain_ckpt=pre_ckpt,
            )
        model = init_from_pretrained(
            pre_ckpt, cfg, spec, num_subwords, num_phones, seed, vocab=prepared.vocab
        )
    else:
        model = build_model(cfg, spec, num_subwords, num_phones, seed, vocab=prepared.vocab)
    result = trainmod.run_training(
        model,
        prepared,
        adam_cfg,
        sched_cfg,
        seed,
        select_by="wer",
        metrics_path=metrics_path,
        timing_path=timing_path,
        checkpoint_path=checkpoint_path,
    )
    return RegimeResult(
        model=model, result=result, pretrain_result=pre_result, pretrain_ckpt=pre_ckpt
    )
