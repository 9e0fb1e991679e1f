"""Dataset pipeline and the seeded synthetic recognition task.

Pipeline order is fixed: dedupe_cap, normalize_per_speaker, plan_buckets,
optional stratified subsample, then bucketed batching. Re-running any stage
on the same inputs and seed reproduces the same outputs, batches included.

The synthetic task is a desk-scale stand-in for conversational speech.
Phones are consonant-vowel syllables whose two-letter code doubles as their
spelling fragment, so a word's orthography is the concatenation of its
phones' codes and the subword and phone tasks are genuinely related. Each
phone holds a fixed random template vector for a few frames, bleeding into
its neighbors at segment edges, under Gaussian noise and a per-speaker
affine distortion that normalization is expected to remove.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import ctc
from . import tokenizer as tok
from .encoder import pair_frames, paired_length
from .util import substream


class DataConfigError(ValueError):
    """A pipeline argument is outside its legal range."""


@dataclass(frozen=True)
class Utterance:
    uid: str
    speaker: str
    features: np.ndarray  # [T, d]
    transcript: tuple[str, ...]
    subword_ids: tuple[int, ...] | None = None
    phone_ids: tuple[int, ...] | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def normalize_per_speaker(utterances: Sequence[Utterance]) -> list[Utterance]:
    """Per speaker and feature dimension: subtract mean, divide by stddev.

    Dimensions with stddev below 1e-8 are centered only.
    """
    by_speaker: dict[str, list[np.ndarray]] = {}
    for u in utterances:
        by_speaker.setdefault(u.speaker, []).append(u.features)
    stats = {}
    for speaker, chunks in by_speaker.items():
        stacked = np.concatenate(chunks, axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        stats[speaker] = (mean, std)
    out = []
    for u in utterances:
        mean, std = stats[u.speaker]
        out.append(replace(u, features=(u.features - mean) / std))
    return out


def dedupe_cap(utterances: Sequence[Utterance], cap: int = 300) -> list[Utterance]:
    """Keep at most ``cap`` utterances per distinct transcript, first occurrences."""
    if cap < 1:
        raise DataConfigError(f"cap must be positive, got {cap}")
    seen: dict[tuple[str, ...], int] = {}
    out = []
    for u in utterances:
        n = seen.get(u.transcript, 0)
        if n < cap:
            out.append(u)
            seen[u.transcript] = n + 1
    return out


PAPER_BATCH_SIZES = (128, 104, 80, 56, 32)  # linear between the stated endpoints


@dataclass(frozen=True)
class BucketPlan:
    boundaries: tuple[int, int, int, int]  # 20/40/60/80th length percentiles
    batch_sizes: tuple[int, int, int, int, int] = PAPER_BATCH_SIZES

    def bucket_of(self, num_frames: int) -> int:
        return int(np.searchsorted(self.boundaries, num_frames, side="left"))


def plan_buckets(
    utterances: Sequence[Utterance],
    batch_sizes: Sequence[int] = PAPER_BATCH_SIZES,
) -> tuple[BucketPlan, np.ndarray]:
    """Five length buckets split at the 20/40/60/80th percentiles of T."""
    if len(utterances) < 5:
        raise DataConfigError("bucketing needs at least 5 utterances")
    if len(batch_sizes) != 5 or any(b < 1 for b in batch_sizes):
        raise DataConfigError(f"need 5 positive batch sizes, got {batch_sizes!r}")
    lengths = np.array([u.num_frames for u in utterances])
    bounds = np.percentile(lengths, [20, 40, 60, 80], method="lower").astype(int)
    plan = BucketPlan(boundaries=tuple(int(b) for b in bounds), batch_sizes=tuple(batch_sizes))
    assignment = np.array([plan.bucket_of(t) for t in lengths], dtype=np.int64)
    return plan, assignment


def subsample_fraction(
    utterances: Sequence[Utterance],
    assignment: np.ndarray,
    frac: float,
    rng: np.random.Generator,
) -> tuple[list[Utterance], np.ndarray]:
    """floor(frac * |bucket|) utterances per bucket, uniform without replacement.

    Stratifying by bucket keeps the length distribution of the subsample
    close to the full set's.
    """
    if not 0.0 < frac <= 1.0:
        raise DataConfigError(f"fraction must lie in (0, 1], got {frac}")
    if frac == 1.0:
        return list(utterances), np.asarray(assignment).copy()
    keep: list[int] = []
    assignment = np.asarray(assignment)
    for bucket in range(int(assignment.max()) + 1 if len(assignment) else 0):
        members = np.nonzero(assignment == bucket)[0]
        take = int(np.floor(frac * len(members)))
        if take:
            keep.extend(rng.choice(members, size=take, replace=False).tolist())
    keep.sort()
    return [utterances[i] for i in keep], assignment[keep]


def attach_labels(
    utterances: Sequence[Utterance],
    vocab: tok.WordpieceVocab,
    lexicon: tok.Lexicon,
) -> list[Utterance]:
    """Cache subword and phone label sequences on each utterance."""
    out = []
    for u in utterances:
        out.append(
            replace(
                u,
                subword_ids=tuple(tok.encode_transcript(u.transcript, vocab)),
                phone_ids=tuple(tok.phones_for(u.transcript, lexicon)),
            )
        )
    return out


def filter_feasible(utterances: Sequence[Utterance]) -> tuple[list[Utterance], list[str]]:
    """Drop utterances whose labels cannot align within their paired length.

    Returns (kept, skipped-utterance-ids). Training data must pass through
    this; evaluation sets need not, since decoding has no alignment step.
    """
    kept, skipped = [], []
    for u in utterances:
        if u.subword_ids is None or u.phone_ids is None:
            raise DataConfigError(f"utterance {u.uid} has no cached labels")
        frames = paired_length(u.num_frames)
        ok = (
            len(u.subword_ids) > 0
            and len(u.phone_ids) > 0
            and ctc.min_frames(u.subword_ids) <= frames
            and ctc.min_frames(u.phone_ids) <= frames
        )
        if ok:
            kept.append(u)
        else:
            skipped.append(u.uid)
    return kept, skipped


@dataclass
class Batch:
    x: np.ndarray  # [T', B, 2d] paired, padded features
    lengths: np.ndarray  # paired frame counts per utterance
    subword_labels: list[tuple[int, ...]]
    phone_labels: list[tuple[int, ...]]
    utt_ids: list[str]

    @property
    def size(self) -> int:
        return self.x.shape[1]


def make_batch(utterances: Sequence[Utterance]) -> Batch:
    paired = [pair_frames(u.features) for u in utterances]
    lengths = np.array([p.shape[0] for p in paired], dtype=np.int64)
    width = paired[0].shape[1]
    x = np.zeros((int(lengths.max()), len(paired), width))
    for b, p in enumerate(paired):
        x[: p.shape[0], b, :] = p
    return Batch(
        x=x,
        lengths=lengths,
        subword_labels=[u.subword_ids for u in utterances],
        phone_labels=[u.phone_ids for u in utterances],
        utt_ids=[u.uid for u in utterances],
    )


def epoch_batches(
    utterances: Sequence[Utterance],
    plan: BucketPlan,
    assignment: np.ndarray,
    rng: np.random.Generator,
) -> list[Batch]:
    """One epoch of bucketed batches: utterances shuffle within their bucket,
    then the batch order shuffles across buckets. Buckets never mix."""
    assignment = np.asarray(assignment)
    groups: list[list[Utterance]] = []
    for bucket in range(5):
        members = np.nonzero(assignment == bucket)[0]
        if len(members) == 0:
            continue
        members = members[rng.permutation(len(members))]
        size = plan.batch_sizes[bucket]
        for start in range(0, len(members), size):
            groups.append([utterances[i] for i in members[start : start + size]])
    order = rng.permutation(len(groups))
    return [make_batch(groups[i]) for i in order]


@dataclass
class SyntheticSpec:
    """Generator knobs; the defaults are the calibrated desk-scale task."""

    n_phones: int = 40
    n_words: int = 200
    word_phones: tuple[int, int] = (2, 4)
    utt_words: tuple[int, int] = (2, 8)
    feature_dim: int = 8
    duration_range: tuple[int, int] = (2, 3)
    noise_sigma: float = 0.25
    seed: int = 0
    train_utts: int = 3000
    dev_utts: int = 300
    test_utts: int = 300
    speakers: tuple[int, int, int] = (24, 6, 6)
    backchannel_prob: float = 0.08
    n_backchannels: int = 3
    coarticulation: float = 0.15
    speaker_shift: float = 1.0
    speaker_scale: tuple[float, float] = (0.75, 1.33)

    def __post_init__(self):
        if not 1 <= self.n_phones <= 90:
            raise DataConfigError("n_phones must lie in [1, 90] (syllable code inventory)")
        if self.word_phones[0] < 1 or self.word_phones[0] > self.word_phones[1]:
            raise DataConfigError("bad word_phones range")
        if self.utt_words[0] < 1 or self.utt_words[0] > self.utt_words[1]:
            raise DataConfigError("bad utt_words range")
        if self.duration_range[0] < 1 or self.duration_range[0] > self.duration_range[1]:
            raise DataConfigError("bad duration_range")
        if not 0 <= self.coarticulation <= 0.5:
            raise DataConfigError("coarticulation must lie in [0, 0.5]")
        if self.noise_sigma < 0:
            raise DataConfigError("noise_sigma must be non-negative")


_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def phone_inventory(n_phones: int) -> list[str]:
    codes = [c + v for c in _CONSONANTS for v in _VOWELS]
    return codes[:n_phones]


@dataclass
class SyntheticData:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    lexicon_entries: dict[str, list[str]]
    spec: SyntheticSpec


def _make_words(spec: SyntheticSpec, phones: list[str], rng: np.random.Generator):
    words: dict[str, list[str]] = {}
    lo, hi = spec.word_phones
    while len(words) < spec.n_words:
        k = int(rng.integers(lo, hi + 1))
        pron = [phones[int(i)] for i in rng.integers(0, len(phones), size=k)]
        spelling = "".join(pron)
        if spelling not in words:
            words[spelling] = pron
    return words


def _render_utterance(
    phone_seq: list[str],
    templates: Mapping[str, np.ndarray],
    spec: SyntheticSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    lo, hi = spec.duration_range
    durations = rng.integers(lo, hi + 1, size=len(phone_seq)).tolist()
    # guarantee the phone labels stay alignable after frame pairing,
    # with two frames to spare
    repeats = sum(1 for a, b in zip(phone_seq, phone_seq[1:]) if a == b)
    need = len(phone_seq) + repeats + 2
    bump = 0
    while paired_length(sum(durations)) < need:
        durations[bump % len(durations)] += 2
        bump += 1
    rows = []
    coart = spec.coarticulation
    for idx, (name, dur) in enumerate(zip(phone_seq, durations)):
        cur = templates[name]
        prev = templates[phone_seq[idx - 1]] if idx > 0 else None
        nxt = templates[phone_seq[idx + 1]] if idx + 1 < len(phone_seq) else None
        for j in range(dur):
            a_prev = coart if (j == 0 and prev is not None) else 0.0
            a_next = coart if (j == dur - 1 and nxt is not None) else 0.0
            frame = (1.0 - a_prev - a_next) * cur
            if a_prev:
                frame = frame + a_prev * prev
            if a_next:
                frame = frame + a_next * nxt
            rows.append(frame)
    clean = np.stack(rows)
    if spec.noise_sigma > 0:
        clean = clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape)
    return clean


def _speaker_transforms(spec: SyntheticSpec, names: list[str], rng: np.random.Generator):
    out = {}
    for name in names:
        shift = rng.normal(0.0, spec.speaker_shift, size=spec.feature_dim)
        lo, hi = spec.speaker_scale
        scl = rng.uniform(lo, hi, size=spec.feature_dim)
        out[name] = (shift, scl)
    return out


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic synthetic splits; same spec (and seed) means same bytes."""
    phones = phone_inventory(spec.n_phones)
    tpl_rng = substream(spec.seed, "synth/templates")
    templates = {p: tpl_rng.standard_normal(spec.feature_dim) for p in phones}
    words = _make_words(spec, phones, substream(spec.seed, "synth/words"))
    word_list = list(words)
    backchannels = word_list[: spec.n_backchannels]

    splits = {}
    sizes = dict(train=spec.train_utts, dev=spec.dev_utts, test=spec.test_utts)
    speaker_counts = dict(zip(("train", "dev", "test"), spec.speakers))
    for split, count in sizes.items():
        rng = substream(spec.seed, f"synth/{split}")
        speakers = [f"{split}_s{i:02d}" for i in range(speaker_counts[split])]
        transforms = _speaker_transforms(spec, speakers, substream(spec.seed, f"synth/{split}/speakers"))
        utts = []
        for n in range(count):
            speaker = speakers[int(rng.integers(0, len(speakers)))]
            if spec.n_backchannels and rng.random() < spec.backchannel_prob:
                transcript = [backchannels[int(rng.integers(0, len(backchannels)))]]
            else:
                k = int(rng.integers(spec.utt_words[0], spec.utt_words[1] + 1))
                transcript = [word_list[int(i)] for i in rng.integers(0, len(word_list), size=k)]
            phone_seq = [p for w in transcript for p in words[w]]
            clean = _render_utterance(phone_seq, templates, spec, rng)
            shift, scl = transforms[speaker]
            obs = clean * scl + shift
            utts.append(
                Utterance(
                    uid=f"{split}-{n:05d}",
                    speaker=speaker,
                    features=obs,
                    transcript=tuple(transcript),
                )
            )
        splits[split] = utts

    return SyntheticData(
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        lexicon_entries={w: list(p) for w, p in words.items()},
        spec=spec,
    )


# Feature container format, version 1. All integers little-endian.
#   magic   4 bytes  b"UFE1"
#   version u32, count u32
# per record:
#   uid_len u16, uid utf-8, speaker_len u16, speaker utf-8,
#   T u32, d u32, then T*d float64 little-endian row-major
_FEAT_MAGIC = b"UFE1"
_FEAT_VERSION = 1


def write_features(path, utterances: Sequence[Utterance]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", _FEAT_VERSION, len(utterances)))
        for u in utterances:
            uid = u.uid.encode("utf-8")
            spk = u.speaker.encode("utf-8")
            frames, dim = u.features.shape
            fh.write(struct.pack("<H", len(uid)) + uid)
            fh.write(struct.pack("<H", len(spk)) + spk)
            fh.write(struct.pack("<II", frames, dim))
            fh.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())


def read_features(path) -> list[Utterance]:
    with open(path, "rb") as fh:
        if fh.read(4) != _FEAT_MAGIC:
            raise ValueError(f"not a feature container: {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FEAT_VERSION:
            raise ValueError(f"unsupported feature container version {version}")
        out = []
        for _ in range(count):
            (uid_len,) = struct.unpack("<H", fh.read(2))
            uid = fh.read(uid_len).decode("utf-8")
            (spk_len,) = struct.unpack("<H", fh.read(2))
            speaker = fh.read(spk_len).decode("utf-8")
            frames, dim = struct.unpack("<II", fh.read(8))
            feats = np.frombuffer(fh.read(8 * frames * dim), dtype="<f8").reshape(frames, dim)
            out.append(
                Utterance(
                    uid=uid,
                    speaker=speaker,
                    features=np.ascontiguousarray(feats),
                    transcript=(),
                )
            )
        return out


def write_transcripts(path, utterances: Sequence[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            fh.write(f"{u.uid}\t{' '.join(u.transcript)}\n")


def read_transcripts(path) -> dict[str, tuple[str, ...]]:
    out: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, rest = line.partition("\t")
            out[uid] = tuple(rest.split())
    return out


def load_utterances(feature_path, transcript_path) -> list[Utterance]:
    utts = read_features(feature_path)
    transcripts = read_transcripts(transcript_path)
    out = []
    for u in utts:
        if u.uid not in transcripts:
            raise ValueError(f"no transcript for utterance {u.uid}")
        out.append(replace(u, transcript=transcripts[u.uid]))
    return out


@dataclass
class PreparedData:
    """Training-ready bundle: labeled, normalized, bucketed, optionally subsampled."""

    train: list[Utterance]
    dev: list[Utterance]
    plan: BucketPlan
    assignment: np.ndarray
    skipped_train: list[str]
    vocab: tok.WordpieceVocab
    lexicon: tok.Lexicon
    oov_skipped: list[str] = field(default_factory=list)


def prepare(
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    vocab: tok.WordpieceVocab,
    lexicon: tok.Lexicon,
    seed: int,
    cap: int = 300,
    fraction: float = 1.0,
    batch_sizes: Sequence[int] = PAPER_BATCH_SIZES,
) -> PreparedData:
    """Fixed pipeline: dedupe_cap -> normalize -> buckets -> subsample."""
    train = dedupe_cap(train, cap)
    train = normalize_per_speaker(train)
    train, oov = _attach_skipping_oov(train, vocab, lexicon)
    train, skipped = filter_feasible(train)
    plan, assignment = plan_buckets(train, batch_sizes)
    if fraction != 1.0:
        train, assignment = subsample_fraction(
            train, assignment, fraction, substream(seed, "data/subsample")
        )
    dev, oov_dev = _attach_skipping_oov(normalize_per_speaker(dev), vocab, lexicon)
    return PreparedData(
        train=train,
        dev=list(dev),
        plan=plan,
        assignment=assignment,
        skipped_train=skipped,
        vocab=vocab,
        lexicon=lexicon,
        oov_skipped=oov + oov_dev,
    )


def _attach_skipping_oov(utterances, vocab, lexicon):
    """Label utterances, dropping any whose transcript escapes the lexicon."""
    kept: list[Utterance] = []
    oov: list[str] = []
    for u in utterances:
        try:
            kept.extend(attach_labels([u], vocab, lexicon))
        except tok.OovError:
            oov.append(u.uid)
    return kept, oov
