"""Wordpiece vocabulary via byte-pair encoding, and lexicon phone labeling.

Words are segmented into characters with an end-of-word marker attached to
the final character, then the most frequent adjacent pair is merged
repeatedly (ties break to the lexicographically smallest pair) until the
vocabulary reaches its target size or no pair occurs twice. Encoding applies
the merge list in learned order, so segmentation is deterministic. Id 0 is
reserved for the CTC blank in both the wordpiece and phone vocabularies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

EOW = "</w>"
BLANK_ID = 0


class VocabConfigError(ValueError):
    """target_size cannot accommodate the corpus character inventory."""


class EncodingError(ValueError):
    """A word contains a character the vocabulary has never seen."""


class OovError(KeyError):
    """A transcript word is missing from the lexicon."""

    def __init__(self, word: str):
        super().__init__(word)
        self.word = word


@dataclass
class WordpieceVocab:
    merges: list[tuple[str, str]]
    piece_to_id: dict[str, int]  # real pieces only; blank holds id 0 implicitly
    target_size: int
    id_to_piece: dict[int, str] = field(init=False)

    def __post_init__(self):
        self.id_to_piece = {i: p for p, i in self.piece_to_id.items()}

    @property
    def size(self) -> int:
        return len(self.piece_to_id) + 1  # + blank


def _word_symbols(word: str) -> list[str]:
    """Character split with the end-of-word marker fused onto the last char."""
    if not word:
        raise ValueError("empty word")
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return chars


def learn_bpe(corpus: Mapping[str, int], target_size: int) -> WordpieceVocab:
    """Learn a wordpiece vocabulary from a word-frequency table.

    The base inventory holds, for every character in the corpus, both its
    plain and end-of-word-marked form (plus blank), so any spelling over the
    corpus alphabet stays encodable no matter where a character appears.
    """
    if not corpus:
        raise VocabConfigError("empty corpus")
    chars = sorted({c for word in corpus for c in word})
    base = [*chars, *(c + EOW for c in chars)]
    if target_size < len(base) + 1:
        raise VocabConfigError(
            f"target_size {target_size} below base inventory {len(base) + 1} "
            f"({len(chars)} characters, marked and unmarked, plus blank)"
        )

    piece_to_id = {p: i + 1 for i, p in enumerate(base)}
    segmented: dict[str, list[str]] = {w: _word_symbols(w) for w in corpus}
    merges: list[tuple[str, str]] = []

    while len(piece_to_id) + 1 < target_size:
        counts: dict[tuple[str, str], int] = {}
        for word, symbols in segmented.items():
            freq = corpus[word]
            for pair in zip(symbols, symbols[1:]):
                counts[pair] = counts.get(pair, 0) + freq
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        merged = pair[0] + pair[1]
        piece_to_id[merged] = len(piece_to_id) + 1
        for word, symbols in segmented.items():
            segmented[word] = _apply_merge(symbols, pair, merged)

    return WordpieceVocab(merges=merges, piece_to_id=piece_to_id, target_size=target_size)


def _apply_merge(symbols: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def encode(word: str, vocab: WordpieceVocab) -> list[int]:
    """Wordpiece ids for one word, applying merges in learned order."""
    symbols = _word_symbols(word)
    for c, sym in zip(word, symbols):
        if sym not in vocab.piece_to_id:
            raise EncodingError(f"unknown character {c!r} in word {word!r}")
    for pair in vocab.merges:
        if len(symbols) == 1:
            break
        symbols = _apply_merge(symbols, pair, pair[0] + pair[1])
    return [vocab.piece_to_id[s] for s in symbols]


def encode_transcript(words: Sequence[str], vocab: WordpieceVocab) -> list[int]:
    out: list[int] = []
    for w in words:
        out.extend(encode(w, vocab))
    return out


def decode_words(ids: Iterable[int], vocab: WordpieceVocab) -> list[str]:
    """Concatenate pieces and split at end-of-word markers.

    A trailing fragment with no marker still flushes as a word, so decoding
    never drops emitted pieces.
    """
    words: list[str] = []
    current: list[str] = []
    for i in ids:
        if i == BLANK_ID:
            continue
        piece = vocab.id_to_piece.get(int(i))
        if piece is None:
            raise EncodingError(f"unknown piece id {i}")
        while piece:
            marker = piece.find(EOW)
            if marker < 0:
                current.append(piece)
                break
            current.append(piece[:marker])
            words.append("".join(current))
            current = []
            piece = piece[marker + len(EOW) :]
    if current:
        words.append("".join(current))
    return words


@dataclass
class Lexicon:
    word_to_ids: dict[str, tuple[int, ...]]
    phone_to_id: dict[str, int]  # blank holds id 0 implicitly
    id_to_phone: dict[int, str] = field(init=False)

    def __post_init__(self):
        self.id_to_phone = {i: p for p, i in self.phone_to_id.items()}

    @property
    def num_phones(self) -> int:
        return len(self.phone_to_id) + 1  # + blank

    def pronunciation(self, word: str) -> tuple[int, ...]:
        try:
            return self.word_to_ids[word]
        except KeyError:
            raise OovError(word) from None


def build_lexicon(entries: Mapping[str, Sequence[str]]) -> Lexicon:
    """Lexicon from word -> phone-name sequences; phone ids assigned by sorted name."""
    for word, phones in entries.items():
        if not phones:
            raise ValueError(f"empty pronunciation for {word!r}")
    inventory = sorted({p for phones in entries.values() for p in phones})
    phone_to_id = {p: i + 1 for i, p in enumerate(inventory)}
    word_to_ids = {
        w: tuple(phone_to_id[p] for p in phones) for w, phones in entries.items()
    }
    return Lexicon(word_to_ids=word_to_ids, phone_to_id=phone_to_id)


def phones_for(transcript: Sequence[str], lexicon: Lexicon) -> list[int]:
    """Concatenated canonical phone ids; no word-boundary symbol."""
    out: list[int] = []
    for word in transcript:
        out.extend(lexicon.pronunciation(word))
    return out


_VOCAB_HEADER = "wordpieces 1"


def save_vocab(path, vocab: WordpieceVocab) -> None:
    lines = [_VOCAB_HEADER, f"target_size {vocab.target_size}", f"merges {len(vocab.merges)}"]
    lines += [f"{a}\t{b}" for a, b in vocab.merges]
    lines.append(f"pieces {len(vocab.piece_to_id) + 1}")
    lines.append("<blank>\t0")
    lines += [f"{p}\t{i}" for p, i in sorted(vocab.piece_to_id.items(), key=lambda kv: kv[1])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path) -> WordpieceVocab:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _VOCAB_HEADER:
        raise ValueError(f"not a version-1 wordpiece vocabulary file: {path}")
    target_size = int(lines[1].split()[1])
    n_merges = int(lines[2].split()[1])
    merges = []
    for ln in lines[3 : 3 + n_merges]:
        a, b = ln.split("\t")
        merges.append((a, b))
    count_line = lines[3 + n_merges]
    n_pieces = int(count_line.split()[1])
    piece_to_id: dict[str, int] = {}
    for ln in lines[4 + n_merges : 4 + n_merges + n_pieces]:
        piece, pid = ln.rsplit("\t", 1)
        if int(pid) == BLANK_ID:
            continue
        piece_to_id[piece] = int(pid)
    return WordpieceVocab(merges=merges, piece_to_id=piece_to_id, target_size=target_size)


def save_lexicon(path, entries: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(entries):
            fh.write(f"{word}\t{' '.join(entries[word])}\n")


def load_lexicon_entries(path) -> dict[str, list[str]]:
    entries: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                word, phones = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"{path}:{line_no}: expected 'word<TAB>phones'") from None
            entries[word] = phones.split()
    return entries


def load_lexicon(path) -> Lexicon:
    return build_lexicon(load_lexicon_entries(path))
