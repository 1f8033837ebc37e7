"""Text front end: tokenization, duration-model up-sampling and span masking."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

BLANK, EOS, MASK, PAD = 0, 1, 2, 3
SPECIALS = ("<blank>", "<eos>", "<mask>", "<pad>")

PHONEME = "phoneme"
WORD_PIECE = "word_piece"
UNIT_KINDS = (PHONEME, WORD_PIECE)

SCHEMES = ("fixed_rep", "random_rep", "subword_dist", "align_plus_dist")


class TokenizeError(ValueError):
    pass


@dataclass
class Vocab:
    """Unit inventory with the four special ids at 0..3 (blank first)."""

    unit_kind: str
    units: List[str]

    def __post_init__(self):
        if self.unit_kind not in UNIT_KINDS:
            raise ValueError(f"unknown unit_kind {self.unit_kind!r}")
        if len(set(self.units)) != len(self.units):
            raise ValueError("vocab units must be unique")
        clash = set(self.units) & set(SPECIALS)
        if clash:
            raise ValueError(f"units collide with special symbols: {sorted(clash)}")
        self._index = {u: i + len(SPECIALS) for i, u in enumerate(self.units)}
        self._max_len = max((len(u) for u in self.units), default=1)

    blank = BLANK
    eos = EOS
    mask = MASK
    pad = PAD

    def __len__(self):
        return len(SPECIALS) + len(self.units)

    @property
    def size(self) -> int:
        return len(self)

    def id(self, unit: str) -> int:
        return self._index[unit]

    def __contains__(self, unit: str) -> bool:
        return unit in self._index

    def symbol(self, idx: int) -> str:
        if idx < len(SPECIALS):
            return SPECIALS[idx]
        return self.units[idx - len(SPECIALS)]

    def decode(self, ids: Iterable[int]) -> str:
        """Concatenate content units, dropping special ids."""
        return "".join(self.units[i - len(SPECIALS)] for i in ids if i >= len(SPECIALS))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#unit_kind={self.unit_kind}\n")
            for sym in SPECIALS:
                f.write(sym + "\n")
            for u in self.units:
                f.write(u.replace(" ", "▁") + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if not lines[0].startswith("#unit_kind="):
            raise ValueError(f"{path}: missing unit_kind header")
        kind = lines[0].split("=", 1)[1]
        body = [ln for ln in lines[1:] if ln != ""]
        if tuple(body[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: special symbols must occupy lines 1-4")
        return cls(kind, [u.replace("▁", " ") for u in body[len(SPECIALS):]])


def build_word_piece_vocab(sentences: Iterable[str], n_bigrams: int = 30) -> Vocab:
    """Characters of the corpus plus its most frequent character bigrams.

    Bigrams never end in a space, so no piece straddles a word end; a piece
    may start with the space that precedes a word.
    """
    chars: Counter = Counter()
    pairs: Counter = Counter()
    for s in sentences:
        chars.update(s)
        for a, b in zip(s, s[1:]):
            if b != " ":
                pairs[a + b] += 1
    top = sorted(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[:n_bigrams]
    return Vocab(WORD_PIECE, sorted(chars) + [p for p, _ in top])


def tokenize_word_pieces(text: str, vocab: Vocab) -> List[int]:
    """Greedy longest-match-first segmentation."""
    ids = []
    i = 0
    while i < len(text):
        for n in range(min(vocab._max_len, len(text) - i), 0, -1):
            piece = text[i:i + n]
            if piece in vocab:
                ids.append(vocab.id(piece))
                i += n
                break
        else:
            raise TokenizeError(f"character {text[i]!r} at position {i} not in vocab")
    return ids


@dataclass
class Lexicon:
    """Pronunciations over a phoneme inventory."""

    entries: Dict[str, List[str]]
    phones: Vocab

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> List[str]:
        return self.entries[word]

    @property
    def words(self) -> List[str]:
        return list(self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w, ph in self.entries.items():
                f.write(f"{w}\t{' '.join(ph)}\n")

    @classmethod
    def load(cls, path, phones: Optional[Vocab] = None) -> "Lexicon":
        entries = {}
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    word, pron = line.split("\t")
                except ValueError:
                    raise ValueError(f"{path}:{n}: expected 'word<TAB>phonemes'") from None
                entries[word] = pron.split()
        if phones is None:
            inventory = sorted({p for ph in entries.values() for p in ph})
            phones = Vocab(PHONEME, inventory)
        return cls(entries, phones)


def tokenize_phonemes(text: str, lexicon: Lexicon) -> List[int]:
    ids = []
    for word in text.split():
        if word not in lexicon:
            raise TokenizeError(f"word {word!r} not in lexicon")
        ids.extend(lexicon.phones.id(p) for p in lexicon[word])
    return ids


def word_piece_spans(words: Sequence[str], vocab: Vocab) -> List[List[int]]:
    """Word-piece ids per word; words after the first carry their leading space."""
    return [
        tokenize_word_pieces(w if k == 0 else " " + w, vocab) for k, w in enumerate(words)
    ]


@dataclass
class TextExample:
    x_t: List[int]
    y_t: List[int]
    source_text: str


def build_text_example(text: str, unit_kind: str, vocab: Vocab, lexicon: Lexicon) -> TextExample:
    """Render one sentence as model inputs ``x_t`` and word-piece targets ``y_t``."""
    if not text.strip():
        raise TokenizeError("empty text")
    y_t = tokenize_word_pieces(text, vocab)
    if unit_kind == WORD_PIECE:
        x_t = list(y_t)
    elif unit_kind == PHONEME:
        x_t = tokenize_phonemes(text, lexicon)
    else:
        raise ValueError(f"unknown unit_kind {unit_kind!r}")
    return TextExample(x_t, y_t, text)


# ---------------------------------------------------------------------------
# durations


@dataclass
class AlignedTranscript:
    """Ground-truth segmentation in encoder frames.

    ``phones`` tiles the whole utterance and may include silence symbols that
    are not in the phoneme vocab; ``words`` covers speech only.
    """

    words: List[Tuple[str, int, int]]
    phones: List[Tuple[str, int, int]]
    num_frames: int

    def validate(self) -> None:
        for spans in (self.words, self.phones):
            prev = 0
            for _, s, e in spans:
                if s < prev or e <= s or e > self.num_frames:
                    raise ValueError(f"invalid span ({s}, {e}) in alignment")
                prev = e


@dataclass
class DurationStats:
    table: Dict[int, Tuple[float, float]]
    fallback: Tuple[float, float]

    def get(self, unit: int) -> Tuple[float, float]:
        return self.table.get(unit, self.fallback)


def split_evenly(total: int, parts: int) -> List[int]:
    """Split ``total`` frames into ``parts``; the remainder goes to the left."""
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def unit_durations(alignment: AlignedTranscript, unit_kind: str, vocab: Vocab) -> List[Tuple[int, int]]:
    """``(unit id, frames)`` per unit occurrence, in transcript order."""
    out = []
    if unit_kind == PHONEME:
        for p, s, e in alignment.phones:
            if p in vocab:
                out.append((vocab.id(p), e - s))
    else:
        words = [w for w, _, _ in alignment.words]
        for (w, s, e), pieces in zip(alignment.words, word_piece_spans(words, vocab)):
            out.extend(zip(pieces, split_evenly(e - s, len(pieces))))
    return out


def estimate_duration_stats(
    corpus: Sequence[AlignedTranscript], unit_kind: str, vocab: Vocab
) -> DurationStats:
    """Per-unit mean and population std of frame counts over ``corpus``."""
    if not corpus:
        raise ValueError("cannot estimate duration stats from an empty corpus")
    counts: Dict[int, List[int]] = defaultdict(list)
    for al in corpus:
        for unit, frames in unit_durations(al, unit_kind, vocab):
            counts[unit].append(frames)
    if not counts:
        raise ValueError("corpus contains no units of the requested kind")
    table = {u: (float(np.mean(v)), float(np.std(v))) for u, v in counts.items()}
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in counts.values()])
    return DurationStats(table, (float(pooled.mean()), float(pooled.std())))


@dataclass
class DurationModel:
    scheme: str = "fixed_rep"
    fixed_len: int = 3
    random_range: Tuple[int, int] = (1, 3)
    stats: Optional[DurationStats] = None
    min_len: int = 1
    # needed only by align_plus_dist to split word frames among pieces
    unit_kind: str = PHONEME
    vocab: Optional[Vocab] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown duration scheme {self.scheme!r}")
        if self.scheme in ("subword_dist", "align_plus_dist") and self.stats is None:
            raise ValueError(f"{self.scheme} needs duration stats")
        if self.fixed_len < 1:
            raise ValueError("fixed_len must be >= 1")

    def repeats(self, x_t: Sequence[int], alignment: Optional[AlignedTranscript], rng) -> List[int]:
        n = len(x_t)
        if self.scheme == "fixed_rep":
            return [self.fixed_len] * n
        if self.scheme == "random_rep":
            lo, hi = self.random_range
            return [int(r) for r in rng.integers(lo, hi + 1, size=n)]
        if self.scheme == "align_plus_dist" and alignment is not None:
            durs = unit_durations(alignment, self.unit_kind, self.vocab)
            if [u for u, _ in durs] != list(x_t):
                raise ValueError("alignment does not match the input units")
            return [max(self.min_len, d) for _, d in durs]
        out = []
        for u in x_t:
            mean, std = self.stats.get(u)
            r = int(np.rint(mean + std * rng.standard_normal())) if std > 0 else int(np.rint(mean))
            out.append(max(self.min_len, r))
        return out


def upsample(
    x_t: Sequence[int],
    model: DurationModel,
    alignment: Optional[AlignedTranscript] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[int]:
    """Repeat each unit according to ``model``; order is preserved."""
    if len(x_t) == 0:
        raise ValueError("cannot up-sample an empty sequence")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for u, r in zip(x_t, model.repeats(x_t, alignment, rng)):
        out.extend([u] * r)
    return out


def mask_spans(
    ids: Sequence[int],
    rate: float = 0.15,
    span: int = 5,
    rng: Optional[np.random.Generator] = None,
    mask_id: int = MASK,
) -> Tuple[List[int], np.ndarray]:
    """Mask random spans until at least ``ceil(rate * len)`` positions are covered.

    Span starts are uniform over positions where a full span fits; a sequence
    shorter than ``span`` is covered by a single clipped span.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"mask rate must be in (0, 1], got {rate}")
    n = len(ids)
    if n == 0:
        raise ValueError("cannot mask an empty sequence")
    rng = rng if rng is not None else np.random.default_rng(0)
    # guard against 0.15 * 100 == 15.000000000000002
    target = math.ceil(rate * n - 1e-9)
    flags = np.zeros(n, dtype=bool)
    count = 0
    while count < target:
        s = int(rng.integers(0, max(1, n - span + 1)))
        flags[s:s + span] = True
        count = int(flags.sum())
    masked = [mask_id if f else i for i, f in zip(ids, flags)]
    return masked, flags


@dataclass
class InjectedText:
    """One text-only training example: masked up-sampled inputs and targets."""

    x: List[int]
    y: List[int]
    mask: np.ndarray
    source_text: str


def prepare_text_input(
    example: TextExample,
    durations: DurationModel,
    rng: np.random.Generator,
    alignment: Optional[AlignedTranscript] = None,
    mask_rate: float = 0.15,
    mask_span: int = 5,
) -> InjectedText:
    """Up-sample ``x_t``, mask spans of the result and append EOS to ``y_t``.

    A ``mask_rate`` of 0 disables masking.
    """
    up = upsample(example.x_t, durations, alignment, rng)
    if mask_rate > 0:
        x, flags = mask_spans(up, mask_rate, mask_span, rng)
    else:
        x, flags = up, np.zeros(len(up), dtype=bool)
    return InjectedText(x, list(example.y_t) + [EOS], flags, example.source_text)
