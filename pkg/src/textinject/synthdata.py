"""Synthetic paired/unpaired corpora with ground-truth alignments.

Words are random phoneme strings.  Their spelling follows a toy orthography:
each phoneme has one letter, except a few ambiguous phonemes that have two
possible letters, chosen per word.  Spelling a word correctly therefore
requires knowing the word, which is what unpaired text can teach for words
that are rare in the paired data.

Speech is a sequence of phoneme prototype vectors plus Gaussian noise, with
leading and trailing silence.  Durations are drawn in encoder frames; each
encoder frame corresponds to ``frames_per_step`` feature frames.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .textfront import (
    EOS,
    PHONEME,
    AlignedTranscript,
    Lexicon,
    Vocab,
    build_word_piece_vocab,
    tokenize_word_pieces,
)

SILENCE = "sil"
LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class GeneratorConfig:
    n_phonemes: int = 12
    n_ambiguous: int = 4
    n_words: int = 60
    n_rare: int = 15
    word_phones: Tuple[int, int] = (2, 4)
    # per-phoneme mean duration is dur_mean +/- dur_spread (encoder frames)
    dur_mean: float = 3.0
    dur_spread: float = 0.5
    dur_std: float = 1.0
    frames_per_step: int = 2
    lead_silence: Tuple[int, int] = (2, 4)
    trail_silence: Tuple[int, int] = (6, 10)
    feature_dim: int = 8
    prototype_norm: float = 3.0
    noise_std: float = 0.5
    words_per_utt: Tuple[int, int] = (2, 4)
    n_paired: int = 4000
    n_unpaired: int = 40000
    n_head_test: int = 200
    n_rare_test: int = 200
    rare_cap: int = 5
    rare_text_prob: float = 0.5
    n_bigrams: int = 30
    frame_ms: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        sizes = ("n_phonemes", "n_words", "n_paired", "feature_dim", "frames_per_step")
        for name in sizes:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_unpaired < 0 or self.n_head_test < 0 or self.n_rare_test < 0:
            raise ValueError("set sizes must be >= 0")
        if not 0 <= self.n_rare < self.n_words:
            raise ValueError("need 0 <= n_rare < n_words so head words exist")
        if self.n_ambiguous > self.n_phonemes or self.n_phonemes + self.n_ambiguous > len(LETTERS):
            raise ValueError("not enough letters for the orthography")
        if self.rare_cap < 0:
            raise ValueError("rare_cap must be >= 0")
        if self.n_rare_test > 0 and self.n_rare == 0:
            raise ValueError("a rare-word test set needs rare words")
        if self.n_rare_test > 0 and (self.n_unpaired == 0 or self.rare_text_prob <= 0):
            raise ValueError(
                "rare test words must occur in unpaired text, but no unpaired "
                "rare-word text would be generated"
            )
        lo, hi = self.word_phones
        if not 1 <= lo <= hi:
            raise ValueError("word_phones must satisfy 1 <= lo <= hi")
        n_possible = sum(self.n_phonemes ** k for k in range(lo, hi + 1))
        if self.n_words > n_possible:
            raise ValueError("lexicon larger than the number of distinct pronunciations")


@dataclass
class PairedExample:
    uid: str
    text: str
    x_s: np.ndarray
    y_s: List[int]
    alignment: AlignedTranscript
    utt_end_ms: float


@dataclass
class Corpus:
    cfg: GeneratorConfig
    lexicon: Lexicon
    vocab: Vocab
    prototypes: np.ndarray
    phone_means: Dict[str, float]
    head_words: List[str]
    rare_words: List[str]
    paired: List[PairedExample]
    unpaired: List[str]
    head_test: List[PairedExample]
    rare_test: List[PairedExample]

    @property
    def phones(self) -> Vocab:
        return self.lexicon.phones


def make_prototypes(n: int, dim: int, norm: float, rng, tries: int = 16) -> np.ndarray:
    """Roughly orthogonal prototypes: Gram-Schmidt on the first ``dim`` rows.

    Rows beyond ``dim`` cannot be orthogonal; among ``tries`` draws the one
    with the largest minimum pairwise distance is kept.
    """
    best, best_gap = None, -1.0
    for _ in range(tries):
        m = rng.standard_normal((n, dim))
        k = min(n, dim)
        q, _ = np.linalg.qr(m[:k].T)
        m[:k] = q.T[:k]
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        m *= norm
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        gap = d[np.triu_indices(n, 1)].min() if n > 1 else np.inf
        if gap > best_gap:
            best, best_gap = m, gap
    return best


def expected_duration(mean: float, std: float) -> float:
    """Exact mean of ``max(1, round(Normal(mean, std)))``."""
    if std == 0:
        return float(max(1, int(np.rint(mean))))
    phi = lambda x: 0.5 * (1.0 + math.erf((x - mean) / (std * math.sqrt(2.0))))
    lo = int(math.floor(mean - 12 * std)) - 1
    hi = int(math.ceil(mean + 12 * std)) + 1
    total = max(1, lo) * phi(lo + 0.5)
    for k in range(lo + 1, hi + 1):
        total += max(1, k) * (phi(k + 0.5) - phi(k - 0.5))
    return total


def draw_duration(mean: float, std: float, rng) -> int:
    return max(1, int(np.rint(mean + std * rng.standard_normal())))


def _build_lexicon(cfg: GeneratorConfig, rng) -> Tuple[Lexicon, Dict[str, float]]:
    phones = [f"p{i:02d}" for i in range(cfg.n_phonemes)]
    spellings = {p: [LETTERS[i]] for i, p in enumerate(phones)}
    for j, i in enumerate(rng.choice(cfg.n_phonemes, size=cfg.n_ambiguous, replace=False)):
        spellings[phones[i]].append(LETTERS[cfg.n_phonemes + j])
    lo, hi = cfg.word_phones
    entries: Dict[str, List[str]] = {}
    prons = set()
    while len(entries) < cfg.n_words:
        n = int(rng.integers(lo, hi + 1))
        pron = tuple(phones[i] for i in rng.integers(0, cfg.n_phonemes, size=n))
        if pron in prons:
            continue
        word = "".join(spellings[p][int(rng.integers(len(spellings[p])))] for p in pron)
        if word in entries:
            continue
        prons.add(pron)
        entries[word] = list(pron)
    means = {
        p: cfg.dur_mean + cfg.dur_spread * float(rng.uniform(-1, 1)) for p in phones
    }
    return Lexicon(entries, Vocab(PHONEME, phones)), means


def synthesize_utterance(
    words: Sequence[str],
    corpus_parts,
    cfg: GeneratorConfig,
    rng,
    uid: str = "",
    vocab: Optional[Vocab] = None,
) -> PairedExample:
    """Render ``words`` as noisy prototype frames with exact alignments.

    ``corpus_parts`` is ``(lexicon, prototypes, phone_means)``; prototype row
    ``i`` belongs to phoneme ``i`` and the last row is silence.
    """
    lexicon, protos, means = corpus_parts
    phone_rows = {p: i for i, p in enumerate(lexicon.phones.units)}
    sil_row = len(protos) - 1
    units: List[Tuple[str, int, int]] = []
    word_spans: List[Tuple[str, int, int]] = []
    t = 0

    def add(sym, d):
        nonlocal t
        units.append((sym, t, t + d))
        t += d

    add(SILENCE, int(rng.integers(cfg.lead_silence[0], cfg.lead_silence[1] + 1)))
    for w in words:
        if w not in lexicon:
            raise ValueError(f"word {w!r} not in lexicon")
        start = t
        for p in lexicon[w]:
            add(p, draw_duration(means[p], cfg.dur_std, rng))
        word_spans.append((w, start, t))
    speech_end = t
    add(SILENCE, int(rng.integers(cfg.trail_silence[0], cfg.trail_silence[1] + 1)))
    step = cfg.frames_per_step
    rows = np.concatenate(
        [np.full((e - s) * step, sil_row if sym == SILENCE else phone_rows[sym]) for sym, s, e in units]
    )
    x = protos[rows] + cfg.noise_std * rng.standard_normal((len(rows), protos.shape[1]))
    text = " ".join(words)
    y = tokenize_word_pieces(text, vocab) + [EOS] if vocab is not None else []
    al = AlignedTranscript(word_spans, units, t)
    return PairedExample(uid, text, x, y, al, speech_end * cfg.frame_ms)


def generate_corpus(cfg: GeneratorConfig) -> Corpus:
    """Paired train set, unpaired text, head and rare-word test sets."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lexicon, means = _build_lexicon(cfg, rng)
    words = lexicon.words
    head, rare = words[: cfg.n_words - cfg.n_rare], words[cfg.n_words - cfg.n_rare:]
    protos = make_prototypes(cfg.n_phonemes + 1, cfg.feature_dim, cfg.prototype_norm, rng)

    def head_sentence():
        n = int(rng.integers(cfg.words_per_utt[0], cfg.words_per_utt[1] + 1))
        return [head[i] for i in rng.integers(0, len(head), size=n)]

    def with_rare(sent, k):
        sent = list(sent)
        for pos in rng.choice(len(sent), size=min(k, len(sent)), replace=False):
            sent[pos] = rare[int(rng.integers(len(rare)))]
        return sent

    paired_words = [head_sentence() for _ in range(cfg.n_paired)]
    if rare and cfg.rare_cap > 0:
        # each rare word gets a fixed count below the cap, placed on head-word slots
        counts = rng.integers(0, cfg.rare_cap, size=len(rare))
        slots = [(i, j) for i, s in enumerate(paired_words) for j in range(len(s))]
        chosen = rng.choice(len(slots), size=int(counts.sum()), replace=False)
        k = 0
        for w, c in zip(rare, counts):
            for _ in range(int(c)):
                i, j = slots[chosen[k]]
                paired_words[i][j] = w
                k += 1

    unpaired = []
    for _ in range(cfg.n_unpaired):
        s = head_sentence()
        if rare and rng.random() < cfg.rare_text_prob:
            s = with_rare(s, int(rng.integers(1, 3)))
        unpaired.append(" ".join(s))

    seen = {" ".join(s) for s in paired_words}

    def fresh(make):
        while True:
            s = make()
            key = " ".join(s)
            if key not in seen:
                seen.add(key)
                return s

    head_test_words = [fresh(head_sentence) for _ in range(cfg.n_head_test)]
    rare_test_words = [
        fresh(lambda: with_rare(head_sentence(), int(rng.integers(1, 3))))
        for _ in range(cfg.n_rare_test)
    ]

    sentences = [" ".join(s) for s in paired_words] + unpaired + [" ".join([w]) for w in words]
    vocab = build_word_piece_vocab(sentences, cfg.n_bigrams)
    parts = (lexicon, protos, means)
    paired = [
        synthesize_utterance(s, parts, cfg, rng, f"train-{i:05d}", vocab)
        for i, s in enumerate(paired_words)
    ]
    head_test = [
        synthesize_utterance(s, parts, cfg, rng, f"head-{i:04d}", vocab)
        for i, s in enumerate(head_test_words)
    ]
    rare_test = [
        synthesize_utterance(s, parts, cfg, rng, f"rare-{i:04d}", vocab)
        for i, s in enumerate(rare_test_words)
    ]
    corpus = Corpus(cfg, lexicon, vocab, protos, means, head, rare, paired, unpaired, head_test, rare_test)
    _check_rare_coverage(corpus)
    return corpus


def _check_rare_coverage(corpus: Corpus) -> None:
    text_words = {w for s in corpus.unpaired for w in s.split()}
    rare = set(corpus.rare_words)
    missing = {w for ex in corpus.rare_test for w in ex.text.split() if w in rare} - text_words
    if missing:
        raise ValueError(f"rare test words absent from unpaired text: {sorted(missing)}")


def word_counts(examples: Sequence[PairedExample]) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for ex in examples:
        for w in ex.text.split():
            out[w] = out.get(w, 0) + 1
    return out


# ---------------------------------------------------------------------------
# files


def write_features(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", *x.shape))
        f.write(x.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    t, d = struct.unpack_from("<QQ", data, 0)
    return np.frombuffer(data, dtype="<f8", count=t * d, offset=16).reshape(t, d).astype(float)


def _spans(spans) -> str:
    return ";".join(f"{w}:{s}:{e}" for w, s, e in spans)


def _parse_spans(field_: str) -> List[Tuple[str, int, int]]:
    out = []
    for rec in field_.split(";") if field_ else []:
        w, s, e = rec.rsplit(":", 2)
        out.append((w, int(s), int(e)))
    return out


def write_paired(path, examples: Sequence[PairedExample], feature_dir) -> None:
    """``id<TAB>transcript<TAB>feature-ref<TAB>word spans<TAB>phone spans``."""
    os.makedirs(feature_dir, exist_ok=True)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            fpath = os.path.join(feature_dir, f"{ex.uid}.f64")
            write_features(fpath, ex.x_s)
            ref = os.path.relpath(fpath, base)
            f.write(f"{ex.uid}\t{ex.text}\t{ref}\t{_spans(ex.alignment.words)}\t{_spans(ex.alignment.phones)}\n")


def read_paired(path, vocab: Vocab, frame_ms: float) -> List[PairedExample]:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 5:
                raise ValueError(f"{path}:{n}: expected 5 tab-separated fields, got {len(cols)}")
            uid, text, ref, words, phones = cols
            x = read_features(os.path.join(base, ref))
            wspans, pspans = _parse_spans(words), _parse_spans(phones)
            al = AlignedTranscript(wspans, pspans, pspans[-1][2] if pspans else 0)
            y = tokenize_word_pieces(text, vocab) + [EOS]
            end = (wspans[-1][2] if wspans else 0) * frame_ms
            out.append(PairedExample(uid, text, x, y, al, end))
    return out


CORPUS_FILES = {
    "paired": "paired.tsv",
    "unpaired": "unpaired.txt",
    "head_test": "head_test.tsv",
    "rare_test": "rare_test.tsv",
    "lexicon": "lexicon.txt",
    "phones": "phones.txt",
    "vocab": "vocab.txt",
    "meta": "corpus.meta",
}


def save_corpus(corpus: Corpus, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    p = lambda k: os.path.join(out_dir, CORPUS_FILES[k])
    feats = os.path.join(out_dir, "features")
    write_paired(p("paired"), corpus.paired, feats)
    write_paired(p("head_test"), corpus.head_test, feats)
    write_paired(p("rare_test"), corpus.rare_test, feats)
    with open(p("unpaired"), "w", encoding="utf-8") as f:
        f.writelines(s + "\n" for s in corpus.unpaired)
    corpus.lexicon.save(p("lexicon"))
    corpus.phones.save(p("phones"))
    corpus.vocab.save(p("vocab"))
    with open(p("meta"), "w", encoding="utf-8") as f:
        f.write(f"frame_ms\t{corpus.cfg.frame_ms}\n")
        f.write(f"frames_per_step\t{corpus.cfg.frames_per_step}\n")
        f.write(f"seed\t{corpus.cfg.seed}\n")
        f.write(f"rare_words\t{' '.join(corpus.rare_words)}\n")
        f.write(f"head_words\t{' '.join(corpus.head_words)}\n")


@dataclass
class LoadedCorpus:
    """Corpus as read back from disk (no generator internals)."""

    lexicon: Lexicon
    vocab: Vocab
    paired: List[PairedExample]
    unpaired: List[str]
    head_test: List[PairedExample]
    rare_test: List[PairedExample]
    rare_words: List[str]
    head_words: List[str]
    frame_ms: float

    @property
    def phones(self) -> Vocab:
        return self.lexicon.phones


def load_corpus(corpus_dir) -> LoadedCorpus:
    p = lambda k: os.path.join(corpus_dir, CORPUS_FILES[k])
    for k in CORPUS_FILES:
        if not os.path.exists(p(k)):
            raise FileNotFoundError(f"corpus file missing: {p(k)}")
    meta = {}
    with open(p("meta"), encoding="utf-8") as f:
        for line in f:
            k, _, v = line.rstrip("\n").partition("\t")
            meta[k] = v
    frame_ms = float(meta["frame_ms"])
    vocab = Vocab.load(p("vocab"))
    lexicon = Lexicon.load(p("lexicon"), Vocab.load(p("phones")))
    with open(p("unpaired"), encoding="utf-8") as f:
        unpaired = [ln.rstrip("\n") for ln in f if ln.strip()]
    return LoadedCorpus(
        lexicon,
        vocab,
        read_paired(p("paired"), vocab, frame_ms),
        unpaired,
        read_paired(p("head_test"), vocab, frame_ms),
        read_paired(p("rare_test"), vocab, frame_ms),
        meta.get("rare_words", "").split(),
        meta.get("head_words", "").split(),
        frame_ms,
    )
