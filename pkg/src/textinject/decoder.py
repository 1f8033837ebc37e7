"""Frame-synchronous beam search over HAT outputs, for either decoder pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import edit_distance
from .model import FIRST_PASS, SECOND_PASS, CascadedTransducer, NumpyDecoder
from .textfront import BLANK, EOS, Vocab


@dataclass(frozen=True)
class Hypothesis:
    labels: Tuple[int, ...]
    log_prob: float
    last_frame: int = -1
    # (frame, symbol) per step of the alignment, symbol 0 = blank
    path: Tuple[Tuple[int, int], ...] = ()

    @property
    def ended(self) -> bool:
        return bool(self.labels) and self.labels[-1] == EOS

    def content(self) -> Tuple[int, ...]:
        return tuple(y for y in self.labels if y != EOS)


@dataclass
class DecodeTrace:
    pass_: str
    frame_ms: float
    offset_ms: float = 0.0
    partials: List[Tuple[int, float, str]] = field(default_factory=list)
    nbest: List[Hypothesis] = field(default_factory=list)
    eos_frame: Optional[int] = None
    forced_advances: int = 0
    vocab: Optional[Vocab] = None

    def wall_ms(self, frame: int) -> float:
        """A frame's output is available at the end of the frame, plus any lookahead."""
        return (frame + 1) * self.frame_ms + self.offset_ms

    def text(self, hyp: Hypothesis) -> str:
        if self.vocab is None:
            return " ".join(str(y) for y in hyp.content())
        return self.vocab.decode(hyp.content())

    def final_text(self) -> str:
        return self.text(self.nbest[0]) if self.nbest else ""

    def dump(self) -> str:
        lines = [f"{self.pass_}, {f}, {w:.1f}, {t}" for f, w, t in self.partials]
        lines.append(f"# nbest {self.pass_}")
        for h in self.nbest:
            lines.append(f"{h.log_prob:.6f}\t{self.text(h)}")
        return "\n".join(lines) + "\n"


def _sort_key(h: Hypothesis):
    return (-h.log_prob, h.labels)


def _merge(pool: Dict[Tuple[int, ...], Hypothesis], h: Hypothesis) -> None:
    old = pool.get(h.labels)
    if old is None or _sort_key(h) < _sort_key(old):
        pool[h.labels] = h


def beam_search(
    frames: np.ndarray,
    runner: NumpyDecoder,
    beam_size: int = 8,
    max_symbols: int = 4,
    frame_ms: float = 30.0,
    offset_ms: float = 0.0,
    pass_: str = FIRST_PASS,
    vocab: Optional[Vocab] = None,
) -> DecodeTrace:
    """Decode ``(T, D)`` encoder frames.

    At every frame, hypotheses are expanded by blank (which consumes the
    frame) or by a label (which stays on the frame, up to ``max_symbols``
    labels).  After each expansion round, blank-terminated and label-extended
    candidates compete jointly for ``beam_size`` slots, so ``beam_size=1`` is
    greedy decoding.  Identical label sequences keep their best alignment.  A
    hypothesis ending in EOS only takes blanks from then on.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    trace = DecodeTrace(pass_, frame_ms, offset_ms, vocab=vocab)
    ep = runner.enc_proj(np.asarray(frames, dtype=float))
    beam = [Hypothesis((), 0.0)]
    last_text = ""
    for t in range(len(ep)):
        done: Dict[Tuple[int, ...], Hypothesis] = {}
        active = beam
        for step in range(max_symbols + 1):
            if not active:
                break
            preds = np.stack([
                runner.pred_proj(h.labels[-1] if h.labels else BLANK,
                                 h.labels[-2] if len(h.labels) > 1 else BLANK)
                for h in active
            ])
            lp = runner.log_probs(ep[t][None, :], preds)
            for h, row in zip(active, lp):
                _merge(done, Hypothesis(h.labels, h.log_prob + float(row[BLANK]), h.last_frame,
                                        h.path + ((t, BLANK),)))
            if step == max_symbols:
                trace.forced_advances += 1
                break
            live = [i for i, h in enumerate(active) if not h.ended]
            cands: Dict[Tuple[int, ...], Hypothesis] = {}
            if live:
                base = np.array([active[i].log_prob for i in live])
                scores = base[:, None] + lp[live, 1:]
                flat = scores.ravel()
                k = min(beam_size, flat.size)
                top = np.argpartition(-flat, k - 1)[:k]
                for j in top:
                    i, v = divmod(int(j), scores.shape[1])
                    h = active[live[i]]
                    y = v + 1
                    _merge(cands, Hypothesis(h.labels + (y,), float(flat[j]), t, h.path + ((t, y),)))
            pool = sorted(list(done.values()) + list(cands.values()), key=_sort_key)[:beam_size]
            keep = {id(h) for h in pool}
            done = {k_: h for k_, h in done.items() if id(h) in keep}
            fresh = {id(c) for c in cands.values()}
            active = [h for h in pool if id(h) in fresh]
        beam = sorted(done.values(), key=_sort_key)[:beam_size]
        top = beam[0]
        text = trace.text(top)
        if text != last_text:
            trace.partials.append((t, trace.wall_ms(t), text))
            last_text = text
        if trace.eos_frame is None and top.ended:
            trace.eos_frame = t
    trace.nbest = beam
    return trace


def greedy_search(frames: np.ndarray, runner: NumpyDecoder, max_symbols: int = 4) -> Tuple[int, ...]:
    """Plain argmax decoding, kept as an independent reference for beam size 1."""
    ep = runner.enc_proj(np.asarray(frames, dtype=float))
    labels: List[int] = []
    for t in range(len(ep)):
        for _ in range(max_symbols):
            if labels and labels[-1] == EOS:
                break
            p1 = labels[-1] if labels else BLANK
            p2 = labels[-2] if len(labels) > 1 else BLANK
            row = runner.log_probs(ep[t][None, :], runner.pred_proj(p1, p2)[None, :])[0]
            k = int(np.argmax(row))
            if k == BLANK:
                break
            labels.append(k)
    return tuple(labels)


def streaming_decode(
    model: CascadedTransducer,
    feats: np.ndarray,
    beam_size: int = 8,
    max_symbols: int = 4,
    vocab: Optional[Vocab] = None,
) -> Tuple[DecodeTrace, DecodeTrace]:
    """First pass on causal states; second pass on cascaded states, offset by the lookahead."""
    causal, cascaded = model.encode_speech([np.asarray(feats, dtype=float)])
    cfg = model.cfg
    first = beam_search(
        causal.example(0), model.numpy_decoder(FIRST_PASS), beam_size, max_symbols,
        cfg.frame_ms, 0.0, FIRST_PASS, vocab,
    )
    second = beam_search(
        cascaded.example(0), model.numpy_decoder(SECOND_PASS), beam_size, max_symbols,
        cfg.frame_ms, cfg.lookahead_ms, SECOND_PASS, vocab,
    )
    return first, second


def hyp_words(hyp: Hypothesis, vocab: Vocab) -> List[str]:
    return vocab.decode(hyp.content()).split()


def word_errors(nbest: Sequence[Hypothesis], reference: Sequence[int], vocab: Vocab) -> List[int]:
    """Word errors of each hypothesis against a reference id sequence."""
    ref = vocab.decode(y for y in reference if y != EOS).split()
    return [edit_distance(hyp_words(h, vocab), ref)[3] for h in nbest]


def oracle_wer(nbest: Sequence[Hypothesis], reference: Sequence[int], vocab: Vocab) -> int:
    """Fewest word errors achieved by any member of the N-best list."""
    if not nbest:
        raise ValueError("oracle_wer needs a non-empty N-best list")
    return min(word_errors(nbest, reference, vocab))
