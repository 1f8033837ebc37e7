"""Word error rate and streaming latency metrics computed from decode traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple


def edit_distance(hyp: Sequence, ref: Sequence) -> Tuple[int, int, int, int]:
    """Levenshtein alignment with unit costs.

    Returns ``(substitutions, insertions, deletions, total)``.  Among minimal
    alignments, matches/substitutions are preferred over deletions, and
    deletions over insertions, so the split is deterministic.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j]: (total, subs, ins, dels) aligning ref[:i] with hyp[:j]
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = d
            else:
                diag = (d[0] + 1, d[1] + 1, d[2], d[3])
            up = prev[j]
            dele = (up[0] + 1, up[1], up[2], up[3] + 1)
            left = cur[j - 1]
            ins = (left[0] + 1, left[1], left[2] + 1, left[3])
            best = diag
            for cand in (dele, ins):
                if cand[0] < best[0]:
                    best = cand
            cur.append(best)
        prev = cur
    total, s, i_, d_ = prev[m]
    return s, i_, d_, total


def word_error_count(hyp_text: str, ref_text: str) -> int:
    return edit_distance(hyp_text.split(), ref_text.split())[3]


def corpus_wer(pairs: Sequence[Tuple[str, str]]) -> float:
    """``100 * sum(errors) / sum(reference words)`` over ``(hyp, ref)`` texts."""
    errors = 0
    words = 0
    for hyp, ref in pairs:
        errors += word_error_count(hyp, ref)
        words += len(ref.split())
    if words == 0:
        raise ValueError("corpus_wer needs at least one reference word")
    return 100.0 * errors / words


def endpointer_latency(trace, utt_end_ms: float) -> Optional[float]:
    """EOS wall time minus end of speech; ``None`` if no EOS was emitted."""
    if trace.eos_frame is None:
        return None
    return trace.wall_ms(trace.eos_frame) - utt_end_ms


def partial_latency(trace, reference: str, utt_end_ms: float) -> Optional[float]:
    """Time of the first partial equal to the full reference, minus end of speech."""
    for _, wall_ms, text in trace.partials:
        if text == reference:
            return wall_ms - utt_end_ms
    return None


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: element ``ceil(p/100 * n)`` (1-based) of the sorted values."""
    if not values:
        raise ValueError("percentile of an empty list")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered) - 1e-12))
    return ordered[rank - 1]


def pfhr(pairs) -> float:
    """Fraction of utterances whose first- and second-pass final top texts agree."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("pfhr needs at least one trace pair")
    hits = sum(1 for first, second in pairs if first.final_text() == second.final_text())
    return hits / len(pairs)


@dataclass
class LatencyReport:
    ep50: Optional[float]
    ep90: Optional[float]
    pr50: Optional[float]
    pr90: Optional[float]
    pfhr: float
    utterances: int
    endpointed: int
    correct_partial: int

    @property
    def flip_rate(self) -> float:
        return 1.0 - self.pfhr

    def to_text(self) -> str:
        def fmt(v):
            return "NA" if v is None else f"{v:.1f}"

        lines = [
            f"EP50\t{fmt(self.ep50)}",
            f"EP90\t{fmt(self.ep90)}",
            f"PR50\t{fmt(self.pr50)}",
            f"PR90\t{fmt(self.pr90)}",
            f"PFHR\t{self.pfhr:.4f}",
            f"flip_rate\t{self.flip_rate:.4f}",
            f"utterances\t{self.utterances}",
            f"endpointed\t{self.endpointed}",
            f"correct_partial\t{self.correct_partial}",
        ]
        return "\n".join(lines) + "\n"

    def as_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def latency_report(trace_pairs, references: Sequence[str], utt_end_ms: Sequence[float]) -> LatencyReport:
    """Aggregate EP/PR percentiles (first pass) and PFHR over utterances.

    Utterances with no EOS or no correct partial are left out of the
    corresponding percentile pool and only counted.
    """
    trace_pairs = list(trace_pairs)
    eps: List[float] = []
    prs: List[float] = []
    for (first, _), ref, end in zip(trace_pairs, references, utt_end_ms):
        ep = endpointer_latency(first, end)
        if ep is not None:
            eps.append(ep)
        pr = partial_latency(first, ref, end)
        if pr is not None:
            prs.append(pr)
    return LatencyReport(
        ep50=percentile(eps, 50) if eps else None,
        ep90=percentile(eps, 90) if eps else None,
        pr50=percentile(prs, 50) if prs else None,
        pr90=percentile(prs, 90) if prs else None,
        pfhr=pfhr(trace_pairs),
        utterances=len(trace_pairs),
        endpointed=len(eps),
        correct_partial=len(prs),
    )
