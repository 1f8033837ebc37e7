"""Transducer NLL, the joint CE objective and the paired+unpaired MWER objective."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .decoder import beam_search, word_errors
from .diffcore import Node
from .model import DECODERS, FIRST_PASS, SECOND_PASS, CascadedTransducer, LogitLattice
from .textfront import BLANK

NEG_INF = -np.inf


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.2
    alpha: float = 0.1
    fastemit: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


# ---------------------------------------------------------------------------
# forward-backward


def _gather_paths(logprobs: np.ndarray, targets: Sequence[Sequence[int]]):
    """Blank and emit log-probs, ``(B, T, U_max + 1)`` each; padded emits read column 0."""
    b, t, u1, _ = logprobs.shape
    y = np.zeros((b, u1), dtype=np.int64)
    for i, tgt in enumerate(targets):
        y[i, : len(tgt)] = tgt
    blank = logprobs[..., BLANK]
    emit = np.take_along_axis(logprobs, np.broadcast_to(y[:, None, :, None], (b, t, u1, 1)), axis=3)[..., 0]
    return blank, emit, y


def transducer_alpha_beta(blank, emit, t_lens, u_lens):
    """Log-space forward and backward variables.

    ``alpha[b, t, u]`` is the log-prob of reaching ``(t, u)``; ``beta`` has one
    extra row so that ``beta[b, T_b, U_b] = 0`` terminates every path.
    """
    bsz, t_max, u1 = blank.shape
    t_lens = np.asarray(t_lens)
    u_lens = np.asarray(u_lens)
    alpha = np.empty((bsz, t_max, u1))
    beta = np.full((bsz, t_max + 1, u1), NEG_INF)
    beta[np.arange(bsz), t_lens, u_lens] = 0.0
    # prefix sums of emits along u, so the in-row recursion becomes a scan
    s = np.zeros((bsz, t_max, u1))
    s[:, :, 1:] = np.cumsum(emit[:, :, :-1], axis=2)
    with np.errstate(invalid="ignore"):
        alpha[:, 0] = s[:, 0]
        for t in range(1, t_max):
            a = alpha[:, t - 1] + blank[:, t - 1]
            alpha[:, t] = s[:, t] + np.logaddexp.accumulate(a - s[:, t], axis=1)
        for t in range(t_max - 1, -1, -1):
            from_below = beta[:, t + 1] + blank[:, t]
            rev = np.logaddexp.accumulate((from_below + s[:, t])[:, ::-1], axis=1)[:, ::-1]
            row = rev - s[:, t]
            live = (t < t_lens)[:, None]
            beta[:, t] = np.where(live, row, beta[:, t])
    idx = np.arange(bsz)
    log_z = alpha[idx, t_lens - 1, u_lens] + blank[idx, t_lens - 1, u_lens]
    return alpha, beta, log_z


@dc.register_op("rnnt_nll", 1)
def _rnnt_nll(logprobs, targets, t_lens, fastemit=0.0):
    """Per-example ``-log P(y|x)`` for a batch of ``(B, T, U+1, V)`` lattices."""
    bsz, t_max, u1, _ = logprobs.shape
    u_lens = np.array([len(y) for y in targets])
    t_lens = np.asarray(t_lens)
    if np.any(t_lens < 1):
        raise ValueError("transducer loss needs at least one frame")
    if np.any(t_lens > t_max) or np.any(u_lens + 1 > u1):
        raise dc.ShapeError(
            f"lattice {logprobs.shape} too small for lengths T={t_lens}, U={u_lens}"
        )
    blank, emit, y = _gather_paths(logprobs, targets)
    alpha, beta, log_z = transducer_alpha_beta(blank, emit, t_lens, u_lens)

    def vjp(g):
        tt = np.arange(t_max)[None, :, None]
        uu = np.arange(u1)[None, None, :]
        valid_t = tt < t_lens[:, None, None]
        z = log_z[:, None, None]
        with np.errstate(invalid="ignore", over="ignore"):
            gb = -np.exp(alpha + blank + beta[:, 1:] - z)
            ge = np.zeros_like(gb)
            ge[:, :, :-1] = -np.exp(alpha[:, :, :-1] + emit[:, :, :-1] + beta[:, :t_max, 1:] - z)
        gb = np.where(valid_t & (uu <= u_lens[:, None, None]), gb, 0.0)
        ge = np.where(valid_t & (uu < u_lens[:, None, None]), ge, 0.0)
        ge *= 1.0 + fastemit
        scale = np.asarray(g).reshape(bsz, 1, 1)
        out = np.zeros_like(logprobs)
        out[..., BLANK] = gb * scale
        bi, ti, ui = np.meshgrid(np.arange(bsz), np.arange(t_max), np.arange(u1), indexing="ij")
        # emits on padded columns carry zero gradient, so writing them is harmless
        np.add.at(out, (bi, ti, ui, np.broadcast_to(y[:, None, :], (bsz, t_max, u1))), ge * scale)
        return (out,)

    return -log_z, vjp


def rnnt_nll_batch(logprobs: Node, targets, t_lens, fastemit: float = 0.0) -> Node:
    return dc.apply(
        "rnnt_nll", [logprobs], targets=[list(y) for y in targets], t_lens=list(t_lens), fastemit=fastemit
    )


def rnnt_nll(lattice: LogitLattice, target: Sequence[int], fastemit: float = 0.0) -> Node:
    """Scalar ``-log P(target|x)`` summed over all monotonic alignments."""
    lp = lattice.logprobs
    t, u1, v = lp.shape
    if t == 0:
        raise ValueError("lattice has no frames")
    if u1 != len(target) + 1:
        raise dc.ShapeError(f"lattice has {u1} label positions for a target of length {len(target)}")
    batch = dc.reshape(lp, (1, t, u1, v))
    return dc.reduce_sum(rnnt_nll_batch(batch, [target], [t], fastemit))


# ---------------------------------------------------------------------------
# joint CE


@dataclass
class BatchLossReport:
    weights: LossWeights
    ce_c_s: float = 0.0
    ce_nc_s: float = 0.0
    ce_c_t: float = 0.0
    ce_nc_t: float = 0.0
    ce_total: float = 0.0
    mwer_c_s: Optional[float] = None
    mwer_nc_s: Optional[float] = None
    mwer_c_t: Optional[float] = None
    mwer_nc_t: Optional[float] = None
    total: float = 0.0
    skipped: int = 0

    def recompose_ce(self) -> float:
        w = self.weights
        return w.lambda1 * (self.ce_c_s + self.ce_nc_s) + w.lambda2 * (self.ce_c_t + self.ce_nc_t)

    def recompose(self) -> float:
        if self.mwer_c_s is None:
            return self.recompose_ce()
        w = self.weights
        return (
            w.lambda1 * (self.mwer_c_s + self.mwer_nc_s)
            + w.lambda2 * (self.mwer_c_t + self.mwer_nc_t)
            + w.alpha * self.ce_total
        )

    def as_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}


def _mean(node: Node, n: int) -> Node:
    return dc.reduce_sum(node) * (1.0 / n)


def _zero() -> Node:
    return dc.constant(0.0)


@dataclass
class Encoded:
    """Encoder outputs for one modality of a mixed batch."""

    first: "object"
    second: "object"
    targets: List[List[int]]


def encode_batch(model: CascadedTransducer, paired, text) -> Tuple[Optional[Encoded], Optional[Encoded]]:
    sp = tx = None
    if paired:
        c, nc = model.encode_speech([ex.x_s for ex in paired])
        sp = Encoded(c, nc, [list(ex.y_s) for ex in paired])
    if text:
        c, nc = model.encode_text([ex.x for ex in text])
        tx = Encoded(c, nc, [list(ex.y) for ex in text])
    return sp, tx


def _ce_pair(model: CascadedTransducer, enc: Optional[Encoded], fastemit: float) -> Tuple[Node, Node]:
    if enc is None:
        return _zero(), _zero()
    n = len(enc.targets)
    out = []
    for decoder, states in ((FIRST_PASS, enc.first), (SECOND_PASS, enc.second)):
        lp = model.lattice_batch(decoder, states, enc.targets)
        out.append(_mean(rnnt_nll_batch(lp, enc.targets, states.lengths, fastemit), n))
    return out[0], out[1]


def joint_ce_loss(model: CascadedTransducer, paired, text, weights: LossWeights, encoded=None):
    """``lambda1 [L_C + L_NC](paired) + lambda2 [L_C + L_NC](text)``.

    ``paired`` items need ``x_s``/``y_s``; ``text`` items need ``x`` (up-sampled,
    masked input ids) and ``y``.  Components are per-example means.
    """
    if not paired and not text:
        raise ValueError("joint_ce_loss needs at least one paired or text example")
    sp, tx = encoded if encoded is not None else encode_batch(model, paired, text)
    c_s, nc_s = _ce_pair(model, sp, weights.fastemit)
    c_t, nc_t = _ce_pair(model, tx, weights.fastemit)
    total = (c_s + nc_s) * weights.lambda1 + (c_t + nc_t) * weights.lambda2
    report = BatchLossReport(
        weights,
        ce_c_s=float(c_s.value),
        ce_nc_s=float(nc_s.value),
        ce_c_t=float(c_t.value),
        ce_nc_t=float(nc_t.value),
        ce_total=float(total.value),
        total=float(total.value),
    )
    return total, report


# ---------------------------------------------------------------------------
# MWER


def mwer_loss(logprobs, errors: Sequence[float]) -> Node:
    """Expected relative word errors over an N-best list.

    ``logprobs`` are hypothesis log-probabilities (``Node`` or array, shape
    ``(N,)``); they are renormalised over the list.  Gradients flow only into
    ``logprobs``.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("mwer_loss needs a non-empty N-best list")
    lp = dc.as_node(logprobs)
    if lp.shape != errors.shape:
        raise dc.ShapeError(f"{lp.shape} log-probs for {errors.shape} error counts")
    posterior = dc.exp(dc.log_softmax(lp, axis=0))
    return dc.reduce_sum(posterior * dc.constant(errors - errors.mean()))


def alignment_logprobs(model: CascadedTransducer, decoder: str, states, items) -> Node:
    """Differentiable log-prob of each hypothesis along its own alignment.

    ``items`` is a list of ``(batch_index, labels, path)`` where ``path`` is a
    sequence of ``(frame, symbol)`` steps with symbol 0 for blank.
    """
    frames = states.frames
    bsz, t_max, d = frames.shape
    rows, prev1, prev2, sym, owner = [], [], [], [], []
    for h, (b, labels, path) in enumerate(items):
        u = 0
        for t, k in path:
            rows.append(b * t_max + t)
            prev1.append(labels[u - 1] if u >= 1 else BLANK)
            prev2.append(labels[u - 2] if u >= 2 else BLANK)
            sym.append(k)
            owner.append(h)
            if k != BLANK:
                u += 1
    n_pts = len(rows)
    enc = dc.embedding_lookup(dc.reshape(frames, (bsz * t_max, d)), np.array(rows))
    pred = model.prediction(decoder, np.array(prev1), np.array(prev2))
    p, dec = model.params, DECODERS[decoder]
    hid = dc.tanh(enc @ p[f"{dec}.joint.enc_w"] + pred @ p[f"{dec}.joint.pred_w"] + p[f"{dec}.joint.b"])
    lp = model.hat_normalize(hid @ p[f"{dec}.joint.out_w"] + p[f"{dec}.joint.out_b"])
    pick = np.zeros(lp.shape)
    pick[np.arange(n_pts), sym] = 1.0
    per_point = dc.reduce_sum(lp * dc.constant(pick), axis=1, keepdims=True)
    seg = np.zeros((len(items), n_pts))
    seg[owner, np.arange(n_pts)] = 1.0
    return dc.reshape(dc.constant(seg) @ per_point, (len(items),))


def joint_mwer_loss(
    model: CascadedTransducer,
    paired,
    text,
    weights: LossWeights,
    vocab,
    beam_size: int = 8,
    max_symbols: int = 4,
):
    """``lambda1 [MWER_C + MWER_NC](paired) + lambda2 [MWER_C + MWER_NC](text) + alpha L_CE``."""
    sp, tx = encode_batch(model, paired, text)
    ce, report = joint_ce_loss(model, paired, text, weights, encoded=(sp, tx))
    comps = {}
    for tag, enc in (("s", sp), ("t", tx)):
        for dname, decoder, states in (
            ("c", FIRST_PASS, enc.first if enc else None),
            ("nc", SECOND_PASS, enc.second if enc else None),
        ):
            key = f"mwer_{dname}_{tag}"
            if enc is None:
                comps[key] = _zero()
                continue
            runner = model.numpy_decoder(decoder)
            items, spans, errs = [], [], []
            for b, target in enumerate(enc.targets):
                trace = beam_search(states.example(b), runner, beam_size, max_symbols)
                if not trace.nbest:
                    report.skipped += 1
                    continue
                start = len(items)
                for h in trace.nbest:
                    items.append((b, h.labels, h.path))
                spans.append((start, len(items)))
                errs.append(word_errors(trace.nbest, target, vocab))
            if not spans:
                comps[key] = _zero()
                continue
            lps = alignment_logprobs(model, decoder, states, items)
            terms = [mwer_loss(lps[s:e], w) for (s, e), w in zip(spans, errs)]
            acc = terms[0]
            for term in terms[1:]:
                acc = acc + term
            comps[key] = acc * (1.0 / len(terms))
    total = (
        (comps["mwer_c_s"] + comps["mwer_nc_s"]) * weights.lambda1
        + (comps["mwer_c_t"] + comps["mwer_nc_t"]) * weights.lambda2
        + ce * weights.alpha
    )
    for k, v in comps.items():
        setattr(report, k, float(v.value))
    report.total = float(total.value)
    return total, report
