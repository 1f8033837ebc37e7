"""Cascaded-encoder transducer with a text-encoder path and two HAT decoders.

Topology::

    speech -> causal encoder --+--> first-pass decoder
                               |
    text ids -> embedding -----+--> cascaded encoder --> second-pass decoder

Encoder layers are bounded-context mixing blocks: depthwise temporal
convolution over ``[t - left, t + right]``, a position-wise feed-forward,
residual connections and layer normalization.  Causal layers use
``right = 0``, which makes the first-pass lattice exactly streaming.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore
from .textfront import BLANK, PAD

FIRST_PASS = "first_pass"
SECOND_PASS = "second_pass"
DECODERS = {FIRST_PASS: "dec1", SECOND_PASS: "dec2"}


@dataclass
class ModelConfig:
    feature_dim: int = 8
    model_dim: int = 32
    ff_dim: int = 64
    causal_layers: int = 2
    cascaded_layers: int = 3
    causal_left_context: int = 3
    cascaded_left_context: int = 2
    right_context_per_layer: int = 2
    subsample_factor: int = 2
    output_vocab: int = 50
    input_vocab: int = 20
    pred_context: int = 2
    pred_embed_dim: int = 16
    pred_dim: int = 32
    joint_dim: int = 32
    frame_ms: float = 30.0
    max_target_len: int = 64

    def __post_init__(self):
        if self.right_context_per_layer < 0:
            raise ValueError("right_context_per_layer must be >= 0")
        if self.causal_layers < 1 or self.cascaded_layers < 1:
            raise ValueError("need at least one causal and one cascaded layer")
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.pred_context != 2:
            raise ValueError("the prediction network conditions on exactly two labels")

    @property
    def total_right_context(self) -> int:
        return self.cascaded_layers * self.right_context_per_layer

    @property
    def lookahead_ms(self) -> float:
        return self.total_right_context * self.frame_ms


@dataclass
class EncoderStates:
    """Per-frame encoder outputs, batched as ``(B, T, D)`` with true lengths."""

    frames: Node
    lengths: List[int]
    pass_: str  # causal | cascaded | text

    def example(self, b: int) -> np.ndarray:
        return self.frames.value[b, : self.lengths[b]]


@dataclass
class HatOutput:
    blank_logprob: float
    label_logprobs: np.ndarray


@dataclass
class LogitLattice:
    """``(T, U + 1, V)`` HAT log-probabilities; column 0 is blank."""

    logprobs: Node
    decoder: str

    @property
    def shape(self):
        return self.logprobs.value.shape

    def entry(self, t: int, u: int) -> HatOutput:
        row = self.logprobs.value[t, u]
        return HatOutput(float(row[0]), row[1:].copy())


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform ``1/sqrt(fan_in)`` initialisation; layer-norm gains start at 1."""
    ps = ParamStore(rng_seed=seed)
    d, f = cfg.model_dim, cfg.ff_dim
    ps.init_uniform("enc.in.w", (cfg.feature_dim, d))
    ps.init_constant("enc.in.b", (d,))

    def block(prefix, left, right):
        k = left + 1 + right
        ps.init_uniform(f"{prefix}.conv", (k, d), fan_in=k)
        ps.init_uniform(f"{prefix}.ff1.w", (d, f))
        ps.init_constant(f"{prefix}.ff1.b", (f,))
        ps.init_uniform(f"{prefix}.ff2.w", (f, d))
        ps.init_constant(f"{prefix}.ff2.b", (d,))
        ps.init_constant(f"{prefix}.ln.g", (d,), 1.0)
        ps.init_constant(f"{prefix}.ln.b", (d,))

    for i in range(cfg.causal_layers):
        block(f"enc.causal.{i}", cfg.causal_left_context, 0)
    ps.init_uniform("enc.sub.w", (cfg.subsample_factor * d, d))
    ps.init_constant("enc.sub.b", (d,))
    for i in range(cfg.cascaded_layers):
        block(f"enc.cascaded.{i}", cfg.cascaded_left_context, cfg.right_context_per_layer)
    ps.init_uniform("text.embed", (cfg.input_vocab, d), fan_in=d)
    for dec in DECODERS.values():
        e = cfg.pred_embed_dim
        ps.init_uniform(f"{dec}.pred.embed1", (cfg.output_vocab, e), fan_in=e)
        ps.init_uniform(f"{dec}.pred.embed2", (cfg.output_vocab, e), fan_in=e)
        ps.init_uniform(f"{dec}.pred.w", (2 * e, cfg.pred_dim))
        ps.init_constant(f"{dec}.pred.b", (cfg.pred_dim,))
        ps.init_uniform(f"{dec}.joint.enc_w", (d, cfg.joint_dim))
        ps.init_uniform(f"{dec}.joint.pred_w", (cfg.pred_dim, cfg.joint_dim))
        ps.init_constant(f"{dec}.joint.b", (cfg.joint_dim,))
        ps.init_uniform(f"{dec}.joint.out_w", (cfg.joint_dim, cfg.output_vocab))
        ps.init_constant(f"{dec}.joint.out_b", (cfg.output_vocab,))
    return ps


def shared_encoder_names(params: ParamStore) -> set:
    return {n for n in params if n.startswith("enc.cascaded.")}


def _time_mask(lengths: Sequence[int], t_max: int) -> np.ndarray:
    return (np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]).astype(float)[..., None]


class CascadedTransducer:
    """Forward computations over a :class:`ParamStore` snapshot."""

    def __init__(self, cfg: ModelConfig, params: Optional[ParamStore] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- encoders ---------------------------------------------------------

    def _block(self, x: Node, prefix: str, left: int, right: int, mask: Node) -> Node:
        p = self.params
        h = x + dc.depthwise_conv(x, p[f"{prefix}.conv"], left, right)
        a = h @ p[f"{prefix}.ff1.w"] + p[f"{prefix}.ff1.b"]
        # SiLU keeps the loss smooth, so finite-difference checks do not hit kinks
        ff = a * dc.sigmoid(a)
        h = h + (ff @ p[f"{prefix}.ff2.w"] + p[f"{prefix}.ff2.b"])
        h = dc.layer_norm(h) * p[f"{prefix}.ln.g"] + p[f"{prefix}.ln.b"]
        return h * mask

    def _cascaded(self, x: Node, mask: Node) -> Node:
        cfg = self.cfg
        for i in range(cfg.cascaded_layers):
            x = self._block(
                x, f"enc.cascaded.{i}", cfg.cascaded_left_context, cfg.right_context_per_layer, mask
            )
        return x

    def encoded_length(self, num_input_frames: int) -> int:
        s = self.cfg.subsample_factor
        return -(-num_input_frames // s)

    def encode_speech(self, feats: Sequence[np.ndarray]) -> Tuple[EncoderStates, EncoderStates]:
        """Batch of ``(T_i, feature_dim)`` arrays -> (causal, cascaded) states."""
        cfg, p = self.cfg, self.params
        if not feats or any(len(f) == 0 for f in feats):
            raise ValueError("speech input must be non-empty")
        for f in feats:
            if f.ndim != 2 or f.shape[1] != cfg.feature_dim:
                raise dc.ShapeError(
                    f"speech features must be (T, {cfg.feature_dim}), got {f.shape}"
                )
        s = cfg.subsample_factor
        lens_in = [len(f) for f in feats]
        lens = [self.encoded_length(n) for n in lens_in]
        t_enc = max(lens)
        t_in = t_enc * s
        x = np.zeros((len(feats), t_in, cfg.feature_dim))
        for b, f in enumerate(feats):
            x[b, : len(f)] = f
        mask_in = dc.constant(_time_mask(lens_in, t_in))
        mask = dc.constant(_time_mask(lens, t_enc))
        h = (dc.constant(x) @ p["enc.in.w"] + p["enc.in.b"]) * mask_in
        h = self._block(h, "enc.causal.0", cfg.causal_left_context, 0, mask_in)
        h = dc.reshape(h, (len(feats), t_enc, s * cfg.model_dim))
        h = (h @ p["enc.sub.w"] + p["enc.sub.b"]) * mask
        for i in range(1, cfg.causal_layers):
            h = self._block(h, f"enc.causal.{i}", cfg.causal_left_context, 0, mask)
        causal = EncoderStates(h, lens, "causal")
        cascaded = EncoderStates(self._cascaded(h, mask), lens, "cascaded")
        return causal, cascaded

    def encode_text(self, ids: Sequence[Sequence[int]]) -> Tuple[EncoderStates, EncoderStates]:
        """Up-sampled (masked) input ids -> (text-encoder, cascaded) states."""
        if not ids or any(len(x) == 0 for x in ids):
            raise ValueError("text input must be non-empty")
        lens = [len(x) for x in ids]
        t = max(lens)
        arr = np.full((len(ids), t), PAD, dtype=np.int64)
        for b, x in enumerate(ids):
            arr[b, : len(x)] = x
        mask = dc.constant(_time_mask(lens, t))
        emb = dc.embedding_lookup(self.params["text.embed"], arr) * mask
        text = EncoderStates(emb, lens, "text")
        cascaded = EncoderStates(self._cascaded(emb, mask), lens, "cascaded")
        return text, cascaded

    def encoder_forward(self, x, mode: str) -> Tuple[EncoderStates, EncoderStates]:
        """Single-utterance convenience wrapper."""
        if mode == "speech":
            return self.encode_speech([np.asarray(x, dtype=float)])
        if mode == "text":
            return self.encode_text([list(x)])
        raise ValueError(f"unknown mode {mode!r}")

    # -- decoders ---------------------------------------------------------

    @staticmethod
    def history_ids(targets: Sequence[Sequence[int]], u_max: int) -> Tuple[np.ndarray, np.ndarray]:
        """Last and second-to-last label before each prefix length, blank-padded."""
        prev1 = np.full((len(targets), u_max + 1), BLANK, dtype=np.int64)
        prev2 = np.full((len(targets), u_max + 1), BLANK, dtype=np.int64)
        for b, y in enumerate(targets):
            for u in range(1, len(y) + 1):
                prev1[b, u] = y[u - 1]
                if u >= 2:
                    prev2[b, u] = y[u - 2]
        return prev1, prev2

    def prediction(self, decoder: str, prev1, prev2) -> Node:
        """Embedding prediction network over the last two labels."""
        p, dec = self.params, DECODERS[decoder]
        e1 = dc.embedding_lookup(p[f"{dec}.pred.embed1"], prev1)
        e2 = dc.embedding_lookup(p[f"{dec}.pred.embed2"], prev2)
        return dc.tanh(dc.concat([e1, e2], axis=-1) @ p[f"{dec}.pred.w"] + p[f"{dec}.pred.b"])

    def prediction_forward(self, history: Sequence[int], decoder: str = FIRST_PASS) -> np.ndarray:
        h = list(history)[-2:]
        prev1 = h[-1] if h else BLANK
        prev2 = h[-2] if len(h) == 2 else BLANK
        return self.prediction(decoder, np.array([prev1]), np.array([prev2])).value[0]

    @staticmethod
    def hat_normalize(logits: Node) -> Node:
        """Column 0 is the blank logit; the rest are label logits."""
        blank = logits[..., 0:1]
        labels = logits[..., 1:]
        label_lp = dc.log_sigmoid(-blank) + dc.log_softmax(labels, axis=-1)
        return dc.concat([dc.log_sigmoid(blank), label_lp], axis=-1)

    def joint(self, decoder: str, enc: Node, pred: Node) -> Node:
        """``enc (B, T, D)`` x ``pred (B, U+1, P)`` -> log-probs ``(B, T, U+1, V)``."""
        p, dec = self.params, DECODERS[decoder]
        b, t, _ = enc.shape
        u1 = pred.shape[1]
        ej = dc.reshape(enc @ p[f"{dec}.joint.enc_w"], (b, t, 1, self.cfg.joint_dim))
        pj = dc.reshape(pred @ p[f"{dec}.joint.pred_w"], (b, 1, u1, self.cfg.joint_dim))
        h = dc.tanh(ej + pj + p[f"{dec}.joint.b"])
        return self.hat_normalize(h @ p[f"{dec}.joint.out_w"] + p[f"{dec}.joint.out_b"])

    def hat_joint(self, decoder: str, enc_frame, pred_state) -> HatOutput:
        p, dec = self.params, DECODERS[decoder]
        e = dc.as_node(np.asarray(enc_frame, dtype=float)[None, :])
        q = dc.as_node(np.asarray(pred_state, dtype=float)[None, :])
        h = dc.tanh(e @ p[f"{dec}.joint.enc_w"] + q @ p[f"{dec}.joint.pred_w"] + p[f"{dec}.joint.b"])
        row = self.hat_normalize(h @ p[f"{dec}.joint.out_w"] + p[f"{dec}.joint.out_b"]).value[0]
        return HatOutput(float(row[0]), row[1:].copy())

    def lattice_batch(self, decoder: str, enc: EncoderStates, targets: Sequence[Sequence[int]]) -> Node:
        for y in targets:
            if len(y) > self.cfg.max_target_len:
                raise ValueError(
                    f"target length {len(y)} exceeds cap {self.cfg.max_target_len}"
                )
            if any(v == BLANK for v in y):
                raise ValueError("targets must not contain blank")
        u_max = max(len(y) for y in targets)
        prev1, prev2 = self.history_ids(targets, u_max)
        return self.joint(decoder, enc.frames, self.prediction(decoder, prev1, prev2))

    def build_lattice(self, enc: EncoderStates, target: Sequence[int], decoder: str) -> LogitLattice:
        """Lattice for a single utterance (batch element 0 of ``enc``)."""
        t = enc.lengths[0]
        frames = enc.frames[0:1, :t]
        lp = self.lattice_batch(decoder, EncoderStates(frames, [t], enc.pass_), [list(target)])
        return LogitLattice(lp[0], decoder)

    def numpy_decoder(self, decoder: str) -> "NumpyDecoder":
        return NumpyDecoder(self.params, DECODERS[decoder])


def _np_log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def hat_log_probs_np(logits: np.ndarray) -> np.ndarray:
    b = logits[..., :1]
    lab = logits[..., 1:]
    m = lab.max(axis=-1, keepdims=True)
    lsm = lab - m - np.log(np.exp(lab - m).sum(axis=-1, keepdims=True))
    return np.concatenate([_np_log_sigmoid(b), _np_log_sigmoid(-b) + lsm], axis=-1)


class NumpyDecoder:
    """Graph-free joint/prediction evaluation for search, with a history cache."""

    def __init__(self, params: ParamStore, dec: str):
        g = lambda n: params[f"{dec}.{n}"].value
        self.embed1, self.embed2 = g("pred.embed1"), g("pred.embed2")
        self.pred_w, self.pred_b = g("pred.w"), g("pred.b")
        self.enc_w, self.pred_jw, self.jb = g("joint.enc_w"), g("joint.pred_w"), g("joint.b")
        self.out_w, self.out_b = g("joint.out_w"), g("joint.out_b")
        self._cache: Dict[Tuple[int, int], np.ndarray] = {}

    def enc_proj(self, frames: np.ndarray) -> np.ndarray:
        return frames @ self.enc_w + self.jb

    def pred_proj(self, prev1: int, prev2: int) -> np.ndarray:
        key = (prev1, prev2)
        v = self._cache.get(key)
        if v is None:
            e = np.concatenate([self.embed1[prev1], self.embed2[prev2]])
            v = np.tanh(e @ self.pred_w + self.pred_b) @ self.pred_jw
            self._cache[key] = v
        return v

    def log_probs(self, enc_rows: np.ndarray, pred_rows: np.ndarray) -> np.ndarray:
        return hat_log_probs_np(np.tanh(enc_rows + pred_rows) @ self.out_w + self.out_b)
