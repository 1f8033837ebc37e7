"""Config-driven experiments: corpus generation, training, evaluation, latency.

Experiment configs are flat ``key = value`` text files.  Keys are the fields
of :class:`ExperimentConfig`; nested model, loss and generator fields use the
prefixes ``model.``, ``weights.`` and ``data.``.  Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from . import metrics
from .decoder import DecodeTrace, beam_search, oracle_wer, streaming_decode, word_errors
from .losses import LossWeights, joint_ce_loss, joint_mwer_loss
from .model import FIRST_PASS, SECOND_PASS, CascadedTransducer, ModelConfig, init_params
from .synthdata import GeneratorConfig, generate_corpus, load_corpus, save_corpus
from .textfront import (
    PHONEME,
    SCHEMES,
    WORD_PIECE,
    DurationModel,
    TextExample,
    build_text_example,
    estimate_duration_stats,
    prepare_text_input,
)

# filled from the corpus at run time, so they are not config keys
DERIVED_MODEL_FIELDS = ("output_vocab", "input_vocab")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str):
        super().__init__(f"non-finite loss or parameters at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    unit_kind: str = PHONEME
    duration_scheme: str = "subword_dist"
    fixed_len: int = 3
    random_min: int = 1
    random_max: int = 3
    mask_rate: float = 0.15
    mask_span: int = 5
    batch_size: int = 16
    mix: float = 0.5
    ce_steps: int = 10_000
    mwer_steps: int = 0
    lr: float = 2e-3
    lr_final: float = 2e-4
    mwer_lr: float = 1e-4
    mwer_batch_size: int = 8
    checkpoint_every: int = 500
    seed: int = 0
    corpus_dir: str = "corpus"
    init_checkpoint: str = ""
    beam_size: int = 8
    max_symbols: int = 4

    def validate(self) -> None:
        if not 0.0 <= self.mix <= 1.0:
            raise ConfigError(f"mix must be in [0, 1], got {self.mix}")
        if self.unit_kind not in (PHONEME, WORD_PIECE):
            raise ConfigError(f"unit_kind must be {PHONEME} or {WORD_PIECE}, got {self.unit_kind!r}")
        if self.duration_scheme not in SCHEMES:
            raise ConfigError(f"duration_scheme must be one of {SCHEMES}, got {self.duration_scheme!r}")
        if self.batch_size < 1 or self.mwer_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.ce_steps < 0 or self.mwer_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not 0 <= self.mask_rate <= 1:
            raise ConfigError("mask_rate must be in [0, 1]")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")

    # -- flat text form ------------------------------------------------

    def to_flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    if f.name == "model" and g.name in DERIVED_MODEL_FIELDS:
                        continue
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",")]
            return tuple(type(d)(p) for d, p in zip(default, parts)) if len(parts) == len(default) else None
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: ExperimentConfig, items: Dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with flat ``key -> string`` overrides applied."""
    flat = cfg.to_flat()
    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {"model": {}, "weights": {}, "data": {}}
    for key, raw in items.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        value = _convert(key, raw, flat[key])
        if value is None:
            raise ConfigError(f"bad value for {key}: {raw!r}")
        if "." in key:
            group, name = key.split(".", 1)
            nested[group][name] = value
        else:
            top[key] = value
    try:
        new = dataclasses.replace(
            cfg,
            model=dataclasses.replace(cfg.model, **nested["model"]),
            weights=dataclasses.replace(cfg.weights, **nested["weights"]),
            data=dataclasses.replace(cfg.data, **nested["data"]),
            **top,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    new.validate()
    return new


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    items: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in items:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        items[k] = v
    return apply_overrides(base or ExperimentConfig(), items)


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(cfg, seed=seed, data=dataclasses.replace(cfg.data, seed=seed))


# ---------------------------------------------------------------------------
# training


def model_config_for(cfg: ExperimentConfig, corpus) -> ModelConfig:
    in_vocab = len(corpus.phones) if cfg.unit_kind == PHONEME else len(corpus.vocab)
    return dataclasses.replace(cfg.model, output_vocab=len(corpus.vocab), input_vocab=in_vocab)


def build_model(cfg: ExperimentConfig, corpus, checkpoint: Optional[str] = None) -> CascadedTransducer:
    mcfg = model_config_for(cfg, corpus)
    params = init_params(mcfg, cfg.seed)
    if checkpoint:
        if not os.path.exists(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        params.load_values(dc.load_checkpoint(checkpoint))
    return CascadedTransducer(mcfg, params)


class TextStream:
    """Samples text-only training examples, rendered fresh at every draw."""

    def __init__(self, cfg: ExperimentConfig, corpus):
        self.cfg = cfg
        self.corpus = corpus
        self.sentences: List[Tuple[str, object]] = [(s, None) for s in corpus.unpaired]
        if cfg.duration_scheme == "align_plus_dist":
            # paired transcripts join the text stream with their alignments
            self.sentences += [(ex.text, ex.alignment) for ex in corpus.paired]
        stats = None
        if cfg.duration_scheme in ("subword_dist", "align_plus_dist"):
            units = corpus.phones if cfg.unit_kind == PHONEME else corpus.vocab
            stats = estimate_duration_stats([ex.alignment for ex in corpus.paired], cfg.unit_kind, units)
        self.durations = DurationModel(
            cfg.duration_scheme,
            fixed_len=cfg.fixed_len,
            random_range=(cfg.random_min, cfg.random_max),
            stats=stats,
            unit_kind=cfg.unit_kind,
            vocab=corpus.phones if cfg.unit_kind == PHONEME else corpus.vocab,
        )
        self._cache: Dict[int, TextExample] = {}

    def example(self, i: int) -> TextExample:
        ex = self._cache.get(i)
        if ex is None:
            text = self.sentences[i][0]
            ex = build_text_example(text, self.cfg.unit_kind, self.corpus.vocab, self.corpus.lexicon)
            self._cache[i] = ex
        return ex

    def draw(self, n: int, rng):
        if not self.sentences:
            raise ValueError("text mixing requested but the corpus has no text")
        out = []
        for i in rng.integers(0, len(self.sentences), size=n):
            i = int(i)
            out.append(prepare_text_input(
                self.example(i), self.durations, rng, self.sentences[i][1],
                self.cfg.mask_rate, self.cfg.mask_span,
            ))
        return out


class PairedStream:
    """Epoch-wise shuffled paired examples."""

    def __init__(self, examples, rng):
        self.examples = list(examples)
        self.rng = rng
        self._order: List[int] = []

    def draw(self, n: int):
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.examples)))
            out.append(self.examples[self._order.pop()])
        return out


@dataclass
class TrainResult:
    out_dir: str
    log_path: str
    checkpoints: List[str]
    best_ce: Optional[str]
    final: str
    model: CascadedTransducer


def _ckpt(out_dir: str, phase: str, step: int) -> str:
    return os.path.join(out_dir, f"{phase}-{step:06d}.ckpt")


def _lr_at(step: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine decay from ``lr0`` to ``lr1``."""
    if total <= 1:
        return lr0
    frac = step / (total - 1)
    return lr1 + 0.5 * (lr0 - lr1) * (1 + math.cos(math.pi * frac))


def _batch_split(size: int, mix: float) -> Tuple[int, int]:
    n_text = int(round(size * mix))
    return size - n_text, n_text


def train(cfg: ExperimentConfig, out_dir: str, corpus=None, log=None) -> TrainResult:
    """CE phase, then an optional MWER phase from the best CE checkpoint.

    Every step is logged as one JSON line in ``out_dir/train.jsonl``.
    """
    cfg.validate()
    corpus = corpus if corpus is not None else load_corpus(cfg.corpus_dir)
    if cfg.mwer_steps > 0 and cfg.ce_steps == 0 and not cfg.init_checkpoint:
        raise ValueError("the MWER phase needs a CE checkpoint: set init_checkpoint or ce_steps")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(cfg.dumps())
    model = build_model(cfg, corpus, cfg.init_checkpoint or None)
    rng = np.random.default_rng(cfg.seed + 1)
    paired = PairedStream(corpus.paired, rng)
    text = TextStream(cfg, corpus) if cfg.mix > 0 else None
    log_path = os.path.join(out_dir, "train.jsonl")
    checkpoints: List[str] = []
    best_ce, best_score = cfg.init_checkpoint or None, math.inf
    with open(log_path, "w", encoding="utf-8") as logf:
        if cfg.ce_steps > 0:
            best_ce, checkpoints = _run_phase(
                "ce", cfg, model, paired, text, rng, logf, out_dir, corpus, log
            )
        if cfg.mwer_steps > 0:
            if best_ce is None:
                raise ValueError("the MWER phase needs a CE checkpoint")
            model.params.load_values(dc.load_checkpoint(best_ce))
            _, more = _run_phase("mwer", cfg, model, paired, text, rng, logf, out_dir, corpus, log)
            checkpoints += more
    final = checkpoints[-1] if checkpoints else cfg.init_checkpoint
    return TrainResult(out_dir, log_path, checkpoints, best_ce, final, model)


def _run_phase(phase, cfg, model, paired, text, rng, logf, out_dir, corpus, log):
    steps = cfg.ce_steps if phase == "ce" else cfg.mwer_steps
    size = cfg.batch_size if phase == "ce" else cfg.mwer_batch_size
    n_paired, n_text = _batch_split(size, cfg.mix if text is not None else 0.0)
    if phase == "ce":
        opt = dc.Adam(lr=cfg.lr)
    else:
        opt = dc.Adam(lr=cfg.mwer_lr)
    last_good = _ckpt(out_dir, phase, 0)
    dc.save_checkpoint(last_good, model.params.snapshot())
    checkpoints: List[str] = []
    best, best_score, window = None, math.inf, []
    t0 = time.time()
    for step in range(1, steps + 1):
        pb = paired.draw(n_paired) if n_paired else []
        tb = text.draw(n_text, rng) if n_text else []
        if phase == "ce":
            loss, rep = joint_ce_loss(model, pb, tb, cfg.weights)
            lr = _lr_at(step - 1, steps, cfg.lr, cfg.lr_final)
        else:
            loss, rep = joint_mwer_loss(
                model, pb, tb, cfg.weights, corpus.vocab, cfg.beam_size, cfg.max_symbols
            )
            lr = cfg.mwer_lr
        if not np.isfinite(loss.value).all():
            raise TrainingDiverged(step, last_good)
        model.params.zero_grad()
        dc.backward(loss)
        norm = opt.step(model.params, lr)
        if not (math.isfinite(norm) and model.params.all_finite()):
            raise TrainingDiverged(step, last_good)
        rec = {"phase": phase, "step": step, "lr": lr, "grad_norm": norm}
        rec.update(rep.as_record())
        logf.write(json.dumps(rec) + "\n")
        window.append(rep.ce_c_s + rep.ce_nc_s if n_paired else rep.total)
        if step % cfg.checkpoint_every == 0 or step == steps:
            path = _ckpt(out_dir, phase, step)
            dc.save_checkpoint(path, model.params.snapshot())
            checkpoints.append(path)
            last_good = path
            score = float(np.mean(window))
            window = []
            if score < best_score:
                best, best_score = path, score
            if log is not None:
                log(f"{phase} step {step}/{steps} loss {rep.total:.4f} window {score:.4f} "
                    f"({time.time() - t0:.0f}s)")
    return best, checkpoints


def read_log(path) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    test_set: str
    wer: float
    oracle_wer: float
    first_pass_wer: Optional[float] = None
    utterances: int = 0


@dataclass
class EvalTable:
    rows: List[EvalRow]
    checkpoint_id: str
    config_hash: str
    beam_size: int

    def row(self, name: str) -> EvalRow:
        for r in self.rows:
            if r.test_set == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        head = f"# checkpoint {self.checkpoint_id} config {self.config_hash} beam {self.beam_size}"
        lines = [head, "test_set\tWER\toracle_WER\tfirst_pass_WER\tutterances"]
        for r in self.rows:
            fp = "NA" if r.first_pass_wer is None else f"{r.first_pass_wer:.2f}"
            lines.append(f"{r.test_set}\t{r.wer:.2f}\t{r.oracle_wer:.2f}\t{fp}\t{r.utterances}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        meta = {"checkpoint_id": self.checkpoint_id, "config_hash": self.config_hash,
                "beam_size": self.beam_size}
        return "".join(json.dumps({**meta, **dataclasses.asdict(r)}) + "\n" for r in self.rows)


def checkpoint_id(path: Optional[str]) -> str:
    if not path:
        return "in-memory"
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def decode_set(model: CascadedTransducer, examples, beam_size: int, max_symbols: int,
               passes=(SECOND_PASS,), batch: int = 32) -> Dict[str, List[DecodeTrace]]:
    """Beam-search every example with the requested decoders."""
    out: Dict[str, List[DecodeTrace]] = {p: [] for p in passes}
    runners = {p: model.numpy_decoder(p) for p in passes}
    offsets = {FIRST_PASS: 0.0, SECOND_PASS: model.cfg.lookahead_ms}
    for start in range(0, len(examples), batch):
        chunk = examples[start:start + batch]
        causal, cascaded = model.encode_speech([ex.x_s for ex in chunk])
        states = {FIRST_PASS: causal, SECOND_PASS: cascaded}
        for p in passes:
            for b in range(len(chunk)):
                out[p].append(beam_search(
                    states[p].example(b), runners[p], beam_size, max_symbols,
                    model.cfg.frame_ms, offsets[p], p,
                ))
    return out


def evaluate(model: CascadedTransducer, vocab, test_sets: Dict[str, Sequence], beam_size: int = 8,
             max_symbols: int = 4, first_pass: bool = False, checkpoint: Optional[str] = None,
             config_hash: str = "") -> EvalTable:
    """Second-pass WER and oracle WER per test set, optionally first-pass WER."""
    rows = []
    passes = (SECOND_PASS, FIRST_PASS) if first_pass else (SECOND_PASS,)
    for name, examples in test_sets.items():
        if not examples:
            raise ValueError(f"test set {name!r} is empty")
        traces = decode_set(model, examples, beam_size, max_symbols, passes)
        words = sum(len(ex.text.split()) for ex in examples)
        errs = oracle = 0
        for ex, tr in zip(examples, traces[SECOND_PASS]):
            per_hyp = word_errors(tr.nbest, ex.y_s, vocab)
            errs += per_hyp[0]
            oracle += min(per_hyp)
        fp = None
        if first_pass:
            fp_errs = sum(word_errors(tr.nbest[:1], ex.y_s, vocab)[0]
                          for ex, tr in zip(examples, traces[FIRST_PASS]))
            fp = 100.0 * fp_errs / words
        rows.append(EvalRow(name, 100.0 * errs / words, 100.0 * oracle / words, fp, len(examples)))
    return EvalTable(rows, checkpoint_id(checkpoint), config_hash, beam_size)


def latency_report(model: CascadedTransducer, vocab, examples, beam_size: int = 8,
                   max_symbols: int = 4, self_compare: bool = False) -> metrics.LatencyReport:
    """Streaming-decode every utterance and aggregate EP/PR percentiles and PFHR.

    With ``self_compare`` the first-pass trace stands in for the second pass.
    """
    if not examples:
        raise ValueError("latency_report needs at least one utterance")
    pairs = []
    for ex in examples:
        first, second = streaming_decode(model, ex.x_s, beam_size, max_symbols, vocab)
        pairs.append((first, first if self_compare else second))
    return metrics.latency_report(pairs, [ex.text for ex in examples], [ex.utt_end_ms for ex in examples])


# ---------------------------------------------------------------------------
# command line

TEST_SETS = ("head", "rare")


def _corpus_test_sets(corpus, names: Sequence[str]):
    table = {"head": corpus.head_test, "rare": corpus.rare_test}
    return {n: table[n] for n in names}


def _gradcheck(cfg: ExperimentConfig, steps: int, entries: int, log) -> bool:
    small = dataclasses.replace(cfg.data, n_paired=50, n_unpaired=50, n_head_test=2, n_rare_test=2)
    corpus = generate_corpus(small)
    model = build_model(cfg, corpus)
    rng = np.random.default_rng(cfg.seed)
    paired = PairedStream(corpus.paired, rng)
    text = TextStream(cfg, corpus)
    ok = True
    for s in range(steps):
        pb, tb = paired.draw(2), text.draw(2, rng)
        fn = lambda p: joint_ce_loss(model, pb, tb, cfg.weights)[0]
        rep = dc.finite_diff_check(fn, model.params, max_entries=entries, seed=cfg.seed + s)
        name, err = rep.worst()
        log(f"gradcheck batch {s + 1}: {len(rep.max_rel_err)} parameters, worst {name} {err:.3e}, "
            f"{'pass' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    return ok


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value experiment config")
    common.add_argument("--seed", type=int, help="overrides the experiment and generator seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("--corpus", help="corpus directory (overrides corpus_dir)")
    parser = argparse.ArgumentParser(prog="textinject", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    st = sub.add_parser("stats", parents=[common], help="dump duration statistics")
    st.add_argument("--unit-kind", choices=(PHONEME, WORD_PIECE))
    sub.add_parser("train", parents=[common], help="CE training with an optional MWER phase")
    for name, helptext in (("evaluate", "WER table"), ("latency", "latency report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--beam", type=int)
        p.add_argument("--test-set", action="append", choices=TEST_SETS)
        if name == "evaluate":
            p.add_argument("--first-pass", action="store_true", help="add a first-pass WER column")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    gc.add_argument("--steps", type=int, default=1, help="number of random batches to check")
    gc.add_argument("--entries", type=int, default=8, help="coordinates probed per parameter")
    return parser


def _write(out: Optional[str], name: str, text: str) -> None:
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, name), "w", encoding="utf-8") as f:
            f.write(text)


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        if args.corpus:
            cfg = dataclasses.replace(cfg, corpus_dir=args.corpus)
        if args.command == "gen-data":
            out = args.out or cfg.corpus_dir
            corpus = generate_corpus(cfg.data)
            save_corpus(corpus, out)
            print(f"wrote {len(corpus.paired)} paired, {len(corpus.unpaired)} unpaired, "
                  f"{len(corpus.head_test)} head-test, {len(corpus.rare_test)} rare-test to {out}")
            return 0
        if args.command == "gradcheck":
            return 0 if _gradcheck(cfg, args.steps, args.entries, print) else 1
        corpus = load_corpus(cfg.corpus_dir)
        if args.command == "stats":
            kind = args.unit_kind or cfg.unit_kind
            units = corpus.phones if kind == PHONEME else corpus.vocab
            stats = estimate_duration_stats([ex.alignment for ex in corpus.paired], kind, units)
            lines = ["unit\tmean_frames\tstd_frames"]
            for u in sorted(stats.table):
                m, s = stats.table[u]
                lines.append(f"{units.symbol(u)}\t{m:.4f}\t{s:.4f}")
            lines.append(f"<fallback>\t{stats.fallback[0]:.4f}\t{stats.fallback[1]:.4f}")
            text = "\n".join(lines) + "\n"
            print(text, end="")
            _write(args.out, "duration_stats.tsv", text)
            return 0
        if args.command == "train":
            res = train(cfg, args.out or "run", corpus, log)
            print(f"log {res.log_path}")
            print(f"best CE checkpoint {res.best_ce}")
            print(f"final checkpoint {res.final}")
            return 0
        model = build_model(cfg, corpus, args.checkpoint)
        beam = args.beam or cfg.beam_size
        names = args.test_set or list(TEST_SETS)
        if args.command == "evaluate":
            table = evaluate(model, corpus.vocab, _corpus_test_sets(corpus, names), beam,
                             cfg.max_symbols, args.first_pass, args.checkpoint, cfg.config_hash())
            print(table.to_text(), end="")
            _write(args.out, "eval.jsonl", table.to_records())
            return 0
        if args.command == "latency":
            for name, examples in _corpus_test_sets(corpus, names).items():
                rep = latency_report(model, corpus.vocab, examples, beam, cfg.max_symbols)
                print(f"# {name}")
                print(rep.to_text(), end="")
                _write(args.out, f"latency_{name}.jsonl", json.dumps(rep.as_record()) + "\n")
            return 0
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    parser.print_usage(sys.stderr)
    return 2


def main() -> None:
    sys.exit(cli())
