"""Acceptance gate: one test per criterion, each printing a single pass/fail line.

Criteria 9 to 12 train real models on the default synthetic corpus.  Runs are
kept under ``.acceptance_runs/`` (or ``TEXTINJECT_ACCEPT_DIR``) and reused only
when both the config hash and a digest of the package source match.
"""

import dataclasses
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from textinject import diffcore as dc
from textinject import harness as H
from textinject import losses as ls
from textinject import metrics
from textinject import synthdata as sd
from textinject import textfront as tf
from textinject.decoder import DecodeTrace, Hypothesis, streaming_decode
from textinject.model import FIRST_PASS, SECOND_PASS, CascadedTransducer, LogitLattice, ModelConfig

from conftest import record
from oracles import brute_force_nll, levenshtein, nearest_rank, random_hat_lattice

CE_STEPS = 10_000
MWER_STEPS = 200
BUDGET_S = 3600.0


def check(number, passed, detail):
    record(number, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, detail


# -- property criteria ---------------------------------------------------------------------------


def test_c01_transducer_loss_oracle():
    rng = np.random.default_rng(0)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(1000):
        t_len, u_len, vocab = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 6))
        lp = random_hat_lattice(rng, t_len, u_len, vocab)
        target = [int(k) for k in rng.integers(1, vocab, size=u_len)]
        got = float(ls.rnnt_nll(LogitLattice(dc.Node(lp), FIRST_PASS), target).value)
        worst = max(worst, abs(got - brute_force_nll(lp, target)))
    elapsed = time.perf_counter() - t0
    check(1, worst < 1e-10 and elapsed < 10.0, f"max abs err {worst:.2e} over 1000 lattices in {elapsed:.2f}s")


def test_c02_full_loss_gradients():
    cfg = H.ExperimentConfig()
    small = dataclasses.replace(cfg.data, n_paired=50, n_unpaired=50, n_head_test=2, n_rare_test=2)
    corpus = sd.generate_corpus(small)
    model = H.build_model(cfg, corpus)
    rng = np.random.default_rng(0)
    paired = H.PairedStream(corpus.paired, rng).draw(2)
    text = H.TextStream(cfg, corpus).draw(2, rng)
    t0 = time.perf_counter()
    rep = dc.finite_diff_check(lambda p: ls.joint_ce_loss(model, paired, text, cfg.weights)[0],
                               model.params, max_entries=8)
    elapsed = time.perf_counter() - t0
    name, err = rep.worst()
    ok = rep.passed and len(rep.max_rel_err) == len(model.params) and elapsed < 60.0
    check(2, ok, f"{len(rep.max_rel_err)} parameters, worst {name} rel err {err:.2e}, {elapsed:.1f}s")


def test_c03_hat_normalization():
    rng = np.random.default_rng(0)
    model = CascadedTransducer(ModelConfig(output_vocab=24, input_vocab=10), seed=0)
    worst, n = 0.0, 0
    for dec in (FIRST_PASS, SECOND_PASS):
        for _ in range(40):
            t_len, u_len = int(rng.integers(5, 21)), int(rng.integers(5, 16))
            _, nc = model.encoder_forward(rng.standard_normal((2 * t_len, model.cfg.feature_dim)), "speech")
            target = [int(k) for k in rng.integers(1, 24, size=u_len)]
            lat = model.build_lattice(nc, target, dec).logprobs.value
            totals = np.exp(lat).sum(-1)
            worst = max(worst, np.abs(totals - 1.0).max())
            n += totals.size
    check(3, n >= 10_000 and worst < 1e-9, f"{n} entries, max |sum-1| {worst:.2e}")


def test_c04_duration_models():
    notes = []
    ok = tf.upsample([7, 3], tf.DurationModel("fixed_rep")) == [7, 7, 7, 3, 3, 3]
    ok &= tf.upsample([5], tf.DurationModel("fixed_rep", fixed_len=1)) == [5]
    reps = tf.DurationModel("random_rep").repeats([4] * 100_000, None, np.random.default_rng(0))
    mean = float(np.mean(reps))
    ok &= abs(mean - 2.0) <= 0.05
    notes.append(f"random_rep mean {mean:.4f}")
    stats = tf.DurationStats({4: (3.0, 0.0), 5: (6.0, 0.0)}, (2.0, 0.0))
    ok &= tf.upsample([4, 5], tf.DurationModel("subword_dist", stats=stats),
                      rng=np.random.default_rng(0)) == [4] * 3 + [5] * 6
    corpus = sd.generate_corpus(sd.GeneratorConfig(n_paired=300, n_unpaired=100, n_head_test=0, n_rare_test=0))
    stats = tf.estimate_duration_stats([e.alignment for e in corpus.paired], tf.PHONEME, corpus.phones)
    model = tf.DurationModel("align_plus_dist", stats=stats, unit_kind=tf.PHONEME, vocab=corpus.phones)
    exact = 0
    for ex in corpus.paired:
        x_t = tf.tokenize_phonemes(ex.text, corpus.lexicon)
        truth = [e - s for p, s, e in ex.alignment.phones if p != sd.SILENCE]
        exact += model.repeats(x_t, ex.alignment, np.random.default_rng(0)) == truth
    ok &= exact == len(corpus.paired)
    notes.append(f"align_plus_dist exact on {exact}/{len(corpus.paired)}")
    check(4, ok, ", ".join(notes))


def test_c05_masking():
    rng = np.random.default_rng(0)
    fracs = np.array([tf.mask_spans(list(range(4, 104)), rng=rng)[1].mean() for _ in range(10_000)])
    ok = fracs.min() >= 0.15 and 0.15 <= fracs.mean() <= 0.19
    check(5, ok, f"min {fracs.min():.3f}, mean {fracs.mean():.4f}")


def test_c06_mwer_fixtures():
    single = float(ls.mwer_loss(np.array([-2.3]), [5]).value)
    pair = float(ls.mwer_loss(np.log([0.6, 0.4]), [0, 2]).value)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        lp = np.log(rng.uniform(0.01, 1.0, size=int(rng.integers(1, 9))))
        errs = rng.integers(0, 6, size=len(lp)).astype(float)
        a = float(ls.mwer_loss(lp, errs).value)
        b = float(ls.mwer_loss(lp + np.log(rng.uniform(1e-3, 1e3)), errs).value)
        worst = max(worst, abs(a - b))
    ok = single == 0.0 and abs(pair + 0.2) < 1e-12 and worst < 1e-12
    check(6, ok, f"N=1 {single}, pair {pair:.15f}, scaling drift {worst:.1e}")


def _trace(labels, partials=(), eos=None):
    tr = DecodeTrace(FIRST_PASS, 30.0, partials=list(partials), eos_frame=eos)
    tr.nbest = [Hypothesis(tuple(labels), 0.0)]
    return tr


def test_c07_metric_fixtures():
    ok = metrics.edit_distance(list("kitten"), list("sitting"))[3] == 3
    ok &= levenshtein("kitten", "sitting") == 3
    for values, p in (([10, 20, 30, 40], 50), ([7.5], 90), (list(range(10, 110, 10)), 90), ([3, 1, 2], 50)):
        ok &= metrics.percentile(values, p) == nearest_rank(values, p)
    ok &= metrics.percentile(list(range(10, 110, 10)), 90) == 90
    flips = [(_trace([5]), _trace([5])), (_trace([5]), _trace([6])), (_trace([7, 8]), _trace([7, 8]))]
    rate = metrics.pfhr(flips)
    ok &= round(rate, 4) == 0.6667
    firsts = [
        _trace([5, 6], [(10, 330.0, "a"), (25, 780.0, "a b")], eos=32),
        _trace([5], [(30, 930.0, "a c"), (38, 1170.0, "a b c")], eos=40),
        _trace([], [(5, 180.0, "x")], eos=None),
        _trace([7], [(19, 600.0, "q")], eos=20),
    ]
    seconds = [_trace([5, 6]), _trace([6]), _trace([]), _trace([7])]
    rep = metrics.latency_report(list(zip(firsts, seconds)), ["a b", "a b c", "y", "q"],
                                 [900.0, 1080.0, 700.0, 600.0])
    ok &= rep == metrics.LatencyReport(ep50=90.0, ep90=150.0, pr50=0.0, pr90=90.0, pfhr=0.75,
                                       utterances=4, endpointed=3, correct_partial=3)
    check(7, bool(ok), f"edit 3, pfhr {rate:.4f}, report {rep.as_record()}")


def test_c08_streaming_invariants():
    rng = np.random.default_rng(0)
    model = CascadedTransducer(ModelConfig(output_vocab=20, input_vocab=10), seed=1)
    for k in ("dec1.joint.out_w", "dec2.joint.out_w"):
        model.params[k].value = model.params[k].value * 3.0
    cfg = model.cfg
    prefix_ok = 0
    for _ in range(100):
        t_len = int(rng.integers(12, 41))
        feats = rng.standard_normal((t_len, cfg.feature_dim))
        cut = int(rng.integers(2, t_len - 1))
        other = feats.copy()
        other[cut:] = rng.standard_normal((t_len - cut, cfg.feature_dim))
        a, _ = streaming_decode(model, feats, 4)
        b, _ = streaming_decode(model, other, 4)
        limit = cut // cfg.subsample_factor
        prefix_ok += [p for p in a.partials if p[0] < limit] == [p for p in b.partials if p[0] < limit]
    r, bound_ok = cfg.total_right_context, 0
    frames = list(range(0, 40, 3))
    for frame in frames:
        x = rng.standard_normal((40, cfg.feature_dim))
        y = x.copy()
        y[frame] += 5.0
        (c1, n1), (c2, n2) = model.encode_speech([x]), model.encode_speech([y])
        t = frame // cfg.subsample_factor
        lo = max(0, t - r)
        causal = np.array_equal(c1.example(0)[:t], c2.example(0)[:t])
        ahead = np.array_equal(n1.example(0)[:lo], n2.example(0)[:lo])
        tight = t - r < 0 or not np.allclose(n1.example(0)[t - r], n2.example(0)[t - r])
        bound_ok += causal and ahead and tight
    ok = prefix_ok == 100 and bound_ok == len(frames)
    check(8, ok, f"prefix {prefix_ok}/100, lookahead bound {bound_ok}/{len(frames)} ({cfg.lookahead_ms:.0f} ms)")


# -- trained-model criteria ----------------------------------------------------------------------

ROOT = Path(__file__).resolve().parents[1]


def source_digest():
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "textinject").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


BASE = {"mix": "0", "batch_size": "16", "ce_steps": str(CE_STEPS), "weights.fastemit": "0.01"}
INJECT = {"mix": "0.5", "batch_size": "32", "ce_steps": str(CE_STEPS), "weights.fastemit": "0.01", "unit_kind": "phoneme",
         "duration_scheme": "subword_dist"}
NOREP = dict(INJECT, unit_kind="word_piece", duration_scheme="fixed_rep", fixed_len="1")


@dataclasses.dataclass
class Run:
    cfg: H.ExperimentConfig
    checkpoint: str
    seconds: float
    wer: dict
    latency: metrics.LatencyReport = None


class Runs:
    def __init__(self, root):
        self.root = root
        self.corpus = sd.generate_corpus(H.ExperimentConfig().data)
        self.cache = {}

    def get(self, name, overrides, init=None):
        if name in self.cache:
            return self.cache[name]
        cfg = H.apply_overrides(H.ExperimentConfig(), overrides)
        if init is not None:
            cfg = dataclasses.replace(cfg, ce_steps=0, mwer_steps=MWER_STEPS, init_checkpoint=init)
        out = os.path.join(self.root, name)
        done = os.path.join(out, "done.json")
        key = {"config_hash": cfg.config_hash(), "source": source_digest()}
        meta = None
        if os.path.exists(done):
            with open(done) as f:
                meta = json.load(f)
            if {k: meta.get(k) for k in key} != key:
                meta = None
        if meta is None:
            t0 = time.perf_counter()
            res = H.train(cfg, out, self.corpus)
            ckpt = res.final if init is not None else res.best_ce
            model = H.build_model(cfg, self.corpus, ckpt)
            table = H.evaluate(model, self.corpus.vocab, self._sets(), cfg.beam_size, cfg.max_symbols)
            meta = {**key, "checkpoint": ckpt,
                    "seconds": time.perf_counter() - t0, "wer": {r.test_set: r.wer for r in table.rows}}
            with open(done, "w") as f:
                json.dump(meta, f)
        run = Run(cfg, meta["checkpoint"], meta["seconds"], meta["wer"])
        self.cache[name] = run
        return run

    def latency(self, run):
        if run.latency is None:
            model = H.build_model(run.cfg, self.corpus, run.checkpoint)
            run.latency = H.latency_report(model, self.corpus.vocab, self.corpus.head_test,
                                           run.cfg.beam_size, run.cfg.max_symbols)
        return run.latency

    def _sets(self):
        return {"head": self.corpus.head_test, "rare": self.corpus.rare_test}


@pytest.fixture(scope="session")
def runs():
    root = os.environ.get("TEXTINJECT_ACCEPT_DIR") or str(ROOT / ".acceptance_runs")
    os.makedirs(root, exist_ok=True)
    return Runs(root)


def _rel(new, old):
    return (old - new) / old


def test_c09_text_injection_beats_baseline_on_rare_words(runs):
    base, inject = runs.get("baseline", BASE), runs.get("inject", INJECT)
    rel = _rel(inject.wer["rare"], base.wer["rare"])
    head = inject.wer["head"] - base.wer["head"]
    seconds = base.seconds + inject.seconds
    ok = rel >= 0.05 and head <= 1.0 and seconds < BUDGET_S
    check(9, ok, f"rare {base.wer['rare']:.2f} -> {inject.wer['rare']:.2f} ({100 * rel:+.1f}% rel reduction), "
                 f"head {base.wer['head']:.2f} -> {inject.wer['head']:.2f} ({head:+.2f} abs), "
                 f"both runs {seconds / 60:.1f} min")


def test_c10_mwer_fine_tuning(runs):
    inject = runs.get("inject", INJECT)
    tuned = runs.get("inject_mwer", INJECT, init=inject.checkpoint)
    no_worse = all(tuned.wer[k] <= inject.wer[k] for k in inject.wer)
    rel = _rel(tuned.wer["rare"], inject.wer["rare"])
    ok = no_worse and rel >= 0.01
    check(10, ok, "; ".join(f"{k} {inject.wer[k]:.2f} -> {tuned.wer[k]:.2f}" for k in sorted(inject.wer))
          + f", rare {100 * rel:+.1f}% rel reduction")


def test_c11_latency_parity(runs):
    base, inject = runs.get("baseline", BASE), runs.get("inject", INJECT)
    a, b = runs.latency(base), runs.latency(inject)
    limit = 2 * base.cfg.model.frame_ms
    diffs = {}
    for key in ("ep50", "ep90", "pr50", "pr90"):
        x, y = getattr(a, key), getattr(b, key)
        diffs[key] = abs(x - y) if x is not None and y is not None else float("inf")
    ok = all(d <= limit for d in diffs.values()) and abs(a.pfhr - b.pfhr) <= 0.05
    check(11, ok, ", ".join(f"{k} {getattr(a, k)} vs {getattr(b, k)}" for k in diffs)
          + f", PFHR {a.pfhr:.3f} vs {b.pfhr:.3f}")


def test_c12_no_replication_gives_no_gain(runs):
    base, norep = runs.get("baseline", BASE), runs.get("norep", NOREP)
    rel = _rel(norep.wer["rare"], base.wer["rare"])
    ok = abs(rel) <= 0.02
    check(12, ok, f"rare {base.wer['rare']:.2f} -> {norep.wer['rare']:.2f} ({100 * rel:+.1f}% rel), "
                  f"head {base.wer['head']:.2f} -> {norep.wer['head']:.2f}")
