"""Reusable experiment drivers shared by scripts/, the CLI and the acceptance suite.

Each driver takes plain dataclass configs, trains from scratch in-process and
returns a JSON-able summary dict.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, SequencePair, ToyTaskSpec, Vocab, build_vocab, encode_example, gen_task
from .decoding import DecodeConfig, decode, measure_speedup
from .metrics import bleu4, exact_match, rouge_l
from .model import PROFILES, EncoderModel, ModelConfig
from .training import MetricsWriter, TrainConfig, static_mix_dataset, train

log = logging.getLogger(__name__)

# Hyper-parameters for training from scratch at desk scale.  The 3e-5 learning
# rate of the large `paper-default` profile suits fine-tuning a pre-trained
# encoder and barely moves a randomly initialised one in a few thousand steps.
DESK_TRAIN = TrainConfig(lr=1e-3, warmup_steps=500, batch_size=64, max_steps=20000,
                         log_every=100, eval_every=500)


@dataclass
class Corpus:
    dataset: Dataset
    vocab: Vocab
    pairs: dict[str, list[SequencePair]]


def build_corpus(spec: ToyTaskSpec) -> Corpus:
    ds = gen_task(spec)
    vocab = build_vocab(ds.corpus())
    pairs = {name: [encode_example(vocab, ex) for ex in split]
             for name, split in ds.splits().items()}
    return Corpus(ds, vocab, pairs)


def make_model(vocab: Vocab, seed: int = 0, profile: str = "desk", dtype=np.float32,
               **overrides) -> EncoderModel:
    cfg = replace(PROFILES[profile], vocab_size=len(vocab), **overrides)
    return EncoderModel.init(cfg, seed=seed, dtype=dtype)


def decode_all(model: EncoderModel, pairs: Sequence[SequencePair], cfg: DecodeConfig):
    return [decode(model, p.source, cfg) for p in pairs]


def score_iterations(results, pairs: Sequence[SequencePair], strategy: str = "") -> list[dict]:
    """One metric row per decoding iteration (for iteration-vs-quality plots)."""
    refs = [p.references for p in pairs]
    n_iter = len(results[0].tokens_per_iteration)
    rows = []
    for k in range(n_iter):
        hyps = [r.tokens_per_iteration[k] for r in results]
        rows.append({"strategy": strategy, "iteration": k + 1, "bleu4": bleu4(hyps, refs),
                     "rouge_l": rouge_l(hyps, refs), "exact_match": exact_match(hyps, refs)})
    return rows


def em_scorer(pairs: Sequence[SequencePair], cfg: DecodeConfig | None = None):
    cfg = cfg or DecodeConfig()
    refs = [p.references for p in pairs]

    def score(model):
        return exact_match([r.tokens for r in decode_all(model, pairs, cfg)], refs)
    return score


def fit(model: EncoderModel, corpus: Corpus, cfg: TrainConfig, train_pairs=None,
        stop_at: float | None = None, metrics: MetricsWriter | None = None,
        n_valid: int | None = None) -> dict:
    """Train and keep the best-validation-EM parameters in ``model``."""
    valid = corpus.pairs["valid"][:n_valid]
    best = {"state": None}

    def keep(m, step, score):
        best["state"] = m.state()

    t0 = time.perf_counter()
    out = train(model, train_pairs or corpus.pairs["train"], cfg, metrics, em_scorer(valid),
                keep, stop_at)
    if best["state"] is not None:
        model.load_state(best["state"])
    out["wall_s"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------- drivers


def convergence_model(spec: ToyTaskSpec | None = None, cfg: TrainConfig | None = None,
                      seed: int = 0, target: float = 0.95,
                      metrics: MetricsWriter | None = None) -> dict:
    """Train until validation exact match reaches ``target``; keeps the model."""
    spec = spec or ToyTaskSpec(task="reverse", seed=seed)
    cfg = cfg or replace(DESK_TRAIN, seed=seed)
    corpus = build_corpus(spec)
    model = make_model(corpus.vocab, seed=seed)
    out = fit(model, corpus, cfg, stop_at=target, metrics=metrics)
    result = {"steps": out["steps"], "valid_exact_match": out["best_score"],
              "wall_s": out["wall_s"], "reached": out["best_score"] >= target}
    return {"result": result, "model": model, "corpus": corpus}


def convergence(*args, **kwargs) -> dict:
    return convergence_model(*args, **kwargs)["result"]


@dataclass
class AblationConfig:
    # three rewrite templates over a 10-word vocabulary: small enough to train
    # three modes x three seeds inside an hour, large enough not to saturate
    spec: ToyTaskSpec = field(default_factory=lambda: ToyTaskSpec(
        task="templated_paraphrase", vocab_size=10, min_len=4, max_len=10,
        n_train=2000, n_valid=100, n_test=200, n_templates=3))
    train: TrainConfig = field(default_factory=lambda: replace(
        DESK_TRAIN, max_steps=1500, warmup_steps=200, eval_every=500))
    seeds: tuple[int, ...] = (0, 1, 2)
    iterations: tuple[int, ...] = (1, 3, 6)
    n_valid: int | None = 100


def _test_bleu(model, corpus, strategy="single_pass", iterations=1):
    test = corpus.pairs["test"]
    results = decode_all(model, test, DecodeConfig(strategy=strategy, iterations=iterations))
    return score_iterations(results, test, strategy)


def mixing_ablation(cfg: AblationConfig | None = None, keep_models: bool = False) -> dict:
    """Train none / static / mist from the same seed; report single-pass test metrics.

    Static mixing freezes pseudo targets from the trained no-mixing model of the
    same seed, then trains a fresh model on the doubled dataset for the same
    number of steps.
    """
    cfg = cfg or AblationConfig()
    corpus = build_corpus(cfg.spec)
    report = {"config": {"spec": asdict(cfg.spec), "train": asdict(cfg.train)}, "seeds": {}}
    models = {}
    for seed in cfg.seeds:
        row = {}
        tcfg = replace(cfg.train, seed=seed)
        none = make_model(corpus.vocab, seed=seed)
        row["none"] = fit(none, corpus, replace(tcfg, mixing_mode="none"), n_valid=cfg.n_valid)
        mixed = static_mix_dataset(none, corpus.vocab, corpus.dataset.train)
        static_pairs = [encode_example(corpus.vocab, ex) for ex in mixed]
        static = make_model(corpus.vocab, seed=seed)
        row["static"] = fit(static, corpus, replace(tcfg, mixing_mode="static"),
                            train_pairs=static_pairs, n_valid=cfg.n_valid)
        mist = make_model(corpus.vocab, seed=seed)
        row["mist"] = fit(mist, corpus, replace(tcfg, mixing_mode="mist"), n_valid=cfg.n_valid)
        summary = {}
        for mode, model in (("none", none), ("static", static), ("mist", mist)):
            metrics = _test_bleu(model, corpus)[0]
            metrics.update(steps=row[mode]["steps"], wall_s=row[mode]["wall_s"],
                           valid_exact_match=row[mode]["best_score"])
            summary[mode] = metrics
        report["seeds"][seed] = summary
        models[seed] = {"none": none, "static": static, "mist": mist}
        log.info("seed %d: %s", seed, {m: round(s["bleu4"], 4) for m, s in summary.items()})
    modes = ("none", "static", "mist")
    report["mean_bleu4"] = {m: float(np.mean([report["seeds"][s][m]["bleu4"] for s in cfg.seeds]))
                            for m in modes}
    if keep_models:
        report["models"] = models
        report["corpus"] = corpus
    return report


def iteration_ablation(model: EncoderModel, corpus: Corpus,
                       iterations: Sequence[int] = (1, 3, 6),
                       strategies: Sequence[str] = ("mist_iter", "mask_predict")) -> list[dict]:
    """Test metrics at each iteration budget; early stopping stays on."""
    rows = []
    for strategy in strategies:
        for n in iterations:
            row = _test_bleu(model, corpus, strategy, n)[-1]
            row["iteration"] = n
            rows.append(row)
    return rows


@dataclass
class LatencyConfig:
    length: int = 32
    n_examples: int = 60
    warmup: int = 10
    seed: int = 0
    mist_iterations: int = 3


def latency(cfg: LatencyConfig | None = None, model_nar: EncoderModel | None = None,
            model_ar: EncoderModel | None = None) -> dict:
    """Batch-1 timing with every strategy forced to emit exactly ``cfg.length`` tokens.

    Quality is irrelevant here, so untrained desk-profile weights are used
    unless models are supplied; forcing the length removes any dependence on
    the length head or on [SEP] emission.
    """
    cfg = cfg or LatencyConfig()
    vocab_size = PROFILES["desk"].vocab_size
    if model_nar is None:
        mcfg = replace(PROFILES["desk"], max_target_len=cfg.length,
                       max_positions=max(PROFILES["desk"].max_positions, 3 * cfg.length + 8))
        model_nar = EncoderModel.init(mcfg, seed=cfg.seed)
        model_ar = model_ar or EncoderModel.init(mcfg, seed=cfg.seed + 1)
        vocab_size = mcfg.vocab_size
    model_ar = model_ar or model_nar
    rng = np.random.default_rng(cfg.seed)
    sources = [rng.integers(4, vocab_size, size=cfg.length).tolist() for _ in range(cfg.n_examples)]
    configs = {
        "ar_greedy": DecodeConfig(strategy="ar_greedy", force_length=cfg.length),
        "single_pass": DecodeConfig(force_length=cfg.length),
        "mist_iter": DecodeConfig(strategy="mist_iter", iterations=cfg.mist_iterations,
                                  force_length=cfg.length, early_stop=False),
        "mask_predict": DecodeConfig(strategy="mask_predict", iterations=cfg.mist_iterations,
                                     force_length=cfg.length),
    }
    report = measure_speedup(model_nar, model_ar, sources, configs, warmup=cfg.warmup)
    s = report["strategies"]
    report["mist_per_iteration_ratio"] = (s["mist_iter"]["per_iteration_median_ns"]
                                          / s["single_pass"]["per_iteration_median_ns"])
    report["config"] = asdict(cfg)
    return report
