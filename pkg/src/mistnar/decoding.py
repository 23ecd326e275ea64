"""Inference: cached single-pass NAR, MIST iterative decoding, Mask-Predict, AR greedy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import MASK_ID, SEP_ID, Vocab
from .metrics import latency_stats
from .model import (MASK_BIAS, N_SPECIALS, EncoderModel, TruncationError, embed, encode,
                    length_logits, mlm_logits, pack_ar_input, pack_inference_input,
                    pack_source, predict_length, predict_tokens, stack_forward)

log = logging.getLogger(__name__)

STRATEGIES = ("single_pass", "mist_iter", "mask_predict", "ar_greedy")


@dataclass
class DecodeConfig:
    strategy: str = "single_pass"
    iterations: int = 1
    use_cache: bool = True
    max_target_len: int | None = None
    force_length: int | None = None     # benchmark only: bypass the length head / [SEP]
    early_stop: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.strategy == "single_pass" and self.iterations != 1:
            raise ValueError("single_pass decoding uses exactly one iteration")


@dataclass
class SourceCache:
    kv: list[tuple[np.ndarray, np.ndarray]]   # per layer, [1, heads, n_src, d_head]
    source_ids: list[int]
    length: int
    length_logits: np.ndarray
    hidden: np.ndarray                        # [n_src, d]

    @property
    def source_len(self) -> int:
        return len(self.source_ids)


@dataclass
class DecodeResult:
    tokens_per_iteration: list[list[int]]
    length: int
    timings_ns: dict = field(default_factory=dict)
    iterations_executed: int = 1
    target_passes: int = 1
    final_text: str = ""

    @property
    def tokens(self) -> list[int]:
        return self.tokens_per_iteration[-1]

    def record(self, source_text: str = "", vocab: Vocab | None = None) -> dict:
        outs = self.tokens_per_iteration
        if vocab is not None:
            outs = [vocab.decode(t) for t in outs]
        return {"input": source_text, "T_hat": self.length, "iterations": outs,
                "final_text": self.final_text, "timings_ns": self.timings_ns,
                "iterations_executed": self.iterations_executed}


# ---------------------------------------------------------------- primitives


def _source_forward(model: EncoderModel, source_ids: Sequence[int]):
    n = len(source_ids)
    if n > model.config.max_positions:
        raise TruncationError(f"source length {n} exceeds max_positions")
    ids = np.asarray(source_ids, dtype=np.int64)[None]
    h = embed(model, ids, np.zeros_like(ids), np.arange(n)[None])
    bias = np.zeros((1, 1, n, n), dtype=model.dtype)
    return stack_forward(model, h, bias)


def cache_source(model: EncoderModel, x: Sequence[int], pseudo: Sequence[int] | None = None) -> SourceCache:
    """Encode ``[CLS] X [SEP]`` (or the mixed source) once and keep per-layer K/V."""
    src = pack_source(x, pseudo)
    with T.no_grad():
        h, kv = _source_forward(model, src)
        ll = length_logits(model, T.Tensor(h.data[0, :1])).data[0]
    return SourceCache([(k.data, v.data) for k, v in kv], src, predict_length(ll), ll, h.data[0])


def target_pass(model: EncoderModel, cache: SourceCache, tokens: Sequence[int],
                start: int | None = None, causal: bool = False,
                past: list[tuple[np.ndarray, np.ndarray]] | None = None):
    """Run target-region tokens against cached keys/values.

    ``past`` (when given) replaces the cache K/V and may already contain
    earlier target positions (autoregressive stepping).  Returns the hidden
    rows [t, d] and the per-layer K/V including this pass.
    """
    t = len(tokens)
    kv = cache.kv if past is None else past
    m = kv[0][0].shape[2]
    start = m if start is None else start
    if start + t > model.config.max_positions:
        raise TruncationError(f"target ends at position {start + t} > max_positions")
    ids = np.asarray(tokens, dtype=np.int64)[None]
    mask = np.ones((t, m + t), dtype=bool)
    if causal:
        mask[:, m:] = np.tril(np.ones((t, t), dtype=bool))
    bias = np.where(mask, 0.0, MASK_BIAS).astype(model.dtype)[None, None]
    with T.no_grad():
        h = embed(model, ids, np.ones_like(ids), (start + np.arange(t))[None])
        h, new_kv = stack_forward(model, h, bias, [(T.Tensor(k), T.Tensor(v)) for k, v in kv])
    return h.data[0], [(k.data, v.data) for k, v in new_kv]


def _logits(model: EncoderModel, rows: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return mlm_logits(model, T.Tensor(rows)).data


def _clamp_length(length: int, cfg: DecodeConfig, model: EncoderModel) -> int:
    if cfg.force_length is not None:
        return cfg.force_length
    limit = cfg.max_target_len or model.config.max_target_len
    if length > limit:
        log.warning("predicted length %d clamped to %d", length, limit)
        return limit
    return length


def _predict_full(model: EncoderModel, x, length: int, pseudo=None):
    """Reference path: one forward over the whole packed layout, no cache."""
    packed = pack_inference_input(x, length, pseudo, max_positions=model.config.max_positions)
    with T.no_grad():
        out = encode(model, packed)
    return out.token_logits.data


def _predict_all_masked(model, x, length, cfg, pseudo=None):
    if cfg.use_cache:
        cache = cache_source(model, x, pseudo)
        rows, _ = target_pass(model, cache, [MASK_ID] * length + [SEP_ID])
        return predict_tokens(_logits(model, rows[:length]))
    return predict_tokens(_predict_full(model, x, length, pseudo))


def _source_length(model, x, cfg) -> tuple[int, SourceCache | None]:
    if cfg.use_cache:
        cache = cache_source(model, x)
        return _clamp_length(cache.length, cfg, model), cache
    with T.no_grad():
        out = encode(model, pack_inference_input(x, 1))
    return _clamp_length(predict_length(out), cfg, model), None


# ---------------------------------------------------------------- strategies


def decode_single_pass(model: EncoderModel, x, cfg: DecodeConfig | None = None) -> DecodeResult:
    cfg = cfg or DecodeConfig()
    t0 = time.perf_counter_ns()
    length, cache = _source_length(model, x, cfg)
    t1 = time.perf_counter_ns()
    if cache is not None:
        rows, _ = target_pass(model, cache, [MASK_ID] * length + [SEP_ID])
        ids, _ = predict_tokens(_logits(model, rows[:length]))
    else:
        ids, _ = predict_tokens(_predict_full(model, x, length))
    t2 = time.perf_counter_ns()
    return DecodeResult([ids.tolist()], length,
                        {"encode_source": t1 - t0, "iterations": [t2 - t1], "total": t2 - t0})


def decode_mist(model: EncoderModel, x, cfg: DecodeConfig) -> DecodeResult:
    """Iteration k > 1 re-predicts every slot with the previous output as pseudo target."""
    t0 = time.perf_counter_ns()
    first = decode_single_pass(model, x, DecodeConfig(use_cache=cfg.use_cache,
                                                      max_target_len=cfg.max_target_len,
                                                      force_length=cfg.force_length))
    length = first.length
    outs = [first.tokens]
    iter_ns = list(first.timings_ns["iterations"])
    iter_ns[0] += first.timings_ns["encode_source"]
    executed = 1
    for _ in range(1, cfg.iterations):
        t = time.perf_counter_ns()
        ids, _ = _predict_all_masked(model, x, length, cfg, pseudo=outs[-1])
        iter_ns.append(time.perf_counter_ns() - t)
        executed += 1
        converged = ids.tolist() == outs[-1]
        outs.append(ids.tolist())
        if converged and cfg.early_stop:
            break
    while len(outs) < cfg.iterations:
        outs.append(list(outs[-1]))
    total = time.perf_counter_ns() - t0
    return DecodeResult(outs, length, {"encode_source": first.timings_ns["encode_source"],
                                       "iterations": iter_ns, "total": total},
                        executed, executed)


def mask_schedule(length: int, iterations: int) -> list[int]:
    """Number of slots re-masked after iteration k = 1..N-1 (linear decay)."""
    return [(length * (iterations - k)) // iterations for k in range(1, iterations)]


def decode_mask_predict(model: EncoderModel, x, cfg: DecodeConfig) -> DecodeResult:
    t0 = time.perf_counter_ns()
    length, cache = _source_length(model, x, cfg)
    t1 = time.perf_counter_ns()

    def run(tokens):
        if cache is not None:
            rows, _ = target_pass(model, cache, list(tokens) + [SEP_ID])
            return _logits(model, rows[:length])
        packed = pack_inference_input(x, length)
        packed.token_ids[packed.target_positions()] = tokens
        with T.no_grad():
            return encode(model, packed).token_logits.data

    ids, conf = predict_tokens(run([MASK_ID] * length))
    outs = [ids.tolist()]
    iter_ns = [time.perf_counter_ns() - t1]
    remasked = []
    for n_mask in mask_schedule(length, cfg.iterations):
        t = time.perf_counter_ns()
        if n_mask > 0:
            slots = np.argsort(conf, kind="stable")[:n_mask]
            tokens = ids.copy()
            tokens[slots] = MASK_ID
            new_ids, new_conf = predict_tokens(run(tokens))
            ids = ids.copy()
            conf = conf.copy()
            ids[slots] = new_ids[slots]
            conf[slots] = new_conf[slots]
        else:
            slots = np.array([], dtype=np.int64)
        remasked.append(len(slots))
        outs.append(ids.tolist())
        iter_ns.append(time.perf_counter_ns() - t)
    total = time.perf_counter_ns() - t0
    res = DecodeResult(outs, length, {"encode_source": t1 - t0, "iterations": iter_ns, "total": total},
                       cfg.iterations, 1 + sum(1 for r in remasked if r))
    res.timings_ns["remasked"] = remasked
    return res


def _ar_choice(logits: np.ndarray, allow_stop: bool) -> int:
    # only content tokens, plus [SEP] when stopping is allowed
    masked = np.full_like(logits, -np.inf)
    masked[N_SPECIALS:] = logits[N_SPECIALS:]
    if allow_stop:
        masked[SEP_ID] = logits[SEP_ID]
    return int(np.argmax(masked))


def decode_ar_greedy(model: EncoderModel, x, cfg: DecodeConfig | None = None) -> DecodeResult:
    """Left-to-right greedy emission with a causal target mask and incremental K/V."""
    cfg = cfg or DecodeConfig(strategy="ar_greedy")
    limit = cfg.force_length or cfg.max_target_len or model.config.max_target_len
    allow_stop = cfg.force_length is None
    t0 = time.perf_counter_ns()
    emitted: list[int] = []
    passes = 0
    step_ns = []
    if cfg.use_cache:
        cache = cache_source(model, x)
        t1 = time.perf_counter_ns()
        past = cache.kv
        pos = cache.source_len
        feed = MASK_ID
        while len(emitted) < limit:
            t = time.perf_counter_ns()
            rows, past = target_pass(model, cache, [feed], start=pos, causal=True, past=past)
            passes += 1
            tok = _ar_choice(_logits(model, rows)[0], allow_stop)
            emitted.append(tok)
            step_ns.append(time.perf_counter_ns() - t)
            if tok == SEP_ID:
                break
            feed, pos = tok, pos + 1
    else:
        t1 = t0
        while len(emitted) < limit:
            t = time.perf_counter_ns()
            packed = pack_ar_input(x, emitted, model.config.max_positions)
            with T.no_grad():
                out = encode(model, packed)
            passes += 1
            tok = _ar_choice(out.token_logits.data[-1], allow_stop)
            emitted.append(tok)
            step_ns.append(time.perf_counter_ns() - t)
            if tok == SEP_ID:
                break
    body = [t for t in emitted if t != SEP_ID]
    total = time.perf_counter_ns() - t0
    return DecodeResult([body], len(body), {"encode_source": t1 - t0, "iterations": step_ns,
                                            "total": total, "emitted": len(emitted)},
                        1, passes)


def decode(model: EncoderModel, x, cfg: DecodeConfig, vocab: Vocab | None = None) -> DecodeResult:
    if cfg.strategy == "single_pass":
        res = decode_single_pass(model, x, cfg)
    elif cfg.strategy == "mist_iter":
        res = decode_mist(model, x, cfg)
    elif cfg.strategy == "mask_predict":
        res = decode_mask_predict(model, x, cfg)
    else:
        res = decode_ar_greedy(model, x, cfg)
    if vocab is not None:
        res.final_text = vocab.decode(res.tokens)
    return res


# ---------------------------------------------------------------- latency


def measure_speedup(model_nar: EncoderModel, model_ar: EncoderModel, sources: Sequence[Sequence[int]],
                    configs: dict[str, DecodeConfig] | None = None, warmup: int = 10,
                    baseline: str = "ar_greedy") -> dict:
    """Serial batch-1 timing per strategy; the first ``warmup`` examples are discarded."""
    if len(sources) <= warmup:
        raise ValueError(f"need more than {warmup} examples, got {len(sources)}")
    configs = configs or {"ar_greedy": DecodeConfig(strategy="ar_greedy"),
                          "single_pass": DecodeConfig()}
    report = {"warmup": warmup, "n_measured": len(sources) - warmup, "strategies": {}}
    for name, cfg in configs.items():
        model = model_ar if cfg.strategy == "ar_greedy" else model_nar
        totals, per_iter, passes = [], [], []
        for i, x in enumerate(sources):
            res = decode(model, x, cfg)
            if i < warmup:
                continue
            totals.append(res.timings_ns["total"])
            per_iter.append(res.timings_ns["total"] / res.iterations_executed)
            passes.append(res.target_passes)
        stats = latency_stats(totals)
        stats["per_iteration_median_ns"] = latency_stats(per_iter)["median_ns"]
        stats["mean_target_passes"] = float(np.mean(passes))
        stats["n"] = len(totals)
        report["strategies"][name] = stats
    base = report["strategies"].get(baseline)
    if base is not None:
        for stats in report["strategies"].values():
            stats["speedup"] = base["median_ns"] / stats["median_ns"]
    return report
