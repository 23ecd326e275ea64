"""Corpus BLEU-4, ROUGE-L F1, exact match and batch-1 latency statistics.

BLEU uses add-one smoothing for any n >= 2 order with zero clipped matches;
short toy outputs otherwise collapse to 0.  ROUGE-L is the plain F1 of the
longest common subsequence.  Multi-reference scoring clips n-grams against
the per-n-gram maximum count over references and measures brevity against
the shortest reference (BLEU), and takes the best reference per example
(ROUGE-L).
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

BLEU_SMOOTHING = "add-one on zero-match orders n>=2"


def _toks(s) -> tuple:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def _check(hyps, refsets):
    if len(hyps) == 0:
        raise ValueError("empty hypothesis list")
    if len(hyps) != len(refsets):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refsets)} reference sets")
    for r in refsets:
        if isinstance(r, str) or len(r) == 0:
            raise ValueError("each reference set must be a nonempty list of references")


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses, reference_sets, max_n: int = 4) -> float:
    _check(hypotheses, reference_sets)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        h = _toks(hyp)
        rs = [_toks(r) for r in refs]
        hyp_len += len(h)
        # shortest reference: adding references can then never lower the score
        ref_len += min(len(r) for r in rs)
        for n in range(1, max_n + 1):
            hc = ngrams(h, n)
            best: Counter = Counter()
            for r in rs:
                best |= ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in hc.items())
            totals[n - 1] += sum(hc.values())
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp, ref) -> float:
    h, r = _toks(hyp), _toks(ref)
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rc = lcs / len(h), lcs / len(r)
    return 2 * p * rc / (p + rc)


def rouge_l(hypotheses, reference_sets) -> float:
    _check(hypotheses, reference_sets)
    return float(np.mean([max(rouge_l_pair(h, r) for r in refs)
                          for h, refs in zip(hypotheses, reference_sets)]))


def exact_match(hypotheses, reference_sets) -> float:
    _check(hypotheses, reference_sets)
    hits = sum(any(_toks(h) == _toks(r) for r in refs)
               for h, refs in zip(hypotheses, reference_sets))
    return hits / len(hypotheses)


def percentile_nearest_rank(values: Sequence[float], pct: float) -> float:
    s = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(s)))
    return s[rank - 1]


def latency_stats(timings: Sequence[float], warmup: int = 0) -> dict:
    kept = list(timings)[warmup:]
    if not kept:
        raise ValueError("no timing records left after warmup exclusion")
    return {"median_ns": percentile_nearest_rank(kept, 50),
            "p90_ns": percentile_nearest_rank(kept, 90)}


@dataclass
class EvalReport:
    bleu4: float
    rouge_l: float
    exact_match: float
    n_examples: int
    latency: dict = field(default_factory=dict)
    smoothing: str = BLEU_SMOOTHING
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(hypotheses, reference_sets, latency: dict | None = None,
             config: dict | None = None) -> EvalReport:
    if len(hypotheses) == 0:
        raise ValueError("n_examples must be > 0")
    return EvalReport(bleu4(hypotheses, reference_sets), rouge_l(hypotheses, reference_sets),
                      exact_match(hypotheses, reference_sets), len(hypotheses),
                      latency or {}, config=config or {})


def write_iteration_csv(rows: Sequence[dict], path) -> None:
    """Rows of ``{strategy, iteration, bleu4, rouge_l, exact_match}`` for ablation plots."""
    cols = ["strategy", "iteration", "bleu4", "rouge_l", "exact_match"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in cols})
