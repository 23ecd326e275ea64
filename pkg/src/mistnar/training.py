"""Masking policy, NAT / MIST / length losses, static mixing, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import MASK_ID, BatchStream, Example, SequencePair, Vocab, packed_length
from .model import (EncoderModel, PackedInput, collate, forward_batch, length_logits,
                    mlm_logits, pack_ar_input, pack_inference_input, pack_training_input,
                    predict_tokens)

log = logging.getLogger(__name__)

MIXING_MODES = ("none", "static", "mist")


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    f_ratio: float = 0.5
    mixing_mode: str = "none"
    lr: float = 3e-5
    warmup_steps: int = 500
    batch_size: int = 64
    length_loss_weight: float = 0.1
    max_steps: int = 1000
    seed: int = 0
    objective: str = "nar"          # "ar" trains the causal baseline on the same architecture
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    eval_every: int = 1000

    def __post_init__(self):
        if not 0.0 < self.f_ratio <= 1.0:
            raise ValueError(f"f_ratio must be in (0, 1], got {self.f_ratio}")
        if self.mixing_mode not in MIXING_MODES:
            raise ValueError(f"mixing_mode must be one of {MIXING_MODES}")
        if self.objective not in ("nar", "ar"):
            raise ValueError("objective must be 'nar' or 'ar'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainStepOutput:
    loss_nat: float
    loss_mist: float
    loss_length: float
    loss_total: float
    grad_norm: float
    lr: float = 0.0
    step: int = 0
    pseudo: list | None = field(default=None, repr=False)

    def record(self) -> dict:
        rec = asdict(self)
        rec.pop("pseudo")
        return rec


@dataclass(frozen=True)
class PseudoTarget:
    tokens: tuple[int, ...]
    source_model_step: int = 0

    def __post_init__(self):
        if MASK_ID in self.tokens:
            raise ValueError("pseudo target contains [MASK]")


# ---------------------------------------------------------------- masking


def mask_count(length: int, f_ratio: float) -> int:
    """``max(1, round(f_ratio * length))`` with halves rounded up."""
    return max(1, min(length, int(math.floor(f_ratio * length + 0.5))))


def sample_mask(y: Sequence[int], f_ratio: float, rng: np.random.Generator):
    t = len(y)
    if t < 1:
        raise ValueError("cannot mask an empty target")
    k = mask_count(t, f_ratio)
    pos = rng.choice(t, size=k, replace=False)
    loss_mask = np.zeros(t, dtype=bool)
    loss_mask[pos] = True
    y_masked = [MASK_ID if m else tok for tok, m in zip(y, loss_mask)]
    return y_masked, loss_mask


def lr_schedule(step: int, config: TrainConfig) -> float:
    if step < 1:
        raise ValueError("step is 1-based")
    if config.warmup_steps <= 0 or step >= config.warmup_steps:
        return config.lr
    return config.lr * step / config.warmup_steps


# ---------------------------------------------------------------- losses


def _pack_masked(pair_x, y, rng, f_ratio, pseudo=None, max_positions=None) -> PackedInput:
    y_masked, loss_mask = sample_mask(y, f_ratio, rng)
    return pack_training_input(pair_x, y_masked, pseudo, loss_mask, y, max_positions)


def masked_lm_loss(model: EncoderModel, packed: Sequence[PackedInput],
                   with_length: Sequence[bool] | None = None):
    """Token cross-entropy over all loss positions of a batch, plus the length loss.

    ``with_length`` selects the rows whose [CLS] feeds the length head; the
    length loss is ``None`` when no row is selected.
    """
    batch = collate(packed)
    b, n = batch.shape
    hidden = T.reshape(forward_batch(model, batch), (b * n, model.config.d_hidden))
    rows, labels = batch.loss_rows()
    tok_loss = T.cross_entropy(mlm_logits(model, T.take_rows(hidden, rows)), labels)
    sel = [i for i in range(b) if with_length is None or with_length[i]]
    len_loss = None
    if sel:
        gold = np.array([packed[i].target_len - 1 for i in sel])
        if gold.max() >= model.config.max_target_len:
            raise ValueError(f"target length {gold.max() + 1} exceeds max_target_len")
        logits = length_logits(model, T.take_rows(hidden, np.array(sel) * n))
        len_loss = T.cross_entropy(logits, gold)
    return tok_loss, len_loss


def nat_loss(model: EncoderModel, x, y, rng, f_ratio: float = 0.5):
    tok, _ = masked_lm_loss(model, [_pack_masked(x, y, rng, f_ratio)])
    return tok


def mist_loss(model: EncoderModel, x, y, y_pseudo, rng, f_ratio: float = 0.5):
    if len(y_pseudo) != len(y):
        raise ValueError("pseudo target length must equal gold length")
    packed = _pack_masked(x, y, rng, f_ratio, pseudo=y_pseudo,
                          max_positions=model.config.max_positions)
    tok, _ = masked_lm_loss(model, [packed], with_length=[False])
    return tok


def length_loss(model: EncoderModel, x, t_gold: int):
    if t_gold > model.config.max_target_len:
        raise ValueError(f"T_gold={t_gold} exceeds max_target_len={model.config.max_target_len}")
    packed = pack_inference_input(x, t_gold)
    batch = collate([packed])
    hidden = T.reshape(forward_batch(model, batch), (len(packed), model.config.d_hidden))
    return T.cross_entropy(length_logits(model, T.take_rows(hidden, [0])), [t_gold - 1])


def generate_pseudo_targets(model: EncoderModel, sources: Sequence[Sequence[int]],
                            lengths: Sequence[int], step: int = 0) -> list[PseudoTarget]:
    """Greedy full-mask predictions at the given lengths, computed without a graph."""
    packed = [pack_inference_input(x, t) for x, t in zip(sources, lengths)]
    batch = collate(packed)
    b, n = batch.shape
    with T.no_grad():
        hidden = forward_batch(model, batch).data.reshape(b * n, -1)
        out = []
        for i, p in enumerate(packed):
            rows = hidden[i * n + p.target_positions()]
            ids, _ = predict_tokens(mlm_logits(model, T.Tensor(rows)).data)
            out.append(PseudoTarget(tuple(int(t) for t in ids), step))
    return out


def generate_pseudo_target(model, x, t_gold: int, step: int = 0) -> PseudoTarget:
    if t_gold < 1:
        raise ValueError("T_gold must be >= 1")
    return generate_pseudo_targets(model, [x], [t_gold], step)[0]


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, model: EncoderModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.m = {k: np.zeros_like(p.data) for k, p in model.named_parameters()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.named_parameters()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.model.named_parameters():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)).astype(p.data.dtype)


def grad_norm(model: EncoderModel) -> float:
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum())
             for p in model.parameters() if p.grad is not None)
    return math.sqrt(sq)


# ---------------------------------------------------------------- train step


def compute_losses(model: EncoderModel, batch: Sequence[SequencePair], config: TrainConfig,
                   rng: np.random.Generator, step: int = 0, pseudo_override=None):
    """Build the graph for one step.  Returns (total, parts, pseudo targets).

    ``pseudo_override`` injects pseudo targets instead of generating them; the
    result is then an ordinary function of the parameters with Y_p as data.
    """
    maxpos = model.config.max_positions
    w = config.length_loss_weight
    zero = T.Tensor(np.zeros((), dtype=model.dtype))

    if config.objective == "ar":
        packed = [pack_ar_input(p.source, p.target, maxpos) for p in batch]
        tok, _ = masked_lm_loss(model, packed, with_length=[False] * len(packed))
        return tok, {"nat": tok, "mist": zero, "length": zero}, None

    packed = [_pack_masked(p.source, p.target, rng, config.f_ratio, p.pseudo, maxpos)
              for p in batch]
    has_len = [p.pseudo is None for p in batch]
    l_nat, l_len = masked_lm_loss(model, packed, with_length=has_len)
    l_len = zero if l_len is None else l_len
    l_mist = zero
    pseudo = None
    if config.mixing_mode == "mist":
        if pseudo_override is not None:
            pseudo = list(pseudo_override)
        else:
            pseudo = generate_pseudo_targets(model, [p.source for p in batch],
                                             [len(p.target) for p in batch], step)
        mixed = [_pack_masked(p.source, p.target, rng, config.f_ratio, yp.tokens, maxpos)
                 for p, yp in zip(batch, pseudo)]
        l_mist, _ = masked_lm_loss(model, mixed, with_length=[False] * len(mixed))
    total = l_nat + l_mist + l_len * w
    return total, {"nat": l_nat, "mist": l_mist, "length": l_len}, pseudo


def train_step(model: EncoderModel, batch: Sequence[SequencePair], config: TrainConfig,
               rng: np.random.Generator, optimizer: Adam, step: int) -> TrainStepOutput:
    if not batch:
        raise ValueError("empty batch")
    total, parts, pseudo = compute_losses(model, batch, config, rng, step)
    vals = {k: v.item() for k, v in parts.items()}
    if not all(math.isfinite(v) for v in vals.values()) or not math.isfinite(total.item()):
        raise NumericalError(f"non-finite loss at step {step}: {vals}")
    model.zero_grad()
    total.backward()
    gn = grad_norm(model)
    if not math.isfinite(gn):
        raise NumericalError(f"non-finite gradient norm at step {step}")
    lr = lr_schedule(step, config)
    optimizer.step(lr)
    model.zero_grad()
    return TrainStepOutput(vals["nat"], vals["mist"], vals["length"], total.item(), gn, lr, step, pseudo)


# ---------------------------------------------------------------- static mixing


def static_mix_dataset(model: EncoderModel, vocab: Vocab, examples: Sequence[Example],
                       chunk: int = 256) -> list[Example]:
    """Originals followed by one frozen ``(Y_p || X, Y)`` example per original."""
    pairs = [_encode_plain(vocab, ex) for ex in examples]
    mixed = []
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        pts = generate_pseudo_targets(model, [p.source for p in part], [len(p.target) for p in part])
        for ex, pt in zip(examples[i:i + chunk], pts):
            mixed.append(Example(ex.source, ex.target, ex.alternatives, vocab.decode(pt.tokens)))
    return list(examples) + mixed


def _encode_plain(vocab: Vocab, ex: Example) -> SequencePair:
    return SequencePair(tuple(vocab.encode(ex.source)), tuple(vocab.encode(ex.target)))


# ---------------------------------------------------------------- loop


class MetricsWriter:
    """Line-delimited JSON metric records (one per ``log_every`` steps)."""

    def __init__(self, stream=None):
        self.stream = stream
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")
            self.stream.flush()


def train(model: EncoderModel, data: Sequence[SequencePair], config: TrainConfig,
          metrics: MetricsWriter | None = None,
          evaluate: Callable[[EncoderModel], float] | None = None,
          on_best: Callable[[EncoderModel, int, float], None] | None = None,
          stop_at: float | None = None) -> dict:
    """Run ``config.max_steps`` updates.  ``evaluate`` returns a validation score
    (higher is better) every ``eval_every`` steps; ``on_best`` sees each new best.
    """
    metrics = metrics or MetricsWriter()
    np_rng = np.random.default_rng(config.seed)
    py_rng = random.Random(config.seed)
    opt = Adam(model, config)
    step = 0
    best = (-math.inf, 0)
    t0 = time.perf_counter()
    history = []
    while step < config.max_steps:
        stream = BatchStream(data, config.batch_size, py_rng, model.config.max_positions)
        if len(stream) == 0:
            raise ValueError("no trainable examples")
        for batch in stream:
            step += 1
            out = train_step(model, batch, config, np_rng, opt, step)
            if step % config.log_every == 0 or step == 1 or step == config.max_steps:
                rec = out.record()
                rec["wall_s"] = round(time.perf_counter() - t0, 3)
                metrics.write(rec)
            history.append(out.loss_nat)
            if evaluate is not None and (step % config.eval_every == 0 or step == config.max_steps):
                score = evaluate(model)
                metrics.write({"step": step, "valid_score": score,
                               "wall_s": round(time.perf_counter() - t0, 3)})
                # ties go to the later checkpoint (flat early scores would otherwise pin step 1)
                if score >= best[0]:
                    best = (score, step)
                    if on_best is not None:
                        on_best(model, step, score)
                if stop_at is not None and score >= stop_at:
                    return {"steps": step, "best_score": best[0], "best_step": best[1],
                            "loss_nat": history}
            if step >= config.max_steps:
                break
    return {"steps": step, "best_score": best[0], "best_step": best[1], "loss_nat": history}


def eager_masked_nll(model: EncoderModel, packed: PackedInput) -> float:
    """Mean ``-log p`` over loss positions, computed with plain numpy outside any graph."""
    with T.no_grad():
        b = collate([packed])
        h = forward_batch(model, b).data[0]
    emb = model["embeddings.token"].data
    logits = h[packed.target_positions()] @ emb.T + model["mlm_head.bias"].data
    lsm = T.log_softmax_np(logits.astype(np.float64))
    idx = np.nonzero(packed.loss_mask)[0]
    return float(-lsm[idx, packed.labels[idx]].mean())

