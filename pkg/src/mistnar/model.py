"""Encoder-only generator: input packing, partitioned attention, heads, checkpoints."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIALS
from .tensor import Tensor

MASK_BIAS = -1e9
N_SPECIALS = len(SPECIALS)
CKPT_MAGIC = b"MISTCKPT v1\n"


class TruncationError(ValueError):
    """Packed sequence would exceed ``max_positions``."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_hidden: int = 64
    d_ffn: int = 256
    vocab_size: int = 64
    max_positions: int = 64
    max_target_len: int = 16
    n_segments: int = 2
    ln_eps: float = 1e-12

    def __post_init__(self):
        for f in ("n_layers", "n_heads", "d_hidden", "d_ffn", "vocab_size",
                  "max_positions", "max_target_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.d_hidden % self.n_heads:
            raise ValueError(f"d_hidden={self.d_hidden} not divisible by n_heads={self.n_heads}")
        if self.max_target_len > self.max_positions:
            raise ValueError("max_target_len must not exceed max_positions")
        if self.n_segments != 2:
            raise ValueError("n_segments must be 2")


PROFILES = {
    # encoder sizes quoted for the base backbone; never run at desk scale
    "paper-default": ModelConfig(n_layers=12, n_heads=12, d_hidden=768, d_ffn=3072,
                                 vocab_size=30522, max_positions=512, max_target_len=48),
    "desk": ModelConfig(n_layers=2, n_heads=2, d_hidden=64, d_ffn=256,
                        vocab_size=64, max_positions=64, max_target_len=16),
}


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_hidden, cfg.d_ffn
    shapes = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.max_positions, d),
        "embeddings.segment": (cfg.n_segments, d),
        "embeddings.norm.gamma": (d,),
        "embeddings.norm.beta": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.out.weight": (d, d),
            p + "attn.out.bias": (d,),
            p + "attn.norm.gamma": (d,),
            p + "attn.norm.beta": (d,),
            p + "ffn.in.weight": (d, f),
            p + "ffn.in.bias": (f,),
            p + "ffn.out.weight": (f, d),
            p + "ffn.out.bias": (d,),
            p + "ffn.norm.gamma": (d,),
            p + "ffn.norm.beta": (d,),
        })
    shapes["mlm_head.bias"] = (cfg.vocab_size,)
    shapes["length_head.weight"] = (d, cfg.max_target_len)
    shapes["length_head.bias"] = (cfg.max_target_len,)
    return shapes


class EncoderModel:
    """All learned parameters.  The MLM head reuses ``embeddings.token``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            raise CheckpointError(f"parameter names do not match config: "
                                  f"{sorted(set(params) ^ set(expected))}")
        for k, shp in expected.items():
            if params[k].shape != shp:
                raise CheckpointError(f"{k}: shape {params[k].shape} != {shp}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> EncoderModel:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("gamma"):
                arr = np.ones(shape)
            elif name.endswith("bias") or name.endswith("beta"):
                arr = np.zeros(shape)
            else:
                arr = _trunc_normal(rng, shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["embeddings.token"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def astype(self, dtype) -> EncoderModel:
        return EncoderModel(self.config, {
            k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()
        })

    def copy(self) -> EncoderModel:
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            self.params[k].data = np.array(arr, dtype=self.dtype)


# ---------------------------------------------------------------- packing


@dataclass
class PackedInput:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attn_mask: np.ndarray
    source_span: tuple[int, int]
    target_span: tuple[int, int]
    loss_mask: np.ndarray
    labels: np.ndarray | None = None
    pseudo_span: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def target_len(self) -> int:
        return self.target_span[1] - self.target_span[0]

    def target_positions(self) -> np.ndarray:
        return np.arange(*self.target_span)


def partition_mask(n_source: int, n: int, causal_target_from: int | None = None) -> np.ndarray:
    """Source rows see only source columns; target rows see everything.

    With ``causal_target_from`` set, target rows see target columns only up to
    themselves (used by the autoregressive baseline).
    """
    mask = np.ones((n, n), dtype=bool)
    mask[:n_source, n_source:] = False
    if causal_target_from is not None:
        tri = np.tril(np.ones((n - n_source, n - n_source), dtype=bool))
        mask[n_source:, n_source:] = tri
    return mask


def pack_source(x: Sequence[int], pseudo: Sequence[int] | None = None) -> list[int]:
    """``[CLS] X [SEP]`` or ``[CLS] Y_p [SEP] X [SEP]``."""
    if pseudo is None:
        return [CLS_ID, *x, SEP_ID]
    return [CLS_ID, *pseudo, SEP_ID, *x, SEP_ID]


def pack_training_input(x: Sequence[int], y_masked: Sequence[int],
                        pseudo: Sequence[int] | None = None,
                        loss_mask: Sequence[bool] | None = None,
                        labels: Sequence[int] | None = None,
                        max_positions: int | None = None) -> PackedInput:
    src = pack_source(x, pseudo)
    ids = src + list(y_masked) + [SEP_ID]
    n, ns = len(ids), len(src)
    if max_positions is not None and n > max_positions:
        raise TruncationError(f"packed length {n} exceeds max_positions={max_positions}")
    seg = np.zeros(n, dtype=np.int64)
    seg[ns:] = 1
    t = len(y_masked)
    lm = np.ones(t, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    return PackedInput(
        token_ids=np.asarray(ids, dtype=np.int64),
        segment_ids=seg,
        position_ids=np.arange(n, dtype=np.int64),
        attn_mask=partition_mask(ns, n),
        source_span=(0, ns),
        target_span=(ns, ns + t),
        loss_mask=lm,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        pseudo_span=None if pseudo is None else (1, 1 + len(pseudo)),
    )


def pack_inference_input(x, length: int, pseudo=None, max_positions=None) -> PackedInput:
    return pack_training_input(x, [MASK_ID] * length, pseudo, max_positions=max_positions)


def pack_ar_input(x: Sequence[int], y: Sequence[int], max_positions: int | None = None) -> PackedInput:
    """Teacher-forced causal layout ``[CLS] X [SEP] [MASK] y_1 .. y_T``.

    Target slot ``j`` predicts ``y_{j+1}``, the last slot predicts ``[SEP]``.
    """
    src = pack_source(x)
    ids = src + [MASK_ID] + list(y)
    n, ns = len(ids), len(src)
    if max_positions is not None and n > max_positions:
        raise TruncationError(f"packed length {n} exceeds max_positions={max_positions}")
    seg = np.zeros(n, dtype=np.int64)
    seg[ns:] = 1
    t = len(y) + 1
    return PackedInput(
        token_ids=np.asarray(ids, dtype=np.int64),
        segment_ids=seg,
        position_ids=np.arange(n, dtype=np.int64),
        attn_mask=partition_mask(ns, n, causal_target_from=ns),
        source_span=(0, ns),
        target_span=(ns, ns + t),
        loss_mask=np.ones(t, dtype=bool),
        labels=np.asarray(list(y) + [SEP_ID], dtype=np.int64),
    )


@dataclass
class PackedBatch:
    token_ids: np.ndarray      # [B, n]
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attn_mask: np.ndarray      # [B, n, n]
    items: list[PackedInput]

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    def loss_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat ``b * n + i`` indices of loss positions and their gold labels."""
        n = self.token_ids.shape[1]
        rows, labels = [], []
        for b, item in enumerate(self.items):
            pos = item.target_positions()[item.loss_mask]
            rows.append(b * n + pos)
            labels.append(item.labels[item.loss_mask])
        return np.concatenate(rows), np.concatenate(labels)


def collate(items: Sequence[PackedInput]) -> PackedBatch:
    """Right-pad with ``[PAD]``; pad rows and columns are fully masked."""
    b = len(items)
    n = max(len(it) for it in items)
    tok = np.full((b, n), PAD_ID, dtype=np.int64)
    seg = np.zeros((b, n), dtype=np.int64)
    pos = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n, n), dtype=bool)
    for i, it in enumerate(items):
        m = len(it)
        tok[i, :m] = it.token_ids
        seg[i, :m] = it.segment_ids
        pos[i, :m] = it.position_ids
        mask[i, :m, :m] = it.attn_mask
    return PackedBatch(tok, seg, pos, mask, list(items))


# ---------------------------------------------------------------- forward


def _bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)[:, None, :, :]


def embed(model: EncoderModel, token_ids, segment_ids, position_ids) -> Tensor:
    cfg = model.config
    if np.max(position_ids) >= cfg.max_positions:
        raise TruncationError(f"position id {int(np.max(position_ids))} >= max_positions={cfg.max_positions}")
    p = model.params
    h = (T.embedding(p["embeddings.token"], token_ids)
         + T.embedding(p["embeddings.position"], position_ids)
         + T.embedding(p["embeddings.segment"], segment_ids))
    return T.layer_norm(h, p["embeddings.norm.gamma"], p["embeddings.norm.beta"], cfg.ln_eps)


def _index0(x: Tensor, i: int) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return T._result(x.data[i], (x,), bw)


def layer_forward(model: EncoderModel, i: int, x: Tensor, bias: np.ndarray,
                  past: tuple[Tensor, Tensor] | None = None):
    """One post-LN block.  ``past`` K/V (per head) are prepended to this block's keys.

    Returns the block output and the full (past + new) keys and values.
    """
    cfg = model.config
    p = model.params
    pre = f"layers.{i}."
    b, n, d = x.shape
    h = cfg.n_heads
    dh = d // h
    qkv = T.linear(x, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q = _index0(qkv, 0)
    k = _index0(qkv, 1)
    v = _index0(qkv, 2)
    if past is not None:
        k = T.concat([past[0], k], axis=2)
        v = T.concat([past[1], v], axis=2)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + bias
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    attn = T.linear(ctx, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"])
    x = T.layer_norm(x + attn, p[pre + "attn.norm.gamma"], p[pre + "attn.norm.beta"], cfg.ln_eps)
    ff = T.linear(T.gelu(T.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"])),
                  p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"])
    x = T.layer_norm(x + ff, p[pre + "ffn.norm.gamma"], p[pre + "ffn.norm.beta"], cfg.ln_eps)
    return x, k, v


def stack_forward(model: EncoderModel, h: Tensor, bias: np.ndarray,
                  past: list[tuple[Tensor, Tensor]] | None = None):
    kv = []
    for i in range(model.config.n_layers):
        h, k, v = layer_forward(model, i, h, bias, None if past is None else past[i])
        kv.append((k, v))
    return h, kv


def forward_batch(model: EncoderModel, batch: PackedBatch) -> Tensor:
    """Hidden states [B, n, d] for a padded batch."""
    h = embed(model, batch.token_ids, batch.segment_ids, batch.position_ids)
    out, _ = stack_forward(model, h, _bias(batch.attn_mask, model.dtype))
    return out


def mlm_logits(model: EncoderModel, rows: Tensor) -> Tensor:
    p = model.params
    return T.matmul(rows, T.transpose(p["embeddings.token"])) + p["mlm_head.bias"]


def length_logits(model: EncoderModel, cls_rows: Tensor) -> Tensor:
    p = model.params
    return T.linear(cls_rows, p["length_head.weight"], p["length_head.bias"])


@dataclass
class EncoderOutput:
    hidden: Tensor           # [n, d]
    token_logits: Tensor     # [T, V], target span rows only
    length_logits: Tensor    # [T_max], from the [CLS] row
    packed: PackedInput | None = None


def encode(model: EncoderModel, packed: PackedInput) -> EncoderOutput:
    batch = collate([packed])
    hidden = T.reshape(forward_batch(model, batch), (len(packed), model.config.d_hidden))
    tgt = T.take_rows(hidden, packed.target_positions())
    return EncoderOutput(
        hidden=hidden,
        token_logits=mlm_logits(model, tgt),
        length_logits=T.reshape(length_logits(model, T.take_rows(hidden, [0])), (-1,)),
        packed=packed,
    )


def predict_length(output: EncoderOutput | np.ndarray) -> int:
    logits = output.length_logits.data if isinstance(output, EncoderOutput) else np.asarray(output)
    # np.argmax returns the first maximum: ties go to the shorter length
    return int(np.argmax(logits)) + 1


def predict_tokens(output: EncoderOutput | np.ndarray,
                   content_only: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax ids and their softmax probabilities.

    With ``content_only`` the argmax skips the special ids, so emitted tokens
    can be fed back as pseudo targets; the confidence is still the probability
    under the full softmax.
    """
    logits = output.token_logits.data if isinstance(output, EncoderOutput) else np.asarray(output)
    start = N_SPECIALS if content_only and logits.shape[-1] > N_SPECIALS else 0
    ids = np.argmax(logits[..., start:], axis=-1) + start
    probs = np.exp(T.log_softmax_np(logits))
    return ids, probs[np.arange(len(ids)), ids]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: EncoderModel, path, vocab_hash: str = "", extra: dict | None = None) -> None:
    meta = {"config": asdict(model.config), "vocab_hash": vocab_hash, "extra": extra or {}}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect_vocab_hash: str | None = None) -> tuple[EncoderModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a MISTCKPT v1 file")
    f = io.BytesIO(raw[len(CKPT_MAGIC):])
    meta = json.loads(f.readline())
    if expect_vocab_hash is not None and meta.get("vocab_hash") != expect_vocab_hash:
        raise CheckpointError(f"vocab hash mismatch: checkpoint {meta.get('vocab_hash')!r}, "
                              f"data {expect_vocab_hash!r}")
    known = {fl.name for fl in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in meta["config"].items() if k in known})
    (count,) = struct.unpack("<I", f.read(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", f.read(4))
        name = f.read(ln).decode("utf-8")
        (nd,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{nd}I", f.read(4 * nd))
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(f.read(size), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return EncoderModel(cfg, params), meta
