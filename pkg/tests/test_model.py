import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mistnar import tensor as T
from mistnar.data import CLS_ID, MASK_ID, PAD_ID, SEP_ID
from mistnar.model import (PROFILES, EncoderModel, ModelConfig, TruncationError, collate, encode,
                           forward_batch, load_checkpoint, pack_ar_input, pack_inference_input,
                           pack_training_input, param_shapes, predict_length, predict_tokens,
                           save_checkpoint)
from oracles import scan_argmax, straight_line_forward

A, B, C, D = 4, 5, 6, 7


@pytest.fixture(scope="module")
def tiny64():
    return EncoderModel.init(ModelConfig(n_layers=2, n_heads=2, d_hidden=16, d_ffn=32,
                                         vocab_size=12, max_positions=32, max_target_len=8),
                             seed=3, dtype=np.float64)


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError):
        ModelConfig(d_hidden=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(max_positions=8, max_target_len=9)


def test_parameter_count_is_function_of_config():
    cfg = PROFILES["desk"]
    a = EncoderModel.init(cfg, seed=0)
    b = EncoderModel.init(cfg, seed=1)
    assert a.num_parameters() == b.num_parameters() == sum(
        math.prod(s) for s in param_shapes(cfg).values())


# ---------------------------------------------------------------- packing


def test_plain_layout():
    p = pack_training_input([A, B], [MASK_ID, MASK_ID])
    assert p.token_ids.tolist() == [CLS_ID, A, B, SEP_ID, MASK_ID, MASK_ID, SEP_ID]
    assert p.source_span == (0, 4) and p.target_span == (4, 6)
    assert p.segment_ids.tolist() == [0, 0, 0, 0, 1, 1, 1]
    assert p.position_ids.tolist() == list(range(7))


def test_mixed_layout():
    p = pack_training_input([A, B], [MASK_ID, MASK_ID], pseudo=[C, D])
    assert p.token_ids.tolist() == [CLS_ID, C, D, SEP_ID, A, B, SEP_ID, MASK_ID, MASK_ID, SEP_ID]
    assert p.pseudo_span == (1, 3)
    assert p.segment_ids.tolist() == [0] * 7 + [1] * 3
    assert p.source_span == (0, 7) and p.target_span == (7, 9)


def test_source_rows_never_see_target_columns():
    p = pack_training_input([A, B], [MASK_ID, C], pseudo=[D, D])
    ns, n = p.source_span[1], len(p)
    assert not p.attn_mask[:ns, ns:].any()
    assert p.attn_mask[:ns, :ns].all() and p.attn_mask[ns:, :].all()
    row_a = int(np.nonzero(p.token_ids == A)[0][0])
    assert not p.attn_mask[row_a, p.target_span[0]:p.target_span[1]].any()
    assert n == 10


def test_overflow_is_an_error():
    with pytest.raises(TruncationError):
        pack_training_input([A] * 10, [MASK_ID] * 5, max_positions=12)


def test_ar_layout_is_causal_in_target():
    p = pack_ar_input([A, B], [C, D])
    assert p.token_ids.tolist() == [CLS_ID, A, B, SEP_ID, MASK_ID, C, D]
    assert p.labels.tolist() == [C, D, SEP_ID]
    tgt = p.attn_mask[4:, 4:]
    np.testing.assert_array_equal(tgt, np.tril(np.ones((3, 3), bool)))


def test_collate_pads_are_fully_masked():
    items = [pack_inference_input([A, B, C], 2), pack_inference_input([A], 1)]
    b = collate(items)
    pad = b.token_ids == PAD_ID
    assert pad[1].sum() == 3
    for i in range(2):
        assert not b.attn_mask[i][:, pad[i]].any()
        assert not b.attn_mask[i][pad[i], :].any()


# ---------------------------------------------------------------- encode


def _hidden(model, p):
    with T.no_grad():
        return encode(model, p)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(4, 11), min_size=1, max_size=6),
       st.lists(st.integers(3, 11), min_size=1, max_size=6),
       st.integers(0, 10**6))
def test_source_rows_independent_of_target_contents(x, y, seed):
    model = EncoderModel.init(ModelConfig(n_layers=2, n_heads=2, d_hidden=16, d_ffn=32,
                                          vocab_size=12, max_positions=32, max_target_len=8),
                              seed=3, dtype=np.float64)
    rng = np.random.default_rng(seed)
    y2 = rng.integers(3, 12, size=len(y)).tolist()
    o1 = _hidden(model, pack_training_input(x, y))
    o2 = _hidden(model, pack_training_input(x, y2))
    ns = len(x) + 2
    np.testing.assert_array_equal(o1.hidden.data[:ns], o2.hidden.data[:ns])
    assert predict_length(o1) == predict_length(o2)


def test_swapping_target_position_ids_swaps_logit_rows(tiny64):
    p = pack_inference_input([A, B, C], 3)
    q = pack_inference_input([A, B, C], 3)
    t0, t1 = p.target_span[0], p.target_span[0] + 2
    q.position_ids[[t0, t1]] = q.position_ids[[t1, t0]]
    lp = _hidden(tiny64, p).token_logits.data
    lq = _hidden(tiny64, q).token_logits.data
    np.testing.assert_allclose(lq[[2, 1, 0]], lp, rtol=1e-12, atol=1e-12)


def test_permuting_target_values_only_moves_target_rows(tiny64):
    o1 = _hidden(tiny64, pack_training_input([A, B], [C, D, MASK_ID]))
    o2 = _hidden(tiny64, pack_training_input([A, B], [D, C, MASK_ID]))
    np.testing.assert_array_equal(o1.hidden.data[:4], o2.hidden.data[:4])
    assert not np.allclose(o1.token_logits.data, o2.token_logits.data)


def test_encode_matches_straight_line_oracle():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_hidden=8, d_ffn=16, vocab_size=10,
                      max_positions=16, max_target_len=6)
    model = EncoderModel.init(cfg, seed=11, dtype=np.float64)
    rng = np.random.default_rng(0)
    for name, t in model.named_parameters():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    p = pack_training_input([4, 5, 6], [MASK_ID, 7], pseudo=[8, 9])
    out = _hidden(model, p)
    h, tok, length = straight_line_forward(model.params, cfg, p)
    np.testing.assert_allclose(out.hidden.data, h, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.token_logits.data, tok, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.length_logits.data, length, rtol=1e-10, atol=1e-12)


def test_padding_is_neutral():
    model = EncoderModel.init(PROFILES["desk"], seed=2)
    short = pack_training_input([4, 5], [MASK_ID, 6])
    long = pack_training_input([4, 5, 6, 7, 8, 9], [MASK_ID] * 5)
    with T.no_grad():
        alone = forward_batch(model, collate([short])).data[0]
        padded = forward_batch(model, collate([short, long])).data[0, :len(short)]
    np.testing.assert_allclose(padded, alone, rtol=1e-6, atol=1e-6)


# ---------------------------------------------------------------- heads


def test_predict_length_one_hot():
    logits = np.zeros(8)
    logits[3] = 5.0
    assert predict_length(logits) == 4


def test_predict_length_ties_go_short():
    assert predict_length(np.zeros(8)) == 1


def test_predict_length_matches_scan():
    rng = np.random.default_rng(5)
    for _ in range(20):
        row = rng.normal(size=16)
        assert predict_length(row) == scan_argmax(row) + 1


def test_predict_tokens_one_hot():
    logits = np.full((3, 10), -50.0)
    for i, t in enumerate([4, 9, 6]):
        logits[i, t] = 50.0
    ids, conf = predict_tokens(logits)
    assert ids.tolist() == [4, 9, 6]
    np.testing.assert_allclose(conf, 1.0, atol=1e-12)


def test_predict_tokens_uniform_confidence():
    _, conf = predict_tokens(np.zeros((2, 8)))
    np.testing.assert_allclose(conf, 0.125)


def test_predict_tokens_matches_scan_over_content_ids():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 12))
    ids, conf = predict_tokens(logits)
    for i in range(5):
        j = scan_argmax(logits[i, 4:]) + 4
        assert ids[i] == j
        e = np.exp(logits[i] - logits[i].max())
        assert conf[i] == pytest.approx(e[j] / e.sum())
    full, _ = predict_tokens(logits, content_only=False)
    assert full.tolist() == [scan_argmax(r) for r in logits]


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = EncoderModel.init(PROFILES["desk"], seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, vocab_hash="abc", extra={"seed": 9})
    assert path.read_bytes().startswith(b"MISTCKPT v1\n")
    loaded, meta = load_checkpoint(path, expect_vocab_hash="abc")
    assert meta["extra"] == {"seed": 9}
    assert loaded.config == model.config
    for k, v in model.named_parameters():
        assert loaded[k].data.tobytes() == v.data.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt", vocab_hash="abc", extra={"seed": 9})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_vocab_mismatch(tmp_path):
    model = EncoderModel.init(PROFILES["desk"], seed=9)
    save_checkpoint(model, tmp_path / "m.ckpt", vocab_hash="abc")
    with pytest.raises(ValueError, match="vocab hash"):
        load_checkpoint(tmp_path / "m.ckpt", expect_vocab_hash="zzz")
