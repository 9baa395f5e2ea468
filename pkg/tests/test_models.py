import math

import numpy as np
import pytest

from conftest import make_config, make_random_weights
from encbench.backends import get_backend
from encbench.models import (
    EncoderInput,
    EncoderWeights,
    MASKED_LOGIT,
    additive_attention_mask,
    build_position_ids,
    embed,
    feed_forward,
    forward,
    multi_head_attention,
)
from encbench.tensor import ShapeError, Tensor, tensor

REF = get_backend("reference")
OPT = get_backend("optimized")


def make_input(ids, mask=None, types=None):
    ids = np.asarray(ids, dtype=np.int64)
    if mask is None:
        mask = np.ones_like(ids)
    if types is None:
        types = np.zeros_like(ids)
    return EncoderInput(tensor(ids), tensor(np.asarray(mask, dtype=np.int64)),
                        tensor(np.asarray(types, dtype=np.int64)))


# ---------------------------------------------------------------------------
# position ids
# ---------------------------------------------------------------------------

def test_bert_positions_are_absolute():
    cfg = make_config(family="bert")
    inp = make_input([[5, 6, 7, 8]])
    pos = build_position_ids(inp.input_ids, inp.attention_mask, cfg)
    assert pos.tolist() == [[0, 1, 2, 3]]


def test_roberta_positions_skip_pads():
    cfg = make_config(family="roberta", pad=1)
    inp = make_input([[5, 6, 7, 1]], mask=[[1, 1, 1, 0]])
    pos = build_position_ids(inp.input_ids, inp.attention_mask, cfg)
    assert pos.tolist() == [[2, 3, 4, 1]]


def test_all_pad_row_rejected():
    with pytest.raises(ValueError, match="unmasked"):
        make_input([[1, 1]], mask=[[0, 0]])


# ---------------------------------------------------------------------------
# additive mask
# ---------------------------------------------------------------------------

def test_mask_all_ones_gives_zeros():
    out = additive_attention_mask(tensor(np.ones((2, 3), dtype=np.int64)))
    assert out.shape == (2, 1, 1, 3)
    assert np.all(out.data == 0.0)


def test_mask_zero_positions_get_large_negative():
    out = additive_attention_mask(tensor(np.array([[1, 0]], dtype=np.int64)))
    assert out.data[0, 0, 0, 0] == 0.0
    assert out.data[0, 0, 0, 1] == np.float32(MASKED_LOGIT)


def test_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        additive_attention_mask(tensor(np.array([[1, 2]], dtype=np.int64)))


@pytest.mark.parametrize("backend", [REF, OPT], ids=["reference", "optimized"])
def test_masked_keys_get_negligible_probability(backend):
    # exp(-1e9 - max) underflows; the scalar oracle says the mass is < 1e-30
    assert math.exp(-1e9 - 0.0) == 0.0
    rng = np.random.default_rng(2)
    logits = (rng.standard_normal((4, 8)) * 50).astype(np.float32)
    logits[:, 5:] += np.float32(MASKED_LOGIT)
    probs = backend.softmax(tensor(logits), axis=-1).data
    assert probs[:, 5:].max() <= 1e-30
    assert probs[:, 5:].max() <= 1e-12  # the per-row saturation bound


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------

def test_embed_shape_contract():
    cfg = make_config()
    w = make_random_weights(cfg)
    out = embed(make_input([[3]]), w, cfg, REF)
    assert out.shape == (1, 1, cfg.hidden_size)


def test_embed_zero_tables_yield_beta():
    cfg = make_config(layers=0)
    h = cfg.hidden_size
    zeros_tab = lambda n: Tensor.from_array(np.zeros((n, h), dtype=np.float32))
    beta = np.linspace(-1, 1, h).astype(np.float32)
    w = EncoderWeights(
        word_embeddings=zeros_tab(cfg.vocab_size),
        position_embeddings=zeros_tab(cfg.max_position_embeddings),
        token_type_embeddings=zeros_tab(cfg.type_vocab_size),
        emb_ln_gamma=Tensor.from_array(np.ones(h, dtype=np.float32)),
        emb_ln_beta=Tensor.from_array(beta),
        layers=(),
    )
    out = embed(make_input([[0, 1]]), w, cfg, REF)
    assert np.allclose(out.data, np.broadcast_to(beta, (1, 2, h)))


def test_embed_rejects_out_of_vocab_id():
    cfg = make_config(vocab=10)
    w = make_random_weights(cfg)
    with pytest.raises(IndexError):
        embed(make_input([[11]]), w, cfg, REF)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_single_position_attention_returns_value_row():
    # with S=1 the softmax is exactly 1, so context == projected V
    cfg = make_config(layers=1)
    w = make_random_weights(cfg, seed=4)
    layer = w.layers[0]
    hidden = Tensor.from_array(
        np.random.default_rng(9).standard_normal((2, 1, cfg.hidden_size)).astype(np.float32))
    mask = additive_attention_mask(tensor(np.ones((2, 1), dtype=np.int64)))

    got = multi_head_attention(hidden, layer, mask, cfg, REF).data

    h = hidden.data
    v = h @ layer.v_w.data.T + layer.v_b.data
    out = v @ layer.attn_out_w.data.T + layer.attn_out_b.data
    res = h + out
    mu = res.mean(-1, keepdims=True)
    var = ((res - mu) ** 2).mean(-1, keepdims=True)
    want = (res - mu) / np.sqrt(var + cfg.layer_norm_eps)
    assert np.max(np.abs(got - want)) <= 1e-5


def test_single_head_config_matches_flat_oracle():
    # A=1 removes the head reshuffle entirely; compute the same layer with
    # plain 2-D numpy and no head dimension
    cfg = make_config(hidden=16, heads=1, layers=1)
    w = make_random_weights(cfg, seed=5)
    layer = w.layers[0]
    rng = np.random.default_rng(6)
    h = rng.standard_normal((1, 5, 16)).astype(np.float32)
    mask_rows = np.array([[1, 1, 1, 1, 0]], dtype=np.int64)
    mask = additive_attention_mask(tensor(mask_rows))

    got = multi_head_attention(Tensor.from_array(h), layer, mask, cfg, REF).data

    x = h[0]
    q = x @ layer.q_w.data.T + layer.q_b.data
    k = x @ layer.k_w.data.T + layer.k_b.data
    v = x @ layer.v_w.data.T + layer.v_b.data
    scores = q @ k.T / math.sqrt(16.0) + mask.data[0, 0]
    e = np.exp(scores - scores.max(-1, keepdims=True))
    probs = e / e.sum(-1, keepdims=True)
    ctx = probs @ v
    out = ctx @ layer.attn_out_w.data.T + layer.attn_out_b.data
    res = x + out
    mu = res.mean(-1, keepdims=True)
    var = ((res - mu) ** 2).mean(-1, keepdims=True)
    want = (res - mu) / np.sqrt(var + cfg.layer_norm_eps)
    assert np.max(np.abs(got[0] - want)) <= 1e-5


# ---------------------------------------------------------------------------
# feed forward
# ---------------------------------------------------------------------------

def test_feed_forward_zero_ffn_reduces_to_layer_norm():
    cfg = make_config(layers=1)
    w = make_random_weights(cfg, seed=7)
    layer = w.layers[0]
    zero_ffn = type(layer)(**{
        **{f.name: getattr(layer, f.name) for f in layer.__dataclass_fields__.values()},
        "ffn_in_w": Tensor.from_array(np.zeros(layer.ffn_in_w.shape, dtype=np.float32)),
        "ffn_in_b": Tensor.from_array(np.zeros(layer.ffn_in_b.shape, dtype=np.float32)),
        "ffn_out_w": Tensor.from_array(np.zeros(layer.ffn_out_w.shape, dtype=np.float32)),
        "ffn_out_b": Tensor.from_array(np.zeros(layer.ffn_out_b.shape, dtype=np.float32)),
    })
    rng = np.random.default_rng(8)
    hidden = Tensor.from_array(rng.standard_normal((1, 3, cfg.hidden_size)).astype(np.float32))
    got = feed_forward(hidden, zero_ffn, cfg, REF).data
    want = REF.layer_norm(hidden, zero_ffn.ffn_ln_gamma, zero_ffn.ffn_ln_beta,
                          cfg.layer_norm_eps).data
    assert np.max(np.abs(got - want)) <= 1e-6


def test_feed_forward_preserves_shape():
    cfg = make_config()
    w = make_random_weights(cfg)
    hidden = Tensor.from_array(np.ones((2, 4, cfg.hidden_size), dtype=np.float32))
    assert feed_forward(hidden, w.layers[0], cfg, REF).shape == (2, 4, cfg.hidden_size)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_zero_layers_equals_embed():
    cfg = make_config(layers=0)
    w = make_random_weights(cfg, pooler=False)
    inp = make_input([[1, 2, 3]])
    out = forward(inp, w, cfg, REF)
    want = embed(inp, w, cfg, REF)
    assert np.array_equal(out.last_hidden_state.data, want.data)
    assert out.pooler_output is None


def test_forward_shapes_and_pooler():
    cfg = make_config()
    w = make_random_weights(cfg, pooler=True)
    inp = make_input([[1, 2, 3, 4], [5, 6, 0, 0]], mask=[[1, 1, 1, 1], [1, 1, 0, 0]])
    out = forward(inp, w, cfg, REF)
    assert out.last_hidden_state.shape == (2, 4, cfg.hidden_size)
    assert out.pooler_output.shape == (2, cfg.hidden_size)


def test_identical_rows_identical_outputs_bitwise_on_reference():
    cfg = make_config()
    w = make_random_weights(cfg, seed=11)
    row = [3, 1, 4, 1, 5]
    inp = make_input([row, row])
    out = forward(inp, w, cfg, REF).last_hidden_state.data
    assert np.array_equal(out[0], out[1])


def test_reference_forward_is_deterministic():
    cfg = make_config()
    w = make_random_weights(cfg, seed=12)
    inp = make_input([[2, 7, 1]])
    a = forward(inp, w, cfg, REF).last_hidden_state.data
    b = forward(inp, w, cfg, REF).last_hidden_state.data
    assert np.array_equal(a, b)


def test_backend_parity_on_small_config():
    cfg = make_config(hidden=32, layers=2, heads=4)
    w = make_random_weights(cfg, seed=13)
    rng = np.random.default_rng(14)
    ids = rng.integers(1, cfg.vocab_size, size=(3, 16), dtype=np.int64)
    mask = np.ones_like(ids)
    mask[1, 10:] = 0
    inp = make_input(ids, mask=mask)
    ref = forward(inp, w, cfg, REF)
    opt = forward(inp, w, cfg, OPT)
    OPT.synchronize()
    assert np.max(np.abs(ref.last_hidden_state.data - opt.last_hidden_state.data)) <= 1e-4
    assert np.max(np.abs(ref.pooler_output.data - opt.pooler_output.data)) <= 1e-4


@pytest.mark.parametrize("family,pad", [("bert", 0), ("roberta", 1)])
def test_padding_invariance(family, pad):
    cfg = make_config(family=family, pad=pad)
    w = make_random_weights(cfg, seed=15)
    ids = [[4, 9, 2, 8]]
    base = forward(make_input(ids), w, cfg, REF).last_hidden_state.data

    padded_ids = [[4, 9, 2, 8, pad, pad]]
    mask = [[1, 1, 1, 1, 0, 0]]
    padded = forward(make_input(padded_ids, mask=mask), w, cfg, REF).last_hidden_state.data
    assert np.max(np.abs(padded[:, :4, :] - base)) <= 1e-5


def test_forward_rejects_layer_count_mismatch():
    cfg = make_config(layers=3)
    w = make_random_weights(make_config(layers=2))
    with pytest.raises(ShapeError, match="layers"):
        forward(make_input([[1]]), w, cfg, REF)


def test_forward_rejects_overlong_sequence():
    cfg = make_config(max_pos=8)
    w = make_random_weights(cfg)
    ids = np.ones((1, 9), dtype=np.int64)
    with pytest.raises(ShapeError, match="sequence length"):
        forward(make_input(ids), w, cfg, REF)
