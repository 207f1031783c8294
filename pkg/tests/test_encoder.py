import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semvlp import tensor as T
from semvlp.encoder import (
    SINGLE_STREAM,
    TWO_STREAM,
    EncoderConfig,
    InputError,
    ObjectInput,
    SharedParams,
    TextInput,
    closed_form_param_count,
    embed_objects,
    embed_text,
    encode,
    encode_pairs,
    encode_single_stream,
    encode_two_stream,
    location_vector,
    multi_head_attention,
)
from semvlp.finetune import ensure_heads, similarity_score

from .oracles import reference as R

GOLDENS = Path(__file__).parent / "goldens"
CFG = EncoderConfig(num_layers=2, split_layer=1, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=42,
                    max_text_len=8, object_feature_dim=6)


def golden(name):
    return json.loads((GOLDENS / f"{name}.json").read_text())


def objects(n, seed=0, fd=6):
    rng = np.random.default_rng(seed)
    boxes = [[10 * j, 5 * j, 10 * j + 20, 5 * j + 30] for j in range(n)]
    return ObjectInput(rng.normal(size=(n, fd)), boxes, (100.0, 100.0), np.arange(n) % 3)


TEXT = TextInput((1, 7, 12, 20, 2))


@pytest.fixture(scope="module")
def params():
    return SharedParams.initialize(CFG, 0)


# -- inputs -------------------------------------------------------------------

def test_location_vector_examples():
    np.testing.assert_allclose(location_vector((10, 20, 50, 100), (100, 200)), [0.1, 0.1, 0.5, 0.5])
    np.testing.assert_allclose(location_vector((0, 0, 100, 50), (100, 50)), [0, 0, 1, 1])
    np.testing.assert_allclose(location_vector((5, 5, 5, 5), (10, 10)), [0.5] * 4)
    with pytest.raises(InputError):
        location_vector((0, 0, 0, 0), (0, 10))


def test_input_contracts():
    with pytest.raises(InputError):
        TextInput((7, 2))
    with pytest.raises(InputError):
        ObjectInput(np.ones((1, 6)), [[0, 0, 120, 10]], (100, 100), [0])
    with pytest.raises(ValueError):
        EncoderConfig(num_layers=2, split_layer=3)
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=10, num_heads=4)


# -- embeddings ---------------------------------------------------------------

def test_embed_text_golden():
    g = golden("embed_text")
    p = SharedParams.initialize(EncoderConfig(**g["config"]), g["seed"])
    out = embed_text(TextInput(g["token_ids"]), p).data
    np.testing.assert_allclose(out, g["rows"], rtol=0, atol=1e-12)


def test_embed_objects_golden():
    g = golden("embed_objects")
    p = SharedParams.initialize(EncoderConfig(**g["config"]), g["seed"])
    o = ObjectInput(np.array(g["features"]), g["boxes"], g["image_size"], [0])
    np.testing.assert_allclose(embed_objects(o, p).data, g["rows"], rtol=0, atol=1e-12)


def test_embed_text_zero_tables_gives_beta(params):
    p = params.clone()
    for name in ("embed.word", "embed.segment", "embed.position"):
        p[name].data[...] = 0.0
    p["embed.text_ln.beta"].data[...] = np.arange(16.0)
    out = embed_text(TextInput((1, 2)), p).data
    np.testing.assert_array_equal(out, np.tile(np.arange(16.0), (2, 1)))


def test_embed_text_permutation_moves_words_not_positions(params):
    a = embed_text(TextInput((1, 7, 9, 2)), params).data
    b = embed_text(TextInput((1, 9, 7, 2)), params).data
    assert not np.allclose(a[1], b[2])      # position embedding stayed put
    np.testing.assert_array_equal(a[[0, 3]], b[[0, 3]])
    with pytest.raises(InputError):
        embed_text(TextInput((1, 99, 2)), params)


def test_embed_objects_empty_and_duplicates(params):
    assert embed_objects(objects(0), params).shape == (1, 16)
    o = ObjectInput(np.ones((2, 6)), [[1, 1, 9, 9]] * 2, (10, 10), [0, 0])
    rows = embed_objects(o, params).data
    np.testing.assert_array_equal(rows[1], rows[2])
    with pytest.raises(InputError):
        embed_objects(objects(2, fd=5), params)


# -- attention ----------------------------------------------------------------

def test_attention_single_key_returns_projected_value(params):
    x = T.Tensor(np.random.default_rng(0).normal(size=(1, 1, 16)))
    out, probs = multi_head_attention(x, x, np.ones((1, 1), bool), params, "layer1.self")
    v = x.data[0] @ params["layer1.self.v.weight"].data + params["layer1.self.v.bias"].data
    expected = v @ params["layer1.self.o.weight"].data + params["layer1.self.o.bias"].data
    np.testing.assert_allclose(out.data[0], expected, atol=1e-12)
    assert (probs == 1.0).all()


def test_attention_identical_keys_split_evenly(params):
    rng = np.random.default_rng(1)
    q = T.Tensor(rng.normal(size=(1, 3, 16)))
    k = T.Tensor(np.tile(rng.normal(size=(1, 1, 16)), (1, 2, 1)))
    _, probs = multi_head_attention(q, k, np.ones((1, 2), bool), params, "layer1.self")
    np.testing.assert_allclose(probs, 0.5, atol=1e-15)


def test_attention_masked_key_perturbation_is_invisible(params):
    rng = np.random.default_rng(2)
    q, kv = rng.normal(size=(1, 2, 16)), rng.normal(size=(1, 3, 16))
    mask = np.array([[True, True, False]])
    out1, p1 = multi_head_attention(T.Tensor(q), T.Tensor(kv), mask, params, "layer1.self")
    kv[0, 2] += 100.0
    out2, _ = multi_head_attention(T.Tensor(q), T.Tensor(kv), mask, params, "layer1.self")
    np.testing.assert_array_equal(out1.data, out2.data)
    assert (p1[..., 2] == 0.0).all()
    with pytest.raises(T.AllKeysMaskedError):
        multi_head_attention(T.Tensor(q), T.Tensor(kv), np.zeros((1, 3), bool), params, "layer1.self")


# -- encoding against the loop reference ---------------------------------------

@pytest.mark.parametrize("mode", [SINGLE_STREAM, TWO_STREAM])
def test_similarity_golden_and_reference(mode):
    g = golden("similarity")
    cfg = EncoderConfig(**g["config"])
    p = SharedParams.initialize(cfg, g["seed"])
    ensure_heads(p, "retrieval")
    feats = np.random.default_rng(g["feature_seed"]).normal(size=(len(g["boxes"]), cfg.object_feature_dim))
    o = ObjectInput(feats, g["boxes"], g["image_size"], [0] * len(g["boxes"]))
    out = encode(TextInput(g["token_ids"]), o, p, mode)
    np.testing.assert_allclose(out.pooled.data, g["modes"][mode]["pooled"], rtol=0, atol=1e-10)
    assert similarity_score(out.pooled, p) == pytest.approx(g["modes"][mode]["score"], abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(0, 4), st.integers(0, 6), st.sampled_from([SINGLE_STREAM, TWO_STREAM]))
def test_library_matches_reference(seed, n_obj, n_words, mode):
    cfg = CFG
    p = SharedParams.initialize(cfg, seed)
    P = {n: t.data for n, t in p.items()}
    rng = np.random.default_rng(seed)
    ids = [1, *rng.integers(5, cfg.vocab_size, size=n_words).tolist(), 2]
    o = objects(n_obj, seed)
    out = encode(TextInput(ids), o, p, mode)
    H, O, pooled = R.encode(P, cfg.to_dict(), ids, o.features, o.boxes.tolist(), o.image_size, mode)
    np.testing.assert_allclose(out.H_L.data, H, atol=1e-10)
    np.testing.assert_allclose(out.O_L.data, O, atol=1e-10)
    np.testing.assert_allclose(out.pooled.data, pooled, atol=1e-10)


def test_batched_equals_single(params):
    texts = [TEXT, TextInput((1, 9, 2)), TextInput((1, 5, 6, 7, 8, 9, 10, 2))]
    objs = [objects(3, 1), objects(1, 2), objects(0)]
    for mode in (SINGLE_STREAM, TWO_STREAM):
        batch = encode_pairs(params, texts, objs, mode)
        for i, (t, o) in enumerate(zip(texts, objs)):
            one = encode(t, o, params, mode)
            np.testing.assert_allclose(batch.pooled.data[i], one.pooled.data, atol=1e-12)


# -- sharing and the parameter store -------------------------------------------

@pytest.mark.parametrize("L,Ls", [(2, 0), (2, 1), (2, 2), (4, 2)])
def test_param_count_closed_form(L, Ls):
    cfg = EncoderConfig(num_layers=L, split_layer=Ls, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=12)
    p = SharedParams.initialize(cfg)
    assert p.encoder_param_count() == closed_form_param_count(cfg)
    cross = {n.split(".")[0] for n in p.names() if ".cross." in n}
    assert cross == {f"layer{l}" for l in range(Ls + 1, L + 1)}


def test_base_config_is_constructible_without_training():
    cfg = EncoderConfig.base()
    assert (cfg.num_layers, cfg.split_layer, cfg.hidden_dim) == (12, 6, 768)
    assert closed_form_param_count(cfg) > 100_000_000


@pytest.mark.parametrize("name", ["layer1.self.q.weight", "layer2.ffn.in.weight", "layer1.self.ln.gamma"])
def test_shared_weight_moves_both_modes(params, name):
    o = objects(3)
    before = {m: encode(TEXT, o, params, m).pooled.data for m in (SINGLE_STREAM, TWO_STREAM)}
    p = params.clone()
    p[name].data.reshape(-1)[0] += 0.5
    for m in before:
        assert np.abs(encode(TEXT, o, p, m).pooled.data - before[m]).max() > 0


def test_single_stream_never_reads_cross(params):
    o = objects(2)
    a = encode_single_stream(TEXT, o, params)
    p = params.clone()
    p["layer2.cross.q.weight"].data[...] = 5.0
    np.testing.assert_array_equal(a.pooled.data, encode_single_stream(TEXT, o, p).pooled.data)


def test_init_conventions(params):
    assert (params["layer1.self.q.bias"].data == 0).all()
    assert (params["layer1.ffn.ln.gamma"].data == 1).all()
    w = params["layer1.ffn.in.weight"].data
    assert np.abs(w).max() <= 2 * CFG.init_std
    assert 0.6 * CFG.init_std < w.std() < 1.0 * CFG.init_std


# -- mode semantics -------------------------------------------------------------

def test_zero_layers_returns_embeddings():
    cfg = EncoderConfig(num_layers=0, split_layer=0, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=42,
                        object_feature_dim=6)
    p = SharedParams.initialize(cfg, 1)
    o = objects(2)
    out = encode_single_stream(TEXT, o, p)
    np.testing.assert_array_equal(out.H_L.data, embed_text(TEXT, p).data)
    np.testing.assert_array_equal(out.O_L.data, embed_objects(o, p).data)


def test_single_stream_is_cross_modal(params):
    o = objects(3)
    feats = o.features.copy()
    feats[1] = 0.0
    a = encode_single_stream(TEXT, o, params).H_L.data
    b = encode_single_stream(TEXT, o.with_features(feats), params).H_L.data
    assert np.abs(a - b).max() > 0


def test_two_stream_text_purity(params):
    ref = encode_two_stream(TEXT, objects(2, 0), params).H_L.data
    for s in range(1, 11):
        other = encode_two_stream(TEXT, objects(1 + s % 5, s), params).H_L.data
        assert np.array_equal(ref, other)


def test_two_stream_without_cross_ignores_caption():
    cfg = EncoderConfig(num_layers=2, split_layer=2, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=42,
                        object_feature_dim=6)
    p = SharedParams.initialize(cfg, 0)
    o = objects(3)
    a = encode_two_stream(TEXT, o, p).O_L.data
    b = encode_two_stream(TextInput((1, 30, 31, 2)), o, p).O_L.data
    np.testing.assert_array_equal(a, b)


def test_pooled_rows(params):
    o = objects(3)
    s = encode_single_stream(TEXT, o, params)
    np.testing.assert_array_equal(s.pooled.data, s.H_L.data[0])
    t = encode_two_stream(TEXT, o, params)
    np.testing.assert_array_equal(t.pooled.data, t.O_L.data[0])


def test_attention_map_shapes_and_rows(params):
    n, m = 3, TEXT.num_words
    s = encode_single_stream(TEXT, objects(n), params)
    assert len(s.attn_maps) == CFG.num_layers * CFG.num_heads
    assert all(a.weights.shape == (n + m + 3, n + m + 3) for a in s.attn_maps)
    t = encode_two_stream(TEXT, objects(n), params)
    cross = [a for a in t.attn_maps if a.key_set == "text" and a.query_set == "image"]
    assert {a.layer for a in cross} == {2}
    assert all(a.weights.shape == (n + 1, m + 2) for a in cross)
    for a in s.attn_maps + t.attn_maps:
        np.testing.assert_allclose(a.weights.sum(axis=1), 1.0, atol=1e-6)


def test_object_permutation_equivariance(params):
    o = objects(4, 3)
    perm = np.array([2, 0, 3, 1])
    po = ObjectInput(o.features[perm], o.boxes[perm], o.image_size, o.detector_labels[perm])
    for mode in (SINGLE_STREAM, TWO_STREAM):
        a, b = encode(TEXT, o, params, mode), encode(TEXT, po, params, mode)
        np.testing.assert_allclose(b.O_L.data[1:], a.O_L.data[1:][perm], atol=1e-12)
        np.testing.assert_allclose(b.pooled.data, a.pooled.data, atol=1e-12)


def test_forward_deterministic(params):
    a = encode(TEXT, objects(2), params, TWO_STREAM).pooled.data
    b = encode(TEXT, objects(2), params, TWO_STREAM).pooled.data
    assert np.array_equal(a, b)
