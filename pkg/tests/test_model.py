import math

import numpy as np
import pytest

from duet import tensor as T
from duet.fst import VocabularyError, prompt_template, serialize, mask_attribute
from duet.model import ConfigError, DuetModel, ModelConfig, patchify
from duet.tensor import Tensor

from micro import SPACE, VOCAB, images, micro_config, micro_model


def test_config_invariants():
    with pytest.raises(ConfigError):
        micro_config(image_size=5)
    with pytest.raises(ConfigError):
        micro_config(d=5)
    with pytest.raises(ConfigError):
        micro_config(cross_layers=0)


def test_image_encoding_shape():
    cfg = ModelConfig(vocab_size=10, n_attributes=3, image_size=16, patch_size=8, channels=3, d=8,
                      heads=2, ff_dim=8, proj_dim=4)
    model = DuetModel(cfg, seed=0)
    out = model.encode_image(np.zeros((16, 16, 3)))
    assert out.shape == (1, 5, 8)
    with pytest.raises(ValueError):
        model.encode_image(np.zeros((16, 8, 3)))


def test_patchify_row_major():
    img = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    p = patchify(img, 2)
    assert p[0, 0].tolist() == [0, 1, 4, 5]
    assert p[0, 1].tolist() == [2, 3, 6, 7]
    assert p[0, 2].tolist() == [8, 9, 12, 13]


def test_patch_permutation_equivariance_without_positions():
    model = micro_model(seed=1, scale=0.5)
    model.v_pos.data[:] = 0.0
    x = images(1, seed=3)
    swapped = x.copy()
    swapped[:, 0:2, 0:2], swapped[:, 0:2, 2:4] = x[:, 0:2, 2:4], x[:, 0:2, 0:2]
    a = model.encode_image(x).data[0]
    b = model.encode_image(swapped).data[0]
    np.testing.assert_allclose(a[[0, 2, 1, 3, 4]], b, atol=1e-12)


def test_forward_deterministic_and_finite():
    seq = serialize({0, 2}, SPACE, VOCAB)
    outs = [micro_model(seed=4)(images(2), [seq, seq]) for _ in range(2)]
    assert outs[0].v_tilde.data.tobytes() == outs[1].v_tilde.data.tobytes()
    assert np.all(np.isfinite(outs[0].language.data))


def test_template_text_encoding_finite():
    model = micro_model()
    ids = np.array(prompt_template(SPACE, VOCAB).ids)
    assert np.all(np.isfinite(model.encode_text(ids).data))


def test_unknown_token_id():
    with pytest.raises(VocabularyError):
        micro_model().encode_text(np.array([len(VOCAB)]))


def test_padding_never_leaks_into_real_positions():
    model = micro_model(seed=2, scale=0.5)
    ids = np.array([[1, 8, 9, 3, 0, 0]])
    mask = ids != 0
    a = model.encode_text(ids, mask).data
    ids2 = ids.copy()
    ids2[0, 4:] = [7, 11]
    b = model.encode_text(ids2, mask).data
    np.testing.assert_allclose(a[0, :4], b[0, :4], atol=1e-12)


def test_batched_padding_matches_single_sequence():
    model = micro_model(seed=3, scale=0.5)
    short = serialize({0}, SPACE, VOCAB)
    long = serialize({0, 1, 2, 3}, SPACE, VOCAB)
    x = images(2, seed=1)
    both = model(x, [short, long])
    alone = model(x[:1], [short])
    np.testing.assert_allclose(both.v_tilde.data[0], alone.v_tilde.data[0], atol=1e-10)
    np.testing.assert_allclose(both.language.data[0, :len(short)], alone.language.data[0], atol=1e-10)


def test_attention_rows_normalized():
    model = micro_model(seed=5)
    model(images(2), [serialize({0}, SPACE, VOCAB), serialize({1, 3}, SPACE, VOCAB)])
    layer = model.cross[0]
    for att in (layer.cross_v, layer.cross_l, layer.self_v, layer.self_l):
        np.testing.assert_allclose(att.last_weights.sum(-1), 1.0, atol=1e-9)


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _mha(att, xq, xkv):
    d = xq.shape[-1]
    h, dk = att.heads, d // att.heads
    q = xq @ att.q.weight.data + att.q.bias.data
    k = xkv @ att.k.weight.data + att.k.bias.data
    v = xkv @ att.v.weight.data + att.v.bias.data
    out = np.zeros_like(q)
    for i in range(h):
        s = slice(i * dk, (i + 1) * dk)
        sc = q[:, s] @ k[:, s].T / math.sqrt(dk)
        w = np.exp(sc - sc.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        out[:, s] = w @ v[:, s]
    return out @ att.o.weight.data + att.o.bias.data


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _ff(ff, x):
    return _gelu(x @ ff.fc1.weight.data + ff.fc1.bias.data) @ ff.fc2.weight.data + ff.fc2.bias.data


def reference_cross(layer, v, l):
    ln = lambda m, x: _ln(x, m.gain.data, m.bias.data)
    v1 = ln(layer.ln_cv, v + _mha(layer.cross_v, v, l))
    l1 = ln(layer.ln_cl, l + _mha(layer.cross_l, l, v))
    v2 = ln(layer.ln_sv, v1 + _mha(layer.self_v, v1, v1))
    l2 = ln(layer.ln_sl, l1 + _mha(layer.self_l, l1, l1))
    return ln(layer.ln_fv, v2 + _ff(layer.ff_v, v2)), ln(layer.ln_fl, l2 + _ff(layer.ff_l, l2))


def test_cross_layer_matches_numpy_reference():
    model = micro_model(seed=6, scale=0.4)
    rng = np.random.default_rng(0)
    v, l = rng.normal(size=(1, 1, 4)), rng.normal(size=(1, 7, 4))
    got_v, got_l = model.cross_layer(Tensor(v), Tensor(l), None)
    want_v, want_l = reference_cross(model.cross[0], v[0], l[0])
    np.testing.assert_allclose(got_v.data[0], want_v, atol=1e-12)
    np.testing.assert_allclose(got_l.data[0], want_l, atol=1e-12)


def test_cross_layer_ablation_oracle():
    # zero language input and zero cross value path: vision follows its own LN/self-attn path
    model = micro_model(seed=7, scale=0.4)
    layer = model.cross[0]
    layer.cross_v.v.weight.data[:] = 0
    layer.cross_v.v.bias.data[:] = 0
    layer.cross_v.o.bias.data[:] = 0
    v = np.random.default_rng(1).normal(size=(1, 1, 4))
    got, _ = model.cross_layer(Tensor(v), Tensor(np.zeros((1, 5, 4))), None)
    ln = lambda m, x: _ln(x, m.gain.data, m.bias.data)
    v1 = ln(layer.ln_cv, v[0])
    v2 = ln(layer.ln_sv, v1 + _mha(layer.self_v, v1, v1))
    want = ln(layer.ln_fv, v2 + _ff(layer.ff_v, v2))
    np.testing.assert_allclose(got.data[0], want, atol=1e-12)


def test_single_cross_layer_by_default():
    assert len(micro_model().cross) == 1
    assert len(micro_model(cross_layers=2).cross) == 2


def test_cross_full_patches_flag():
    model = micro_model(cross_full_patches=True)
    out = model(images(1), [prompt_template(SPACE, VOCAB)])
    assert out.vision.shape == (1, 5, 4)
    assert micro_model()(images(1), [prompt_template(SPACE, VOCAB)]).vision.shape == (1, 1, 4)


def test_attribute_map():
    model = micro_model()
    model.attr_map.weight.data[:] = 0
    model.attr_map.bias.data[:] = 0
    out = model(images(2), [prompt_template(SPACE, VOCAB)] * 2)
    assert out.v_tilde.shape == (2, SPACE.n_attributes)
    assert np.all(out.v_tilde.data == 0)


def test_attribute_map_gradient():
    model = micro_model(seed=8)
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    ps = [model.attr_map.weight, model.attr_map.bias]
    assert T.grad_check(lambda: T.tsum(T.square(model.image_to_attribute_vec(x))), ps) < 1e-4


def test_token_logits_tied_embeddings():
    model = micro_model()
    E = np.eye(len(VOCAB), 4)
    model.tok_embed.data = E.copy()
    for w in range(4):
        assert int(np.argmax(model.token_logits(Tensor(E[w])).data)) == w


def test_token_probabilities_extended_precision():
    import decimal
    decimal.getcontext().prec = 50
    model = micro_model(seed=9, scale=1.0)
    state = np.random.default_rng(4).normal(size=4)
    got = T.softmax(model.token_logits(Tensor(state))).data
    E = model.tok_embed.data
    logits = [sum(decimal.Decimal(float(a)) * decimal.Decimal(float(b)) for a, b in zip(state, row))
              for row in E]
    ex = [x.exp() for x in logits]
    want = [float(e / sum(ex)) for e in ex]
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert abs(got.sum() - 1) < 1e-12


def test_projection_head():
    model = micro_model(seed=10)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 4)))
    h = model.project_head(x)
    assert h.shape == (1, 3)
    assert T.cosine_similarity(h, h).data[0] == pytest.approx(1.0)
    ps = [model.head_fc1.weight, model.head_fc2.weight]
    assert T.grad_check(lambda: T.tsum(T.tanh(model.project_head(x))), ps) < 1e-4


def test_language_token_changes_vision_output():
    model = micro_model(seed=11, scale=0.5)
    x = images(1)
    a = model(x, [serialize({0, 2}, SPACE, VOCAB)]).v_tilde.data
    b = model(x, [serialize({1, 2}, SPACE, VOCAB)]).v_tilde.data
    assert np.abs(a - b).max() > 1e-8


def test_masked_states_pool():
    model = micro_model(seed=12)
    masked, tgt = mask_attribute(serialize({0, 2}, SPACE, VOCAB), 2, VOCAB)
    out = model(images(1), [masked])
    pos = [p for p, _ in tgt]
    pooled = T.mean_pool(out.language[0][np.array(pos)], 0).data
    np.testing.assert_allclose(pooled, out.language.data[0, pos].mean(0), atol=1e-15)


def test_vision_only_model_has_no_language_tower():
    model = micro_model(vision_only=True)
    assert not any(n.startswith(("tok_embed", "cross")) for n, _ in model.named_parameters())
    out = model(images(2))
    assert out.language is None and out.v_tilde.shape == (2, 4)


def test_state_dict_round_trip():
    a, b = micro_model(seed=1), micro_model(seed=2)
    b.load_state_dict(a.state_dict())
    x = images(1)
    seq = [prompt_template(SPACE, VOCAB)]
    assert a(x, seq).v_tilde.data.tobytes() == b(x, seq).v_tilde.data.tobytes()
    with pytest.raises(KeyError):
        b.load_state_dict({})
    assert a.n_parameters() == sum(p.size for p in a.parameters())
