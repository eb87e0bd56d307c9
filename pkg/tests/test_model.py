import math
import struct

import numpy as np
import pytest

from slu_transformer import numerics as nx
from slu_transformer.labels import SOP, LabelSpace
from slu_transformer.model import (ForwardContext, ModelConfig, checkpoint_census,
                                   classification_head, decode_step, decoder_hidden, embed,
                                   encode, encoder_layer, init_params, load_checkpoint,
                                   param_shapes, parameter_count, save_checkpoint,
                                   sequence_logits, sinusoidal_positions)
from slu_transformer.training import model_grad_check, tiny_config


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def norm(x, eps=1e-6):
    m = x.mean(-1, keepdims=True)
    return (x - m) / np.sqrt(((x - m) ** 2).mean(-1, keepdims=True) + eps)


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_attention(params, prefix, y, ctx, L, mask=None):
    heads = []
    for h in range(L):
        W = {k: params[f"{prefix}.head.{h}.{k}"].data for k in ("Wq", "Wk", "Wv")}
        Q, K, V = y @ W["Wq"].T, ctx @ W["Wk"].T, ctx @ W["Wv"].T
        s = Q @ K.T / math.sqrt(Q.shape[1])
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        heads.append(softmax(s) @ V)
    return np.concatenate(heads, axis=1) @ params[f"{prefix}.Wc"].data.T


def np_ffn(params, prefix, h):
    P = {k: params[f"{prefix}.{k}"].data for k in ("W1", "b1", "W2", "b2")}
    return np.maximum(0, h @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"]


def np_norm(params, prefix, x):
    return norm(x) * params[f"{prefix}.gain"].data + params[f"{prefix}.bias"].data


def randomize(params, seed=1):
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.assign(t.data + 0.1 * rng.standard_normal(t.shape))
    return params


# -- config -----------------------------------------------------------------

def test_default_config_sizes():
    cfg = ModelConfig()
    assert (cfg.input_dim, cfg.model_dim, cfg.head_dim, cfg.num_heads) == (320, 128, 64, 3)
    assert (cfg.enc_layers, cfg.dec_layers, cfg.ffn_inner) == (5, 1, 512)
    assert cfg.dropout == 0.1 and cfg.label_smoothing == 0.1


@pytest.mark.parametrize("bad", [dict(model_dim=0), dict(dropout=1.0), dict(label_smoothing=-0.1),
                                 dict(mode="tagging"), dict(model_dim=7)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_dict_round_trip():
    cfg = tiny_config("classification", classifier="mean_pool")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- positions and embedding -------------------------------------------------

def test_positions_at_zero_alternate():
    assert sinusoidal_positions(4, 6)[0].tolist() == [0, 1, 0, 1, 0, 1]


def test_positions_bounded_and_known_value():
    pos = sinusoidal_positions(200, 16)
    assert np.abs(pos).max() <= 1.0
    assert abs(pos[1, 0] - 0.841471) < 1e-6
    assert pos[3, 5] == pytest.approx(math.cos(3 / 10000 ** (4 / 16)), abs=1e-15)


def test_positions_need_even_dim():
    with pytest.raises(ValueError):
        sinusoidal_positions(4, 5)


def test_embed_zero_input_gives_positions():
    cfg = tiny_config()
    params = init_params(cfg)
    out = embed(np.zeros((5, 6)), params, cfg).data
    assert np.array_equal(out, sinusoidal_positions(16, 8)[:5])


def test_embed_without_positions_is_linear():
    cfg = tiny_config(use_positional=False)
    params = randomize(init_params(cfg))
    x = rand(3, 6)
    expected = x @ params["embed.We"].data.T + params["embed.b"].data
    np.testing.assert_allclose(embed(x, params, cfg).data, expected, atol=1e-14)


def test_embed_hand_example():
    cfg = ModelConfig(input_dim=2, model_dim=2, head_dim=1, num_heads=1, enc_layers=0,
                      dec_layers=0, ffn_inner=1, mode="classification", classifier="mean_pool",
                      label_space=LabelSpace.sized(1, 2), dropout=0.0)
    params = init_params(cfg)
    params["embed.We"].assign(np.array([[1.0, 2.0], [0.0, -1.0]]))
    params["embed.b"].assign(np.array([0.5, 0.0]))
    out = embed(np.array([[1.0, 1.0], [2.0, 0.0]]), params, cfg).data
    # frame 0: [3.5, -1] + [0, 1]; frame 1: [2.5, 0] + [sin 1, cos 1]
    np.testing.assert_allclose(out, [[3.5, 0.0], [2.5 + math.sin(1), math.cos(1)]], atol=1e-15)


def test_too_many_frames_is_an_error():
    cfg = tiny_config()
    with pytest.raises(ValueError, match="max_frames"):
        embed(np.zeros((17, 6)), init_params(cfg), cfg)


# -- encoder ----------------------------------------------------------------

def test_residual_only_encoder_layer_is_norm():
    cfg = tiny_config()
    params = init_params(cfg)
    for name in params:
        if name.startswith("encoder.0") and (name.endswith("Wc") or ".ffn." in name):
            params[name].assign(np.zeros(params[name].shape))
    y = rand(4, 8)
    out = encoder_layer(nx.Tensor(y), params, cfg, 0).data
    np.testing.assert_allclose(out, norm(norm(y)), atol=1e-12)
    # normalizing a normalized vector only moves it by the eps term
    np.testing.assert_allclose(out, norm(y), atol=1e-5)


def test_encoder_layer_matches_composed_oracle():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    for T in (1, 3):
        y = rand(T, 8, seed=T)
        z = np_attention(params, "encoder.0.self_attn", y, y, 2)
        h = np_norm(params, "encoder.0.norm1", z + y)
        s = np_ffn(params, "encoder.0.ffn", h)
        r = np_norm(params, "encoder.0.norm2", s + h)
        np.testing.assert_allclose(encoder_layer(nx.Tensor(y), params, cfg, 0).data, r, atol=1e-12)


def test_single_layer_encode_is_embed_plus_layer():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    x = rand(5, 6)
    expected = encoder_layer(embed(x, params, cfg), params, cfg, 0).data
    assert np.array_equal(encode(x, params, cfg)[0].data, expected)


def test_default_encoder_is_finite_and_deterministic():
    cfg = ModelConfig()
    params = init_params(cfg, seed=3)
    x = rand(20, 320)
    a, _ = encode(x, params, cfg)
    b, _ = encode(x, params, cfg)
    assert a.shape == (20, 128)
    assert np.all(np.isfinite(a.data)) and np.array_equal(a.data, b.data)


def test_train_mode_dropout_changes_output():
    cfg = tiny_config(dropout=0.5)
    params = init_params(cfg)
    x = rand(4, 6)
    ctx = ForwardContext(train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(encode(x, params, cfg, ctx=ctx)[0].data, encode(x, params, cfg)[0].data)


def test_padding_does_not_change_real_frames():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    x = rand(3, 6)
    alone, _ = encode(x, params, cfg)
    padded = np.zeros((1, 5, 6))
    padded[0, :3] = x
    batched, _ = encode(padded, params, cfg, lengths=[3])
    np.testing.assert_allclose(batched.data[0, :3], alone.data, atol=1e-12)


def test_trace_records_intermediates():
    cfg = tiny_config()
    trace = {}
    encode(rand(3, 6), init_params(cfg), cfg, ctx=ForwardContext(trace=trace))
    for key in ("embed.y", "encoder.0.z", "encoder.0.h", "encoder.0.s", "encoder.0.r",
                "encoder.0.q", "encoder.0.alpha"):
        assert key in trace
    assert trace["encoder.0.r"].shape == (3, 8)


# -- decoder ----------------------------------------------------------------

def test_decoder_layer_matches_composed_oracle():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    enc = rand(4, 8, seed=2)
    tokens = [SOP, 3, 5]
    yd = params["target_embed"].data[tokens] + sinusoidal_positions(16, 8)[:3]
    a = np_attention(params, "decoder.0.self_attn", yd, yd, 2, np.tril(np.ones((3, 3), bool)))
    h1 = np_norm(params, "decoder.0.norm1", a + yd)
    c = np_attention(params, "decoder.0.cross_attn", h1, enc, 2)
    h2 = np_norm(params, "decoder.0.norm2", c + h1)
    r = np_norm(params, "decoder.0.norm3", np_ffn(params, "decoder.0.ffn", h2) + h2)
    np.testing.assert_allclose(decoder_hidden(tokens, nx.Tensor(enc), params, cfg).data, r, atol=1e-12)


def test_decoder_depends_on_encoder_and_is_causal():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    enc = nx.Tensor(rand(4, 8))
    base = decoder_hidden([SOP, 2, 4], enc, params, cfg).data
    other = decoder_hidden([SOP, 2, 4], nx.Tensor(rand(4, 8, seed=9)), params, cfg).data
    assert not np.allclose(base, other)
    changed = decoder_hidden([SOP, 2, 6], enc, params, cfg).data
    assert np.array_equal(base[:2], changed[:2])


def test_stepwise_decoding_equals_full_pass():
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    enc, _ = encode(rand(5, 6), params, cfg)
    tokens = [SOP, 2, 4, 1]
    full = sequence_logits(tokens, enc, params, cfg).data
    for k in range(1, len(tokens) + 1):
        np.testing.assert_allclose(decode_step(tokens[:k], enc, params, cfg), full[k - 1], atol=1e-9)


def test_decode_step_validation():
    cfg = tiny_config()
    params = init_params(cfg)
    enc = nx.Tensor(rand(2, 8))
    assert decode_step([SOP], enc, params, cfg).shape == (7,)
    with pytest.raises(ValueError, match="sop"):
        decode_step([2], enc, params, cfg)
    with pytest.raises(ValueError, match="vocabulary"):
        decode_step([SOP, 7], enc, params, cfg)


# -- classification heads -----------------------------------------------------

def mean_pool_cfg(**kw):
    return tiny_config("classification", classifier="mean_pool", **kw)


def test_mean_pool_head_hand_oracle():
    cfg = mean_pool_cfg()
    params = randomize(init_params(cfg))
    enc = rand(3, 8)
    pooled = enc.mean(0)
    hidden = np.maximum(0, pooled @ params["head.W1"].data + params["head.b1"].data)
    expected = hidden @ params["output.W"].data + params["output.b"].data
    out = classification_head(nx.Tensor(enc), params, cfg).data
    assert out.shape == (6,)
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_mean_pool_single_frame_and_duplicates():
    cfg = mean_pool_cfg()
    params = randomize(init_params(cfg))
    row = rand(1, 8)
    one = classification_head(nx.Tensor(row), params, cfg).data
    two = classification_head(nx.Tensor(np.repeat(row, 2, axis=0)), params, cfg).data
    np.testing.assert_allclose(one, two, atol=1e-14)


def test_head_refuses_hierarchical_model():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        classification_head(nx.Tensor(rand(2, 8)), init_params(cfg), cfg)


@pytest.mark.parametrize("classifier", ["mean_pool", "decoder"])
def test_frame_order_invariance_only_without_positions(classifier):
    x = rand(5, 6)
    perm = [3, 0, 4, 1, 2]
    for positional, invariant in ((False, True), (True, False)):
        cfg = tiny_config("classification", classifier=classifier, use_positional=positional)
        params = randomize(init_params(cfg))
        logits = lambda inp: classification_head(encode(inp, params, cfg)[0], params, cfg).data
        same = np.allclose(logits(x), logits(x[perm]), atol=1e-9)
        assert same == invariant


def test_decoder_head_uses_one_start_query():
    cfg = tiny_config("classification")
    params = randomize(init_params(cfg))
    enc = nx.Tensor(rand(4, 8))
    hidden = decoder_hidden([SOP], enc, params, cfg).data[0]
    expected = hidden @ params["output.W"].data + params["output.b"].data
    np.testing.assert_allclose(classification_head(enc, params, cfg).data, expected, atol=1e-13)


# -- parameter counts ---------------------------------------------------------

def test_count_by_hand_tiny_model():
    space = LabelSpace.sized(1, 1)  # vocabulary: sop, eop, d0, i0
    cfg = ModelConfig(input_dim=3, model_dim=2, head_dim=1, num_heads=1, enc_layers=1,
                      dec_layers=1, ffn_inner=2, label_space=space)
    embed_ = 2 * 3 + 2
    attention = 3 * (1 * 2) + 2 * 1
    ffn = 2 * 2 + 2 + 2 * 2 + 2
    enc_layer = attention + ffn + 2 * (2 + 2)
    dec_layer = 2 * attention + ffn + 3 * (2 + 2)
    target = 4 * 2
    out = 2 * 4 + 4
    assert parameter_count(cfg) == embed_ + enc_layer + target + dec_layer + out == 96


@pytest.mark.parametrize("cfg", [tiny_config(), tiny_config("classification"),
                                 mean_pool_cfg(), ModelConfig(), ModelConfig(mode="classification")])
def test_closed_form_count_equals_tensor_sizes(cfg):
    assert parameter_count(cfg) == sum(int(np.prod(s)) for _, s in param_shapes(cfg))
    assert init_params(cfg).size() == parameter_count(cfg)


def test_classification_count_near_reported_size():
    count = parameter_count(ModelConfig(mode="classification"))
    assert abs(count - 1_545_987) / 1_545_987 < 0.10


def test_parameter_names_follow_dotted_scheme():
    names = [n for n, _ in param_shapes(ModelConfig())]
    assert "encoder.3.self_attn.head.1.Wq" in names
    assert "decoder.0.cross_attn.Wc" in names


# -- gradients ------------------------------------------------------------------

def test_one_layer_encoder_grad_check():
    cfg = tiny_config(dec_layers=0, mode="classification", classifier="mean_pool")
    params = randomize(init_params(cfg))
    x = rand(3, 6)
    w = rand(3, 8, seed=4)
    enc_params = {k: v for k, v in params.items() if k.startswith(("encoder", "embed"))}
    report = nx.grad_check(lambda: nx.sum_(encode(x, params, cfg)[0] * w), enc_params)
    assert report.passed and report.worst < 1e-5


@pytest.mark.parametrize("mode", ["hierarchical", "classification"])
def test_full_model_grad_check(mode):
    report = model_grad_check(tiny_config(mode), frames=3)
    assert report.passed, report.max_rel_error
    assert report.worst < 1e-5


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    params = randomize(init_params(cfg))
    path = tmp_path / "m.slum"
    save_checkpoint(path, cfg, params)
    assert path.read_bytes()[:4] == b"SLUM"
    assert struct.unpack("<I", path.read_bytes()[4:8]) == (1,)
    cfg2, params2 = load_checkpoint(path)
    assert cfg2 == cfg and list(params2) == list(params)
    assert checkpoint_census(path) == parameter_count(cfg)
    x = rand(4, 6)
    enc_a, _ = encode(x, params, cfg)
    enc_b, _ = encode(x, params2, cfg2)
    a = sequence_logits([SOP, 2], enc_a, params, cfg).data
    b = sequence_logits([SOP, 2], enc_b, params2, cfg2).data
    assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-3)) < 1e-5


def test_checkpoint_wrong_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"JUNK")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
