import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foleyflow import gradcheck, mmdit
from foleyflow import tensor as T
from foleyflow.errors import ConfigError, ContractError, DomainError, FoleyFlowError
from foleyflow.mmdit import ConditionBundle, ModelConfig
from foleyflow.rng import Rng
from foleyflow.tensor import Tensor

TOY = mmdit.preset("toy")


@pytest.fixture(scope="module")
def params():
    """Toy params with every gate opened by a small perturbation."""
    return {k: Tensor(v.astype(np.float32)) for k, v in gradcheck.perturbed_params(TOY, 0).items()}


@pytest.fixture(scope="module")
def bundle():
    return gradcheck.toy_bundle(TOY, 0)


def x_t(seed=0, batch=None):
    shape = (TOY.latent_len, TOY.latent_dim)
    return Rng(seed).normal(shape if batch is None else (batch,) + shape)


def test_presets_match_published_sizes():
    assert (TOY.hidden_size, TOY.heads, TOY.multistream_layers, TOY.singlestream_layers) == (64, 4, 2, 1)
    for name, h, heads, ms, ss in [("large", 1024, 16, 14, 7), ("medium", 768, 12, 14, 7),
                                   ("small", 512, 8, 12, 6)]:
        c = mmdit.preset(name)
        assert (c.hidden_size, c.heads, c.multistream_layers, c.singlestream_layers) == (h, heads, ms, ss)
        assert c.depth == ms + ss


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_size=30, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(latent_len=2, video_len=4).validate()
    with pytest.raises(ConfigError):
        mmdit.preset("huge")
    assert ModelConfig.from_dict(TOY.to_dict()) == TOY


def test_param_set_is_pure_function_of_config():
    a, b = mmdit.init_params(TOY, 3), mmdit.init_params(TOY, 3)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_count_params_single_linear():
    shapes = mmdit.param_shapes(dataclasses.replace(TOY, hidden_size=4, heads=2, latent_dim=4))
    assert math.prod(shapes["final.out.weight"]) + math.prod(shapes["final.out.bias"]) == 20


def test_count_params_closed_form():
    c = TOY
    h, m, L = c.hidden_size, c.mlp_hidden, c.latent_dim
    lin = lambda i, o: i * o + o  # noqa: E731
    block = lin(h, 6 * h) + lin(h, 3 * h) + lin(h, h) + lin(h, m) + lin(m, h)
    expected = (lin(2 * L + 1, h) + lin(c.freq_dim, h) + lin(h, h)
                + lin(c.caption_dim, h) + lin(c.video_dim, h) + lin(c.sync_dim, h)
                + c.caption_dim + c.video_dim + c.sync_dim + c.text_dim + c.video_dim + L
                + 2 * lin(c.video_dim, h) + lin(c.text_dim, h)
                + 3 * c.multistream_layers * block + lin(2 * h, h) + lin(h, h)
                + c.singlestream_layers * block + lin(h, 2 * h) + lin(h, L))
    assert mmdit.count_params(c) == expected


def test_count_params_quadratic_in_hidden():
    ratio = mmdit.count_params(dataclasses.replace(TOY, hidden_size=256)) / mmdit.count_params(
        dataclasses.replace(TOY, hidden_size=128))
    assert 3.5 <= ratio <= 4.5


def test_timestep_features_at_zero():
    f = mmdit.timestep_features(0.0, 16).data
    assert np.all(f[:8] == 1) and np.all(f[8:] == 0)


def test_timestep_embed_distinguishes_times(params):
    e1 = mmdit.timestep_embed(params, TOY, np.array([0.1], np.float32)).data
    e2 = mmdit.timestep_embed(params, TOY, np.array([0.9], np.float32)).data
    assert np.linalg.norm(e1 - e2) > 0


def test_timestep_features_gradient():
    fn = lambda t: mmdit.timestep_features(t, 8)  # noqa: E731
    assert gradcheck.check_function(fn, [np.array([0.3, 0.7])], h=1e-6) < 1e-4


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_timestep_domain(t):
    with pytest.raises(DomainError):
        mmdit.timestep_features(t, 8)


def test_global_condition_unconditional_is_null_sum(params):
    t_emb = mmdit.timestep_embed(params, TOY, np.array([0.4], np.float32))
    c = mmdit.global_condition(params, TOY, ConditionBundle(), t_emb).data
    lin = lambda n, x: x @ params[f"{n}.weight"].data + params[f"{n}.bias"].data  # noqa: E731
    ref = (lin("cond.caption", params["null.caption"].data) + lin("cond.video", params["null.video"].data)
           + lin("cond.sync", params["null.sync"].data) + t_emb.data)
    assert np.allclose(c, ref, atol=1e-6)


def test_global_condition_matches_parts(params, bundle):
    t_emb = mmdit.timestep_embed(params, TOY, np.array([0.4], np.float32))
    c = mmdit.global_condition(params, TOY, bundle, t_emb).data
    lin = lambda n, x: x @ params[f"{n}.weight"].data + params[f"{n}.bias"].data  # noqa: E731
    ref = (lin("cond.caption", bundle.caption_emb) + lin("cond.video", bundle.video_feats.mean(0))
           + lin("cond.sync", bundle.sync_feats.mean(0)) + t_emb.data)
    assert np.allclose(c, ref, atol=1e-5)


def test_global_condition_constant_video_equals_one_frame(params):
    frame = Rng(1).normal((TOY.video_dim,))
    video = np.tile(frame, (TOY.video_len, 1))
    b1 = ConditionBundle(video_feats=video, sync_feats=np.zeros((TOY.video_len, TOY.sync_dim), np.float32))
    b2 = dataclasses.replace(b1, video_feats=np.tile(frame, (1, 1)).repeat(TOY.video_len, 0))
    t_emb = mmdit.timestep_embed(params, TOY, np.array([0.2], np.float32))
    assert np.allclose(mmdit.global_condition(params, TOY, b1, t_emb).data,
                       mmdit.global_condition(params, TOY, b2, t_emb).data, atol=1e-6)


def _streams(La=8, Lv=4, Lt=3, seed=0):
    rng = Rng(seed)
    h = TOY.hidden_size
    return rng.normal((La, h)), rng.normal((Lv, h)), rng.normal((Lt, h)), rng.normal((h,))


def test_multi_stream_block_with_empty_video_and_text(params):
    a, _, _, c = _streams()
    empty = np.zeros((0, TOY.hidden_size), np.float32)
    out_a, out_v, out_t = mmdit.multi_stream_block(params, "ms.0", TOY, a, empty, empty, c)
    assert out_a.shape == a.shape and out_v.shape == (0, TOY.hidden_size)


def test_multi_stream_block_rejects_empty_audio(params):
    _, v, t, c = _streams()
    with pytest.raises(ContractError):
        mmdit.multi_stream_block(params, "ms.0", TOY, np.zeros((0, TOY.hidden_size), np.float32), v, t, c)


def test_blocks_are_identity_at_init():
    p = mmdit.init_params(TOY, 0)
    a, v, t, c = _streams()
    outs = mmdit.multi_stream_block(p, "ms.0", TOY, a, v, t, c)
    assert all(np.array_equal(o.data, x) for o, x in zip(outs, (a, v, t)))
    assert np.array_equal(mmdit.single_stream_block(p, "ss.0", TOY, a, c).data, a)


def _dense_reference_block(params, prefix, a, v, t, c):
    """The same block written out with one explicit (La+Lv+Lt)^2 score matrix."""
    H, h = TOY.heads, TOY.hidden_size
    dh = h // H
    P = {k: x.data.astype(np.float64) for k, x in params.items()}
    silu = lambda z: z / (1 + np.exp(-z))  # noqa: E731

    def ln(x):
        m = x.mean(-1, keepdims=True)
        return (x - m) / np.sqrt(((x - m) ** 2).mean(-1, keepdims=True) + 1e-5)

    def rot(x):
        half = x.shape[-1] // 2
        return np.concatenate([-x[..., half:], x[..., :half]], -1)

    qs, ks, vs, mods = [], [], [], []
    for name, x in zip(("audio", "video", "text"), (a, v, t)):
        pre = f"{prefix}.{name}"
        mod = silu(c) @ P[f"{pre}.mod.weight"] + P[f"{pre}.mod.bias"]
        mod = np.split(mod, 6)
        mods.append(mod)
        hx = ln(x) * (1 + mod[1]) + mod[0]
        qkv = hx @ P[f"{pre}.qkv.weight"] + P[f"{pre}.qkv.bias"]
        q, k, vv = np.split(qkv, 3, axis=-1)
        cos, sin = mmdit.rope_tables(len(x), dh, TOY.rope_base, np.float64)
        heads = lambda z: z.reshape(len(x), H, dh).transpose(1, 0, 2)  # noqa: E731
        q, k, vv = heads(q), heads(k), heads(vv)
        qs.append(q * cos + rot(q) * sin), ks.append(k * cos + rot(k) * sin), vs.append(vv)
    Q, K, V = (np.concatenate(z, axis=1) for z in (qs, ks, vs))
    S = Q @ K.transpose(0, 2, 1) / math.sqrt(dh)
    W = np.exp(S - S.max(-1, keepdims=True))
    W /= W.sum(-1, keepdims=True)
    att = (W @ V).transpose(1, 0, 2).reshape(-1, h)
    outs, start = [], 0
    for name, x, mod in zip(("audio", "video", "text"), (a, v, t), mods):
        pre = f"{prefix}.{name}"
        seg = att[start:start + len(x)]
        start += len(x)
        x = x + mod[2] * (seg @ P[f"{pre}.out.weight"] + P[f"{pre}.out.bias"])
        hx = ln(x) * (1 + mod[4]) + mod[3]
        u = hx @ P[f"{pre}.mlp1.weight"] + P[f"{pre}.mlp1.bias"]
        g = 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))
        outs.append(x + mod[5] * (g @ P[f"{pre}.mlp2.weight"] + P[f"{pre}.mlp2.bias"]))
    return outs


def test_joint_attention_matches_dense_reference(params):
    a, v, t, c = _streams(seed=5)
    got = mmdit.multi_stream_block(params, "ms.1", TOY, a, v, t, c)
    ref = _dense_reference_block(params, "ms.1", *(z.astype(np.float64) for z in (a, v, t, c)))
    for g, r in zip(got, ref):
        assert np.max(np.abs(g.data - r)) < 1e-5


def test_single_stream_shape_any_length(params):
    for La in (1, 3, 8, 13):
        x = Rng(La).normal((La, TOY.hidden_size))
        assert mmdit.single_stream_block(params, "ss.0", TOY, x, _streams()[3]).shape == x.shape


def test_single_stream_gradient_wrt_condition(params):
    x = Rng(2).normal((5, TOY.hidden_size)).astype(np.float64)
    p64 = {k: Tensor(v.data.astype(np.float64)) for k, v in params.items()}
    fn = lambda c: mmdit.single_stream_block(p64, "ss.0", TOY, Tensor(x), c)  # noqa: E731
    assert gradcheck.check_function(fn, [Rng(3).normal((TOY.hidden_size,))]) < 1e-4


def test_upsample_identity_and_lerp():
    assert np.array_equal(mmdit.upsample_matrix(5, 5), np.eye(5))
    U = mmdit.upsample_matrix(3, 6)
    video = np.array([1.0, 4.0, 10.0])
    for j in range(6):
        pos = j * 2 / 5
        lo = int(pos)
        hi = min(lo + 1, 2)
        expected = video[lo] + (pos - lo) * (video[hi] - video[lo])
        assert abs(U[j] @ video - expected) < 1e-12
    with pytest.raises(ContractError):
        mmdit.upsample_matrix(6, 3)


def test_gated_fuse_closed_gate_is_passthrough(params):
    p = dict(params)
    p["fuse.gate.bias"] = Tensor(np.full(TOY.hidden_size, -1e4, np.float32))
    a, v, _, _ = _streams()
    assert np.max(np.abs(mmdit.gated_fuse(p, TOY, a, v).data - a)) < 1e-6


def test_gated_fuse_rejects_downsampling(params):
    a, v, _, _ = _streams(La=3, Lv=4)
    with pytest.raises(ContractError):
        mmdit.gated_fuse(params, TOY, a, v)


def test_forward_shape_and_batching(params, bundle):
    out = mmdit.forward(params, TOY, x_t(), 0.3, bundle)
    assert out.shape == (TOY.latent_len, TOY.latent_dim)
    xs = np.stack([x_t(), x_t(1), x_t(2)])
    batch = mmdit.forward(params, TOY, xs, np.array([0.3, 0.3, 0.3], np.float32), [bundle] * 3)
    assert batch.shape == (3, TOY.latent_len, TOY.latent_dim)
    assert np.allclose(batch.data[0], out.data, atol=1e-5)


def test_conditioning_reaches_output(params, bundle):
    a = mmdit.forward(params, TOY, x_t(), 0.5, bundle).data
    b = mmdit.forward(params, TOY, x_t(), 0.5, ConditionBundle()).data
    assert np.linalg.norm(a - b) > 0


def test_init_identity_and_zero_output():
    p = mmdit.init_params(TOY, 1)
    x = x_t(2)
    out = mmdit.forward(p, TOY, x, 0.5, gradcheck.toy_bundle(TOY, 1).without("context")).data
    tokens = np.concatenate([x, np.broadcast_to(p["null.context"].data, x.shape),
                             np.zeros((TOY.latent_len, 1), np.float32)], -1)
    hidden = tokens @ p["in.weight"].data + p["in.bias"].data
    ref = T.layer_norm(Tensor(hidden)).data @ p["final.out.weight"].data + p["final.out.bias"].data
    assert np.allclose(out, ref, atol=1e-5)
    p = dict(p)
    p["final.out.weight"] = Tensor(np.zeros_like(p["final.out.weight"].data))
    assert np.array_equal(mmdit.forward(p, TOY, x, 0.5, ConditionBundle()).data, np.zeros_like(x))


def test_frame_permutation_changes_output(params, bundle):
    x = x_t(3)
    perm = np.roll(np.arange(TOY.latent_len), 3)
    a = mmdit.forward(params, TOY, x[perm], 0.5, bundle).data
    b = mmdit.forward(params, TOY, x, 0.5, bundle).data[perm]
    assert not np.allclose(a, b, atol=1e-4)


@pytest.mark.parametrize("units", [("video",), ("caption",), ("cot",), ("roi",),
                                   ("video", "caption", "cot", "roi")])
def test_absent_equals_explicit_null(params, bundle, units):
    absent = bundle.without(*units)
    explicit = mmdit.null_bundle(params, TOY, bundle, units)
    a = mmdit.forward(params, TOY, x_t(), 0.5, absent).data
    b = mmdit.forward(params, TOY, x_t(), 0.5, explicit).data
    assert np.array_equal(a, b)


def test_bundle_invariants():
    with pytest.raises(ContractError):
        ConditionBundle(audio_context=np.zeros((8, 4), np.float32))
    with pytest.raises(ContractError):
        ConditionBundle(video_feats=np.zeros((4, 8), np.float32))
    b = gradcheck.toy_bundle(TOY, 0)
    assert b.fingerprint() == gradcheck.toy_bundle(TOY, 0).fingerprint()
    assert b.fingerprint() != b.without("cot").fingerprint()
    assert not b.only("cot").present("video") and b.only("cot").present("cot")


def test_full_model_gradients():
    report = gradcheck.check_model(TOY)
    assert all(v < gradcheck.MODEL_TOL for v in report.values()), report


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 64), st.integers(1, 8), st.integers(1, 12), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2 ** 32))
def test_shape_totality(hidden, heads, latent_len, latent_dim, video_len, seed):
    config = ModelConfig(hidden_size=hidden, heads=heads, multistream_layers=1, singlestream_layers=1,
                         latent_len=latent_len, latent_dim=latent_dim, video_len=video_len)
    try:
        p = mmdit.init_params(config, seed)
    except FoleyFlowError:
        return
    bundle = ConditionBundle(video_feats=Rng(seed).normal((video_len, config.video_dim)),
                             sync_feats=Rng(seed + 1).normal((video_len, config.sync_dim)))
    out = mmdit.forward(p, config, Rng(seed).normal((latent_len, latent_dim)), 0.5, bundle)
    assert out.shape == (latent_len, latent_dim)
