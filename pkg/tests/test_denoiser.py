import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from largen import codec
from largen.denoiser import (
    DecoupledCrossAttention,
    DenoiserError,
    InjectedSelfAttention,
    attention_weights,
    predict_noise,
)
from oracles import finite_difference_check, softmax_attention_rows


def small_cross(seed=0):
    torch.manual_seed(seed)
    return DecoupledCrossAttention(channels=4, cond_dim=3, tokens=3, groups=1).double()


def randn(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_cross_attention_gradients_all_six_matrices():
    layer = small_cross()
    x, text, img, r = randn(3, 4, seed=1), randn(3, 3, seed=2), randn(3, 3, seed=3), randn(3, 4, seed=4)
    params = [layer.W_q, layer.W_k, layer.W_v, layer.W_k_img, layer.W_v_img, layer.W_o]
    errs = finite_difference_check(lambda: (layer.attend(x, text, img, 0.7) * r).sum(), params)
    assert max(errs) < 1e-4, errs


def test_beta_zero_is_text_branch():
    layer = small_cross()
    x, text, img = randn(5, 4, seed=1), randn(3, 3, seed=2), randn(2, 3, seed=3)
    layer.image_branch = False
    z_text = layer.attend(x, text, img, 1.0)
    layer.image_branch = True
    assert torch.equal(layer.attend(x, text, img, 0.0), z_text)


def test_single_token_branches():
    layer = small_cross()
    x, text, img = randn(2, 4, seed=1), randn(1, 3, seed=2), randn(1, 3, seed=3)
    expected = (text @ layer.W_v + 0.4 * (img @ layer.W_v_img)) @ layer.W_o
    out = layer.attend(x, text, img, 0.4)
    assert torch.allclose(out, expected.expand(2, -1), atol=1e-12)


def test_beta_affine():
    layer = small_cross()
    x, text, img = randn(5, 4, seed=1), randn(3, 3, seed=2), randn(2, 3, seed=3)
    with torch.no_grad():
        o0, o5, o1 = (layer.attend(x, text, img, b) for b in (0.0, 0.5, 1.0))
    assert torch.allclose(o5 - o0, 0.5 * (o1 - o0), atol=1e-10)


def small_self(seed=0):
    torch.manual_seed(seed)
    return InjectedSelfAttention(channels=4, tokens=3, groups=1).double()


def test_injected_self_attention_gradients():
    layer = small_self()
    ctx, obj, r = randn(3, 4, seed=1), randn(2, 4, seed=2), randn(3, 4, seed=3)
    params = [layer.W_qs, layer.W_ks, layer.W_vs, layer.W_o]
    errs = finite_difference_check(lambda: (layer.attend(ctx, obj) * r).sum(), params)
    assert max(errs) < 1e-4, errs
    obj_p = torch.nn.Parameter(obj.clone())
    assert max(finite_difference_check(lambda: (layer.attend(ctx, obj_p) * r).sum(), [obj_p])) < 1e-4


def test_no_injection_is_plain_self_attention():
    layer = small_self()
    ctx = randn(3, 4, seed=1)
    plain = softmax_attention_rows(ctx @ layer.W_qs, ctx @ layer.W_ks, ctx @ layer.W_vs) @ layer.W_o
    assert torch.allclose(layer.attend(ctx, None), plain, atol=1e-12)


def test_output_rows_follow_queries():
    layer = small_self()
    assert layer.attend(randn(3, 4), randn(7, 4, seed=1)).shape == (3, 4)


def test_duplicate_token_doubles_key_weight():
    layer = small_self()
    ctx = randn(3, 4, seed=1).detach()
    obj = ctx[1:2].clone()
    with torch.no_grad():
        got = layer.attend(ctx, obj)
        q, k, v = ctx @ layer.W_qs, ctx @ layer.W_ks, ctx @ layer.W_vs
        # scalar oracle: softmax with key 1 counted twice
        logits = (q @ k.T) / 2.0
        w = logits.exp()
        w[:, 1] *= 2
        w = w / w.sum(1, keepdim=True)
        expected = (w @ v) @ layer.W_o
        assert torch.allclose(got, expected, atol=1e-12)
        assert torch.allclose(got, softmax_attention_rows(q, torch.cat([k, k[1:2]]),
                                                          torch.cat([v, v[1:2]])) @ layer.W_o, atol=1e-12)


def test_obj_keep_false_removes_injection():
    layer = small_self()
    ctx, obj = randn(2, 3, 4, seed=1), randn(2, 5, 4, seed=2)
    keep = torch.tensor([True, False])
    out = layer.attend(ctx, obj, keep)
    assert torch.allclose(out[1], layer.attend(ctx[1], None), atol=1e-12)
    assert torch.allclose(out[0], layer.attend(ctx[0], obj[0]), atol=1e-12)


@given(st.integers(0, 500), st.integers(1, 6), st.integers(1, 6))
def test_softmax_rows_sum_to_one(seed, nq, nk):
    w = attention_weights(randn(nq, 4, seed=seed), randn(nk, 4, seed=seed + 1))
    assert torch.allclose(w.sum(-1), torch.ones(nq, dtype=torch.float64), atol=1e-6)


def _inputs(cfg, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(B, cfg.input_channels, cfg.latent_size, cfg.latent_size, generator=g)
    text = torch.randn(B, cfg.text_len, cfg.cond_dim, generator=g)
    img = torch.randn(B, cfg.num_image_tokens, cfg.cond_dim, generator=g)
    return z, torch.tensor([10, 500])[:B], text, img


def test_predict_noise_shape(model, cfg):
    z, t, text, img = _inputs(cfg)
    assert model.denoiser(z, t, text, img).shape == (2, 48, 16, 16)
    assert predict_noise(model.denoiser, z[0], 5, text[0], img[0]).shape == (48, 16, 16)


def test_beta_zero_equals_network_without_image_branch(model, cfg):
    z, t, text, img = _inputs(cfg)
    with torch.no_grad():
        a = model.denoiser(z, t, text, img, beta=0.0)
        b = model.denoiser.without_image_branch()(z, t, text, img, beta=0.0)
    assert torch.equal(a, b)


def test_null_conditions_finite(model, cfg):
    z, t, _, _ = _inputs(cfg)
    null = model.conditioner.null_bundle()
    out = model.denoiser(z, t, null.text.expand(2, -1, -1), null.image_tokens.expand(2, -1, -1), 0.0)
    assert torch.isfinite(out).all()


def test_injection_never_changes_shapes(model, cfg):
    z, t, text, img = _inputs(cfg)
    with torch.no_grad():
        stash = model.denoiser(z, t, text, img, capture=True)
        assert [s.shape[-1] for s in stash] == model.denoiser.decoder_token_widths()
        extra = [torch.randn(2, 9, w) for w in model.denoiser.decoder_token_widths()]
        plain = model.denoiser(z, t, text, img)
        injected = model.denoiser(z, t, text, img, injected=extra)
    assert plain.shape == injected.shape
    assert not torch.equal(plain, injected)


def test_input_validation(model, cfg):
    z, t, text, img = _inputs(cfg)
    with pytest.raises(DenoiserError):
        model.denoiser(z[:, :10], t, text, img)
    with pytest.raises(DenoiserError):
        model.denoiser(z, torch.tensor([0, 1000]), text, img)
    with pytest.raises(DenoiserError):
        model.denoiser(z, t, text, img, injected=[torch.zeros(2, 1, 64)])


def test_decoder_self_attention_count(model):
    assert model.denoiser.num_decoder_self_attn == 2


def test_time_gated_skip_starts_closed(cfg):
    from largen.model import LarGen
    fresh = LarGen(cfg).denoiser
    z, t, text, img = _inputs(cfg)
    assert torch.count_nonzero(fresh(z, t, text, img)) == 0


def test_zero_mask_channels_accepted(model, cfg):
    x = torch.rand(64, 64, 3)
    m = torch.zeros(64, 64)
    b = codec.assemble_input(codec.encode(x), codec.resize_mask(m), codec.encode_masked_source(x, m))
    assert b.z_tilde.shape == (cfg.input_channels, 16, 16)
