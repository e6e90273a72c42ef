import itertools

import pytest
import torch

from conftest import image
from largen.checkpoint import state_hashes
from largen.conditioner import Conditioner, tokenize
from largen.data_engine.scenes import COLORS, SHAPES, TEXTURES
from oracles import finite_difference_check


@pytest.fixture(scope="module")
def cond(cfg):
    return Conditioner(cfg)


def test_embed_text_deterministic(cond):
    assert torch.equal(cond.embed_text("a striped red circle"), cond.embed_text("a striped red circle"))
    assert cond.embed_text("x").shape == (16, 64)


def test_empty_prompt_is_null(cond):
    assert torch.equal(cond.embed_text(""), cond.null_bundle().text)


def test_tokenizer_no_collisions_on_caption_vocabulary():
    words = set(COLORS) | set(SHAPES) | set(TEXTURES) | {"a", "an", "and", "the", "with", "of"}
    ids = [tokenize(w)[0] for w in sorted(words)]
    assert len(set(ids)) == len(ids)
    assert all(i != 0 for i in ids)


def test_one_word_change_changes_rows(cond):
    for c1, c2 in itertools.combinations(COLORS, 2):
        a, b = cond.embed_text(f"a plain {c1} circle"), cond.embed_text(f"a plain {c2} circle")
        assert (a != b).any(dim=-1).sum() >= 1


def test_tokenizer_padding_and_truncation():
    assert tokenize("") == [0] * 16
    assert len(tokenize(" ".join(["w"] * 40))) == 16
    assert tokenize("Red, CIRCLE!") == tokenize("red circle")


def test_project_image_shape_and_determinism(cond):
    x = image(0)
    assert cond.project_image(x).shape == (16, 64)
    assert torch.equal(cond.project_image(x), cond.project_image(x.clone()))
    batch = cond.project_image(torch.stack([x, image(1)]))
    assert batch.shape == (2, 16, 64)


def test_project_zero_image_is_constant(cond):
    expected = cond.proj_bias.reshape(16, 64)
    assert torch.equal(cond.project_image(torch.zeros(64, 64, 3)), expected)


def test_detail_tokens_count(cond):
    assert cond.encode_detail(image(2)).shape == (64, 64)


def test_detail_mlp_gradient_matches_finite_differences(cfg):
    c = Conditioner(cfg).double()
    x = image(3).double()
    target = torch.randn(64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    # shrink the instance: a 4x4 block of each weight is enough to exercise every path
    params = list(c.detail_mlp.parameters())
    errs = finite_difference_check(lambda: (c.encode_detail(x)[:4] * target[:4]).sum(), [params[1], params[3]])
    assert max(errs) < 1e-4
    w0 = params[0]
    sub = torch.nn.Parameter(w0.data[:3].clone())

    def loss():
        w = torch.cat([sub, w0.data[3:]])
        h = torch.nn.functional.gelu(c.patch_features(x)[:4] @ w.T + params[1])
        return ((h @ params[2].T + params[3]) * target[:4]).sum()

    assert max(finite_difference_check(loss, [sub])) < 1e-4


def test_frozen_features_unaffected_by_mlp(cfg):
    c = Conditioner(cfg)
    x = image(4)
    before = c.patch_features(x).clone()
    with torch.no_grad():
        for p in c.detail_mlp.parameters():
            p.add_(1.0)
    assert torch.equal(c.patch_features(x), before)


def test_null_bundle(cond):
    a, b = cond.null_bundle(), cond.null_bundle()
    assert torch.count_nonzero(a.image_tokens) == 0
    assert torch.equal(a.text, b.text) and torch.equal(a.image_tokens, b.image_tokens)
    assert a.text_null and a.image_null


def test_trainable_set_is_detail_mlp(cond):
    names = {n for n, p in cond.named_parameters()}
    assert names == {f"detail_mlp.{n}" for n, _ in cond.detail_mlp.named_parameters()}
    assert {"text_table", "patch_embed", "proj_weight", "proj_bias", "text_pos"} <= set(state_hashes(cond))


def test_wrong_resolution_rejected(cond):
    with pytest.raises(ValueError):
        cond.project_image(torch.zeros(32, 32, 3))


def test_outputs_finite(cond):
    x = torch.rand(3, 64, 64, 3)
    assert torch.isfinite(cond.project_image(x)).all()
    assert torch.isfinite(cond.encode_detail(x)).all()


def test_bundle_nulls_missing_modalities(cond):
    b = cond.bundle(None, None)
    assert b.text_null and b.image_null and torch.count_nonzero(b.image_tokens) == 0
    b = cond.bundle("a red circle", image(5), detail=True)
    assert not b.text_null and not b.image_null and b.detail_tokens.shape == (64, 64)
