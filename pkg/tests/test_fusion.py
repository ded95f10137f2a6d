import numpy as np
import pytest
import torch

from nutrifuse.data import NutritionVector
from nutrifuse.embedding import HashTextEncoder, IngredientEmbedder
from nutrifuse.errors import (
    ConfigError,
    ConfigMismatchError,
    DoubleFusionError,
    LengthMismatchError,
    ResolutionError,
    ShapeMismatchError,
    UninitializedModelError,
)
from nutrifuse.fusion import (
    HIDDEN_WIDTH,
    FusionConfig,
    NutritionEstimator,
    NutritionModel,
    NutritionPrediction,
    TokenSequence,
    compute_loss,
    forward,
    fuse_broadcast,
    fuse_token,
    head_forward,
    load_checkpoint,
    make_head,
    read_checkpoint_header,
    save_checkpoint,
)


def tiny(backbone="tiny_resnet", **kw):
    torch.manual_seed(0)
    return NutritionModel(FusionConfig(backbone, embed_dim=16, **kw)).eval()


def test_config_defaults_and_validation():
    assert FusionConfig("resnet101").injection_site == "block2"
    assert FusionConfig("resnet50").input_resolution == 224
    cfg = FusionConfig("inception_v3")
    assert (cfg.injection_site, cfg.input_resolution, cfg.fuse_auxiliary) == ("mixed6e_with_aux", 299, True)
    assert FusionConfig("inception_v3", "mixed6e_no_aux").fuse_auxiliary is False
    assert FusionConfig("vit_base16").injection_site == "extra_token"
    with pytest.raises(ConfigError):
        FusionConfig("resnet50", input_resolution=299)
    with pytest.raises(ConfigError):
        FusionConfig("inception_v3", "block2")
    with pytest.raises(ConfigError):
        FusionConfig("vgg16")
    with pytest.raises(ConfigError):
        FusionConfig("tiny_vit", input_resolution=30)


def test_fuse_broadcast_examples():
    x = torch.tensor([[[3.0]], [[4.0]]])
    assert fuse_broadcast(x, torch.tensor([1.0, -5.0])).tolist() == [[[4.0]], [[-1.0]]]
    r = torch.randn(5, 3, 4)
    assert torch.equal(fuse_broadcast(r, torch.zeros(5)), r)
    with pytest.raises(ShapeMismatchError):
        fuse_broadcast(r, torch.zeros(4))


def test_fuse_broadcast_additivity():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        x = torch.randn(2, 7, 5, 3, generator=g, dtype=torch.float64)
        t1, t2 = torch.randn(2, 7, generator=g, dtype=torch.float64), torch.randn(2, 7, generator=g, dtype=torch.float64)
        out = fuse_broadcast(fuse_broadcast(x, t1), t2)
        assert out.shape == x.shape
        assert torch.allclose(out, fuse_broadcast(x, t1 + t2), rtol=0, atol=1e-12)


def test_fuse_token_invariants():
    seq = TokenSequence(torch.randn(2, 197, 768))
    t = torch.randn(2, 768)
    out = fuse_token(seq, t)
    assert out.tokens.shape == (2, 198, 768)
    assert torch.equal(out.class_token, seq.class_token)
    assert torch.equal(out.patch_tokens, seq.patch_tokens)
    assert torch.equal(out.tokens[:, 1], t)
    with pytest.raises(DoubleFusionError):
        fuse_token(out, t)
    with pytest.raises(ShapeMismatchError):
        fuse_token(seq, torch.randn(2, 10))


def test_head_examples():
    head = make_head(8)
    assert head[0].out_features == HIDDEN_WIDTH == 4096
    for m in (head[0], head[2]):
        torch.nn.init.zeros_(m.bias)
    assert head_forward(torch.zeros(3, 8), head).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ShapeMismatchError):
        head_forward(torch.zeros(3, 9), head)


def test_head_matches_two_layer_oracle():
    torch.manual_seed(1)
    head = make_head(5, hidden=7).double()
    f = torch.randn(4, 5, dtype=torch.float64)
    w1, b1 = head[0].weight.detach().numpy(), head[0].bias.detach().numpy()
    w2, b2 = head[2].weight.detach().numpy(), head[2].bias.detach().numpy()
    for row, got in zip(f.numpy(), head_forward(f, head).detach().numpy()):
        hidden = [max(0.0, sum(w1[j, i] * row[i] for i in range(5)) + b1[j]) for j in range(7)]
        oracle = sum(w2[0, j] * hidden[j] for j in range(7)) + b2[0]
        assert abs(got - oracle) <= 1e-6


def test_loss_examples():
    p = [NutritionPrediction(110, 10, 30, 8)]
    y = [NutritionVector(100, 10, 30, 8)]
    assert compute_loss(p, y) == (10.0, (10.0, 0.0, 0.0, 0.0))
    assert compute_loss([NutritionPrediction(1, 2, 3, 4)], [NutritionVector(1, 2, 3, 4)])[0] == 0.0
    with pytest.raises(LengthMismatchError):
        compute_loss(p, y * 2)


def test_loss_oracle_permutation_scaling():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0, 100, (9, 4)), rng.uniform(0, 100, (9, 4))
    preds = [NutritionPrediction.from_array(r) for r in p]
    targets = [NutritionVector.from_array(r) for r in y]
    total, per_task = compute_loss(preds, targets)
    oracle = [sum(abs(p[j, i] - y[j, i]) for j in range(9)) / 9 for i in range(4)]
    assert np.allclose(per_task, oracle, rtol=0, atol=1e-9) and abs(total - sum(oracle)) <= 1e-9
    perm = rng.permutation(9)
    assert compute_loss([preds[i] for i in perm], [targets[i] for i in perm])[0] == pytest.approx(total, abs=1e-9)
    scaled = compute_loss([NutritionPrediction.from_array(3 * r) for r in p],
                          [NutritionVector.from_array(3 * r) for r in y])[0]
    assert scaled == pytest.approx(3 * total, rel=1e-12)


@pytest.mark.parametrize("backbone", ["tiny_resnet", "tiny_vit"])
def test_empty_ingredients_bypass_fusion(backbone):
    model = tiny(backbone)
    x = torch.rand(3, 3, 32, 32)
    emb = torch.randn(3, 16)
    base = model(x)
    assert torch.equal(model(x, emb, torch.zeros(3, dtype=torch.bool)), base)
    assert not torch.equal(model(x, emb), base)


@pytest.mark.parametrize("backbone", ["tiny_resnet", "tiny_vit"])
def test_mixed_batch_matches_rows(backbone):
    model = tiny(backbone).double()
    x = torch.rand(4, 3, 32, 32, dtype=torch.float64)
    emb = torch.randn(4, 16, dtype=torch.float64)
    mask = torch.tensor([True, False, True, False])
    out = model(x, emb, mask)
    for i in range(4):
        single = model(x[i : i + 1], emb[i : i + 1]) if mask[i] else model(x[i : i + 1])
        assert torch.allclose(out[i], single[0], rtol=1e-10, atol=1e-10)


def test_vit_token_slot_zero_initialized():
    model = tiny("tiny_vit")
    assert torch.count_nonzero(model.backbone.ingredient_pos) == 0


def test_resolution_error():
    with pytest.raises(ResolutionError):
        tiny()(torch.rand(1, 3, 40, 40))


def test_estimator_forward_deterministic():
    emb = IngredientEmbedder(HashTextEncoder(16))
    est = NutritionEstimator(tiny(), emb)
    img = torch.rand(3, 32, 32)
    a = forward(img, ["bun", "lettuce"], est)
    assert a == forward(img, ["lettuce", "bun"], est)
    assert len(a.as_array()) == 4
    assert forward(img, [], est) == NutritionPrediction.from_array(est.model(img[None])[0].tolist())
    with pytest.raises(UninitializedModelError):
        NutritionEstimator(None, emb).forward(img, [])
    with pytest.raises(ConfigMismatchError):
        NutritionEstimator(tiny(), IngredientEmbedder(HashTextEncoder(8))).forward(img, ["bun"])


def test_checkpoint_round_trip(tmp_path):
    model = tiny("tiny_vit")
    path = save_checkpoint(model, tmp_path / "m.pt", "hash-16")
    header = read_checkpoint_header(path)
    assert header["fusion"]["backbone"] == "tiny_vit" and header["embed_dim"] == 16 and header["encoder"] == "hash-16"
    loaded, _ = load_checkpoint(path, FusionConfig("tiny_vit", embed_dim=16), "hash-16")
    x, e = torch.rand(2, 3, 32, 32), torch.randn(2, 16)
    assert torch.equal(loaded(x, e), model(x, e))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, FusionConfig("tiny_vit", embed_dim=32))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, encoder_name="hash-64")


def test_inception_aux_branch_follows_fusion_flag():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 299, 299)
    e1, e2 = torch.randn(2, 16), torch.randn(2, 16)
    for site, expect_change in (("mixed6e_with_aux", True), ("mixed6e_no_aux", False)):
        model = NutritionModel(FusionConfig("inception_v3", site, embed_dim=16)).train()
        for m in model.modules():
            if isinstance(m, (torch.nn.Dropout, torch.nn.BatchNorm2d)):
                m.eval()
        torch.manual_seed(1)
        _, aux1 = model(x, e1)
        torch.manual_seed(1)
        preds, aux2 = model(x, e2)
        assert aux1.shape == (2, 4) and preds.shape == (2, 4)
        assert (not torch.equal(aux1, aux2)) == expect_change
