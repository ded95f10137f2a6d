import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nutrifuse.embedding import (
    ClipTextEncoder,
    EmbeddingCache,
    HashTextEncoder,
    IngredientEmbedder,
    IngredientProjector,
    ProjectorParams,
    TextEncoder,
    aggregate_ingredients,
    embed_ingredient,
    project_ingredient_feature,
)
from nutrifuse.errors import (
    ConfigMismatchError,
    EmptyIngredientListError,
    EncoderUnavailableError,
    IngredientError,
    ShapeMismatchError,
)


class TableEncoder(TextEncoder):
    name = "table"

    def __init__(self, table):
        self.table = table
        self.dim = len(next(iter(table.values())))

    def encode(self, texts):
        return np.array([self.table[t] for t in texts], dtype=np.float32)


NAMES = ["lettuce", "tomato", "bun", "cheese", "onion", "pickle"]


def test_embed_deterministic_and_cached(embedder):
    a = embed_ingredient("lettuce", embedder)
    b = embed_ingredient("lettuce", embedder)
    assert a is b and a.shape == (64,)
    assert not np.array_equal(a, embed_ingredient("tomato", embedder))
    assert np.array_equal(a, IngredientEmbedder(HashTextEncoder(64)).embed("lettuce"))
    with pytest.raises(IngredientError):
        embed_ingredient("", embedder)


def test_aggregate_examples(embedder):
    assert np.allclose(aggregate_ingredients(["bun"], embedder), embedder.embed("bun"))
    stub = IngredientEmbedder(TableEncoder({"a": [1.0, 0.0], "b": [0.0, 1.0]}))
    assert aggregate_ingredients(["a", "b"], stub).tolist() == [0.5, 0.5]
    with pytest.raises(EmptyIngredientListError):
        aggregate_ingredients([], embedder)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(NAMES), min_size=1, max_size=6), st.randoms(use_true_random=False),
       st.integers(1, 4))
def test_aggregate_permutation_and_duplication(items, rnd, k):
    emb = IngredientEmbedder(HashTextEncoder(64))
    base = aggregate_ingredients(items, emb)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert np.array_equal(aggregate_ingredients(shuffled, emb), base)
    assert np.allclose(aggregate_ingredients(items * k, emb), base, rtol=0, atol=1e-12)


def test_l2_normalize_flag():
    stub = IngredientEmbedder(TableEncoder({"a": [3.0, 0.0], "b": [0.0, 1.0]}), l2_normalize=True)
    assert aggregate_ingredients(["a", "b"], stub).tolist() == [0.5, 0.5]


def test_cache_round_trip(tmp_path):
    path = tmp_path / "emb.bin"
    first = IngredientEmbedder(HashTextEncoder(32), path)
    first.warm(NAMES)
    first.cache.save()
    again = EmbeddingCache(32, "hash-32", path)
    assert sorted(again.keys()) == sorted(NAMES)
    for n in NAMES:
        assert np.array_equal(again.get(n), first.embed(n))
    with pytest.raises(ConfigMismatchError):
        EmbeddingCache(16, "hash-32", path)
    with pytest.raises(ConfigMismatchError):
        EmbeddingCache(32, "clip", path)


def test_cache_first_writer_wins():
    cache = EmbeddingCache(2, "x")
    a = cache.put("k", np.array([1.0, 2.0]))
    assert cache.put("k", np.array([9.0, 9.0])) is a


def test_clip_unavailable_raises():
    enc = ClipTextEncoder("/nonexistent/clip-model")
    with pytest.raises(EncoderUnavailableError):
        enc.encode(["lettuce"])


def test_projector_examples():
    eye = ProjectorParams(torch.eye(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    assert project_ingredient_feature([-1.0, 2.0], eye).tolist() == [0.0, 2.0]
    neg = ProjectorParams(torch.ones(2, 2, dtype=torch.float64), -torch.ones(2, dtype=torch.float64))
    assert project_ingredient_feature([0.0, 0.0], neg).tolist() == [0.0, 0.0]
    with pytest.raises(ShapeMismatchError):
        project_ingredient_feature([1.0, 2.0, 3.0], eye)


def test_projector_matches_dot_product_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c, e = rng.integers(1, 40, size=2)
        w, b, t = rng.standard_normal((c, e)), rng.standard_normal(c), rng.standard_normal(e)
        out = project_ingredient_feature(t, ProjectorParams(torch.tensor(w), torch.tensor(b))).numpy()
        oracle = [max(0.0, sum(w[i, j] * t[j] for j in range(e)) + b[i]) for i in range(c)]
        assert np.allclose(out, oracle, rtol=1e-6, atol=1e-12)


def test_projector_nonnegative_and_lipschitz():
    rng = np.random.default_rng(1)
    w = torch.tensor(rng.standard_normal((16, 8)))
    params = ProjectorParams(w, torch.tensor(rng.standard_normal(16)))
    norm = torch.linalg.matrix_norm(w, ord=2).item()
    for _ in range(200):
        t1, t2 = torch.tensor(rng.standard_normal(8)), torch.tensor(rng.standard_normal(8))
        p1, p2 = project_ingredient_feature(t1, params), project_ingredient_feature(t2, params)
        assert (p1 >= 0).all()
        assert torch.linalg.norm(p1 - p2) <= norm * torch.linalg.norm(t1 - t2) + 1e-12


def test_projector_gradient_finite_differences():
    torch.manual_seed(0)
    proj = IngredientProjector(6, 5).double()
    t = torch.randn(3, 6, dtype=torch.float64)
    target = torch.randn(3, 5, dtype=torch.float64)

    def loss():
        return ((proj(t) - target) ** 2).sum()

    loss().backward()
    for p in (proj.linear.weight, proj.linear.bias):
        analytic = p.grad.clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + 1e-6
            up = loss().item()
            flat[i] = old - 1e-6
            down = loss().item()
            flat[i] = old
            numeric.view(-1)[i] = (up - down) / 2e-6
        assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-7)
