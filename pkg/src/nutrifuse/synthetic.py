"""Seeded synthetic food corpora for smoke tests, demos and controlled experiments.

Each canonical ingredient gets a fixed nutrient contribution; a dish's label
is the sum over its ingredients. Dishes share a fixed ingredient count so the
label is a linear function of the mean ingredient embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .data import NutritionVector, Sample, VideoRecord
from .ingredients import IngredientVocabulary, RobustnessConfig, apply_synonym_replacement

# Per-ingredient contribution ranges: kcal, g fat, g carb, g protein.
CONTRIBUTION_RANGES = ((10.0, 120.0), (0.5, 8.0), (1.0, 15.0), (0.5, 8.0))


@dataclass
class SyntheticWorld:
    vocab: IngredientVocabulary
    contributions: dict[str, np.ndarray]
    resolution: int
    seed: int
    image_noise: float = 0.2

    @classmethod
    def create(cls, vocab: IngredientVocabulary | None = None, resolution: int = 32, seed: int = 0):
        vocab = vocab or IngredientVocabulary.default()
        rng = np.random.default_rng(seed)
        contrib = {
            ing: np.array([rng.uniform(lo, hi) for lo, hi in CONTRIBUTION_RANGES])
            for ing in sorted(vocab.canonical)
        }
        return cls(vocab, contrib, resolution, seed)

    def nutrition_of(self, ingredients) -> NutritionVector:
        return NutritionVector.from_array(sum(self.contributions[i] for i in ingredients))

    def _generator(self, key: str) -> torch.Generator:
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return torch.Generator().manual_seed(int.from_bytes(digest[:7], "little"))

    def texture(self, ingredient: str) -> torch.Tensor:
        return torch.rand(3, self.resolution, self.resolution, generator=self._generator("tex:" + ingredient))

    def image(self, key: str, ingredients=()) -> torch.Tensor:
        """Mean of the ingredients' textures plus fixed per-image noise;
        pure noise when no ingredients are given."""
        noise = torch.rand(3, self.resolution, self.resolution, generator=self._generator(key))
        if not ingredients:
            return noise
        base = torch.stack([self.texture(i) for i in ingredients]).mean(0)
        return (base + self.image_noise * (noise - 0.5)).clamp(0.0, 1.0)

    def dishes(self, n: int, n_ingredients: int = 4, prefix: str = "dish", seed: int = 0) -> list[Sample]:
        rng = np.random.default_rng([self.seed, seed])
        pool = sorted(self.vocab.canonical)
        out = []
        for i in range(n):
            ings = tuple(sorted(rng.choice(pool, size=n_ingredients, replace=False).tolist()))
            out.append(Sample(f"{prefix}{i:05d}", f"images/{prefix}{i:05d}.png", f"cat{i % 7}",
                              ings, self.nutrition_of(ings)))
        return out

    def videos(self, n: int, frames: int = 12, n_ingredients: int = 3, seed: int = 0) -> list[VideoRecord]:
        rng = np.random.default_rng([self.seed, seed, 1])
        pool = sorted(self.vocab.canonical)
        out = []
        for i in range(n):
            ings = tuple(sorted(rng.choice(pool, size=n_ingredients, replace=False).tolist()))
            out.append(VideoRecord(f"vid{i:04d}", frames, self.nutrition_of(ings), f"cat{i % 5}", ings))
        return out

    def loader(self):
        cache: dict[str, torch.Tensor] = {}

        def load(sample: Sample) -> torch.Tensor:
            if sample.sample_id not in cache:
                cache[sample.sample_id] = self.image(sample.sample_id, sample.ingredients)
            return cache[sample.sample_id]

        return load


def perturb_lists(samples, vocab: IngredientVocabulary, p_synonym: float = 0.5, drop: float = 0.3, seed: int = 0):
    """Test-time corruption: synonym replacement, then each item dropped with
    probability ``drop`` (re-drawn if nothing survives)."""
    rng = np.random.default_rng(seed)
    cfg = RobustnessConfig(p_synonym=p_synonym, p_subset=0.0)
    out = {}
    for s in samples:
        items = apply_synonym_replacement(s.ingredients, vocab, cfg, rng)
        while True:
            keep = rng.random(len(items)) >= drop
            if keep.any():
                break
        out[s.sample_id] = [i for i, k in zip(items, keep) if k]
    return out
