"""Ingredient vocabulary, normalization, training-time robustness transforms
and the dialogue prompt builder."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import NutritionVector
from .errors import (
    DataError,
    IngredientError,
    MissingPlaceholderError,
    RejectedTermError,
    TurnRangeError,
    UnmappableIngredientError,
)

REJECT = "<REJECT>"
PLACEHOLDERS = ("{cal}", "{fat}", "{carb}", "{pro}", "{N}")
MIN_TURNS, MAX_TURNS = 2, 5

_PARENS = re.compile(r"\([^()]*\)|\[[^\[\]]*\]")
_SPACES = re.compile(r"\s+")


def clean_term(raw: str) -> str:
    """Lowercase, drop parenthetical notes and collapse whitespace."""
    text = raw.lower()
    prev = None
    while prev != text:  # nested parentheses
        prev, text = text, _PARENS.sub(" ", text)
    text = _SPACES.sub(" ", text)
    return text.strip(" \t\n.,;:*-•\"'")


@dataclass(frozen=True)
class IngredientVocabulary:
    canonical: frozenset[str]
    synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    plural_map: Mapping[str, str] = field(default_factory=dict)
    vagueness_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "canonical", frozenset(self.canonical))
        object.__setattr__(self, "synonyms", {k: tuple(v) for k, v in self.synonyms.items()})
        for term in self.canonical:
            if term != clean_term(term) or not term:
                raise DataError(f"canonical term {term!r} is not lowercase/trimmed/parenthesis-free")
        reverse: dict[str, str] = {}
        for canon, syns in self.synonyms.items():
            if canon not in self.canonical:
                raise DataError(f"synonyms given for unknown canonical {canon!r}")
            for syn in syns:
                if syn == canon:
                    raise DataError(f"{canon!r} lists itself as a synonym")
                if syn in self.canonical:
                    raise DataError(f"synonym {syn!r} of {canon!r} is itself canonical")
                if reverse.setdefault(syn, canon) != canon:
                    raise DataError(f"synonym {syn!r} maps to both {reverse[syn]!r} and {canon!r}")
        object.__setattr__(self, "_reverse", reverse)
        for name, table in (("plural_map", self.plural_map), ("vagueness_map", self.vagueness_map)):
            for key, target in table.items():
                if key in self.canonical:
                    raise DataError(f"{name} key {key!r} shadows a canonical term")
                if target != REJECT and target not in self.canonical and target not in reverse:
                    raise DataError(f"{name} target {target!r} is not in the vocabulary")

    def synonyms_of(self, term: str) -> tuple[str, ...]:
        return self.synonyms.get(term, ())

    def canonical_of(self, term: str) -> str | None:
        if term in self.canonical:
            return term
        return self._reverse.get(term)

    def surface_forms(self) -> list[str]:
        """Every string the model may see: canonicals plus their synonyms."""
        forms = set(self.canonical)
        for syns in self.synonyms.values():
            forms.update(syns)
        return sorted(forms)

    @classmethod
    def from_files(cls, vocabulary, plurals=None, vagueness=None) -> IngredientVocabulary:
        canonical, synonyms = [], {}
        for row in _rows(Path(vocabulary).read_text(encoding="utf-8")):
            terms = [t.strip() for t in row.split("|") if t.strip()]
            canonical.append(terms[0])
            if len(terms) > 1:
                synonyms[terms[0]] = tuple(terms[1:])
        return cls(
            canonical=frozenset(canonical),
            synonyms=synonyms,
            plural_map=_two_column(plurals) if plurals else {},
            vagueness_map=_two_column(vagueness) if vagueness else {},
        )

    @classmethod
    def default(cls) -> IngredientVocabulary:
        assets = resources.files("nutrifuse") / "assets"
        with resources.as_file(assets) as root:
            return cls.from_files(root / "vocabulary.txt", root / "plurals.tsv", root / "vagueness.tsv")


def _rows(text: str):
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def _two_column(path) -> dict[str, str]:
    table = {}
    for row in _rows(Path(path).read_text(encoding="utf-8")):
        parts = row.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: expected two tab-separated columns in {row!r}")
        table[clean_term(parts[0])] = parts[1].strip()
    return table


def read_asset(name: str) -> str:
    return (resources.files("nutrifuse") / "assets" / name).read_text(encoding="utf-8")


def normalize_ingredient(raw: str, vocab: IngredientVocabulary) -> str:
    if not raw or not raw.strip():
        raise IngredientError("ingredient term must be non-empty")
    term = clean_term(raw)
    term = vocab.plural_map.get(term, term)
    term = vocab.vagueness_map.get(term, term)
    if term == REJECT:
        raise RejectedTermError(f"{raw!r} is not a food ingredient")
    canon = vocab.canonical_of(term)
    if canon is None:
        raise UnmappableIngredientError(f"{raw!r} (cleaned {term!r}) is not in the vocabulary")
    return canon


@dataclass(frozen=True)
class RobustnessConfig:
    p_synonym: float = 0.5
    p_subset: float = 0.5
    seed: int = 0
    order: str = "replace_then_sample"

    def __post_init__(self):
        for name in ("p_synonym", "p_subset"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {p}")
        if self.order not in ("replace_then_sample", "sample_then_replace"):
            raise DataError(f"unknown robustness order {self.order!r}")


def apply_synonym_replacement(
    ingredients: Sequence[str], vocab: IngredientVocabulary, cfg: RobustnessConfig, rng: np.random.Generator
) -> list[str]:
    out = []
    for ing in ingredients:
        # One uniform draw per position keeps the stream aligned across inputs.
        replace = rng.random() < cfg.p_synonym
        syns = vocab.synonyms_of(ing)
        out.append(syns[rng.integers(len(syns))] if replace and syns else ing)
    return out


def sample_ingredient_subset(ingredients: Sequence[str], cfg: RobustnessConfig, rng: np.random.Generator) -> list[str]:
    """With probability ``p_subset`` keep each item w.p. 0.5, redrawing empty results."""
    items = list(ingredients)
    if not items:
        raise IngredientError("cannot subsample an empty ingredient list")
    if rng.random() >= cfg.p_subset:
        return items
    while True:
        keep = rng.random(len(items)) < 0.5
        if keep.any():
            return [ing for ing, k in zip(items, keep) if k]


def robustify(ingredients, vocab, cfg: RobustnessConfig, rng) -> list[str]:
    if cfg.order == "replace_then_sample":
        return sample_ingredient_subset(apply_synonym_replacement(ingredients, vocab, cfg, rng), cfg, rng)
    return apply_synonym_replacement(sample_ingredient_subset(ingredients, cfg, rng), vocab, cfg, rng)


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return f"{value:.2f}".rstrip("0").rstrip(".")


def build_dialogue_prompt(nutrition: NutritionVector, n_turns: int, template: str | None = None) -> str:
    if template is None:
        template = read_asset("dialogue_prompt.txt")
    missing = [p for p in PLACEHOLDERS if p not in template]
    if missing:
        raise MissingPlaceholderError(f"template lacks {', '.join(missing)}")
    if not MIN_TURNS <= n_turns <= MAX_TURNS:
        raise TurnRangeError(f"n_turns must be in [{MIN_TURNS}, {MAX_TURNS}], got {n_turns}")
    values = {
        "{cal}": _fmt(nutrition.calories),
        "{fat}": _fmt(nutrition.fat),
        "{carb}": _fmt(nutrition.carbohydrates),
        "{pro}": _fmt(nutrition.protein),
        "{N}": str(n_turns),
    }
    return re.sub(r"\{(?:cal|fat|carb|pro|N)\}", lambda m: values[m.group(0)], template)
