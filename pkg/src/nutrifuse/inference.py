"""Test-time ingredient prediction: augmented views, multimodal-model queries
and majority voting, followed by fused nutrition prediction."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torchvision.transforms.v2 import functional as TF

from .errors import ClientError, DataError, IngredientError, ParseError, RejectedTermError
from .fusion import NutritionEstimator, NutritionPrediction
from .images import resize, to_png_bytes
from .ingredients import IngredientVocabulary, normalize_ingredient, read_asset

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("identity", "rotation", "horizontal_flip", "random_crop", "grayscale")
MIN_CROP_AREA = 0.7
TOKEN_ENV = "NUTRIFUSE_LMM_TOKEN"


@dataclass(frozen=True)
class Transform:
    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DataError(f"unknown transform {self.kind!r}")
        if self.kind == "rotation" and (self.param is None or self.param < 0):
            raise DataError("rotation needs a non-negative degree range")
        if self.kind == "random_crop" and (self.param is None or not MIN_CROP_AREA <= self.param <= 1.0):
            raise DataError(f"random_crop min_area_fraction must lie in [{MIN_CROP_AREA}, 1]")

    @classmethod
    def parse(cls, spec) -> Transform:
        """Accept ``Transform``, ``"kind"``, ``"kind:param"`` or ``{"kind":..., "param":...}``."""
        if isinstance(spec, Transform):
            return spec
        if isinstance(spec, dict):
            return cls(spec["kind"], spec.get("param"))
        kind, _, param = str(spec).partition(":")
        return cls(kind.strip(), float(param) if param else None)

    def __str__(self) -> str:
        return self.kind if self.param is None else f"{self.kind}:{self.param:g}"


DEFAULT_TRANSFORMS = (
    Transform("identity"),
    Transform("rotation", 15.0),
    Transform("horizontal_flip"),
    Transform("random_crop", 0.7),
    Transform("grayscale"),
)


@dataclass(frozen=True)
class AugmentationSpec:
    transforms: tuple[Transform, ...] = DEFAULT_TRANSFORMS
    seed: int = 0

    def __post_init__(self):
        ts = tuple(Transform.parse(t) for t in self.transforms)
        if not ts:
            raise DataError("at least one transform is required")
        object.__setattr__(self, "transforms", ts)

    @property
    def K(self) -> int:
        return len(self.transforms)


@dataclass(frozen=True)
class VoteConfig:
    tau: int = 4

    def __post_init__(self):
        if self.tau < 1:
            raise DataError("tau must be >= 1")


def crop_box(height: int, width: int, min_area: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) covering at least ``min_area`` of the image."""
    target = rng.uniform(min_area, 1.0) * height * width
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    w = min(width, math.ceil(math.sqrt(target * ratio)))
    h = math.ceil(target / w)
    if h > height:
        h = height
        w = min(width, math.ceil(target / h))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def augment_image(image: torch.Tensor, k: int, spec: AugmentationSpec, resolution: int | None = None) -> torch.Tensor:
    """Apply the ``k``-th transform (1-based) of ``spec`` to a CHW image."""
    if not 1 <= k <= spec.K:
        raise IndexError(f"augmentation index {k} outside 1..{spec.K}")
    t = spec.transforms[k - 1]
    rng = np.random.default_rng([spec.seed, k])
    if t.kind == "identity":
        out = image
    elif t.kind == "horizontal_flip":
        out = image.flip(-1)
    elif t.kind == "grayscale":
        out = TF.rgb_to_grayscale(image, num_output_channels=3)
    elif t.kind == "rotation":
        angle = float(rng.uniform(-t.param, t.param))
        out = TF.rotate(image, angle, interpolation=TF.InterpolationMode.BILINEAR)
    else:
        top, left, h, w = crop_box(image.shape[-2], image.shape[-1], t.param, rng)
        out = image[..., top : top + h, left : left + w]
    return resize(out, resolution or image.shape[-1])


# ------------------------------------------------------------------- clients


class MultimodalClient(ABC):
    """One-method interface: image bytes plus prompt in, reply text out.
    Implementations must tolerate concurrent calls."""

    name = "client"

    @abstractmethod
    def generate(self, image: bytes, prompt: str) -> str: ...


class HttpMultimodalClient(MultimodalClient):
    """POSTs ``{"model", "prompt", "image_base64"}`` as JSON and reads the
    ``text`` field of a JSON reply (or the raw body for text/plain).
    A bearer token is taken from ``$NUTRIFUSE_LMM_TOKEN`` when set."""

    def __init__(self, url: str, model: str = "", token_env: str = TOKEN_ENV, timeout: float = 60.0):
        import httpx

        self.url = url
        self.model = model
        self.name = f"http:{model or url}"
        headers = {}
        token = os.environ.get(token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def generate(self, image: bytes, prompt: str) -> str:
        import httpx

        payload = {"model": self.model, "prompt": prompt, "image_base64": base64.b64encode(image).decode("ascii")}
        try:
            resp = self._client.post(self.url, json=payload)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ClientError(f"{self.url}: {exc}") from exc
        if resp.headers.get("content-type", "").startswith("application/json"):
            body = resp.json()
            if not isinstance(body, dict) or not isinstance(body.get("text"), str):
                raise ClientError(f"{self.url}: JSON reply lacks a 'text' field")
            return body["text"]
        return resp.text


class GroundTruthClient(MultimodalClient):
    """Always answers with the true ingredient list, whatever the image."""

    name = "mock-ground-truth"

    def __init__(self, ingredients: Iterable[str]):
        self.ingredients = list(ingredients)

    def generate(self, image, prompt):
        return ", ".join(self.ingredients)


class NoisyOracleClient(MultimodalClient):
    """Ground truth corrupted by dropped ingredients (false negatives) and
    hallucinated distractors (false positives).

    Noise is seeded by ``seed`` and a digest of the image bytes, so replies do
    not depend on call order or thread scheduling.
    """

    name = "mock-noisy"

    def __init__(self, ingredients, distractors, p_drop: float = 0.2, p_false: float = 0.1, seed: int = 0):
        self.ingredients = list(ingredients)
        self.distractors = [d for d in distractors if d not in set(self.ingredients)]
        self.p_drop, self.p_false, self.seed = p_drop, p_false, seed

    def generate(self, image, prompt):
        digest = hashlib.sha256(image).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])
        kept = [i for i in self.ingredients if rng.random() >= self.p_drop]
        fake = [d for d in self.distractors if rng.random() < self.p_false]
        return ", ".join(kept + fake)


class FunctionClient(MultimodalClient):
    def __init__(self, fn: Callable[[bytes, str], str], name: str = "function"):
        self.fn, self.name = fn, name

    def generate(self, image, prompt):
        return self.fn(image, prompt)


# ------------------------------------------------------------------- parsing

_SPLIT = re.compile(r"[,;\n]+")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_reply(text: str) -> list[str]:
    terms = []
    for part in _SPLIT.split(text or ""):
        part = _BULLET.sub("", part).strip()
        part = re.sub(r"^(?:and|or)\s+", "", part, flags=re.I)
        if part:
            terms.append(part)
    return terms


def normalize_reply(text: str, vocab: IngredientVocabulary, strict: bool = False) -> set[str]:
    terms = parse_reply(text)
    if not terms:
        if strict:
            raise ParseError(f"no ingredient terms in reply {text!r}")
        log.warning("empty or unparseable reply %r", text)
        return set()
    out = set()
    for term in terms:
        try:
            out.add(normalize_ingredient(term, vocab))
        except RejectedTermError:
            continue
        except IngredientError as exc:
            if strict:
                raise ParseError(str(exc)) from exc
            log.warning("dropping unmappable term %r", term)
    return out


def query_ingredients(image: torch.Tensor | bytes, client: MultimodalClient, vocab: IngredientVocabulary,
                      prompt: str | None = None, strict: bool = False) -> set[str]:
    return _query(image, client, vocab, prompt, strict)[1]


def _query(image, client, vocab, prompt, strict):
    data = image if isinstance(image, bytes) else to_png_bytes(image)
    try:
        reply = client.generate(data, prompt or read_asset("ingredient_query_prompt.txt"))
    except ClientError:
        raise
    except Exception as exc:  # noqa: BLE001 - adapters may raise anything on transport failure
        raise ClientError(f"{client.name}: {exc}") from exc
    return reply, normalize_reply(reply, vocab, strict)


# -------------------------------------------------------------------- voting


@dataclass(frozen=True)
class IngredientPredictionSet:
    per_augmentation: tuple[frozenset[str], ...]
    counts: dict[str, int] = field(init=False)

    def __post_init__(self):
        sets = tuple(frozenset(s) for s in self.per_augmentation)
        if not sets:
            raise DataError("need at least one per-augmentation set")
        object.__setattr__(self, "per_augmentation", sets)
        object.__setattr__(self, "counts", dict(Counter(i for s in sets for i in s)))

    @property
    def K(self) -> int:
        return len(self.per_augmentation)


def vote(preds: IngredientPredictionSet, cfg: VoteConfig) -> tuple[set[str], bool]:
    """Voted set plus a flag telling whether the max-count fallback fired."""
    kept = {ing for ing, n in preds.counts.items() if n >= cfg.tau}
    if kept or not preds.counts:
        return kept, False
    top = max(preds.counts.values())
    return {ing for ing, n in preds.counts.items() if n == top}, True


def majority_vote(preds: IngredientPredictionSet, cfg: VoteConfig) -> set[str]:
    return vote(preds, cfg)[0]


# ----------------------------------------------------------------- pipeline


@dataclass
class AugmentedPrediction:
    prediction: NutritionPrediction
    voted: set[str]
    record: dict


def collect_predictions(image: torch.Tensor, client: MultimodalClient, spec: AugmentationSpec,
                        vocab: IngredientVocabulary, resolution: int, prompt: str | None = None,
                        strict: bool = False, max_workers: int = 4):
    """Query the client on all K views; returns (raw replies, prediction set)."""
    views = [augment_image(image, k, spec, resolution) for k in range(1, spec.K + 1)]
    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, spec.K))) as pool:
        results = list(pool.map(lambda v: _query(v, client, vocab, prompt, strict), views))
    replies = [r for r, _ in results]
    return replies, IngredientPredictionSet(tuple(s for _, s in results))


def predict_with_augmented_ingredients(
    image: torch.Tensor,
    estimator: NutritionEstimator,
    client: MultimodalClient,
    spec: AugmentationSpec,
    cfg: VoteConfig,
    vocab: IngredientVocabulary,
    prompt: str | None = None,
    strict: bool = False,
    sample_id: str | None = None,
    max_workers: int = 4,
) -> AugmentedPrediction:
    res = estimator.model.cfg.input_resolution
    image = resize(image, res)
    replies, preds = collect_predictions(image, client, spec, vocab, res, prompt, strict, max_workers)
    voted, fallback = vote(preds, cfg)
    prediction = estimator.forward(image, sorted(voted))
    record = audit_record(sample_id, spec, cfg, replies, preds, voted, fallback, prediction)
    return AugmentedPrediction(prediction, voted, record)


def audit_record(sample_id, spec, cfg, replies, preds, voted, fallback, prediction) -> dict:
    return {
        "sample_id": sample_id,
        "transforms": [str(t) for t in spec.transforms],
        "tau": cfg.tau,
        "replies": list(replies),
        "parsed": [sorted(s) for s in preds.per_augmentation],
        "counts": dict(sorted(preds.counts.items())),
        "voted": sorted(voted),
        "fallback": fallback,
        "prediction": {k: round(v, 6) for k, v in vars(prediction).items()},
    }


def dump_audit_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n"


def tau_sweep(estimator: NutritionEstimator, images: Sequence[torch.Tensor], targets: np.ndarray,
              clients: Sequence[MultimodalClient], spec: AugmentationSpec, vocab: IngredientVocabulary,
              taus: Sequence[int], prompt: str | None = None) -> list[float]:
    """Average (over fields) MAE for each threshold; each image is queried once."""
    res = estimator.model.cfg.input_resolution
    images = [resize(im, res) for im in images]
    sets = [collect_predictions(im, c, spec, vocab, res, prompt)[1] for im, c in zip(images, clients)]
    batch = torch.stack(images).to(next(estimator.model.parameters()).dtype)
    curve = []
    for tau in taus:
        lists = [sorted(majority_vote(s, VoteConfig(tau))) for s in sets]
        preds = estimator.predict_batch(batch, lists).double().clamp(min=0).numpy()
        curve.append(float(np.abs(preds - np.asarray(targets)).mean()))
    return curve
