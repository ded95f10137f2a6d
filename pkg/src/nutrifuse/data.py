"""Dataset schema, manifest I/O, stratified splitting and video-frame sampling."""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadStrideError,
    DataError,
    DuplicateIdError,
    EmptyManifestError,
    MissingFieldError,
    UnitError,
)

FIELDS = ("calories", "fat", "carbohydrates", "protein")
SOURCES = ("official", "text_search", "image_search", "video_frame")
REQUIRED_KEYS = ("sample_id", "image", "category", "ingredients", *FIELDS, "source")
OPTIONAL_KEYS = ("video_id", "frame_index", "brand")

# Canonical units are kcal for calories and grams for the macronutrients.
UNIT_FACTORS: dict[str, dict[str, float]] = {
    "calories": {"kcal": 1.0, "kj": 1.0 / 4.184},
    "fat": {"g": 1.0, "mg": 1e-3},
    "carbohydrates": {"g": 1.0, "mg": 1e-3},
    "protein": {"g": 1.0, "mg": 1e-3},
}


@dataclass(frozen=True)
class NutritionVector:
    calories: float
    fat: float
    carbohydrates: float
    protein: float

    def __post_init__(self):
        for name in FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise UnitError(f"{name} must be finite and >= 0, got {value!r}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> NutritionVector:
        return cls(*(float(v) for v in values))

    def as_dict(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in FIELDS}


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_ref: str
    category: str
    ingredients: tuple[str, ...]
    nutrition: NutritionVector
    source: str = "official"
    video_id: str | None = None
    frame_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "ingredients", tuple(self.ingredients))
        if self.source not in SOURCES:
            raise DataError(f"{self.sample_id}: unknown source {self.source!r}")
        if (self.video_id is not None) != (self.source == "video_frame"):
            raise DataError(f"{self.sample_id}: video_id must be set iff source is video_frame")
        if (self.frame_index is not None) != (self.video_id is not None):
            raise DataError(f"{self.sample_id}: frame_index must be set iff video_id is set")
        if self.frame_index is not None and self.frame_index < 0:
            raise DataError(f"{self.sample_id}: negative frame_index")

    def to_record(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "category": self.category,
            "ingredients": list(self.ingredients),
            **self.nutrition.as_dict(),
            "source": self.source,
        }
        if self.video_id is not None:
            rec["video_id"] = self.video_id
            rec["frame_index"] = self.frame_index
        return rec


def _mean_vector(samples: Sequence[Sample]) -> NutritionVector:
    return NutritionVector.from_array(np.mean([s.nutrition.as_array() for s in samples], axis=0))


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    field_means: NutritionVector | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DuplicateIdError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
        if not self.samples:
            return
        means = _mean_vector(self.samples)
        if self.field_means is None:
            object.__setattr__(self, "field_means", means)
        elif not np.allclose(self.field_means.as_array(), means.as_array(), rtol=1e-9, atol=0):
            raise DataError("field_means does not match the per-field sample mean")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def resolve_image(self, sample: Sample) -> Path:
        path = Path(sample.image_ref)
        if self.root is None or path.is_absolute():
            return path
        return self.root / path

    def subset(self, samples: Iterable[Sample]) -> DatasetManifest:
        return DatasetManifest(tuple(samples), root=self.root)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    val_fraction: float = 0.2
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be positive and sum to 1, got {fracs}")


def load_unit_map(path: str | Path) -> dict[str, dict[str, str]]:
    """Read a ``brand<TAB>field<TAB>unit`` file into ``{brand: {field: unit}}``."""
    table: dict[str, dict[str, str]] = defaultdict(dict)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 3 or parts[1] not in FIELDS:
            raise DataError(f"{path}:{lineno}: expected brand, field, unit")
        if parts[2].lower() not in UNIT_FACTORS[parts[1]]:
            raise UnitError(f"{path}:{lineno}: unknown unit {parts[2]!r} for {parts[1]}")
        table[parts[0]][parts[1]] = parts[2].lower()
    return dict(table)


def _convert(value: float, field_name: str, unit: str) -> float:
    factors = UNIT_FACTORS[field_name]
    if unit not in factors:
        raise UnitError(f"unknown unit {unit!r} for {field_name}")
    return value * factors[unit]


def record_to_sample(rec: Mapping, unit_map: Mapping[str, Mapping[str, str]] | None = None) -> Sample:
    missing = [k for k in REQUIRED_KEYS if k not in rec]
    if missing:
        raise MissingFieldError(f"record {rec.get('sample_id', '?')!r} lacks {', '.join(missing)}")
    units = (unit_map or {}).get(rec.get("brand"), {})
    values = {}
    for name in FIELDS:
        raw = rec[name]
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise UnitError(f"{rec['sample_id']}: {name} is not a number")
        values[name] = _convert(float(raw), name, units.get(name, next(iter(UNIT_FACTORS[name]))))
    ingredients = rec["ingredients"]
    if not isinstance(ingredients, list) or not all(isinstance(i, str) for i in ingredients):
        raise DataError(f"{rec['sample_id']}: ingredients must be a list of strings")
    return Sample(
        sample_id=str(rec["sample_id"]),
        image_ref=str(rec["image"]),
        category=str(rec["category"]),
        ingredients=tuple(ingredients),
        nutrition=NutritionVector(**values),
        source=rec["source"],
        video_id=rec.get("video_id"),
        frame_index=rec.get("frame_index"),
    )


def load_manifest(path: str | Path, unit_map=None) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Image paths stay relative; :meth:`DatasetManifest.resolve_image` joins
    them with the manifest's directory.
    """
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            samples.append(record_to_sample(rec, unit_map))
    return DatasetManifest(tuple(samples), root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in manifest.samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    return path


def _hash_key(seed: int, sample_id: str) -> str:
    return hashlib.sha256(f"{seed}:{sample_id}".encode()).hexdigest()


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # Largest-remainder rounding keeps every share within one sample of n * fraction.
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, spec: SplitSpec):
    """Stratified per-category split into (train, val, test) manifests."""
    if len(manifest) == 0:
        raise EmptyManifestError("cannot split an empty manifest")
    by_cat: dict[str, list[Sample]] = defaultdict(list)
    for s in manifest.samples:
        by_cat[s.category].append(s)
    parts: tuple[list, list, list] = ([], [], [])
    fractions = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
    for cat in sorted(by_cat):
        members = sorted(by_cat[cat], key=lambda s: _hash_key(spec.seed, s.sample_id))
        n_train, n_val, _ = _allocate(len(members), fractions)
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train : n_train + n_val])
        parts[2].extend(members[n_train + n_val :])
    # Empty splits are legal for tiny manifests; they carry no field means.
    return tuple(manifest.subset(p) for p in parts)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frame_count: int
    nutrition: NutritionVector
    category: str = "dish"
    ingredients: tuple[str, ...] = ()


def extract_frames(
    video_manifest: Sequence[VideoRecord | tuple],
    stride: int = 5,
    image_template: str = "{video_id}/frame_{frame:05d}.jpg",
) -> list[Sample]:
    """Emit one sample per ``stride``-th frame; every frame carries its video's label."""
    if not isinstance(stride, int) or stride < 1:
        raise BadStrideError(f"stride must be >= 1, got {stride!r}")
    out = []
    for entry in video_manifest:
        video = entry if isinstance(entry, VideoRecord) else VideoRecord(*entry)
        if video.frame_count < 1:
            raise DataError(f"{video.video_id}: frame_count must be >= 1")
        for frame in range(0, video.frame_count, stride):
            out.append(
                Sample(
                    sample_id=f"{video.video_id}_f{frame:05d}",
                    image_ref=image_template.format(video_id=video.video_id, frame=frame),
                    category=video.category,
                    ingredients=tuple(video.ingredients),
                    nutrition=video.nutrition,
                    source="video_frame",
                    video_id=video.video_id,
                    frame_index=frame,
                )
            )
    return out
