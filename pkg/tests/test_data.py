import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nutrifuse import data as D
from nutrifuse.errors import (
    BadStrideError,
    DataError,
    DuplicateIdError,
    EmptyManifestError,
    MissingFieldError,
    UnitError,
)


def rec(sid, cal=250.0, fat=10.0, carb=30.0, pro=8.0, category="burger", **extra):
    return {"sample_id": sid, "image": f"img/{sid}.jpg", "category": category, "ingredients": ["bun"],
            "calories": cal, "fat": fat, "carbohydrates": carb, "protein": pro, "source": "official", **extra}


def write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def sample(sid, category="c", cal=100.0):
    return D.Sample(sid, f"{sid}.png", category, ("bun",), D.NutritionVector(cal, 1, 1, 1))


def test_single_record_means(tmp_path):
    m = D.load_manifest(write(tmp_path / "m.jsonl", [rec("a")]))
    assert m.field_means == D.NutritionVector(250, 10, 30, 8)


def test_two_record_mean(tmp_path):
    m = D.load_manifest(write(tmp_path / "m.jsonl", [rec("a", cal=100), rec("b", cal=300)]))
    assert m.field_means.calories == 200


def test_negative_nutrient_rejected(tmp_path):
    with pytest.raises(UnitError):
        D.load_manifest(write(tmp_path / "m.jsonl", [rec("a", fat=-1)]))


def test_non_finite_nutrient_rejected():
    with pytest.raises(UnitError):
        D.NutritionVector(float("nan"), 0, 0, 0)


def test_missing_field(tmp_path):
    r = rec("a")
    del r["protein"]
    with pytest.raises(MissingFieldError):
        D.load_manifest(write(tmp_path / "m.jsonl", [r]))


def test_duplicate_ids(tmp_path):
    with pytest.raises(DuplicateIdError):
        D.load_manifest(write(tmp_path / "m.jsonl", [rec("a"), rec("a")]))


def test_bad_field_means():
    with pytest.raises(DataError):
        D.DatasetManifest((sample("a", cal=100),), field_means=D.NutritionVector(101, 1, 1, 1))


def test_video_invariants():
    nv = D.NutritionVector(1, 1, 1, 1)
    with pytest.raises(DataError):
        D.Sample("a", "a.png", "c", (), nv, source="video_frame")
    with pytest.raises(DataError):
        D.Sample("a", "a.png", "c", (), nv, source="official", video_id="v")
    D.Sample("a", "a.png", "c", (), nv, source="video_frame", video_id="v", frame_index=0)


def test_unit_map_converts_known_units(tmp_path):
    (tmp_path / "units.tsv").write_text("acme\tcalories\tkJ\nacme\tfat\tmg\n", encoding="utf-8")
    units = D.load_unit_map(tmp_path / "units.tsv")
    m = D.load_manifest(write(tmp_path / "m.jsonl", [rec("a", cal=4184, fat=5000, brand="acme")]), units)
    assert m.samples[0].nutrition.calories == pytest.approx(1000)
    assert m.samples[0].nutrition.fat == pytest.approx(5)


def test_unit_map_rejects_unknown_units(tmp_path):
    (tmp_path / "units.tsv").write_text("acme\tcalories\tcups\n", encoding="utf-8")
    with pytest.raises(UnitError):
        D.load_unit_map(tmp_path / "units.tsv")


def test_save_load_round_trip(tmp_path):
    m = D.load_manifest(write(tmp_path / "m.jsonl", [rec("a"), rec("b", cal=3.5)]))
    again = D.load_manifest(D.save_manifest(m, tmp_path / "out" / "m.jsonl"))
    assert again == m


def test_split_exact_fraction():
    m = D.DatasetManifest(tuple(sample(f"s{i}") for i in range(10)))
    parts = D.split_dataset(m, D.SplitSpec(0.7, 0.2, 0.1, seed=7))
    assert tuple(len(p) for p in parts) == (7, 2, 1)
    assert parts == D.split_dataset(m, D.SplitSpec(0.7, 0.2, 0.1, seed=7))


def test_split_empty():
    with pytest.raises(EmptyManifestError):
        D.split_dataset(D.DatasetManifest(()), D.SplitSpec())


def test_split_fractions_validated():
    with pytest.raises(DataError):
        D.SplitSpec(0.7, 0.2, 0.2)


def test_split_stratifies_908_categories():
    m = D.DatasetManifest(tuple(sample(f"c{c}_{i}", f"cat{c}") for c in range(908) for i in range(10)))
    train, val, test = D.split_dataset(m, D.SplitSpec(seed=3))
    for part, frac in ((train, 0.7), (val, 0.2), (test, 0.1)):
        counts = {}
        for s in part:
            counts[s.category] = counts.get(s.category, 0) + 1
        assert len(counts) == 908
        assert all(abs(n - 10 * frac) <= 1 for n in counts.values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.integers(0, 10**6))
def test_split_partitions(cats, seed):
    m = D.DatasetManifest(tuple(sample(f"s{i}", f"c{c}") for i, c in enumerate(cats)))
    parts = D.split_dataset(m, D.SplitSpec(seed=seed))
    ids = [s.sample_id for p in parts for s in p]
    assert sorted(ids) == sorted(s.sample_id for s in m)
    for cat in set(cats):
        n = cats.count(cat)
        for part, frac in zip(parts, (0.7, 0.2, 0.1)):
            assert abs(sum(s.category == f"c{cat}" for s in part) - n * frac) <= 1


def test_extract_frames_examples():
    nv = D.NutritionVector(100, 1, 2, 3)
    assert [s.frame_index for s in D.extract_frames([("v1", 12, nv)], 5)] == [0, 5, 10]
    frames = D.extract_frames([("v1", 1, nv)], 5)
    assert [s.frame_index for s in frames] == [0]
    assert frames[0].source == "video_frame" and frames[0].nutrition == nv


def test_extract_frames_bad_stride():
    with pytest.raises(BadStrideError):
        D.extract_frames([("v1", 12, D.NutritionVector(1, 1, 1, 1))], 0)


def test_extract_frames_corpus_scale():
    # 1000 videos of 1150 frames at stride 5 give 230 frames each.
    videos = [(f"v{i}", 1150, D.NutritionVector(1, 1, 1, 1)) for i in range(1000)]
    assert len(D.extract_frames(videos, 5)) == 230_000


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.integers(1, 30))
def test_extract_frames_length(frame_count, stride):
    frames = D.extract_frames([("v", frame_count, D.NutritionVector(1, 1, 1, 1))], stride)
    assert len(frames) == math.ceil(frame_count / stride)
    assert all(s.frame_index % stride == 0 and s.frame_index < frame_count for s in frames)
