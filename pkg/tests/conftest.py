from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch

from nutrifuse.embedding import HashTextEncoder, IngredientEmbedder
from nutrifuse.images import save_image
from nutrifuse.ingredients import IngredientVocabulary
from nutrifuse.synthetic import SyntheticWorld

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def vocab() -> IngredientVocabulary:
    return IngredientVocabulary.default()


@pytest.fixture(scope="session")
def world(vocab) -> SyntheticWorld:
    return SyntheticWorld.create(vocab, resolution=32, seed=0)


@pytest.fixture
def embedder() -> IngredientEmbedder:
    return IngredientEmbedder(HashTextEncoder(64))


def write_dataset(root: Path, world: SyntheticWorld, samples, name: str = "manifest.jsonl") -> Path:
    """Render ``samples`` to PNGs under ``root`` and write a manifest beside them."""
    root.mkdir(parents=True, exist_ok=True)
    with (root / name).open("w", encoding="utf-8") as fh:
        for s in samples:
            save_image(world.image(s.sample_id, s.ingredients), root / s.image_ref)
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    return root / name


@pytest.fixture
def disk_dataset(tmp_path, world):
    train = world.dishes(12, prefix="tr")
    val = world.dishes(4, prefix="va", seed=1)
    test = world.dishes(6, prefix="te", seed=2)
    root = tmp_path / "data"
    return {
        "root": root,
        "train": write_dataset(root, world, train, "train.jsonl"),
        "val": write_dataset(root, world, val, "val.jsonl"),
        "test": write_dataset(root, world, test, "test.jsonl"),
    }


_ACCEPTANCE: dict[str, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = [report.outcome, detail]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  ({detail})" if detail else ""))
