"""MAE / relative-error metrics, video testing protocols and report files."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import FIELDS, Sample
from .errors import DataError, EmptyDatasetError, LengthMismatchError, ZeroMeanError

PROTOCOLS = ("single_image", "protocol1", "protocol2")
FIELD_LABELS = {"calories": "Caloric", "fat": "Fat", "carbohydrates": "Carb", "protein": "Protein"}

# A predictor maps samples to an (n, 4) array in FIELDS order.
Predictor = Callable[[Sequence[Sample]], np.ndarray]


def _as_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return rows.astype(np.float64).reshape(-1, len(FIELDS))
    return np.array([r.as_array() if hasattr(r, "as_array") else r for r in rows], dtype=np.float64).reshape(-1, len(FIELDS))


def mae_per_field(preds, targets) -> np.ndarray:
    p, y = _as_matrix(preds), _as_matrix(targets)
    if len(p) != len(y):
        raise LengthMismatchError(f"{len(p)} predictions vs {len(y)} targets")
    if len(p) == 0:
        raise LengthMismatchError("no samples")
    return np.abs(p - y).mean(axis=0)


def relative_percent(mae: float, field_mean: float) -> float:
    if not field_mean > 0:
        raise ZeroMeanError(f"field mean must be positive, got {field_mean}")
    return 100.0 * mae / field_mean


@dataclass
class EvalReport:
    per_field: dict[str, tuple[float, float]]
    protocol: str = "single_image"
    n_samples: int = 1
    field_means: dict[str, float] = field(default_factory=dict)
    selection_objective: float | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise DataError(f"unknown protocol {self.protocol!r}")
        if self.n_samples < 1:
            raise DataError("a report needs at least one sample")
        self.per_field = {k: (float(v[0]), float(v[1])) for k, v in self.per_field.items()}

    def mae(self, name: str) -> float:
        return self.per_field[name][0]

    def percent(self, name: str) -> float:
        return self.per_field[name][1]

    @property
    def mean_mae(self) -> float:
        return float(np.mean([self.mae(f) for f in FIELDS]))

    @property
    def mean_percent(self) -> float:
        return float(np.mean([self.percent(f) for f in FIELDS]))

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "n_samples": self.n_samples,
            "per_field": {k: {"mae": m, "relative_percent": p} for k, (m, p) in self.per_field.items()},
            "field_means": self.field_means,
            "selection_objective": self.selection_objective,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(
            per_field={k: (v["mae"], v["relative_percent"]) for k, v in d["per_field"].items()},
            protocol=d["protocol"],
            n_samples=d["n_samples"],
            field_means=d.get("field_means", {}),
            selection_objective=d.get("selection_objective"),
        )


def build_report(preds, targets, protocol="single_image", field_means=None, selection_objective=None) -> EvalReport:
    """Clamp predictions at zero, then score them against ``targets``.

    ``field_means`` defaults to the per-field mean of ``targets``.
    """
    p = np.clip(_as_matrix(preds), 0.0, None)
    y = _as_matrix(targets)
    maes = mae_per_field(p, y)
    means = y.mean(axis=0) if field_means is None else np.asarray(field_means, dtype=np.float64)
    per_field = {f: (float(m), relative_percent(float(m), float(mu))) for f, m, mu in zip(FIELDS, maes, means)}
    return EvalReport(
        per_field=per_field,
        protocol=protocol,
        n_samples=len(y),
        field_means={f: float(mu) for f, mu in zip(FIELDS, means)},
        selection_objective=selection_objective,
    )


def frame_scores(preds: np.ndarray, targets: np.ndarray, field_means: np.ndarray) -> np.ndarray:
    """Per-row mean over the four fields of |error| / field mean."""
    p = np.clip(_as_matrix(preds), 0.0, None)
    return (np.abs(p - _as_matrix(targets)) / field_means).mean(axis=1)


def _video_frames(samples: Sequence[Sample], stride: int | None) -> list[Sample]:
    frames = [s for s in samples if s.video_id is not None]
    if stride is not None:
        frames = [s for s in frames if s.frame_index % stride == 0]
    if not frames:
        raise EmptyDatasetError("no video-frame samples to evaluate")
    return frames


def _group(frames: Sequence[Sample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(frames):
        groups[s.video_id].append(i)
    return groups


def _predict(model, frames) -> np.ndarray:
    out = model.predict(frames) if hasattr(model, "predict") else model(frames)
    return _as_matrix(np.asarray(out, dtype=np.float64))


def evaluate_single_image(model, samples: Sequence[Sample]) -> EvalReport:
    if not samples:
        raise EmptyDatasetError("no samples to evaluate")
    return build_report(_predict(model, list(samples)), [s.nutrition for s in samples])


def evaluate_protocol1(model, video_test_set: Sequence[Sample], stride: int | None = None) -> EvalReport:
    """Score every sampled frame of every test video.

    The selection objective is the per-video average of frame scores,
    averaged over videos, so it is directly comparable with protocol 2.
    """
    frames = _video_frames(video_test_set, stride)
    preds = _predict(model, frames)
    targets = _as_matrix([s.nutrition for s in frames])
    means = targets.mean(axis=0)
    scores = frame_scores(preds, targets, means)
    objective = float(np.mean([scores[idx].mean() for idx in _group(frames).values()]))
    return build_report(preds, targets, "protocol1", means, objective)


def evaluate_protocol2(model, video_test_set: Sequence[Sample], stride: int | None = None) -> EvalReport:
    """Oracle protocol: keep, per video, the frame with the lowest mean
    relative error against ground truth, then score only those frames."""
    frames = _video_frames(video_test_set, stride)
    preds = _predict(model, frames)
    targets = _as_matrix([s.nutrition for s in frames])
    means = targets.mean(axis=0)
    scores = frame_scores(preds, targets, means)
    chosen = [idx[int(np.argmin(scores[idx]))] for idx in _group(frames).values()]
    return build_report(preds[chosen], targets[chosen], "protocol2", means, float(scores[chosen].mean()))


# ------------------------------------------------------------------ reports


def format_cell(mae: float, percent: float) -> str:
    return f"{mae:.2f} / {percent:.2f}%"


def render_report(report: EvalReport) -> str:
    lines = [f"protocol: {report.protocol}   samples: {report.n_samples}", f"{'Field':<10}MAE / Relative"]
    for name in FIELDS:
        lines.append(f"{FIELD_LABELS[name]:<10}{format_cell(*report.per_field[name])}")
    lines.append(f"{'Average':<10}{format_cell(report.mean_mae, report.mean_percent)}")
    if report.selection_objective is not None:
        lines.append(f"selection objective: {report.selection_objective:.6f}")
    return "\n".join(lines) + "\n"


def parse_report_json(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def plot_report(report: EvalReport, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [FIELD_LABELS[f] for f in FIELDS]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(labels, [report.mae(f) for f in FIELDS], color="#4c72b0")
    ax1.set_ylabel("MAE (kcal / g)")
    ax1.set_yscale("symlog", linthresh=1.0)
    ax2.bar(labels, [report.percent(f) for f in FIELDS], color="#dd8452")
    ax2.set_ylabel("relative error (%)")
    fig.suptitle(f"{report.protocol}, n={report.n_samples}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_tau_sweep(taus: Sequence[int], maes: Sequence[float], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(taus), list(maes), marker="o")
    best = int(np.argmin(maes))
    ax.scatter([taus[best]], [maes[best]], color="red", zorder=3)
    ax.set_xlabel("voting threshold")
    ax.set_ylabel("average MAE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report", figure: bool = True) -> dict[str, Path]:
    """Write ``<stem>.txt``, ``<stem>.json`` and (optionally) ``<stem>.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / f"{stem}.txt", "json": out / f"{stem}.json"}
    paths["text"].write_text(render_report(report), encoding="utf-8")
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if figure:
        paths["figure"] = plot_report(report, out / f"{stem}.png")
    return paths
