"""RMSProp training loop with ingredient robustness and best-checkpoint selection."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, Sample
from .embedding import IngredientEmbedder
from .errors import ConfigError, DivergenceError, EmptyDatasetError, IngredientError
from .evaluation import EvalReport, build_report
from .fusion import (
    AUX_LOSS_WEIGHT,
    FusionConfig,
    NutritionEstimator,
    NutritionModel,
    load_checkpoint,
    nutrition_loss,
    save_checkpoint,
)
from .images import load_image, resize
from .ingredients import IngredientVocabulary, RobustnessConfig, robustify

log = logging.getLogger(__name__)

ImageLoader = Callable[[Sample], torch.Tensor]


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "rmsprop"
    lr: float = 1e-4
    momentum: float = 0.9
    decay: float = 0.9  # RMSProp smoothing constant for the squared-gradient average
    epsilon: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    epochs: int = 100
    batch_size: int = 64
    init: str = "pretrained"
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    seed: int = 0
    max_steps: int | None = None
    hflip: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.init not in ("pretrained", "random"):
            raise ConfigError(f"init must be 'pretrained' or 'random', got {self.init!r}")
        if self.optimizer.algorithm != "rmsprop":
            raise ConfigError("only the RMSProp optimizer is supported")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class TrainResult:
    checkpoint: Path | None
    best_epoch: int
    best_score: float
    losses: list[float]
    epoch_scores: list[float]
    model: NutritionModel = field(repr=False, default=None)


def disk_image_loader(manifest: DatasetManifest, resolution: int) -> ImageLoader:
    def load(sample: Sample) -> torch.Tensor:
        return resize(load_image(manifest.resolve_image(sample)), resolution)

    return load


def make_optimizer(params, spec: OptimizerSpec) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(params, lr=spec.lr, alpha=spec.decay, eps=spec.epsilon, momentum=spec.momentum)


def build_model(fusion_config: FusionConfig, config: TrainConfig) -> NutritionModel:
    torch.manual_seed(config.seed)
    if config.init == "pretrained" and fusion_config.backbone.startswith("tiny"):
        raise ConfigError("tiny backbones have no pretrained weights")
    cfg = FusionConfig(**{**fusion_config.to_dict(), "pretrained": config.init == "pretrained"})
    model = NutritionModel(cfg)
    return model.to(config.torch_dtype)


def _stack_targets(samples: Sequence[Sample], dtype) -> torch.Tensor:
    return torch.tensor(np.stack([s.nutrition.as_array() for s in samples]), dtype=dtype)


def predict_samples(estimator: NutritionEstimator, samples: Sequence[Sample], loader: ImageLoader,
                    batch_size: int = 64, ingredients: Callable[[Sample], Sequence[str]] | None = None) -> np.ndarray:
    """(n, 4) predictions; ``ingredients`` defaults to each sample's own list."""
    dtype = next(estimator.model.parameters()).dtype
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = torch.stack([loader(s) for s in chunk]).to(dtype)
        lists = [list(ingredients(s) if ingredients else s.ingredients) for s in chunk]
        rows.append(estimator.predict_batch(images, lists).double().numpy())
    return np.concatenate(rows, axis=0)


def validate(checkpoint, val_set: Sequence[Sample] | DatasetManifest, embedder: IngredientEmbedder,
             loader: ImageLoader, fusion_config: FusionConfig | None = None, batch_size: int = 64) -> EvalReport:
    """Score a checkpoint (path or in-memory model) on ground-truth ingredient lists."""
    samples = list(val_set)
    if not samples:
        raise EmptyDatasetError("validation set is empty")
    if isinstance(checkpoint, NutritionModel):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint, fusion_config, embedder.encoder.name)
    was_training = model.training
    est = NutritionEstimator(model, embedder)
    try:
        preds = predict_samples(est, samples, loader, batch_size)
    finally:
        model.train(was_training)
    return build_report(preds, [s.nutrition for s in samples])


def train(
    config: TrainConfig,
    fusion_config: FusionConfig,
    train_set: Sequence[Sample] | DatasetManifest,
    val_set: Sequence[Sample] | DatasetManifest,
    embedder: IngredientEmbedder,
    vocab: IngredientVocabulary,
    loader: ImageLoader,
    out_dir: str | Path | None = None,
    log_every: int = 50,
) -> TrainResult:
    """Optimize the fused model; keep the epoch with the lowest average
    validation relative error and write it to ``out_dir/best.pt``."""
    train_samples, val_samples = list(train_set), list(val_set)
    if not train_samples or not val_samples:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    for s in train_samples:
        if not s.ingredients:
            raise IngredientError(f"training sample {s.sample_id} has no ingredients")
    if fusion_config.embed_dim != embedder.dim:
        raise ConfigError(f"fusion embed_dim {fusion_config.embed_dim} != encoder dim {embedder.dim}")

    model = build_model(fusion_config, config)
    dtype = config.torch_dtype
    opt = make_optimizer(model.parameters(), config.optimizer)
    est = NutritionEstimator(model, embedder)
    aug_rng = np.random.default_rng([config.seed, config.robustness.seed])
    order_gen = torch.Generator().manual_seed(config.seed)
    targets_all = _stack_targets(train_samples, dtype)

    losses: list[float] = []
    epoch_scores: list[float] = []
    best_score, best_epoch, best_state = math.inf, -1, None
    step = 0
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(train_samples), generator=order_gen).tolist()
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = [train_samples[i] for i in idx]
            images = torch.stack([loader(s) for s in batch]).to(dtype)
            if config.hflip:
                flip = torch.rand(len(batch), generator=order_gen) < 0.5
                images = torch.where(flip[:, None, None, None], images.flip(-1), images)
            lists = [robustify(s.ingredients, vocab, config.robustness, aug_rng) for s in batch]
            emb, mask = est.embed_batch(lists)
            out = model(images, emb, mask)
            targets = targets_all[idx]
            if isinstance(out, tuple):
                preds, aux = out
                loss, _ = nutrition_loss(preds, targets)
                loss = loss + AUX_LOSS_WEIGHT * nutrition_loss(aux, targets)[0]
            else:
                loss, _ = nutrition_loss(out, targets)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d loss %.4f", epoch, step, losses[-1])
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        report = validate(model, val_samples, embedder, loader, batch_size=config.batch_size)
        score = report.mean_percent
        epoch_scores.append(score)
        log.info("epoch %d val avg relative error %.3f%%", epoch, score)
        if score < best_score:
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        if config.max_steps is not None and step >= config.max_steps:
            break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        ckpt = save_checkpoint(model, out / "best.pt", embedder.encoder.name,
                               extra={"best_epoch": best_epoch, "best_score": best_score})
        history = {"losses": losses, "epoch_scores": epoch_scores, "best_epoch": best_epoch,
                   "best_score": best_score, "train_config": _config_dict(config)}
        (out / "history.json").write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    return TrainResult(ckpt, best_epoch, best_score, losses, epoch_scores, model)


def _config_dict(config: TrainConfig) -> dict:
    return asdict(config)
