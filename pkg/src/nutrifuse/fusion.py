"""Ingredient-aware fusion over CNN and ViT backbones, multi-task heads and loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torchvision import models as tvm
from torchvision.models.resnet import Bottleneck, ResNet
from torchvision.models.vision_transformer import VisionTransformer

from .data import FIELDS, NutritionVector
from .embedding import IngredientEmbedder, IngredientProjector, aggregate_ingredients
from .errors import (
    ConfigError,
    ConfigMismatchError,
    DataError,
    DoubleFusionError,
    LengthMismatchError,
    ResolutionError,
    ShapeMismatchError,
    UninitializedModelError,
)
from .images import IMAGENET_MEAN, IMAGENET_STD

HIDDEN_WIDTH = 4096
AUX_LOSS_WEIGHT = 0.4
CHECKPOINT_FORMAT = "nutrifuse-checkpoint"
CHECKPOINT_VERSION = 1

RESNET_SITES = ("block1", "block2", "block3", "block4")
INCEPTION_SITES = ("post_maxpool2", "mixed6e_with_aux", "mixed6e_no_aux", "post_mixed7c")
VIT_SITES = ("extra_token",)

# backbone -> (family, valid sites, default site, fixed resolution or None)
BACKBONES = {
    "resnet50": ("resnet", RESNET_SITES, "block2", 224),
    "resnet101": ("resnet", RESNET_SITES, "block2", 224),
    "inception_v3": ("inception", INCEPTION_SITES, "mixed6e_with_aux", 299),
    "vit_base16": ("vit", VIT_SITES, "extra_token", 224),
    # Small CPU-friendly stand-ins used by the test suite and synthetic runs.
    "tiny_resnet": ("resnet", RESNET_SITES, "block2", None),
    "tiny_vit": ("vit", VIT_SITES, "extra_token", None),
}
TINY_DEFAULT_RESOLUTION = 32


@dataclass(frozen=True)
class FusionConfig:
    backbone: str = "resnet101"
    injection_site: str | None = None
    input_resolution: int | None = None
    fuse_auxiliary: bool | None = None
    embed_dim: int = 512
    pretrained: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        family, sites, default_site, resolution = BACKBONES[self.backbone]
        site = self.injection_site or default_site
        if site not in sites:
            raise ConfigError(f"injection site {site!r} invalid for {self.backbone}; choose from {sites}")
        object.__setattr__(self, "injection_site", site)
        if resolution is None:
            res = self.input_resolution or TINY_DEFAULT_RESOLUTION
            if res % 8:
                raise ConfigError("tiny backbones need a resolution divisible by 8")
        else:
            res = self.input_resolution or resolution
            if res != resolution:
                raise ConfigError(f"{self.backbone} requires input_resolution {resolution}, got {res}")
        object.__setattr__(self, "input_resolution", res)
        aux = site == "mixed6e_with_aux"
        if self.fuse_auxiliary is not None and family == "inception" and site.startswith("mixed6e"):
            if self.fuse_auxiliary != aux:
                raise ConfigError(f"fuse_auxiliary={self.fuse_auxiliary} contradicts site {site}")
        if self.fuse_auxiliary and family != "inception":
            raise ConfigError("fuse_auxiliary only applies to inception_v3")
        object.__setattr__(self, "fuse_auxiliary", aux)
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")

    @property
    def family(self) -> str:
        return BACKBONES[self.backbone][0]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NutritionPrediction:
    calories: float
    fat: float
    carbohydrates: float
    protein: float

    def __post_init__(self):
        for name in FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"non-finite prediction for {name}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> NutritionPrediction:
        return cls(*(float(v) for v in values))

    def clamped(self) -> NutritionPrediction:
        return NutritionPrediction(*(max(0.0, v) for v in self.as_array()))


# ---------------------------------------------------------------- fusion ops


def fuse_broadcast(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Add a per-channel vector to every spatial position of a feature map.

    ``x`` is (C, H, W) or (B, C, H, W); ``t`` is (C,) or (B, C).
    """
    if x.ndim not in (3, 4) or t.shape[-1] != x.shape[-3]:
        raise ShapeMismatchError(f"cannot fuse vector {tuple(t.shape)} into map {tuple(x.shape)}")
    if x.ndim == 4 and t.ndim == 2 and t.shape[0] != x.shape[0]:
        raise ShapeMismatchError("batch sizes differ")
    return x + t[..., :, None, None]


@dataclass
class TokenSequence:
    """(B, L, D) token batch laid out as [cls, ingredient?, patches...]."""

    tokens: torch.Tensor
    has_ingredient: bool = False

    @property
    def class_token(self) -> torch.Tensor:
        return self.tokens[:, 0]

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[:, 2:] if self.has_ingredient else self.tokens[:, 1:]


def fuse_token(seq: TokenSequence, t: torch.Tensor) -> TokenSequence:
    """Insert the ingredient feature as a token right after the class token."""
    if seq.has_ingredient:
        raise DoubleFusionError("sequence already carries an ingredient token")
    tokens = seq.tokens
    if t.ndim == 1:
        t = t.unsqueeze(0).expand(tokens.shape[0], -1)
    if t.shape != (tokens.shape[0], tokens.shape[2]):
        raise ShapeMismatchError(f"ingredient token {tuple(t.shape)} vs tokens {tuple(tokens.shape)}")
    out = torch.cat([tokens[:, :1], t.unsqueeze(1).to(tokens.dtype), tokens[:, 1:]], dim=1)
    return TokenSequence(out, has_ingredient=True)


def extend_positions(pos: torch.Tensor, slot: torch.Tensor) -> torch.Tensor:
    """Positional table (1, L, D) -> (1, L+1, D) with ``slot`` at index 1."""
    return torch.cat([pos[:, :1], slot.reshape(1, 1, -1), pos[:, 1:]], dim=1)


# ----------------------------------------------------------------- backbones


def _build_torchvision(cfg: FusionConfig) -> nn.Module:
    name = cfg.backbone
    if name == "tiny_resnet":
        return ResNet(Bottleneck, [1, 1, 1, 1])
    if name == "tiny_vit":
        return VisionTransformer(image_size=cfg.input_resolution, patch_size=8, num_layers=2,
                                 num_heads=2, hidden_dim=32, mlp_dim=64)
    weights = "DEFAULT" if cfg.pretrained else None
    if name in ("resnet50", "resnet101"):
        return getattr(tvm, name)(weights=weights)
    if name == "inception_v3":
        if cfg.pretrained:
            net = tvm.inception_v3(weights=weights, aux_logits=True)
            net.transform_input = False
            return net
        return tvm.inception_v3(weights=None, aux_logits=True, transform_input=False, init_weights=True)
    return tvm.vit_b_16(weights=weights)


class ConvBackbone(nn.Module):
    """Runs a torchvision CNN stage by stage, fusing after the chosen stage."""

    def __init__(self, net: nn.Module, cfg: FusionConfig):
        super().__init__()
        self.net = net
        self.family = cfg.family
        if self.family == "resnet":
            net.fc = nn.Identity()
            self.stage_names = ["stem", *RESNET_SITES]
            self.site_index = self.stage_names.index(cfg.injection_site)
            self.feature_dim = _resnet_width(net)
            self.fusion_dim = _resnet_stage_width(net, cfg.injection_site)
            self.aux = None
        else:
            net.fc = nn.Identity()
            self.stage_names = ["pre_maxpool2", "post_maxpool2", "mixed6e", "post_mixed7c"]
            site = "mixed6e" if cfg.injection_site.startswith("mixed6e") else cfg.injection_site
            self.site_index = self.stage_names.index(site)
            self.feature_dim = 2048
            self.fusion_dim = {"post_maxpool2": 192, "mixed6e": 768, "post_mixed7c": 2048}[site]
            self.fuse_auxiliary = cfg.fuse_auxiliary
            net.AuxLogits.fc = nn.Identity()
            self.aux = net.AuxLogits

    def _stages(self):
        n = self.net
        if self.family == "resnet":
            return [
                lambda x: n.maxpool(n.relu(n.bn1(n.conv1(x)))),
                n.layer1, n.layer2, n.layer3, n.layer4,
            ]
        return [
            lambda x: n.Conv2d_4a_3x3(n.Conv2d_3b_1x1(n.maxpool1(n.Conv2d_2b_3x3(n.Conv2d_2a_3x3(n.Conv2d_1a_3x3(x)))))),
            n.maxpool2,
            lambda x: n.Mixed_6e(n.Mixed_6d(n.Mixed_6c(n.Mixed_6b(n.Mixed_6a(n.Mixed_5d(n.Mixed_5c(n.Mixed_5b(x)))))))),
            lambda x: n.Mixed_7c(n.Mixed_7b(n.Mixed_7a(x))),
        ]

    def forward(self, x, t=None, mask=None):
        aux_feat = None
        for i, stage in enumerate(self._stages()):
            x = stage(x)
            if self.family == "inception" and i == 2 and self.training:
                pre_fusion = x
            if i == self.site_index and t is not None:
                fused = fuse_broadcast(x, t)
                x = fused if mask is None else torch.where(mask[:, None, None, None], fused, x)
            if self.family == "inception" and i == 2 and self.training:
                # Fusion upstream of Mixed_6e reaches the aux branch regardless.
                aux_in = x if self.fuse_auxiliary else pre_fusion
                aux_feat = self.aux(aux_in)
        n = self.net
        x = n.avgpool(x)
        if self.family == "inception":
            x = n.dropout(x)
        return torch.flatten(x, 1), aux_feat


def _resnet_width(net) -> int:
    last = net.layer4[-1]
    return (last.conv3 if hasattr(last, "conv3") else last.conv2).out_channels


def _resnet_stage_width(net, site) -> int:
    layer = getattr(net, "layer" + site[-1])[-1]
    return (layer.conv3 if hasattr(layer, "conv3") else layer.conv2).out_channels


class ViTBackbone(nn.Module):
    def __init__(self, net: VisionTransformer, cfg: FusionConfig):
        super().__init__()
        net.heads = nn.Identity()
        self.net = net
        self.feature_dim = net.hidden_dim
        self.fusion_dim = net.hidden_dim
        self.patch_size = net.patch_size
        # Learned positional slot for the ingredient token, zero at start.
        self.ingredient_pos = nn.Parameter(torch.zeros(net.hidden_dim))
        self.aux = None

    def tokens(self, x) -> TokenSequence:
        n = self.net
        x = n._process_input(x)
        cls = n.class_token.expand(x.shape[0], -1, -1)
        return TokenSequence(torch.cat([cls, x], dim=1))

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        enc = self.net.encoder
        pos = enc.pos_embedding
        if seq.has_ingredient:
            pos = extend_positions(pos, self.ingredient_pos.to(pos.dtype))
        return enc.ln(enc.layers(enc.dropout(seq.tokens + pos)))

    def forward(self, x, t=None, mask=None):
        seq = self.tokens(x)
        if t is None:
            return self.encode(seq)[:, 0], None
        if mask is None or bool(mask.all()):
            return self.encode(fuse_token(seq, t))[:, 0], None
        # Sequence lengths differ between fused and bypassed rows; LayerNorm
        # has no cross-batch coupling so the halves can run separately.
        out = torch.empty(x.shape[0], self.feature_dim, dtype=x.dtype, device=x.device)
        keep = ~mask
        fused_seq = TokenSequence(seq.tokens[mask])
        out[mask] = self.encode(fuse_token(fused_seq, t[mask]))[:, 0]
        if keep.any():
            out[keep] = self.encode(TokenSequence(seq.tokens[keep]))[:, 0]
        return out, None


def build_backbone(cfg: FusionConfig) -> nn.Module:
    net = _build_torchvision(cfg)
    if cfg.family == "vit":
        return ViTBackbone(net, cfg)
    return ConvBackbone(net, cfg)


# --------------------------------------------------------------------- heads


def make_head(in_dim: int, hidden: int = HIDDEN_WIDTH) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))


def head_forward(features: torch.Tensor, head: nn.Sequential) -> torch.Tensor:
    """Two-layer regressor: linear -> ReLU -> linear, one scalar per row."""
    first, _, second = head
    if features.shape[-1] != first.in_features:
        raise ShapeMismatchError(f"head expects {first.in_features} features, got {features.shape[-1]}")
    return second(torch.relu(first(features))).squeeze(-1)


class NutritionModel(nn.Module):
    """Backbone + ingredient projector + four nutrient heads.

    ``forward`` takes images in [0, 1] at the configured resolution and an
    optional (B, E) batch of aggregated ingredient embeddings. Rows whose
    ``mask`` entry is False bypass fusion entirely.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.projector = IngredientProjector(cfg.embed_dim, self.backbone.fusion_dim)
        self.heads = nn.ModuleDict({f: make_head(self.backbone.feature_dim) for f in FIELDS})
        self.aux_head = nn.Linear(768, len(FIELDS)) if self.backbone.aux is not None else None
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def features(self, images, ingredient_emb=None, mask=None):
        res = self.cfg.input_resolution
        if images.ndim != 4 or images.shape[-2:] != (res, res):
            raise ResolutionError(f"expected (B, 3, {res}, {res}) images, got {tuple(images.shape)}")
        x = (images.to(self.pixel_mean.dtype) - self.pixel_mean) / self.pixel_std
        t = None
        if ingredient_emb is not None:
            if mask is not None:
                mask = mask.to(torch.bool)
                if not mask.any():
                    ingredient_emb = None
                elif mask.all():
                    mask = None
        if ingredient_emb is not None:
            t = self.projector(ingredient_emb.to(x.dtype))
        return self.backbone(x, t, mask)

    def forward(self, images, ingredient_emb=None, mask=None):
        feats, aux_feat = self.features(images, ingredient_emb, mask)
        preds = torch.stack([head_forward(feats, self.heads[f]) for f in FIELDS], dim=1)
        if aux_feat is not None and self.training:
            return preds, self.aux_head(aux_feat)
        return preds


def nutrition_loss(preds: torch.Tensor, targets: torch.Tensor):
    """Sum over the four tasks of the per-task mean absolute error."""
    if preds.shape != targets.shape:
        raise LengthMismatchError(f"predictions {tuple(preds.shape)} vs targets {tuple(targets.shape)}")
    if preds.shape[0] == 0:
        raise LengthMismatchError("empty batch")
    per_task = (preds - targets).abs().mean(dim=0)
    return per_task.sum(), per_task


def compute_loss(preds: Sequence[NutritionPrediction], targets: Sequence[NutritionVector]):
    if len(preds) != len(targets):
        raise LengthMismatchError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise LengthMismatchError("empty batch")
    p = torch.tensor(np.stack([x.as_array() for x in preds]), dtype=torch.float64)
    y = torch.tensor(np.stack([x.as_array() for x in targets]), dtype=torch.float64)
    total, per_task = nutrition_loss(p, y)
    return float(total), tuple(float(v) for v in per_task)


# ---------------------------------------------------------------- estimator


@dataclass
class NutritionEstimator:
    """A model bundled with the embedder that feeds its projector."""

    model: NutritionModel | None
    embedder: IngredientEmbedder | None
    meta: dict = field(default_factory=dict)

    def _check(self):
        if self.model is None or self.embedder is None:
            raise UninitializedModelError("estimator has no model or embedder")
        if self.embedder.dim != self.model.cfg.embed_dim:
            raise ConfigMismatchError(
                f"embedder dim {self.embedder.dim} != model embed_dim {self.model.cfg.embed_dim}"
            )

    def embed_batch(self, ingredient_lists: Sequence[Sequence[str]]):
        dtype = next(self.model.parameters()).dtype
        emb = torch.zeros(len(ingredient_lists), self.model.cfg.embed_dim, dtype=dtype)
        mask = torch.zeros(len(ingredient_lists), dtype=torch.bool)
        for i, ings in enumerate(ingredient_lists):
            if ings:
                emb[i] = torch.from_numpy(aggregate_ingredients(list(ings), self.embedder)).to(dtype)
                mask[i] = True
        return emb, mask

    @torch.no_grad()
    def predict_batch(self, images: torch.Tensor, ingredient_lists) -> torch.Tensor:
        self._check()
        if len(ingredient_lists) != images.shape[0]:
            raise LengthMismatchError("one ingredient list per image required")
        self.model.eval()
        emb, mask = self.embed_batch(ingredient_lists)
        return self.model(images, emb, mask)

    def forward(self, image: torch.Tensor, ingredients: Sequence[str]) -> NutritionPrediction:
        self._check()
        if image.ndim != 3:
            raise ResolutionError(f"expected a single CHW image, got {tuple(image.shape)}")
        dtype = next(self.model.parameters()).dtype
        out = self.predict_batch(image.unsqueeze(0).to(dtype), [list(ingredients)])
        return NutritionPrediction.from_array(out[0].tolist())


def forward(image, ingredients, estimator: NutritionEstimator) -> NutritionPrediction:
    return estimator.forward(image, ingredients)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: NutritionModel, path, encoder_name: str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fusion": model.cfg.to_dict(),
        "embed_dim": model.cfg.embed_dim,
        "fusion_dim": model.backbone.fusion_dim,
        "encoder": encoder_name,
        **(extra or {}),
    }
    torch.save({"header": header, "state_dict": model.state_dict()}, path)
    return path


def read_checkpoint_header(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return blob["header"]


def load_checkpoint(path, fusion_config: FusionConfig | None = None, encoder_name: str | None = None):
    """Rebuild a model from ``path``; refuses headers that disagree with the
    requested fusion config or encoder."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    header = blob.get("header", {})
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ConfigMismatchError(f"{path}: unsupported checkpoint format {header.get('format')!r}/{header.get('version')!r}")
    stored = FusionConfig(**{**header["fusion"], "pretrained": False})
    if fusion_config is not None:
        mine = {**fusion_config.to_dict(), "pretrained": False}
        if mine != stored.to_dict():
            diff = sorted(k for k in mine if mine[k] != stored.to_dict()[k])
            raise ConfigMismatchError(f"{path}: checkpoint config differs in {diff}")
    if encoder_name is not None and header["encoder"] != encoder_name:
        raise ConfigMismatchError(f"{path}: trained with encoder {header['encoder']!r}, not {encoder_name!r}")
    model = NutritionModel(stored)
    model.load_state_dict(blob["state_dict"])
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype).eval()
    return model, header
