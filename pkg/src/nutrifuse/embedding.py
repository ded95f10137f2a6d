"""Ingredient text embeddings, mean aggregation and the learnable projector."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigMismatchError,
    EmptyIngredientListError,
    EncoderUnavailableError,
    IngredientError,
    ShapeMismatchError,
)


class TextEncoder(ABC):
    """Frozen text encoder mapping strings to fixed-width float vectors."""

    name: str
    dim: int

    @abstractmethod
    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Return an array of shape ``(len(texts), dim)``."""

    def fingerprint(self) -> str:
        return self.name


class HashTextEncoder(TextEncoder):
    """Deterministic stand-in: each string maps to a pseudo-random unit vector
    seeded by its SHA-256 digest. Distinct strings give (almost surely)
    distinct, nearly orthogonal vectors."""

    def __init__(self, dim: int = 64, salt: str = ""):
        self.dim = dim
        self.salt = salt
        self.name = f"hash-{dim}" + (f"-{salt}" if salt else "")

    def encode(self, texts):
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.sha256((self.salt + "\x00" + text).encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class ClipTextEncoder(TextEncoder):
    """Text tower of a pretrained CLIP checkpoint from ``transformers``.

    Weights load lazily on first use; any failure there (missing package,
    no network, unknown checkpoint) surfaces as EncoderUnavailableError.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        self.model_name = model_name
        self.name = f"clip:{model_name}"
        self.device = device
        self._model = None
        self._tokenizer = None
        self._lock = threading.Lock()

    def _load(self):
        with self._lock:
            if self._model is not None:
                return
            try:
                from transformers import CLIPModel, CLIPTokenizer

                self._tokenizer = CLIPTokenizer.from_pretrained(self.model_name)
                model = CLIPModel.from_pretrained(self.model_name).to(self.device).eval()
            except Exception as exc:  # noqa: BLE001 - any loader failure means unavailable
                raise EncoderUnavailableError(f"cannot load {self.model_name}: {exc}") from exc
            for p in model.parameters():
                p.requires_grad_(False)
            self._model = model

    @property
    def dim(self) -> int:
        self._load()
        return int(self._model.config.projection_dim)

    @torch.no_grad()
    def encode(self, texts):
        self._load()
        batch = self._tokenizer(list(texts), padding=True, return_tensors="pt").to(self.device)
        feats = self._model.get_text_features(**batch)
        if not isinstance(feats, torch.Tensor):  # newer transformers return an output object
            feats = feats.pooler_output
        return feats.float().cpu().numpy()

    def fingerprint(self) -> str:
        self._load()
        h = hashlib.sha256()
        for name, p in sorted(self._model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


_MAGIC = b"NFEMB\x00\x01\x00"


class EmbeddingCache:
    """String -> vector table, optionally persisted to a binary file.

    Layout: magic, uint32 dim, uint32 encoder-name length, encoder name,
    uint32 count, then per entry uint32 key length, utf-8 key, dim float32.
    """

    def __init__(self, dim: int, encoder_name: str, path: str | Path | None = None):
        self.dim = dim
        self.encoder_name = encoder_name
        self.path = Path(path) if path else None
        self._table: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._table = self._read(self.path)

    def __contains__(self, key: str) -> bool:
        return key in self._table

    def __len__(self) -> int:
        return len(self._table)

    def get(self, key: str) -> np.ndarray | None:
        return self._table.get(key)

    def put(self, key: str, vec: np.ndarray) -> np.ndarray:
        with self._lock:
            # First writer wins so repeated lookups stay bitwise stable.
            return self._table.setdefault(key, np.asarray(vec, dtype=np.float32).copy())

    def keys(self):
        return list(self._table)

    def _read(self, path: Path) -> dict[str, np.ndarray]:
        data = path.read_bytes()
        if data[:8] != _MAGIC:
            raise ConfigMismatchError(f"{path} is not an embedding cache")
        off = 8
        dim, name_len = struct.unpack_from("<II", data, off)
        off += 8
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        if dim != self.dim or name != self.encoder_name:
            raise ConfigMismatchError(
                f"{path} holds {name!r} vectors of dim {dim}, expected {self.encoder_name!r}/{self.dim}"
            )
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        table = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, off)
            off += 4
            key = data[off : off + klen].decode("utf-8")
            off += klen
            table[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
        return table

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.path
        if path is None:
            raise ValueError("no cache path configured")
        path.parent.mkdir(parents=True, exist_ok=True)
        name = self.encoder_name.encode("utf-8")
        with self._lock:
            items = sorted(self._table.items())
        chunks = [_MAGIC, struct.pack("<II", self.dim, len(name)), name, struct.pack("<I", len(items))]
        for key, vec in items:
            kb = key.encode("utf-8")
            chunks += [struct.pack("<I", len(kb)), kb, vec.astype("<f4").tobytes()]
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
        return path


class IngredientEmbedder:
    """Caching front-end over a :class:`TextEncoder`."""

    def __init__(self, encoder: TextEncoder, cache_path=None, l2_normalize: bool = False):
        self.encoder = encoder
        self.l2_normalize = l2_normalize
        self.cache = EmbeddingCache(encoder.dim, encoder.name, cache_path)

    @property
    def dim(self) -> int:
        return self.cache.dim

    def embed(self, name: str) -> np.ndarray:
        if not name:
            raise IngredientError("ingredient name must be non-empty")
        hit = self.cache.get(name)
        if hit is not None:
            return hit
        return self.cache.put(name, self.encoder.encode([name])[0])

    def warm(self, names) -> int:
        todo = sorted({n for n in names if n and n not in self.cache})
        if todo:
            for name, vec in zip(todo, self.encoder.encode(todo)):
                self.cache.put(name, vec)
        return len(todo)

    def aggregate(self, ingredients: Sequence[str]) -> np.ndarray:
        return aggregate_ingredients(ingredients, self)


def embed_ingredient(name: str, embedder: IngredientEmbedder) -> np.ndarray:
    return embedder.embed(name)


def aggregate_ingredients(ingredients: Sequence[str], embedder: IngredientEmbedder) -> np.ndarray:
    """Mean of the per-ingredient embeddings, accumulated in float64."""
    if len(ingredients) == 0:
        raise EmptyIngredientListError("cannot aggregate an empty ingredient list")
    vecs = np.stack([embedder.embed(i) for i in ingredients]).astype(np.float64)
    if embedder.l2_normalize:
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    # Sorting makes the float summation order, and so the result, permutation invariant.
    order = np.lexsort(vecs.T[::-1])
    return vecs[order].sum(axis=0) / len(ingredients)


@dataclass
class ProjectorParams:
    weight: torch.Tensor  # (C, E)
    bias: torch.Tensor  # (C,)


def project_ingredient_feature(t, params: ProjectorParams) -> torch.Tensor:
    """ReLU(W t + b) for a single vector or a batch of row vectors."""
    t = torch.as_tensor(t, dtype=params.weight.dtype)
    if params.weight.ndim != 2 or params.bias.shape != (params.weight.shape[0],):
        raise ShapeMismatchError(f"bad projector shapes {tuple(params.weight.shape)}, {tuple(params.bias.shape)}")
    if t.shape[-1] != params.weight.shape[1]:
        raise ShapeMismatchError(f"embedding dim {t.shape[-1]} != projector input {params.weight.shape[1]}")
    return torch.relu(t @ params.weight.T + params.bias)


class IngredientProjector(nn.Module):
    def __init__(self, embed_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(embed_dim, out_dim)

    def params(self) -> ProjectorParams:
        return ProjectorParams(self.linear.weight, self.linear.bias)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return project_ingredient_feature(t, self.params())
