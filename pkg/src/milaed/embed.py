"""Audio embeddings: a frame-wise classifier trained on weak clip labels whose
penultimate activations become the instance features for MIL."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn
from .errors import IncompatibleDims, MissingClip, ShapeMismatch
from .features import EMBED_FEATURES
from .formats import EmbeddingSet, Manifest, read_embeddings
from .mil import Bag, TrainConfig, TrainResult, fit


def default_backbone(input_shape, embed_dim: int = 512) -> list[nn.LayerSpec]:
    h, w, c = input_shape
    # pool before ReLU: same function as ReLU-then-pool, without all-zero window ties
    conv = [nn.maxpool2d(2, 2), nn.conv2d(c, 8, 5, 5), nn.maxpool2d(3, 3), nn.RELU, nn.FLATTEN]
    flat = ((h // 2 - 4) // 3) * ((w // 2 - 4) // 3) * 8
    return conv + [nn.dense(flat, embed_dim), nn.RELU]


@dataclass(frozen=True)
class EmbeddingModelConfig:
    n_classes: int
    input_shape: tuple[int, ...] = EMBED_FEATURES.shape
    embed_dim: int = 512
    backbone: tuple[nn.LayerSpec, ...] | None = None

    def specs(self) -> list[nn.LayerSpec]:
        backbone = list(self.backbone) if self.backbone else default_backbone(self.input_shape, self.embed_dim)
        return backbone + [nn.dense(self.embed_dim, self.n_classes)]

    def build(self, seed: int = 0) -> nn.Model:
        model = nn.build_model(self.specs(), seed=seed, input_shape=self.input_shape)
        width = nn.layer_shapes(model.specs, model.input_shape)[-2]
        if width != (self.embed_dim,):
            raise IncompatibleDims(f"backbone ends in {width}, expected an embedding of {self.embed_dim}")
        return model


def framewise_batch_gradient(model: nn.Model, bags: Sequence[Bag], w: np.ndarray):
    """Every instance is trained toward its clip's full label vector."""
    x = np.concatenate([b.instances for b in bags])
    y = np.concatenate([np.repeat(b.labels[None].astype(np.float64), len(b), axis=0) for b in bags])
    z, cache = nn.forward_logits(model, x)
    n = len(x)
    loss = float(np.sum(w * -(y * nn.log_sigmoid(z) + (1 - y) * nn.log_sigmoid(-z)))) / n
    grads = nn.backward(model, cache, w * (nn.sigmoid(z) - y) / n)
    return loss, grads.params


def train_embedding_model(
    bags: Sequence[Bag],
    val: Sequence[Bag],
    cfg: EmbeddingModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    log_path=None,
) -> TrainResult:
    """Frame-wise training on weak labels, selected by max-pooled clip predictions."""
    model = cfg.build(train_cfg.seed)
    if bags:
        model = nn.fit_standardization(model, np.concatenate([b.instances for b in bags]))
    train_cfg = replace(train_cfg, selection_pooling="max")
    return fit(model, bags, val, train_cfg, framewise_batch_gradient, log_path)


def extract_embeddings(model: nn.Model, bags: Sequence[Bag]) -> EmbeddingSet:
    """Penultimate activations per instance, one forward per instance."""
    entries = {}
    dim = None
    for bag in bags:
        vecs = np.concatenate([nn.penultimate(model, x[None]) for x in bag.instances])
        dim = vecs.shape[1]
        entries[bag.id] = vecs.astype(np.float32)
    if dim is None:
        dim = nn.layer_shapes(model.specs, model.input_shape)[-2][0]
    return EmbeddingSet(dim, entries, "trained")


def ingest_external(path) -> EmbeddingSet:
    return read_embeddings(path, source="external")


def bags_from_embeddings(es: EmbeddingSet, manifest: Manifest) -> list[Bag]:
    missing = [r.id for r in manifest.records if r.id not in es.entries]
    if missing:
        raise MissingClip(f"{len(missing)} manifest clips have no embeddings: {', '.join(missing)}")
    bags = []
    for rec in manifest.records:
        vecs = es.entries[rec.id]
        if len(vecs) == 0:
            raise ShapeMismatch(f"clip {rec.id!r} has no embedding vectors")
        bags.append(Bag(rec.id, vecs.astype(np.float64), manifest.label_vector(rec)))
    return bags
