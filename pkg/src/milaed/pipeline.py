"""Glue between audio, features, embeddings and models shared by the CLI.

Instance features are rounded to float32, the precision they have on disk in
MILE files, so models see the same values whether features were cached or
computed on the fly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from . import nn
from .embed import bags_from_embeddings
from .errors import InvalidConfig
from .features import SAMPLE_RATE, FeatureConfig, load_wav, segment_features, split_segments
from .formats import EmbeddingSet, Manifest, ModelFile, load_model
from .mil import Bag, BagPrediction, StreamRecord, bag_forward, stream_tag


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def segment_vector(segment: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return _f32(segment_features(segment, cfg).ravel())


def clip_vectors(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return np.stack([segment_vector(s, cfg) for s in split_segments(samples, cfg)])


def feature_set(manifest: Manifest, cfg: FeatureConfig) -> EmbeddingSet:
    """Flattened per-instance log-mel features for every clip, as a MILE-ready set."""
    entries = {}
    for rec in manifest.records:
        clip = load_wav(manifest.resolve(rec))
        entries[rec.id] = clip_vectors(clip.samples, cfg)
    dim = int(np.prod(cfg.shape))
    return EmbeddingSet(dim, entries, "trained")


def manifest_bags(manifest: Manifest, cfg: FeatureConfig, cached: EmbeddingSet | None = None) -> list[Bag]:
    es = cached if cached is not None else feature_set(manifest, cfg)
    return bags_from_embeddings(es, manifest)


@dataclass
class Tagger:
    """Turns one-second segments into MIL instance inputs and scores them."""

    mil: ModelFile
    embedder: ModelFile | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.mil.feature_config is None and self.embedder is None:
            raise InvalidConfig("this model consumes embeddings; pass the embedding model too")

    @classmethod
    def from_files(cls, model_path, embed_model_path=None, threshold=0.5) -> "Tagger":
        return cls(load_model(model_path), load_model(embed_model_path) if embed_model_path else None, threshold)

    @property
    def feature_config(self) -> FeatureConfig:
        src = self.embedder if self.mil.feature_config is None else self.mil
        return FeatureConfig.from_dict(src.feature_config)

    @property
    def class_list(self):
        return self.mil.class_list

    def instance_input(self, segment: np.ndarray) -> np.ndarray:
        x = segment_vector(segment, self.feature_config)
        if self.mil.feature_config is None:
            x = _f32(nn.penultimate(self.embedder.model, x[None])[0])
        return x

    def instances(self, samples: np.ndarray) -> np.ndarray:
        return np.stack([self.instance_input(s) for s in split_segments(samples, self.feature_config)])

    def tag(self, clip_id: str, samples: np.ndarray) -> BagPrediction:
        bag = Bag(clip_id, self.instances(samples), np.zeros(self.mil.model.n_classes))
        return bag_forward(self.mil.model, bag)

    def stream(self, segments: Iterable[np.ndarray]) -> Iterator[StreamRecord]:
        return stream_tag(self.mil.model, (self.instance_input(s) for s in segments), self.threshold)


def pcm_segments(stream: BinaryIO | None = None, segment_length: int = SAMPLE_RATE) -> Iterator[np.ndarray]:
    """Read 16-bit little-endian mono PCM and yield segments as soon as they fill.

    At end of input a remainder of at least half a segment is zero-padded,
    shorter remainders are dropped, matching batch segmentation.
    """
    stream = stream if stream is not None else sys.stdin.buffer
    need = segment_length * 2
    buf = bytearray()
    while True:
        chunk = stream.read(need - len(buf))
        if not chunk:
            break
        buf += chunk
        if len(buf) == need:
            yield np.frombuffer(bytes(buf), dtype="<i2").astype(np.float64) / 32768.0
            buf.clear()
    rem = len(buf) // 2
    if rem * 2 >= segment_length:
        tail = np.frombuffer(bytes(buf[: rem * 2]), dtype="<i2").astype(np.float64) / 32768.0
        yield np.concatenate([tail, np.zeros(segment_length - rem)])
