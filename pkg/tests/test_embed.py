import numpy as np
import pytest

from conftest import toy_bags
from milaed import nn
from milaed.embed import (
    EmbeddingModelConfig,
    bags_from_embeddings,
    extract_embeddings,
    ingest_external,
    train_embedding_model,
)
from milaed.errors import IncompatibleDims, MissingClip
from milaed.features import EMBED_FEATURES, AudioClip, extract_instances
from milaed.formats import EmbeddingSet, Manifest, ManifestRecord, write_embeddings
from milaed.mil import Bag, TrainConfig, validation_f1


def small_cfg(n_classes=3, dim=16):
    return EmbeddingModelConfig(n_classes, input_shape=(12,), embed_dim=dim,
                                backbone=(nn.dense(12, 24), nn.RELU, nn.dense(24, dim), nn.RELU))


def test_default_model_shapes():
    cfg = EmbeddingModelConfig(17)
    m = cfg.build(0)
    assert m.input_shape == EMBED_FEATURES.shape == (128, 98, 1)
    shapes = nn.layer_shapes(m.specs, m.input_shape)
    assert shapes[-2] == (512,) and shapes[-1] == (17,)
    clip = AudioClip("c", np.random.default_rng(0).normal(0, 0.1, 160000))
    inst = np.stack([x.ravel() for x in extract_instances(clip, EMBED_FEATURES)])
    es = extract_embeddings(m, [Bag("c", inst, np.zeros(17))])
    assert es.entries["c"].shape == (10, 512) and es.entries["c"].dtype == np.float32


def test_backbone_width_must_match():
    bad = EmbeddingModelConfig(3, input_shape=(12,), embed_dim=16, backbone=(nn.dense(12, 8), nn.RELU))
    with pytest.raises(IncompatibleDims):
        bad.build(0)


def test_identical_instances_identical_vectors():
    m = small_cfg().build(1)
    x = np.random.default_rng(0).normal(size=(1, 12))
    es = extract_embeddings(m, [Bag("a", np.repeat(x, 3, axis=0), [0, 1, 0]), Bag("b", x, [0, 0, 0])])
    v = es.entries["a"]
    assert v[0].tobytes() == v[1].tobytes() == v[2].tobytes() == es.entries["b"][0].tobytes()
    again = extract_embeddings(m, [Bag("b", x, [0, 0, 0])])
    assert again.entries["b"].tobytes() == es.entries["b"].tobytes()


def test_embeddings_ignore_head():
    m = small_cfg().build(2)
    bags = toy_bags(3)
    rng = np.random.default_rng(1)
    head = [rng.normal(size=m.params[-2].shape), rng.normal(size=m.params[-1].shape)]
    m2 = m.with_params(list(m.params[:-2]) + head)
    assert extract_embeddings(m, bags) == extract_embeddings(m2, bags)


def test_training_selects_with_max_pooling(tmp_path):
    bags, val = toy_bags(60), toy_bags(20, seed=1, prefix="v")
    cfg = small_cfg()
    res = train_embedding_model(bags, val, cfg, TrainConfig(epochs=4, lr=3e-3, selection_pooling="mean"),
                                log_path=tmp_path / "log.jsonl")
    assert all(r["pooling"] == "max" for r in res.log)
    untrained = nn.fit_standardization(cfg.build(0), np.concatenate([b.instances for b in bags]))
    assert res.best_metric >= validation_f1(untrained, val, "max")
    assert res.model.input_mean is not None


def test_single_class_loss_decreases():
    rng = np.random.default_rng(0)
    bags = [Bag(f"b{i}", rng.normal(1.0, 1.0, size=(5, 12)), [1]) for i in range(40)]
    res = train_embedding_model(bags, bags[:8], small_cfg(n_classes=1), TrainConfig(epochs=5, lr=1e-3))
    losses = [r["train_loss"] for r in res.log]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_external_ingest_and_bags(tmp_path):
    es = EmbeddingSet(128, {"x": np.ones((10, 128), np.float32), "y": np.zeros((3, 128), np.float32)})
    write_embeddings(tmp_path / "e.mile", es)
    back = ingest_external(tmp_path / "e.mile")
    assert back == es and back.source == "external" and back.dim == 128
    m = Manifest([ManifestRecord("x", "x.wav", ("b",)), ManifestRecord("y", "y.wav", ())], ("a", "b"))
    bags = bags_from_embeddings(back, m)
    assert len(bags[0]) == 10 and list(bags[0].labels) == [0, 1]
    m2 = Manifest(m.records + [ManifestRecord("zz", "z.wav", ())], ("a", "b"))
    with pytest.raises(MissingClip, match="zz"):
        bags_from_embeddings(back, m2)
    assert len(ingest_external_empty(tmp_path)) == 0


def ingest_external_empty(tmp_path):
    write_embeddings(tmp_path / "empty.mile", EmbeddingSet(128, {}))
    return ingest_external(tmp_path / "empty.mile")
