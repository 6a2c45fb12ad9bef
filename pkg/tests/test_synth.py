import json

import numpy as np
import pytest

from milaed.errors import InvalidConfig
from milaed.features import load_wav
from milaed.formats import parse_manifest
from milaed.synth import BASE_FREQS, SynthConfig, class_names, generate_synthetic, synth_clip


def _small(**kw):
    base = dict(n_clips=6, n_classes=3, seed=3, duration_s=2.0, burst_s=(0.5, 1.0))
    base.update(kw)
    return SynthConfig(**base)


def test_seeded_generation_is_byte_identical(tmp_path):
    generate_synthetic(_small(), tmp_path / "a")
    generate_synthetic(_small(), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 6 + 3
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    generate_synthetic(_small(seed=4), tmp_path / "c")
    assert (tmp_path / "a/clips/syn00000.wav").read_bytes() != (tmp_path / "c/clips/syn00000.wav").read_bytes()


def test_clip_format_and_splits(tmp_path):
    ms = generate_synthetic(_small(splits={"train": 4, "val": 2}), tmp_path)
    assert [len(ms[k]) for k in ("all", "train", "val")] == [6, 4, 2]
    m = parse_manifest(tmp_path / "train.jsonl")
    assert m.class_list == class_names(3) == ("tone440", "tone930", "tone1750")
    clip = load_wav(m.resolve(m.records[0]))
    assert clip.sample_rate == 16000 and clip.samples.size == 32000


def test_empty_clips_have_no_labels(tmp_path):
    ms = generate_synthetic(_small(p_empty=1.0), tmp_path)
    m = ms["all"]
    assert all(m.label_vector(r).sum() == 0 for r in m.records)


def test_sidecar_matches_labels_and_stays_out_of_manifest(tmp_path):
    generate_synthetic(_small(n_clips=20, max_distractors=2), tmp_path)
    m = parse_manifest(tmp_path / "manifest.jsonl")
    side = {r["id"]: r["events"] for r in map(json.loads, (tmp_path / "events.jsonl").read_text().splitlines())}
    assert "onset" not in (tmp_path / "manifest.jsonl").read_text()
    for rec in m.records:
        labelled = {e["class"] for e in side[rec.id] if e["class"] is not None}
        assert labelled == set(rec.labels)
        for e in side[rec.id]:
            assert 0 <= e["onset"] < e["offset"] <= 2.0
            if e["class"] is not None:
                k = class_names(3).index(e["class"])
                assert abs(e["freq"] / BASE_FREQS[k] - 1) <= 0.05


def test_event_energy_sits_at_class_frequency():
    cfg = SynthConfig(n_clips=4, n_classes=3, p_empty=0.0, p_extra=0.0, noise_db=-40, duration_s=4.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, classes, events = synth_clip(rng, cfg)
        spec = np.abs(np.fft.rfft(x))
        peak_hz = np.argmax(spec) * 16000 / len(x)
        assert abs(peak_hz / BASE_FREQS[classes[0]] - 1) <= 0.06


def test_imbalance_one_to_ten(tmp_path):
    cfg = SynthConfig(n_clips=200, n_classes=2, seed=0, imbalance=10, p_extra=0, p_empty=0, duration_s=2.0)
    expected = 200 / 11
    ms = generate_synthetic(cfg, tmp_path)
    minority = sum(ms["all"].label_vector(r)[1] for r in ms["all"].records)
    assert abs(minority - expected) <= 0.2 * expected
    # the sampling rule itself, averaged over seeds
    counts = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        c = SynthConfig(n_clips=200, n_classes=2, seed=seed, imbalance=10, p_extra=0, p_empty=0, duration_s=2.0)
        counts.append(sum(1 in synth_clip(rng, c)[1] for _ in range(200)))
    assert abs(np.mean(counts) - expected) <= 0.1 * expected


@pytest.mark.parametrize("kw", [dict(n_clips=3), dict(n_classes=6), dict(n_classes=0), dict(imbalance=0.5),
                                dict(p_extra=1.5), dict(splits={"train": 5}), dict(burst_s=(0.01, 0.5)),
                                dict(burst_s=(2.0, 1.0))])
def test_invalid_configs(kw):
    with pytest.raises(InvalidConfig):
        _small(**kw)


def test_from_dict_rejects_unknown_keys():
    assert SynthConfig.from_dict({"n_clips": 8}).n_clips == 8
    with pytest.raises(InvalidConfig):
        SynthConfig.from_dict({"n_clip": 8})
