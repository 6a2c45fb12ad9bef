"""Synthetic weakly labeled tone corpus for desk-scale experiments.

Each positive class in a clip is realized as 1-3 tone bursts at a
class-specific base frequency over Gaussian noise. Only clip-level labels go
into the manifest; burst timings are written to a sidecar for diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .features import SAMPLE_RATE, write_wav
from .formats import Manifest, ManifestRecord, write_manifest

BASE_FREQS = (440.0, 930.0, 1750.0, 2900.0, 4400.0)
# unlabeled interferers sit between the class frequencies
DISTRACTOR_FREQS = (650.0, 1300.0, 2300.0, 3600.0, 5600.0)
FADE_S = 0.02


@dataclass
class SynthConfig:
    n_clips: int = 250
    n_classes: int = 3
    seed: int = 0
    noise_db: float = -30.0  # noise standard deviation in dBFS
    tone_db: float = -20.0  # tone peak amplitude in dBFS
    imbalance: float = 1.0  # most/least frequent class prior ratio
    p_extra: float = 0.3  # chance of a second labeled class
    p_empty: float = 0.1  # chance of a clip with no events
    max_distractors: int = 0
    burst_s: tuple[float, float] = (0.5, 1.5)  # burst duration range
    duration_s: float = 10.0
    splits: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_clips < 4:
            raise InvalidConfig(f"n_clips must be >= 4, got {self.n_clips}")
        if not 1 <= self.n_classes <= len(BASE_FREQS):
            raise InvalidConfig(f"n_classes must be in 1..{len(BASE_FREQS)}, got {self.n_classes}")
        if self.imbalance < 1:
            raise InvalidConfig("imbalance is a ratio >= 1")
        if not (0 <= self.p_extra <= 1 and 0 <= self.p_empty <= 1):
            raise InvalidConfig("p_extra and p_empty must be probabilities")
        if self.duration_s < 2:
            raise InvalidConfig("clips must be at least 2 s long")
        self.burst_s = tuple(float(v) for v in self.burst_s)
        lo, hi = self.burst_s
        if not 2 * FADE_S < lo <= hi <= self.duration_s:
            raise InvalidConfig(f"burst_s must satisfy {2 * FADE_S} < lo <= hi <= duration_s, got {self.burst_s}")
        if self.splits and sum(self.splits.values()) != self.n_clips:
            raise InvalidConfig(f"split sizes {self.splits} do not add up to n_clips={self.n_clips}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def class_priors(self) -> np.ndarray:
        c = self.n_classes
        if c == 1:
            return np.ones(1)
        w = self.imbalance ** (-np.arange(c) / (c - 1))
        return w / w.sum()


def class_names(n_classes: int) -> tuple[str, ...]:
    return tuple(f"tone{int(f)}" for f in BASE_FREQS[:n_classes])


def _burst(rng, freq, dur, n_total):
    n = int(round(dur * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    tone = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    nf = int(FADE_S * SAMPLE_RATE)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
    tone[:nf] *= ramp
    tone[-nf:] *= ramp[::-1]
    start = int(rng.integers(0, n_total - n + 1))
    return start, tone


def synth_clip(rng, cfg: SynthConfig):
    """One clip: (samples, sorted positive class indices, event annotations)."""
    n_total = int(round(cfg.duration_s * SAMPLE_RATE))
    noise_std = 10 ** (cfg.noise_db / 20)
    amp = 10 ** (cfg.tone_db / 20)
    x = rng.normal(0.0, noise_std, n_total)

    classes: list[int] = []
    if rng.random() >= cfg.p_empty:
        priors = cfg.class_priors()
        first = int(rng.choice(cfg.n_classes, p=priors))
        classes.append(first)
        if cfg.n_classes > 1 and rng.random() < cfg.p_extra:
            rest = priors.copy()
            rest[first] = 0
            classes.append(int(rng.choice(cfg.n_classes, p=rest / rest.sum())))

    events = []
    for c in sorted(classes):
        for _ in range(int(rng.integers(1, 4))):
            freq = BASE_FREQS[c] * (1 + rng.uniform(-0.05, 0.05))
            dur = rng.uniform(*cfg.burst_s)
            start, tone = _burst(rng, freq, dur, n_total)
            x[start : start + len(tone)] += amp * tone
            events.append({"class": c, "onset": start / SAMPLE_RATE, "offset": (start + len(tone)) / SAMPLE_RATE,
                           "freq": freq})
    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        freq = DISTRACTOR_FREQS[int(rng.integers(len(DISTRACTOR_FREQS)))] * (1 + rng.uniform(-0.05, 0.05))
        start, tone = _burst(rng, freq, rng.uniform(*cfg.burst_s), n_total)
        x[start : start + len(tone)] += amp * tone
        events.append({"class": None, "onset": start / SAMPLE_RATE, "offset": (start + len(tone)) / SAMPLE_RATE,
                       "freq": freq})
    return x, sorted(classes), events


def generate_synthetic(cfg: SynthConfig, out_dir) -> dict[str, Manifest]:
    """Write WAVs, manifests and the event sidecar under ``out_dir``.

    Returns the manifests by name: ``"all"`` plus one per configured split.
    """
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    names = class_names(cfg.n_classes)
    records = []
    with open(out / "events.jsonl", "w", encoding="utf-8") as side:
        for i in range(cfg.n_clips):
            cid = f"syn{i:05d}"
            x, classes, events = synth_clip(rng, cfg)
            rel = f"clips/{cid}.wav"
            write_wav(out / rel, x)
            records.append(ManifestRecord(cid, rel, tuple(names[c] for c in classes)))
            for ev in events:
                ev["class"] = None if ev["class"] is None else names[ev["class"]]
            side.write(json.dumps({"id": cid, "events": events}) + "\n")

    manifests = {"all": Manifest(records, names, out)}
    start = 0
    for split, n in cfg.splits.items():
        manifests[split] = Manifest(records[start : start + n], names, out)
        start += n
    for name, m in manifests.items():
        write_manifest(out / ("manifest.jsonl" if name == "all" else f"{name}.jsonl"), m)
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n")
    return manifests
