"""On-disk formats: JSON Lines manifests, JSON model files, and the MILE embedding file.

MILE layout (little-endian)::

    "MILE"  u32 version=1  u32 dim  u32 clip_count
    per clip: u16 id_length, UTF-8 id, u32 instance_count,
              instance_count * dim float32
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    DuplicateId,
    MalformedLine,
    TruncatedFile,
    UnknownLabel,
    VersionMismatch,
)

# Warning and vehicle sound classes with their clip counts in the DCASE 2017
# task 4 subset of AudioSet, in table order.
DCASE17_CLASSES: tuple[tuple[str, int], ...] = (
    ("Car alarm", 273),
    ("Reversing beeps", 337),
    ("Air/Truck horn", 407),
    ("Train horn", 441),
    ("Ambulance siren", 624),
    ("Screaming", 744),
    ("Civil defense siren", 1506),
    ("Police siren", 2399),
    ("Fire engine siren", 2399),
    ("Skateboard", 1617),
    ("Bicycle", 2020),
    ("Train", 2301),
    ("Motorcycle", 3291),
    ("Car passing by", 3724),
    ("Bus", 3745),
    ("Truck", 7090),
    ("Car", 25744),
)
DCASE17_CLASS_LIST = tuple(name for name, _ in DCASE17_CLASSES)
DCASE17_COUNTS = dict(DCASE17_CLASSES)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    labels: tuple[str, ...]


@dataclass
class Manifest:
    records: list[ManifestRecord]
    class_list: tuple[str, ...] = DCASE17_CLASS_LIST
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def label_vector(self, rec: ManifestRecord) -> np.ndarray:
        v = np.zeros(len(self.class_list), dtype=np.int8)
        for lab in rec.labels:
            v[self.class_list.index(lab)] = 1
        return v

    def resolve(self, rec: ManifestRecord) -> Path:
        p = Path(rec.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def parse_manifest(path) -> Manifest:
    """Read a JSON Lines manifest.

    An optional first line ``{"class_list": [...]}`` fixes the label order;
    without it the 17 DCASE classes apply. Every other line is
    ``{"id": ..., "path": ..., "labels": [...]}``.
    """
    path = Path(path)
    class_list = DCASE17_CLASS_LIST
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(f"{path}:{lineno}: {e}") from None
            if not isinstance(obj, dict):
                raise MalformedLine(f"{path}:{lineno}: expected a JSON object")
            if "class_list" in obj:
                if records:
                    raise MalformedLine(f"{path}:{lineno}: class_list must precede records")
                class_list = tuple(str(c) for c in obj["class_list"])
                if len(set(class_list)) != len(class_list):
                    raise MalformedLine(f"{path}:{lineno}: duplicate class names")
                continue
            try:
                rid, rpath, labels = obj["id"], obj["path"], obj["labels"]
            except KeyError as e:
                raise MalformedLine(f"{path}:{lineno}: missing field {e}") from None
            if not isinstance(rid, str) or not isinstance(rpath, str) or not isinstance(labels, list):
                raise MalformedLine(f"{path}:{lineno}: bad field types")
            if rid in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {rid!r}")
            for lab in labels:
                if lab not in class_list:
                    raise UnknownLabel(f"{path}:{lineno}: unknown label {lab!r}")
            seen.add(rid)
            records.append(ManifestRecord(rid, rpath, tuple(labels)))
    return Manifest(records, class_list, path.parent)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"class_list": list(manifest.class_list)}) + "\n")
        for r in manifest.records:
            f.write(json.dumps({"id": r.id, "path": r.path, "labels": list(r.labels)}) + "\n")


# ---------------------------------------------------------------- model files

MODEL_FORMAT = "milaed-model"
MODEL_VERSION = 1


def _encode_array(a: np.ndarray, width: int) -> dict:
    dt = np.dtype(f"<f{width // 8}")
    return {
        "shape": list(a.shape),
        "width": width,
        "data": base64.b64encode(np.ascontiguousarray(a, dtype=dt).tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    if d["width"] not in (32, 64):
        raise VersionMismatch(f"unsupported float width {d['width']}")
    dt = np.dtype(f"<f{d['width'] // 8}")
    raw = base64.b64decode(d["data"], validate=True)
    return np.frombuffer(raw, dtype=dt).reshape(d["shape"]).astype(dt.newbyteorder("="))


def _digest(body: dict) -> str:
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class ModelFile:
    model: nn.Model
    class_list: tuple[str, ...]
    feature_config: dict | None = None  # None: the model consumes embeddings
    provenance: dict = field(default_factory=dict)


def save_model(path, mf: ModelFile, width: int | None = None) -> None:
    """Write a self-describing JSON model file.

    ``width`` defaults to 64 for trainable models and 32 for inference-only ones.
    """
    m = mf.model
    if width is None:
        width = 32 if m.dtype == np.float32 else 64
    if width not in (32, 64):
        raise ValueError("width must be 32 or 64")
    body = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "class_list": list(mf.class_list),
        "feature_config": mf.feature_config,
        "input_shape": list(m.input_shape),
        "layers": [s.to_dict() for s in m.specs],
        "params": [_encode_array(p, width) for p in m.params],
        "standardization": None
        if m.input_mean is None
        else {"mean": _encode_array(m.input_mean, width), "std": _encode_array(m.input_std, width)},
        "inference_only": bool(m.inference_only or width == 32),
        "seed": m.seed,
        "provenance": mf.provenance,
    }
    doc = {"checksum": _digest(body), **body}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> ModelFile:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ChecksumMismatch(f"{path}: not valid JSON ({e})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise VersionMismatch(f"{path}: not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatch(f"{path}: format version {doc.get('version')}, this build reads {MODEL_VERSION}")
    checksum = doc.pop("checksum", None)
    if checksum != _digest(doc):
        raise ChecksumMismatch(f"{path}: content digest does not match")

    specs = [nn.LayerSpec.from_dict(d) for d in doc["layers"]]
    params = tuple(_decode_array(d) for d in doc["params"])
    ref = nn.build_model(specs, seed=doc["seed"], input_shape=tuple(doc["input_shape"]))
    for want, got in zip(ref.params, params):
        if want.shape != got.shape:
            raise ChecksumMismatch(f"{path}: parameter shape {got.shape} != layer shape {want.shape}")
    std = doc["standardization"]
    model = nn.Model(
        specs=tuple(specs),
        params=params,
        input_shape=ref.input_shape,
        seed=doc["seed"],
        input_mean=None if std is None else _decode_array(std["mean"]),
        input_std=None if std is None else _decode_array(std["std"]),
        inference_only=doc["inference_only"],
    )
    return ModelFile(model, tuple(doc["class_list"]), doc["feature_config"], doc["provenance"])


# ---------------------------------------------------------------- MILE embeddings

MILE_MAGIC = b"MILE"
MILE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class EmbeddingSet:
    dim: int
    entries: dict[str, np.ndarray]  # clip id -> (n_instances, dim) float32, insertion ordered
    source: str = "trained"

    def __post_init__(self):
        for cid, v in self.entries.items():
            v = np.asarray(v, dtype=np.float32)
            if v.ndim != 2 or v.shape[1] != self.dim:
                raise DimMismatch(f"clip {cid!r}: vectors of shape {v.shape[1:]} in a dim-{self.dim} set")
            if not np.all(np.isfinite(v)):
                raise DimMismatch(f"clip {cid!r}: non-finite values")
            self.entries[cid] = v

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and list(self.entries) == list(other.entries)
            and all(self.entries[k].tobytes() == other.entries[k].tobytes() for k in self.entries)
        )


def encode_embeddings(es: EmbeddingSet) -> bytes:
    parts = [_HEADER.pack(MILE_MAGIC, MILE_VERSION, es.dim, len(es.entries))]
    for cid, vecs in es.entries.items():
        raw_id = cid.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise DimMismatch(f"clip id too long ({len(raw_id)} bytes)")
        parts.append(struct.pack("<H", len(raw_id)))
        parts.append(raw_id)
        parts.append(struct.pack("<I", len(vecs)))
        parts.append(np.ascontiguousarray(vecs, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_embeddings(data: bytes, source: str = "external") -> EmbeddingSet:
    if len(data) < 4 or data[:4] != MILE_MAGIC:
        raise BadMagic(f"expected magic {MILE_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile("header shorter than 16 bytes")
    _, version, dim, count = _HEADER.unpack_from(data)
    if version != MILE_VERSION:
        raise VersionMismatch(f"MILE version {version}, this build reads {MILE_VERSION}")
    pos = _HEADER.size
    entries: dict[str, np.ndarray] = {}

    def need(n, what):
        if pos + n > len(data):
            raise TruncatedFile(f"file ends inside {what} (need {n} bytes at offset {pos})")

    for k in range(count):
        need(2, f"id length of clip {k}")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(id_len, f"id of clip {k}")
        cid = data[pos : pos + id_len].decode("utf-8")
        pos += id_len
        need(4, f"instance count of clip {cid!r}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n * dim * 4 > len(data) and k == count - 1 and n and (len(data) - pos) % (4 * n) == 0:
            raise DimMismatch(
                f"clip {cid!r}: {n} vectors of {(len(data) - pos) // (4 * n)} floats, header dim is {dim}"
            )
        need(n * dim * 4, f"vectors of clip {cid!r}")
        vecs = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim)
        pos += n * dim * 4
        if cid in entries:
            raise DuplicateId(f"clip {cid!r} appears twice")
        entries[cid] = vecs.astype(np.float32)
    if pos != len(data):
        last = next(reversed(entries), None)
        raise DimMismatch(
            f"{len(data) - pos} trailing bytes after {count} clips (last clip {last!r}); "
            f"vector length disagrees with header dim {dim}"
        )
    return EmbeddingSet(dim, entries, source)


def write_embeddings(path, es: EmbeddingSet) -> None:
    Path(path).write_bytes(encode_embeddings(es))


def read_embeddings(path, source: str = "external") -> EmbeddingSet:
    return decode_embeddings(Path(path).read_bytes(), source)


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
