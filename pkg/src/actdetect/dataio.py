"""On-disk containers for activation volumes, predictions and label masks.

Container layout (bit-exact, language-neutral):

    magic "DAAC" | version 0x01 | u32-LE header length | UTF-8 JSON header |
    raw little-endian float32 payload, layer/channel/row-major

The JSON header is ``{"dtype": "f32", "layers": [{"name", "c", "h", "w"}],
"input_id": ..., "perturbation": ...}``; extra keys (e.g. "kind") are
preserved. Manifests are JSON files whose record paths are relative to the
manifest location.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import PAYLOAD_DTYPE

MAGIC = b"DAAC"
VERSION = 1

TRAIN = "train"
TEST = "test"
CLEAN = "none"


class FormatError(ValueError):
    """Bad magic bytes, unsupported version, or malformed header."""


class CorruptRecordError(ValueError):
    """Header and payload disagree (truncation, shape mismatch)."""


class SchemaMismatchError(ValueError):
    """Records of one dataset disagree on layer names/shapes."""


@dataclass
class ActivationRecord:
    """Per-input stack of channel maps recorded from the monitored network."""

    input_id: str
    perturbation: str
    layers: list[tuple[str, np.ndarray]]  # (name, (c, h, w) float32)
    extra: dict = field(default_factory=dict)

    def layer_schema(self):
        return tuple((name, vals.shape) for name, vals in self.layers)


def write_record(record: ActivationRecord, path) -> None:
    header = dict(record.extra)
    header.update(
        {
            "dtype": "f32",
            "layers": [
                {"name": name, "c": int(v.shape[0]), "h": int(v.shape[1]), "w": int(v.shape[2])}
                for name, v in record.layers
            ],
            "input_id": record.input_id,
            "perturbation": record.perturbation,
        }
    )
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, vals in record.layers:
            f.write(np.ascontiguousarray(vals, dtype="<f4").tobytes())


def read_record(path) -> ActivationRecord:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise FormatError(f"format error: bad magic bytes in {path}")
    if raw[4] != VERSION:
        raise FormatError(f"format error: unsupported version {raw[4]} in {path}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise CorruptRecordError(f"corrupt record: truncated header in {path}")
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"format error: unparseable header in {path}") from exc
    if header.get("dtype") != "f32":
        raise FormatError(f"format error: unsupported dtype {header.get('dtype')!r}")
    payload = raw[9 + hlen :]
    layers = []
    offset = 0
    for entry in header["layers"]:
        c, h, w = int(entry["c"]), int(entry["h"]), int(entry["w"])
        nbytes = c * h * w * 4
        if offset + nbytes > len(payload):
            raise CorruptRecordError(f"corrupt record: payload shorter than header shapes in {path}")
        vals = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(c, h, w)
        layers.append((entry["name"], vals.astype(PAYLOAD_DTYPE)))
        offset += nbytes
    if offset != len(payload):
        raise CorruptRecordError(f"corrupt record: {len(payload) - offset} trailing payload bytes in {path}")
    extra = {k: v for k, v in header.items() if k not in ("dtype", "layers", "input_id", "perturbation")}
    return ActivationRecord(
        input_id=header["input_id"],
        perturbation=header["perturbation"],
        layers=layers,
        extra=extra,
    )


@dataclass
class PredictionRecord:
    """Stack of T softmax maps (T, K, H, W); T=1 for MSP, T>1 for MC-dropout."""

    input_id: str
    softmax_maps: np.ndarray


def write_prediction(pred: PredictionRecord, path, perturbation: str = CLEAN) -> None:
    maps = np.asarray(pred.softmax_maps, dtype=PAYLOAD_DTYPE)
    record = ActivationRecord(
        input_id=pred.input_id,
        perturbation=perturbation,
        layers=[(f"pass{t}", maps[t]) for t in range(maps.shape[0])],
        extra={"kind": "prediction"},
    )
    write_record(record, path)


def read_prediction(path, tol: float = 1e-4) -> PredictionRecord:
    record = read_record(path)
    maps = np.stack([vals for _, vals in record.layers])
    sums = maps.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= tol):
        raise CorruptRecordError(f"corrupt record: per-pixel probabilities do not sum to 1 in {path}")
    return PredictionRecord(input_id=record.input_id, softmax_maps=maps)


@dataclass
class ManifestEntry:
    path: str
    input_id: str
    perturbation: str
    split: str


@dataclass
class Manifest:
    records: list[ManifestEntry]
    volume_dims: tuple[int, int, int]
    layer_selection: str = "everywhere"

    def entries(self, split=None, perturbation=None):
        out = self.records
        if split is not None:
            out = [e for e in out if e.split == split]
        if perturbation is not None:
            out = [e for e in out if e.perturbation == perturbation]
        return out


def build_manifest(records, split_rule: str, volume_dims, layer_selection: str = "everywhere", paths=None) -> Manifest:
    """Assign records to train/test splits.

    split_rule is either "clean_train" (all clean records train, everything
    else test) or "clean_holdout:F" (the last fraction F of clean records,
    in input order, joins the test split as negatives). Perturbed records
    always land in the test split; the train split never contains one.
    """
    records = list(records)
    if paths is None:
        paths = [f"{r.input_id}_{r.perturbation}.daac" for r in records]
    schemas = {r.layer_schema() for r in records}
    if len(schemas) > 1:
        raise SchemaMismatchError("schema mismatch: records disagree on layer names/shapes")

    holdout = 0.0
    if split_rule.startswith("clean_holdout:"):
        holdout = float(split_rule.split(":", 1)[1])
    elif split_rule != "clean_train":
        raise ValueError(f"unknown split rule {split_rule!r}")

    clean_idx = [i for i, r in enumerate(records) if r.perturbation == CLEAN]
    n_test_clean = int(round(holdout * len(clean_idx)))
    test_clean = set(clean_idx[len(clean_idx) - n_test_clean :])

    entries = []
    seen = set()
    for i, (rec, path) in enumerate(zip(records, paths)):
        if rec.perturbation != CLEAN or i in test_clean:
            split = TEST
        else:
            split = TRAIN
        key = (rec.input_id, split, rec.perturbation)
        if key in seen:
            raise ValueError(f"duplicate record {key}")
        seen.add(key)
        entries.append(ManifestEntry(path=str(path), input_id=rec.input_id, perturbation=rec.perturbation, split=split))
    return Manifest(records=entries, volume_dims=tuple(volume_dims), layer_selection=layer_selection)


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "volume_dims": list(manifest.volume_dims),
        "layer_selection": manifest.layer_selection,
        "records": [
            {"path": e.path, "input_id": e.input_id, "perturbation": e.perturbation, "split": e.split}
            for e in manifest.records
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def load_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return Manifest(
        records=[ManifestEntry(**e) for e in doc["records"]],
        volume_dims=tuple(doc["volume_dims"]),
        layer_selection=doc.get("layer_selection", "everywhere"),
    )


def manifest_dir(path) -> Path:
    return Path(path).resolve().parent


def synth_generate(rng, n_regular: int, n_anomalous: int, dims, shift: float, corr: float):
    """Desk-scale synthetic activation records with known labels.

    Regular records are draws from an equicorrelated Gaussian field: every
    voxel has unit variance and pairwise correlation `corr`. Anomalous
    records add a mean shift of `shift` on a fixed, seed-chosen 25% of
    voxels. Returns (records, labels) with label 1 marking anomalous.
    """
    H, W, L = (int(d) for d in dims)
    if H <= 0 or W <= 0 or L <= 0:
        raise ValueError("dims must be positive")
    if not (0.0 <= corr < 1.0):
        raise ValueError("corr must be in [0, 1)")
    n_vox = H * W * L
    shifted = rng.choice(n_vox, size=max(1, n_vox // 4), replace=False)
    mask = np.zeros(n_vox, dtype=np.float64)
    mask[shifted] = 1.0

    records, labels = [], []
    for i in range(n_regular + n_anomalous):
        anomalous = i >= n_regular
        eps = rng.standard_normal(n_vox)
        shared = rng.standard_normal()
        vals = np.sqrt(1.0 - corr) * eps + np.sqrt(corr) * shared
        if anomalous:
            vals = vals + shift * mask
        vol = vals.reshape(L, H, W).astype(PAYLOAD_DTYPE)
        records.append(
            ActivationRecord(
                input_id=f"synth{i:05d}",
                perturbation="synthetic_shift" if anomalous else CLEAN,
                layers=[("synth", vol)],
            )
        )
        labels.append(1 if anomalous else 0)
    return records, labels
