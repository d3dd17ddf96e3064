"""Dataset manifests: newline-delimited JSON with a header object.

The first line is a header ``{"name", "class_names", "schema_version",
"provenance"}``; every following line is one example record. Image pixels
live in PNG files referenced by (usually relative) path; records may instead
carry an inline tensor, which is convenient in tests but cannot be
serialized.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .configs import MANIFEST_SCHEMA_VERSION
from .errors import (
    IngestionError,
    ManifestParseError,
    ManifestValidationError,
    SamplingError,
)

SPLITS = ("train", "test_id", "test_ood")

_RECORD_FIELDS = ("example_id", "image_path", "caption", "label", "class_name",
                  "split", "source_dataset")


@dataclass
class ExampleRecord:
    """One labeled example; ``image`` is an optional inline (C, H, W) tensor."""

    example_id: str
    caption: str
    label: int
    class_name: str
    split: str
    source_dataset: str
    image_path: Optional[str] = None
    image: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name) for name in _RECORD_FIELDS}


@dataclass
class DatasetManifest:
    name: str
    class_names: tuple
    records: list
    provenance: dict = field(default_factory=dict)
    root: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        validate_manifest(self)

    def split_records(self, split: str) -> list:
        if split not in SPLITS:
            raise ManifestValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def resolve_path(self, record: ExampleRecord) -> Path:
        p = Path(record.image_path)
        if not p.is_absolute() and self.root:
            p = Path(self.root) / p
        return p


def validate_manifest(manifest: DatasetManifest) -> DatasetManifest:
    names = manifest.class_names
    if len(names) < 2:
        raise ManifestValidationError(
            f"manifest {manifest.name!r} needs at least 2 classes, got {len(names)}")
    if len(set(names)) != len(names):
        raise ManifestValidationError(f"manifest class names are not unique: {names}")
    seen: dict = {}
    for i, rec in enumerate(manifest.records):
        if rec.split not in SPLITS:
            raise ManifestValidationError(
                f"record {rec.example_id!r} has unknown split {rec.split!r}")
        if rec.class_name not in names:
            raise ManifestValidationError(
                f"record {rec.example_id!r} has unknown class {rec.class_name!r}")
        if rec.label != names.index(rec.class_name):
            raise ManifestValidationError(
                f"record {rec.example_id!r} label {rec.label} does not match "
                f"class {rec.class_name!r} (index {names.index(rec.class_name)})")
        if rec.example_id in seen:
            raise ManifestValidationError(
                f"duplicate example id {rec.example_id!r} (records {seen[rec.example_id]} "
                f"and {i})")
        seen[rec.example_id] = i
        if rec.image_path is None and rec.image is None:
            raise ManifestValidationError(
                f"record {rec.example_id!r} has neither image_path nor an inline image")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    for rec in manifest.records:
        if rec.image_path is None:
            raise ManifestValidationError(
                f"record {rec.example_id!r} has only an inline image and cannot be "
                f"serialized; write it to a file first")
    header = {
        "name": manifest.name,
        "class_names": list(manifest.class_names),
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "provenance": manifest.provenance,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    return path


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Parse a manifest file; parse errors carry the 1-based line number."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestParseError(f"{path}: line 1: empty manifest (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{path}: line 1: bad header: {exc}") from exc
    for key in ("name", "class_names", "schema_version"):
        if key not in header:
            raise ManifestParseError(f"{path}: line 1: header missing {key!r}")
    if header["schema_version"] != MANIFEST_SCHEMA_VERSION:
        raise ManifestParseError(
            f"{path}: manifest schema version {header['schema_version']} is not "
            f"the supported version {MANIFEST_SCHEMA_VERSION}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{path}: line {lineno}: {exc}") from exc
        missing = [k for k in _RECORD_FIELDS if k not in raw]
        if missing:
            raise ManifestParseError(
                f"{path}: line {lineno}: record missing fields {missing}")
        unknown = [k for k in raw if k not in _RECORD_FIELDS]
        if unknown:
            raise ManifestParseError(
                f"{path}: line {lineno}: unknown record fields {unknown}")
        records.append(ExampleRecord(**raw))
    manifest = DatasetManifest(
        name=header["name"],
        class_names=tuple(header["class_names"]),
        records=records,
        provenance=header.get("provenance", {}),
        root=str(path.parent),
    )
    if check_images:
        missing_paths = [
            str(manifest.resolve_path(rec)) for rec in records
            if rec.image_path is not None and not manifest.resolve_path(rec).exists()
        ]
        if missing_paths:
            raise IngestionError(
                f"{len(missing_paths)} referenced image file(s) missing: "
                + ", ".join(missing_paths[:8])
                + ("..." if len(missing_paths) > 8 else ""))
    return manifest


def load_image(record: ExampleRecord, manifest: DatasetManifest | None = None) -> torch.Tensor:
    """Pixels of one record as a float32 (C, H, W) tensor in [0, 1]."""
    if record.image is not None:
        return record.image.float()
    p = manifest.resolve_path(record) if manifest is not None else Path(record.image_path)
    if not p.exists():
        raise IngestionError(f"image file missing: {p}")
    with Image.open(p) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def sample_few_shot(manifest: DatasetManifest, shots: int, seed: int) -> DatasetManifest:
    """Subsample the train split to min(shots, n_c) per class, without replacement.

    Test splits pass through untouched. Deterministic given the seed and the
    manifest content; classes are visited in class-name order.
    """
    if shots < 1:
        raise SamplingError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    train = manifest.split_records("train")
    keep_ids = set()
    for cls in manifest.class_names:
        members = [r for r in train if r.class_name == cls]
        if not members:
            raise SamplingError(
                f"class {cls!r} has no train records to sample from")
        take = min(shots, len(members))
        chosen = rng.choice(len(members), size=take, replace=False)
        keep_ids.update(members[i].example_id for i in sorted(chosen.tolist()))
    records = [r for r in manifest.records
               if r.split != "train" or r.example_id in keep_ids]
    return DatasetManifest(
        name=manifest.name,
        class_names=manifest.class_names,
        records=records,
        provenance={**manifest.provenance,
                    "few_shot": {"shots": shots, "seed": seed}},
        root=manifest.root,
    )


def records_by_class(records, class_names) -> dict:
    out = {name: [] for name in class_names}
    for rec in records:
        out[rec.class_name].append(rec)
    return out


def manifest_fingerprint(manifest: DatasetManifest) -> str:
    """sha256 over the serialized records plus referenced image bytes."""
    import hashlib

    digest = hashlib.sha256()
    digest.update(json.dumps({
        "name": manifest.name,
        "class_names": list(manifest.class_names),
    }, sort_keys=True).encode())
    for rec in manifest.records:
        digest.update(json.dumps(rec.to_json_dict(), sort_keys=True).encode())
        if rec.image_path is not None:
            p = manifest.resolve_path(rec)
            if p.exists():
                digest.update(p.read_bytes())
    return digest.hexdigest()
