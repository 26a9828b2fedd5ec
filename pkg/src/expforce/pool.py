"""Experience pool: record schema, manifest persistence, fold partitioning.

A pool is a directory holding a `pool.manifest` plus an `images/` subtree.
The manifest is JSON-lines: a header line `{"manifest_version": 1}` followed
by one sorted-key JSON object per record. That keeps the format diffable,
lossless for floats, and byte-stable under load/save round-trips.

Records do not carry a provenance flag (for example which entries were
measured through teleoperation); provenance plays no role in retrieval or
evaluation, so it stays out of the schema on purpose.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath

import numpy as np

from .errors import (
    DanglingImageRef,
    DuplicateId,
    InvalidArgument,
    IoFailure,
    MissingManifest,
    SchemaViolation,
    TooFewRecords,
)

MANIFEST_NAME = "pool.manifest"
IMAGES_DIR = "images"
MANIFEST_VERSION = 1

FORCE_GRID_N = 0.25
GRID_ABS_TOL = 1e-9

_RECORD_FIELDS = ("id", "name", "mass_kg", "description", "image_ref", "f_star_n", "category")


class Category(str, Enum):
    BOTTLES = "Bottles"
    CYLINDERS = "Cylinders"
    CUBOIDS = "Cuboids"
    FRAGILE_HEAVY = "FragileHeavy"
    FRAGILE_LIGHT = "FragileLight"
    ODD_SHAPES = "OddShapes"


def on_force_grid(value: float, grid: float = FORCE_GRID_N, tol: float = GRID_ABS_TOL) -> bool:
    """True when value sits on the force grid within absolute tolerance."""
    return abs(value - round(value / grid) * grid) <= tol


@dataclass(frozen=True)
class ExperienceRecord:
    """One prior grasp: what the object was and what force finally lifted it."""

    id: str
    name: str
    mass_kg: float
    description: str
    image_ref: str
    f_star_n: float
    category: Category

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise SchemaViolation(str(self.id), "id", "must be a non-empty string")
        if not isinstance(self.name, str) or not self.name:
            raise SchemaViolation(self.id, "name", "must be a non-empty string")
        if isinstance(self.mass_kg, bool) or not isinstance(self.mass_kg, (int, float)):
            raise SchemaViolation(self.id, "mass_kg", "must be a number")
        if not (self.mass_kg >= 0.0) or not np.isfinite(self.mass_kg):
            raise SchemaViolation(self.id, "mass_kg", "must be a finite non-negative number")
        if not isinstance(self.description, str):
            raise SchemaViolation(self.id, "description", "must be a string")
        if not isinstance(self.image_ref, str) or not self.image_ref:
            raise SchemaViolation(self.id, "image_ref", "must be a non-empty string")
        if PurePosixPath(self.image_ref).is_absolute():
            raise SchemaViolation(self.id, "image_ref", "must be a pool-relative path")
        if isinstance(self.f_star_n, bool) or not isinstance(self.f_star_n, (int, float)):
            raise SchemaViolation(self.id, "f_star_n", "must be a number")
        if not np.isfinite(self.f_star_n) or self.f_star_n < FORCE_GRID_N - GRID_ABS_TOL:
            raise SchemaViolation(self.id, "f_star_n", f"must be >= {FORCE_GRID_N}")
        if not on_force_grid(self.f_star_n):
            raise SchemaViolation(
                self.id, "f_star_n", f"must be an exact multiple of {FORCE_GRID_N} N")
        if not isinstance(self.category, Category):
            raise SchemaViolation(self.id, "category", "must be a Category")
        object.__setattr__(self, "mass_kg", float(self.mass_kg))
        object.__setattr__(self, "f_star_n", float(self.f_star_n))

    def to_manifest_line(self) -> str:
        body = {
            "id": self.id,
            "name": self.name,
            "mass_kg": self.mass_kg,
            "description": self.description,
            "image_ref": self.image_ref,
            "f_star_n": self.f_star_n,
            "category": self.category.value,
        }
        return json.dumps(body, sort_keys=True, ensure_ascii=True, separators=(", ", ": "))


@dataclass(frozen=True)
class Pool:
    """An immutable, ordered collection of records with unique ids."""

    records: tuple[ExperienceRecord, ...]
    manifest_version: int = MANIFEST_VERSION
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        index: dict[str, ExperienceRecord] = {}
        for rec in self.records:
            if rec.id in index:
                raise DuplicateId(rec.id)
            index[rec.id] = rec
        object.__setattr__(self, "_by_id", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def by_id(self, record_id: str) -> ExperienceRecord:
        try:
            return self._by_id[record_id]
        except KeyError:
            raise InvalidArgument(f"no record with id {record_id!r}") from None


def _parse_record(obj, lineno: int) -> ExperienceRecord:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"line {lineno}", "record", "record line must be a JSON object")
    rid = obj.get("id")
    label = rid if isinstance(rid, str) and rid else f"line {lineno}"
    missing = [k for k in _RECORD_FIELDS if k not in obj]
    if missing:
        raise SchemaViolation(label, missing[0], "missing field")
    extra = [k for k in obj if k not in _RECORD_FIELDS]
    if extra:
        raise SchemaViolation(label, extra[0], "unknown field")
    raw_category = obj["category"]
    try:
        category = Category(raw_category)
    except ValueError:
        raise SchemaViolation(label, "category", f"unknown category {raw_category!r}") from None
    return ExperienceRecord(
        id=obj["id"],
        name=obj["name"],
        mass_kg=obj["mass_kg"],
        description=obj["description"],
        image_ref=obj["image_ref"],
        f_star_n=obj["f_star_n"],
        category=category,
    )


def load_pool(path: str | Path) -> Pool:
    """Load and fully validate a pool directory.

    Raises:
        MissingManifest: no pool.manifest under path.
        SchemaViolation / DuplicateId: malformed header or record.
        DanglingImageRef: a record's image file is absent.
    """
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} under {root}")
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest}: {exc}") from exc

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaViolation("<header>", "manifest_version", "manifest is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaViolation("<header>", "manifest_version", f"invalid JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("manifest_version"), int):
        raise SchemaViolation("<header>", "manifest_version", "missing integer manifest_version")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"line {lineno}", "record", f"invalid JSON: {exc}") from None
        rec = _parse_record(obj, lineno)
        if not (root / rec.image_ref).is_file():
            raise DanglingImageRef(rec.id, rec.image_ref)
        records.append(rec)
    return Pool(tuple(records), manifest_version=header["manifest_version"])


def save_pool(pool: Pool, path: str | Path) -> None:
    """Write the manifest under path. Image files are the caller's business.

    Duplicate ids cannot occur here: Pool construction already rejects them.
    """
    root = Path(path)
    lines = [json.dumps({"manifest_version": pool.manifest_version})]
    lines.extend(rec.to_manifest_line() for rec in pool.records)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest under {root}: {exc}") from exc


def load_image(root: str | Path, record: ExperienceRecord) -> bytes:
    path = Path(root) / record.image_ref
    try:
        return path.read_bytes()
    except OSError:
        raise DanglingImageRef(record.id, record.image_ref) from None


def pool_digest(root: str | Path) -> str:
    """Digest of manifest plus image bytes, in manifest order.

    Changes whenever anything result-affecting about the pool changes.
    """
    root = Path(root)
    pool = load_pool(root)
    h = hashlib.sha256()
    h.update((root / MANIFEST_NAME).read_bytes())
    for rec in pool.records:
        h.update(load_image(root, rec))
    return h.hexdigest()


def partition_folds(pool: Pool, n_folds: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Seeded disjoint folds for cross-validation.

    Returns one (query_ids, pool_ids) pair per fold, both in manifest order.
    Every record appears in exactly one query list, and never in its own
    fold's pool list. Remainder records go to the earliest folds, so sizes
    differ by at most one.
    """
    if n_folds < 2:
        raise InvalidArgument("n_folds must be at least 2")
    ids = pool.ids()
    if len(ids) < n_folds:
        raise TooFewRecords(f"{len(ids)} records cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    base, rem = divmod(len(ids), n_folds)
    folds = []
    start = 0
    for f in range(n_folds):
        size = base + (1 if f < rem else 0)
        members = set(shuffled[start:start + size])
        start += size
        query_ids = [rid for rid in ids if rid in members]
        pool_ids = [rid for rid in ids if rid not in members]
        folds.append((query_ids, pool_ids))
    return folds
