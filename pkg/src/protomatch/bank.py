"""Prototype feature bank: build, persist, query.

Each known class is summarized by up to ``per_class_limit`` unit-normalized
embedding vectors, one per annotated object instance. An instance embedding
is the mean of the patch features selected by its mask, downsampled to the
token grid, then L2-normalized. Storing prototypes at unit norm makes the
matcher's dot products true cosine similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DimMismatchError,
    EmptySourceMaskError,
    EmptyTokenMaskError,
    HeaderParseError,
    NoInstancesForClassError,
    PayloadInvalidError,
    ShapeMismatchError,
    ToolkitError,
    ZeroVectorError,
)
from .extract import Backend, FeatureMap, features_for_record
from .tensor_io import DatasetManifest, read_container, read_mask, write_container

BANK_MAGIC = b"PBK1"
DEFAULT_PROTOTYPES_PER_CLASS = 20
UNIT_NORM_TOL = 1e-6


@dataclass(eq=False)
class BankClass:
    """One class entry: (count, dim) unit vectors plus (image_id, instance index) provenance."""

    name: str
    vectors: np.ndarray
    provenance: list[tuple[str, int]]

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])


@dataclass(eq=False)
class PrototypeBank:
    dim: int
    classes: list[BankClass]

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def validate_bank(bank: PrototypeBank) -> None:
    if bank.dim < 1 or not bank.classes:
        raise PayloadInvalidError("bank needs a positive dim and at least one class")
    for cls in bank.classes:
        if cls.vectors.ndim != 2 or cls.vectors.shape[0] < 1:
            raise PayloadInvalidError(f"class {cls.name!r} has no prototype vectors")
        if cls.vectors.shape[1] != bank.dim:
            raise DimMismatchError(
                f"class {cls.name!r} vectors have dim {cls.vectors.shape[1]}, bank dim is {bank.dim}"
            )
        norms = np.linalg.norm(cls.vectors.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL):
            raise PayloadInvalidError(f"class {cls.name!r} has non-unit prototype vectors")
        if len(cls.provenance) != cls.vectors.shape[0]:
            raise PayloadInvalidError(f"class {cls.name!r} provenance does not match vector count")


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Reduce an image-resolution mask to the token grid.

    A token is true when at least half of its patch pixels are foreground.
    If no token reaches that coverage but the region still holds foreground,
    the single token with the largest foreground count is set true so tiny
    objects stay usable. Pixels outside the token-covered region are
    ignored; missing pixels (mask smaller than the grid) count as
    background.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptySourceMaskError("source mask has no foreground pixels")
    region = np.zeros((grid_h * patch_size, grid_w * patch_size), dtype=bool)
    copy_h = min(mask.shape[0], region.shape[0])
    copy_w = min(mask.shape[1], region.shape[1])
    region[:copy_h, :copy_w] = mask[:copy_h, :copy_w]
    counts = region.reshape(grid_h, patch_size, grid_w, patch_size).sum(axis=(1, 3))
    if counts.max() == 0:
        raise EmptySourceMaskError("no foreground pixels inside the token-covered region")
    tokens = counts * 2 >= patch_size * patch_size
    if not tokens.any():
        tokens = np.zeros_like(tokens)
        tokens.flat[int(counts.argmax())] = True
    return tokens


def masked_mean_embedding(features: FeatureMap, token_mask: np.ndarray) -> np.ndarray:
    """Mean of the selected token vectors, L2-normalized, as float32.

    Averaging over the selected tokens and averaging the masked tensor over
    the whole grid differ only by a positive scalar, so they normalize to
    the same vector.
    """
    token_mask = np.asarray(token_mask, dtype=bool)
    if token_mask.shape != (features.grid_h, features.grid_w):
        raise ShapeMismatchError(
            f"token mask {token_mask.shape} does not match grid ({features.grid_h}, {features.grid_w})"
        )
    if not token_mask.any():
        raise EmptyTokenMaskError("token mask selects no tokens")
    mean = features.values[:, token_mask].astype(np.float64).mean(axis=1)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise ZeroVectorError("masked mean has near-zero norm; cannot normalize")
    return (mean / norm).astype(np.float32)


def build_bank(
    manifest: DatasetManifest,
    backend: Backend,
    per_class_limit: int = DEFAULT_PROTOTYPES_PER_CLASS,
) -> PrototypeBank:
    """Collect up to ``per_class_limit`` instance embeddings per class, in manifest order.

    Instances whose mask is empty (or degenerates to a zero embedding) are
    skipped; a class left with no usable instance raises
    NoInstancesForClassError so misconfigured manifests fail loudly.
    """
    if per_class_limit < 1:
        raise ConfigError("per_class_limit must be >= 1")
    vectors: dict[str, list[np.ndarray]] = {name: [] for name in manifest.class_list}
    provenance: dict[str, list[tuple[str, int]]] = {name: [] for name in manifest.class_list}
    dim: int | None = None

    for record in manifest.images:
        pending = [
            ref for ref in record.instance_masks if len(vectors[ref.class_name]) < per_class_limit
        ]
        if not pending:
            continue
        try:
            fmap = features_for_record(backend, record, manifest)
        except ToolkitError as exc:
            raise type(exc)(f"image {record.id!r}: {exc}") from exc
        if dim is None:
            dim = fmap.dim
        elif fmap.dim != dim:
            raise DimMismatchError(
                f"image {record.id!r} features have dim {fmap.dim}, earlier images had {dim}"
            )
        for index, ref in enumerate(record.instance_masks):
            if len(vectors[ref.class_name]) >= per_class_limit:
                continue
            try:
                mask = read_mask(manifest.resolve(ref.mask_path))
                token_mask = downsample_mask(mask, fmap.grid_h, fmap.grid_w, fmap.patch_size)
                embedding = masked_mean_embedding(fmap, token_mask)
            except (EmptySourceMaskError, ZeroVectorError):
                continue  # unusable instance, look for another one
            except ToolkitError as exc:
                raise type(exc)(f"image {record.id!r}: {exc}") from exc
            vectors[ref.class_name].append(embedding)
            provenance[ref.class_name].append((record.id, index))

    classes = []
    for name in manifest.class_list:
        if not vectors[name]:
            raise NoInstancesForClassError(f"class {name!r} has no usable instance in the manifest")
        classes.append(
            BankClass(name=name, vectors=np.stack(vectors[name]), provenance=provenance[name])
        )
    bank = PrototypeBank(dim=int(dim or 0), classes=classes)
    validate_bank(bank)
    return bank


# ---------------------------------------------------------------------------
# persistence (same container layout as feature tensors, magic "PBK1")
# ---------------------------------------------------------------------------

def save_bank(bank: PrototypeBank, path) -> None:
    validate_bank(bank)
    header = {
        "dim": int(bank.dim),
        "classes": [{"name": c.name, "count": c.count} for c in bank.classes],
        "provenance": [
            [[image_id, int(index)] for image_id, index in c.provenance] for c in bank.classes
        ],
    }
    payload = np.concatenate([np.ascontiguousarray(c.vectors, dtype="<f4").reshape(-1) for c in bank.classes])
    write_container(path, BANK_MAGIC, header, payload.tobytes())


def load_bank(path) -> PrototypeBank:
    header, payload = read_container(path, BANK_MAGIC)
    dim = header.get("dim")
    raw_classes = header.get("classes")
    raw_prov = header.get("provenance")
    if not isinstance(dim, int) or dim < 1 or not isinstance(raw_classes, list) or not raw_classes:
        raise HeaderParseError(f"{path}: bad bank header")
    counts = []
    for entry in raw_classes:
        if not isinstance(entry, dict) or not isinstance(entry.get("count"), int) or entry["count"] < 1:
            raise HeaderParseError(f"{path}: bad class entry in bank header")
        counts.append(entry["count"])
    total = sum(counts)
    if len(payload) != 4 * dim * total:
        raise DimMismatchError(
            f"{path}: payload holds {len(payload)} bytes but header declares {total} vectors of dim {dim}"
        )
    flat = np.frombuffer(payload, dtype="<f4").reshape(total, dim)
    if not isinstance(raw_prov, list) or len(raw_prov) != len(raw_classes):
        raise HeaderParseError(f"{path}: provenance does not match classes")
    classes = []
    offset = 0
    for entry, prov, count in zip(raw_classes, raw_prov, counts):
        vectors = flat[offset : offset + count].copy()
        offset += count
        classes.append(
            BankClass(
                name=str(entry["name"]),
                vectors=vectors,
                provenance=[(str(p[0]), int(p[1])) for p in prov],
            )
        )
    bank = PrototypeBank(dim=dim, classes=classes)
    validate_bank(bank)
    return bank
