"""On-disk formats: feature tensors, masks, label maps, dataset manifests.

Feature tensors use a small self-describing container (magic ``PFT1``):

    bytes 0..4    magic
    bytes 4..12   header length, unsigned 64-bit little-endian
    then          UTF-8 JSON header, keys emitted in sorted order
    then          raw float32 payload, little-endian, C order
                  (embedding dimension outermost, then rows, then columns)

The header carries ``{dtype: "f32", shape: [D, h, w], image_id,
extractor_id, patch_size}``. Writes are byte-deterministic so repeated
exports of the same tensor can be compared with a plain file hash; readers
reject NaN/Inf payloads because all downstream cosine math assumes finite
values.

Masks are 8-bit grayscale PNGs (nonzero pixel = foreground). Label maps are
single-channel 8- or 16-bit PNGs whose pixel values are class ids, with 255
reserved as the ignore id. Manifests are UTF-8 JSON documents listing the
class inventory and per-image resources; all paths are relative to the
manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadMagicError,
    DecodeError,
    HeaderParseError,
    IoFailureError,
    MissingPathError,
    PayloadInvalidError,
    PayloadSizeMismatchError,
    UnknownClassNameError,
)
from .extract import FeatureMap

FEATURE_MAGIC = b"PFT1"
IGNORE_ID = 255


# ---------------------------------------------------------------------------
# container plumbing (shared with the prototype bank format)
# ---------------------------------------------------------------------------

def write_container(path: Path | str, magic: bytes, header: dict, payload: bytes) -> None:
    """Write a magic + u64 header length + sorted-key JSON + payload file."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def read_container(path: Path | str, magic: bytes) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if 12 + header_len > len(data):
        raise HeaderParseError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderParseError(f"{path}: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderParseError(f"{path}: header is not a JSON object")
    return header, data[12 + header_len :]


# ---------------------------------------------------------------------------
# feature tensors
# ---------------------------------------------------------------------------

def write_feature_map(fmap: FeatureMap, path: Path | str) -> None:
    """Serialize a feature map; two writes of the same map are byte-identical."""
    values = np.asarray(fmap.values)
    if values.ndim != 3 or any(n < 1 for n in values.shape):
        raise HeaderParseError(f"feature shape must be 3 positive dims, got {values.shape}")
    if not np.isfinite(values).all():
        raise PayloadInvalidError("feature payload contains NaN or Inf")
    header = {
        "dtype": "f32",
        "shape": [int(n) for n in values.shape],
        "image_id": fmap.image_id,
        "extractor_id": fmap.extractor_id,
        "patch_size": int(fmap.patch_size),
    }
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    write_container(path, FEATURE_MAGIC, header, payload)


def read_feature_map(path: Path | str) -> FeatureMap:
    """Decode a feature tensor file, checking magic, header and payload size."""
    header, payload = read_container(path, FEATURE_MAGIC)
    if header.get("dtype") != "f32":
        raise HeaderParseError(f"{path}: dtype must be 'f32', got {header.get('dtype')!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(n, int) and n >= 1 for n in shape)
    ):
        raise HeaderParseError(f"{path}: shape must be 3 positive integers, got {shape!r}")
    patch_size = header.get("patch_size")
    if not isinstance(patch_size, int) or patch_size < 1:
        raise HeaderParseError(f"{path}: patch_size must be a positive integer")
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(payload) != expected:
        raise PayloadSizeMismatchError(
            f"{path}: payload is {len(payload)} bytes, header shape needs {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if not np.isfinite(values).all():
        raise PayloadInvalidError(f"{path}: payload contains NaN or Inf")
    return FeatureMap(
        values=values,
        patch_size=patch_size,
        extractor_id=str(header.get("extractor_id", "")),
        image_id=str(header.get("image_id", "")),
    )


# ---------------------------------------------------------------------------
# PNG masks, images, label maps
# ---------------------------------------------------------------------------

def _open_png(path: Path | str) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return img


def read_mask(path: Path | str) -> np.ndarray:
    """Load a binary mask from an 8-bit grayscale PNG; nonzero pixels are true."""
    img = _open_png(path)
    if img.mode not in ("L", "1"):
        img = img.convert("L")
    return np.asarray(img) != 0


def write_mask(mask: np.ndarray, path: Path | str) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DecodeError(f"mask must be 2-D, got shape {mask.shape}")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    """Load an RGB image as an (H, W, 3) uint8 array."""
    return np.asarray(_open_png(path).convert("RGB"))


def write_image(image: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


@dataclass(eq=False)
class LabelMap:
    """Per-pixel class ids plus the id -> class-name legend."""

    ids: np.ndarray
    legend: dict[int, str]

    @property
    def height(self) -> int:
        return int(self.ids.shape[0])

    @property
    def width(self) -> int:
        return int(self.ids.shape[1])


def read_label_map(path: Path | str, legend: Mapping[int, str]) -> LabelMap:
    """Load a label map PNG and check every pixel id against the legend.

    Ids absent from the legend are only tolerated for the ignore id (255).
    """
    img = _open_png(path)
    if img.mode in ("L", "P", "I", "I;16"):
        ids = np.asarray(img).astype(np.int64)
    else:
        raise DecodeError(f"{path}: unsupported label-map mode {img.mode!r}")
    if ids.ndim != 2:
        raise DecodeError(f"{path}: label map must be single-channel")
    known = set(int(k) for k in legend)
    for value in np.unique(ids):
        if int(value) != IGNORE_ID and int(value) not in known:
            raise UnknownClassNameError(f"{path}: pixel id {int(value)} missing from legend")
    return LabelMap(ids=ids, legend={int(k): str(v) for k, v in legend.items()})


def write_label_map(ids: np.ndarray, path: Path | str) -> None:
    """Write class ids as an 8-bit (or, above 255, 16-bit) grayscale PNG."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.min() < 0:
        raise DecodeError("label ids must be a 2-D array of non-negative integers")
    if ids.max() <= 255:
        Image.fromarray(ids.astype(np.uint8), mode="L").save(path, format="PNG")
    elif ids.max() <= 65535:
        Image.fromarray(ids.astype(np.uint16)).save(path, format="PNG")
    else:
        raise DecodeError(f"label id {int(ids.max())} exceeds 16-bit range")


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceRef:
    class_name: str
    mask_path: str


@dataclass(frozen=True)
class ProposalRef:
    mask_path: str
    score: float


@dataclass(eq=False)
class ImageRecord:
    id: str
    image_path: str
    features_path: str | None = None
    instance_masks: list[InstanceRef] = field(default_factory=list)
    ood_gt_path: str | None = None
    # None means the manifest never declared proposals for this image;
    # an explicit empty list is a valid "nothing detected" statement.
    proposals: list[ProposalRef] | None = None


@dataclass(eq=False)
class DatasetManifest:
    root: Path
    class_list: list[str]
    images: list[ImageRecord]

    def resolve(self, relative: str | Path) -> Path:
        return self.root / Path(relative)

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise MissingPathError(f"manifest has no image with id {image_id!r}")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DecodeError(message)


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    Raises:
        DecodeError: malformed JSON or structural problems (duplicate names,
            scores outside [0, 1], missing required keys).
        UnknownClassNameError: an instance mask references a class that is
            not in ``class_list``.
        MissingPathError: a referenced file does not exist on disk.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    _require(isinstance(doc, dict), f"{path}: manifest must be a JSON object")

    class_list = doc.get("class_list")
    _require(
        isinstance(class_list, list) and class_list and all(isinstance(c, str) and c for c in class_list),
        f"{path}: class_list must be a non-empty list of class names",
    )
    _require(len(set(class_list)) == len(class_list), f"{path}: duplicate class names")

    raw_images = doc.get("images")
    _require(isinstance(raw_images, list), f"{path}: images must be a list")

    root = path.parent
    seen_ids: set[str] = set()
    images: list[ImageRecord] = []
    for raw in raw_images:
        _require(isinstance(raw, dict), f"{path}: image records must be objects")
        image_id = raw.get("id")
        _require(isinstance(image_id, str) and bool(image_id), f"{path}: image record without id")
        _require(image_id not in seen_ids, f"{path}: duplicate image id {image_id!r}")
        seen_ids.add(image_id)
        image_path = raw.get("image_path")
        _require(isinstance(image_path, str) and bool(image_path), f"{path}: image {image_id!r} lacks image_path")

        instances: list[InstanceRef] = []
        for entry in raw.get("instance_masks", []):
            _require(
                isinstance(entry, dict) and isinstance(entry.get("class"), str) and isinstance(entry.get("mask_path"), str),
                f"{path}: bad instance_masks entry in image {image_id!r}",
            )
            if entry["class"] not in class_list:
                raise UnknownClassNameError(
                    f"{path}: image {image_id!r} instance class {entry['class']!r} not in class_list"
                )
            instances.append(InstanceRef(class_name=entry["class"], mask_path=entry["mask_path"]))

        proposals: list[ProposalRef] | None = None
        if "proposals" in raw:
            _require(isinstance(raw["proposals"], list), f"{path}: proposals must be a list in image {image_id!r}")
            proposals = []
            for entry in raw["proposals"]:
                _require(
                    isinstance(entry, dict) and isinstance(entry.get("mask_path"), str),
                    f"{path}: bad proposal entry in image {image_id!r}",
                )
                score = entry.get("score")
                _require(
                    isinstance(score, (int, float)) and 0.0 <= float(score) <= 1.0,
                    f"{path}: proposal score must be in [0, 1] in image {image_id!r}",
                )
                proposals.append(ProposalRef(mask_path=entry["mask_path"], score=float(score)))

        record = ImageRecord(
            id=image_id,
            image_path=image_path,
            features_path=raw.get("features_path"),
            instance_masks=instances,
            ood_gt_path=raw.get("ood_gt_path"),
            proposals=proposals,
        )
        for referenced in _referenced_paths(record):
            if not (root / referenced).is_file():
                raise MissingPathError(f"{path}: image {image_id!r} references missing file {referenced}")
        images.append(record)

    return DatasetManifest(root=root, class_list=list(class_list), images=images)


def _referenced_paths(record: ImageRecord) -> list[str]:
    paths = [record.image_path]
    if record.features_path:
        paths.append(record.features_path)
    if record.ood_gt_path:
        paths.append(record.ood_gt_path)
    paths.extend(ref.mask_path for ref in record.instance_masks)
    if record.proposals:
        paths.extend(ref.mask_path for ref in record.proposals)
    return paths


def write_manifest(manifest_doc: dict, path: Path | str) -> None:
    """Write a manifest JSON document (helper for fixtures and exporters)."""
    Path(path).write_text(json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n", "utf-8")
