"""Self-contained synthetic dataset for demos and end-to-end tests.

Three known classes occupy axis-aligned regions whose feature vectors are
mutually orthogonal unit directions; one test image carries an out-of-
distribution block pointing along a fourth orthogonal direction. Features
are stored at pixel resolution (patch size 1), so matching is exact: known
pixels score cosine 1.0 against their class prototype and the injected
block scores 0.0 against every class, which makes the expected metrics of a
default-threshold run exactly perfect.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extract import FeatureMap
from .tensor_io import write_feature_map, write_image, write_manifest, write_mask

CLASS_NAMES = ["paving", "vehicle", "vegetation"]
CLASS_COLORS = {
    "paving": (96, 96, 96),
    "vehicle": (200, 40, 40),
    "vegetation": (40, 160, 40),
    "ood": (220, 60, 220),
}
FEATURE_DIM = 4  # class directions e0..e2, OOD direction e3
EXTRACTOR_ID = "synthetic-unit"


@dataclass(frozen=True)
class DemoLayout:
    root: Path
    manifest_path: Path
    size: int
    ood_box: tuple[int, int, int, int]  # row0, row1, col0, col1
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def _direction(index: int) -> np.ndarray:
    vec = np.zeros(FEATURE_DIM, dtype=np.float32)
    vec[index] = 1.0
    return vec


def _box_mask(size: int, box: tuple[int, int, int, int]) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[box[0] : box[1], box[2] : box[3]] = True
    return mask


class _SceneWriter:
    """Accumulates per-region features/colors and writes one image's files."""

    def __init__(self, root: Path, image_id: str, size: int) -> None:
        self.root = root
        self.image_id = image_id
        self.size = size
        self.features = np.zeros((FEATURE_DIM, size, size), dtype=np.float32)
        self.pixels = np.zeros((size, size, 3), dtype=np.uint8)

    def paint(self, mask: np.ndarray, direction_index: int, color_key: str) -> None:
        self.features[:, mask] = _direction(direction_index)[:, None]
        self.pixels[mask] = CLASS_COLORS[color_key]

    def write(self) -> dict:
        image_rel = f"images/{self.image_id}.png"
        features_rel = f"features/{self.image_id}.pft"
        write_image(self.pixels, self.root / image_rel)
        write_feature_map(
            FeatureMap(
                values=self.features,
                patch_size=1,
                extractor_id=EXTRACTOR_ID,
                image_id=self.image_id,
            ),
            self.root / features_rel,
        )
        return {"id": self.image_id, "image_path": image_rel, "features_path": features_rel}


def write_demo_dataset(root: Path | str, size: int = 24) -> DemoLayout:
    """Create the dataset under ``root`` and return its layout."""
    root = Path(root)
    for sub in ("images", "features", "masks", "gt", "proposals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    half = size // 2
    third = size // 3

    def mask_entry(image_id: str, name: str, mask: np.ndarray, class_name: str) -> dict:
        rel = f"masks/{image_id}_{name}.png"
        write_mask(mask, root / rel)
        return {"class": class_name, "mask_path": rel}

    def proposal_entry(image_id: str, name: str, mask: np.ndarray, score: float) -> dict:
        rel = f"proposals/{image_id}_{name}.png"
        write_mask(mask, root / rel)
        return {"mask_path": rel, "score": score}

    records = []

    # Bank-building images: two instances of paving, one each of the others.
    train0 = _SceneWriter(root, "train_0", size)
    left = _box_mask(size, (0, size, 0, half))
    right = _box_mask(size, (0, size, half, size))
    train0.paint(left, 0, "paving")
    train0.paint(right, 1, "vehicle")
    rec = train0.write()
    rec["instance_masks"] = [
        mask_entry("train_0", "paving", left, "paving"),
        mask_entry("train_0", "vehicle", right, "vehicle"),
    ]
    records.append(rec)

    train1 = _SceneWriter(root, "train_1", size)
    top = _box_mask(size, (0, half, 0, size))
    bottom = _box_mask(size, (half, size, 0, size))
    train1.paint(top, 2, "vegetation")
    train1.paint(bottom, 0, "paving")
    rec = train1.write()
    rec["instance_masks"] = [
        mask_entry("train_1", "vegetation", top, "vegetation"),
        mask_entry("train_1", "paving", bottom, "paving"),
    ]
    records.append(rec)

    # Test image with an OOD block along the fourth direction.
    ood_box = (third, third + half, third, third + half)
    test0 = _SceneWriter(root, "test_0", size)
    test0.paint(np.ones((size, size), dtype=bool), 0, "paving")
    vehicle_box = _box_mask(size, (0, third, size - third, size))
    vegetation_box = _box_mask(size, (size - third, size, 0, third))
    ood_mask = _box_mask(size, ood_box)
    test0.paint(vehicle_box, 1, "vehicle")
    test0.paint(vegetation_box, 2, "vegetation")
    test0.paint(ood_mask, 3, "ood")
    rec = test0.write()
    gt_rel = "gt/test_0.png"
    write_mask(ood_mask, root / gt_rel)
    rec["ood_gt_path"] = gt_rel
    rec["instance_masks"] = []
    rec["proposals"] = [
        proposal_entry("test_0", "block", ood_mask, 0.9),
        proposal_entry("test_0", "vehicle", vehicle_box, 0.8),
        proposal_entry("test_0", "speck", _box_mask(size, (0, 2, 0, 2)), 0.1),
    ]
    records.append(rec)

    # Second test image without any OOD pixels (contributes only negatives).
    test1 = _SceneWriter(root, "test_1", size)
    test1.paint(np.ones((size, size), dtype=bool), 0, "paving")
    strip = _box_mask(size, (0, third, 0, size))
    test1.paint(strip, 2, "vegetation")
    rec = test1.write()
    gt_rel = "gt/test_1.png"
    write_mask(np.zeros((size, size), dtype=bool), root / gt_rel)
    rec["ood_gt_path"] = gt_rel
    rec["instance_masks"] = []
    rec["proposals"] = [proposal_entry("test_1", "strip", strip, 0.7)]
    records.append(rec)

    manifest_path = root / "manifest.json"
    write_manifest({"class_list": CLASS_NAMES, "images": records}, manifest_path)
    return DemoLayout(
        root=root,
        manifest_path=manifest_path,
        size=size,
        ood_box=ood_box,
        train_ids=("train_0", "train_1"),
        test_ids=("test_0", "test_1"),
    )


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: python -m protomatch.synthetic OUTPUT_DIR", file=sys.stderr)
        return 2
    layout = write_demo_dataset(Path(args[0]))
    print(f"wrote demo dataset to {layout.root} (manifest: {layout.manifest_path})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
