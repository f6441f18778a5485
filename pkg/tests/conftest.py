from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from protomatch.bank import build_bank, save_bank
from protomatch.extract import FileExtractor
from protomatch.synthetic import DemoLayout, write_demo_dataset
from protomatch.tensor_io import load_manifest, write_image, write_manifest, write_mask


@pytest.fixture(scope="session")
def demo(tmp_path_factory) -> DemoLayout:
    """The bundled synthetic dataset plus a saved bank next to it."""
    root = tmp_path_factory.mktemp("demo")
    layout = write_demo_dataset(root / "data")
    manifest = load_manifest(layout.manifest_path)
    bank = build_bank(manifest, FileExtractor())
    save_bank(bank, root / "bank.pbk")
    return layout


@pytest.fixture(scope="session")
def demo_bank_path(demo) -> Path:
    return demo.root.parent / "bank.pbk"


@pytest.fixture
def manifest_builder(tmp_path):
    """Write a manifest tree from a compact spec and return the manifest path.

    Image specs are dicts: ``{"id", "size": (H, W), "instances": [(class,
    mask_array)], "proposals": [(mask_array, score)], "gt": mask_array,
    "features_values": (D, h, w) array, "patch_size": int}``; every key but
    ``id`` is optional.
    """

    def build(class_list, image_specs, skip_files=()):
        from protomatch.extract import FeatureMap
        from protomatch.tensor_io import write_feature_map

        records = []
        for spec in image_specs:
            image_id = spec["id"]
            height, width = spec.get("size", (16, 16))
            record = {"id": image_id, "image_path": f"{image_id}.png"}
            write_image(np.zeros((height, width, 3), dtype=np.uint8), tmp_path / record["image_path"])
            if "features_values" in spec:
                record["features_path"] = f"{image_id}.pft"
                write_feature_map(
                    FeatureMap(
                        values=np.asarray(spec["features_values"], dtype=np.float32),
                        patch_size=spec.get("patch_size", 1),
                        extractor_id="test",
                        image_id=image_id,
                    ),
                    tmp_path / record["features_path"],
                )
            instances = []
            for index, (class_name, mask) in enumerate(spec.get("instances", [])):
                rel = f"{image_id}_inst{index}.png"
                if rel not in skip_files:
                    write_mask(np.asarray(mask, dtype=bool), tmp_path / rel)
                instances.append({"class": class_name, "mask_path": rel})
            if instances:
                record["instance_masks"] = instances
            if "gt" in spec:
                record["ood_gt_path"] = f"{image_id}_gt.png"
                write_mask(np.asarray(spec["gt"], dtype=bool), tmp_path / record["ood_gt_path"])
            if "proposals" in spec:
                entries = []
                for index, (mask, score) in enumerate(spec["proposals"]):
                    rel = f"{image_id}_prop{index}.png"
                    write_mask(np.asarray(mask, dtype=bool), tmp_path / rel)
                    entries.append({"mask_path": rel, "score": score})
                record["proposals"] = entries
            records.append(record)
        manifest_path = tmp_path / "manifest.json"
        write_manifest({"class_list": list(class_list), "images": records}, manifest_path)
        return manifest_path

    return build


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One visible PASS/FAIL line per acceptance criterion."""
    outcomes: dict[str, str] = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" in nodeid:
                name = nodeid.split("::")[-1]
                if status != "passed" or name not in outcomes:
                    outcomes[name] = status
    if outcomes:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(outcomes):
            verdict = "PASS" if outcomes[name] == "passed" else "FAIL"
            terminalreporter.write_line(f"{verdict}  {name}")
