from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomatch.errors import (
    BadMagicError,
    DecodeError,
    HeaderParseError,
    MissingPathError,
    PayloadInvalidError,
    PayloadSizeMismatchError,
    UnknownClassNameError,
)
from protomatch.extract import FeatureMap
from protomatch.tensor_io import (
    FEATURE_MAGIC,
    load_manifest,
    read_feature_map,
    read_label_map,
    read_mask,
    write_feature_map,
    write_label_map,
    write_mask,
)


def _raw_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<Q", len(blob)) + blob + payload


def _feature_header(shape, patch_size=1):
    return {
        "dtype": "f32",
        "shape": list(shape),
        "image_id": "img",
        "extractor_id": "test",
        "patch_size": patch_size,
    }


class TestFeatureFile:
    def test_direct_decode(self, tmp_path):
        payload = np.array([1.0, 0.5], dtype="<f4").tobytes()
        path = tmp_path / "f.pft"
        path.write_bytes(_raw_container(FEATURE_MAGIC, _feature_header([2, 1, 1]), payload))
        fmap = read_feature_map(path)
        assert (fmap.dim, fmap.grid_h, fmap.grid_w) == (2, 1, 1)
        assert fmap.values.ravel().tolist() == [1.0, 0.5]

    def test_single_zero_value_payload(self, tmp_path):
        path = tmp_path / "f.pft"
        write_feature_map(FeatureMap(np.zeros((1, 1, 1), np.float32), patch_size=1), path)
        assert path.read_bytes()[-4:] == b"\x00\x00\x00\x00"

    def test_write_is_deterministic(self, tmp_path):
        fmap = FeatureMap(np.arange(12, dtype=np.float32).reshape(3, 2, 2), patch_size=14)
        write_feature_map(fmap, tmp_path / "a.pft")
        write_feature_map(fmap, tmp_path / "b.pft")
        assert (tmp_path / "a.pft").read_bytes() == (tmp_path / "b.pft").read_bytes()

    def test_payload_length_arithmetic(self, tmp_path):
        fmap = FeatureMap(np.zeros((384, 37, 66), np.float32), patch_size=14)
        path = tmp_path / "big.pft"
        write_feature_map(fmap, path)
        data = path.read_bytes()
        (header_len,) = struct.unpack("<Q", data[4:12])
        assert len(data) - 12 - header_len == 4 * 384 * 37 * 66

    @settings(max_examples=40, deadline=None)
    @given(
        shape=st.tuples(
            st.integers(1, 8), st.integers(1, 16), st.integers(1, 16)
        ),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_bit_exact(self, tmp_path_factory, shape, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "f.pft"
        write_feature_map(FeatureMap(values, patch_size=7, extractor_id="x", image_id="y"), path)
        loaded = read_feature_map(path)
        assert loaded.values.tobytes() == values.tobytes()
        assert (loaded.patch_size, loaded.extractor_id, loaded.image_id) == (7, "x", "y")

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "f.pft"
        write_feature_map(FeatureMap(np.ones((2, 3, 3), np.float32), patch_size=1), path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(PayloadSizeMismatchError):
            read_feature_map(path)

    def test_oversized_payload(self, tmp_path):
        path = tmp_path / "f.pft"
        write_feature_map(FeatureMap(np.ones((1, 2, 2), np.float32), patch_size=1), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(PayloadSizeMismatchError):
            read_feature_map(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.pft"
        write_feature_map(FeatureMap(np.ones((1, 1, 1), np.float32), patch_size=1), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            read_feature_map(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "f.pft"
        blob = b"{broken"
        path.write_bytes(FEATURE_MAGIC + struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(HeaderParseError):
            read_feature_map(path)

    @pytest.mark.parametrize(
        "header",
        [
            _feature_header([2, 1]),  # wrong rank
            _feature_header([0, 1, 1]),  # non-positive dim
            {**_feature_header([1, 1, 1]), "dtype": "f64"},
            {**_feature_header([1, 1, 1]), "patch_size": 0},
        ],
    )
    def test_header_contract_violations(self, tmp_path, header):
        path = tmp_path / "f.pft"
        path.write_bytes(_raw_container(FEATURE_MAGIC, header, b"\x00" * 8))
        with pytest.raises(HeaderParseError):
            read_feature_map(path)

    def test_nonfinite_payload_rejected(self, tmp_path):
        payload = np.array([np.nan], dtype="<f4").tobytes()
        path = tmp_path / "f.pft"
        path.write_bytes(_raw_container(FEATURE_MAGIC, _feature_header([1, 1, 1]), payload))
        with pytest.raises(PayloadInvalidError):
            read_feature_map(path)
        with pytest.raises(PayloadInvalidError):
            write_feature_map(
                FeatureMap(np.array([[[np.inf]]], np.float32), patch_size=1), tmp_path / "g.pft"
            )

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingPathError):
            read_feature_map(tmp_path / "absent.pft")


class TestMaskAndLabelMap:
    def test_nonzero_rule(self, tmp_path):
        from PIL import Image

        arr = np.array([[0, 255, 128]], dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
        assert read_mask(tmp_path / "m.png").tolist() == [[False, True, True]]

    def test_load_save_idempotent(self, tmp_path):
        rng = np.random.default_rng(3)
        mask = rng.random((9, 7)) > 0.5
        write_mask(mask, tmp_path / "a.png")
        first = read_mask(tmp_path / "a.png")
        write_mask(first, tmp_path / "b.png")
        assert np.array_equal(read_mask(tmp_path / "b.png"), first)
        assert np.array_equal(first, mask)

    def test_empty_mask_representable(self, tmp_path):
        write_mask(np.zeros((4, 4), bool), tmp_path / "e.png")
        assert not read_mask(tmp_path / "e.png").any()

    def test_mask_decode_error(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(DecodeError):
            read_mask(tmp_path / "bad.png")

    def test_label_map_roundtrip_with_ignore(self, tmp_path):
        ids = np.array([[0, 1], [255, 2]], dtype=np.int64)
        write_label_map(ids, tmp_path / "l.png")
        loaded = read_label_map(tmp_path / "l.png", {0: "road", 1: "car", 2: "tree"})
        assert np.array_equal(loaded.ids, ids)
        assert loaded.legend[1] == "car"

    def test_label_map_unknown_id(self, tmp_path):
        write_label_map(np.array([[0, 9]]), tmp_path / "l.png")
        with pytest.raises(UnknownClassNameError):
            read_label_map(tmp_path / "l.png", {0: "road"})

    def test_label_map_16bit(self, tmp_path):
        ids = np.array([[300, 0]], dtype=np.int64)
        write_label_map(ids, tmp_path / "l.png")
        loaded = read_label_map(tmp_path / "l.png", {300: "rare", 0: "road"})
        assert np.array_equal(loaded.ids, ids)


class TestManifest:
    def test_nineteen_classes_three_images(self, manifest_builder):
        classes = [f"class_{i}" for i in range(19)]
        manifest = load_manifest(
            manifest_builder(classes, [{"id": f"img{i}"} for i in range(3)])
        )
        assert len(manifest.class_list) == 19
        assert len(manifest.images) == 3

    def test_unknown_instance_class(self, manifest_builder):
        path = manifest_builder(
            ["road"], [{"id": "a", "instances": [("rider", np.ones((16, 16), bool))]}]
        )
        with pytest.raises(UnknownClassNameError):
            load_manifest(path)

    def test_duplicate_class_names(self, manifest_builder):
        path = manifest_builder(["road", "road"], [{"id": "a"}])
        with pytest.raises(DecodeError):
            load_manifest(path)

    def test_missing_referenced_file(self, manifest_builder):
        path = manifest_builder(
            ["road"],
            [{"id": "a", "instances": [("road", np.ones((16, 16), bool))]}],
            skip_files=("a_inst0.png",),
        )
        with pytest.raises(MissingPathError):
            load_manifest(path)

    def test_score_out_of_range(self, tmp_path, manifest_builder):
        path = manifest_builder(
            ["road"], [{"id": "a", "proposals": [(np.ones((16, 16), bool), 0.5)]}]
        )
        doc = json.loads(path.read_text())
        doc["images"][0]["proposals"][0]["score"] = 1.5
        path.write_text(json.dumps(doc))
        with pytest.raises(DecodeError):
            load_manifest(path)

    def test_absent_vs_empty_proposals(self, manifest_builder):
        path = manifest_builder(["road"], [{"id": "a", "proposals": []}, {"id": "b"}])
        manifest = load_manifest(path)
        assert manifest.images[0].proposals == []
        assert manifest.images[1].proposals is None

    def test_paths_resolve_relative_to_manifest(self, manifest_builder):
        manifest = load_manifest(manifest_builder(["road"], [{"id": "a"}]))
        assert manifest.resolve(manifest.images[0].image_path).is_file()
