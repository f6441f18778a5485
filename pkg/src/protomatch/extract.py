"""Feature extraction backends.

A backend turns an RGB image into a dense patch-feature tensor. The toolkit
itself never runs a neural network: production features are computed by an
external export tool and consumed through the ``file`` backend, while the
``mock:<seed>`` backend provides a cheap deterministic stand-in for tests
and demos.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BackendUnavailableError, ConfigError, ImageTooSmallError

MOCK_DIM = 16
MOCK_PATCH_SIZE = 14


@dataclass(eq=False)
class FeatureMap:
    """Dense patch features for one image: ``values`` has shape (dim, grid_h, grid_w)."""

    values: np.ndarray
    patch_size: int
    extractor_id: str = ""
    image_id: str = ""

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def grid_h(self) -> int:
        return int(self.values.shape[1])

    @property
    def grid_w(self) -> int:
        return int(self.values.shape[2])


@dataclass(frozen=True)
class FileExtractor:
    """Marker backend: features are read from the manifest's ``features_path``."""

    id: str = field(default="file", init=False)


@dataclass(frozen=True)
class MockExtractor:
    """Deterministic test backend: a seeded linear map of each patch's mean RGB.

    The projection matrix (``MOCK_DIM`` x 3) is drawn once from a generator
    seeded with ``seed``, so identical images always produce identical
    tensors and distinct solid colors map to distinct feature directions.
    A black patch maps to the zero vector.
    """

    seed: int = 0

    @property
    def id(self) -> str:
        return f"mock:{self.seed}"

    @property
    def patch_size(self) -> int:
        return MOCK_PATCH_SIZE

    @property
    def dim(self) -> int:
        return MOCK_DIM

    def extract(self, image: np.ndarray, image_id: str = "") -> FeatureMap:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ImageTooSmallError(f"expected an (H, W, 3) RGB array, got {image.shape}")
        height, width = image.shape[:2]
        grid_h = height // MOCK_PATCH_SIZE
        grid_w = width // MOCK_PATCH_SIZE
        if grid_h < 1 or grid_w < 1:
            raise ImageTooSmallError(
                f"image {width}x{height} is smaller than one {MOCK_PATCH_SIZE}px patch"
            )
        projection = np.random.default_rng(self.seed).standard_normal((MOCK_DIM, 3))
        # Trailing pixels that do not fill a whole patch are dropped.
        cropped = image[: grid_h * MOCK_PATCH_SIZE, : grid_w * MOCK_PATCH_SIZE, :]
        patches = cropped.reshape(grid_h, MOCK_PATCH_SIZE, grid_w, MOCK_PATCH_SIZE, 3)
        mean_rgb = patches.astype(np.float64).mean(axis=(1, 3)) / 255.0
        tokens = np.einsum("dc,hwc->dhw", projection, mean_rgb)
        return FeatureMap(
            values=tokens.astype(np.float32),
            patch_size=MOCK_PATCH_SIZE,
            extractor_id=self.id,
            image_id=image_id,
        )


Backend = FileExtractor | MockExtractor


def features_for_record(backend: Backend, record, manifest) -> FeatureMap:
    """Produce features for one manifest record through the given backend.

    The file backend passes the precomputed tensor through verbatim and
    fails with BackendUnavailableError when the record declares no
    ``features_path``.
    """
    from . import tensor_io  # deferred: tensor_io imports FeatureMap from here

    if isinstance(backend, FileExtractor):
        if not record.features_path:
            raise BackendUnavailableError(
                f"image {record.id!r} has no features_path for the file backend"
            )
        return tensor_io.read_feature_map(manifest.resolve(record.features_path))
    image = tensor_io.load_image(manifest.resolve(record.image_path))
    return backend.extract(image, image_id=record.id)


def parse_backend(spec: str) -> Backend:
    """Build a backend from its id string: ``file``, ``mock`` or ``mock:<seed>``."""
    if spec == "file":
        return FileExtractor()
    if spec == "mock":
        return MockExtractor(0)
    if spec.startswith("mock:"):
        try:
            return MockExtractor(int(spec.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad mock seed in backend id {spec!r}") from exc
    raise ConfigError(f"unknown backend id {spec!r} (expected 'file' or 'mock:<seed>')")
