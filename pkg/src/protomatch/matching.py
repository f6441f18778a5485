"""Dense prototype matching: class heatmaps, upsampling, per-pixel labels.

For every token and class the matcher keeps the best cosine similarity over
that class's prototype vectors. Heatmaps are upsampled to image resolution
first and classified per pixel afterwards; the order matters because argmax
does not commute with interpolation.
"""

from __future__ import annotations

import numpy as np

from .bank import PrototypeBank
from .errors import DimMismatchError, ShapeMismatchError
from .extract import FeatureMap

_ZERO_NORM = 1e-12


def cosine_heatmaps(features: FeatureMap, bank: PrototypeBank) -> np.ndarray:
    """Per-class best-prototype cosine similarity on the token grid.

    Returns a float64 (K, grid_h, grid_w) stack with values in [-1, 1].
    Zero tokens have no direction, so their similarity to anything is 0;
    prototype vectors are re-normalized here, which makes the result
    invariant to any positive rescaling of stored prototypes.
    """
    if features.dim != bank.dim:
        raise DimMismatchError(f"features dim {features.dim} != bank dim {bank.dim}")
    grid_h, grid_w = features.grid_h, features.grid_w
    tokens = features.values.reshape(features.dim, -1).T.astype(np.float64)
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    unit_tokens = np.divide(tokens, norms, out=np.zeros_like(tokens), where=norms > _ZERO_NORM)

    stack = np.empty((len(bank.classes), grid_h, grid_w), dtype=np.float64)
    for k, cls in enumerate(bank.classes):
        protos = cls.vectors.astype(np.float64)
        pnorms = np.linalg.norm(protos, axis=1, keepdims=True)
        unit_protos = np.divide(protos, pnorms, out=np.zeros_like(protos), where=pnorms > _ZERO_NORM)
        best = (unit_tokens @ unit_protos.T).max(axis=1)
        stack[k] = best.reshape(grid_h, grid_w)
    return np.clip(stack, -1.0, 1.0)


def upsample(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly upsample a (K, h, w) stack to (K, out_h, out_w).

    Output pixel centers are mapped proportionally into the source grid
    (half-pixel alignment): src = (dst + 0.5) * size_ratio - 0.5, clamped to
    the grid. Interpolated values never leave the [min, max] range of the
    source channel.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ShapeMismatchError(f"expected (K, h, w) stack, got shape {stack.shape}")
    src_h, src_w = stack.shape[1:]
    if out_h < src_h or out_w < src_w:
        raise ShapeMismatchError(
            f"target {out_h}x{out_w} is smaller than the source grid {src_h}x{src_w}"
        )
    ys = np.clip((np.arange(out_h) + 0.5) * (src_h / out_h) - 0.5, 0.0, src_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (src_w / out_w) - 0.5, 0.0, src_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]

    top = stack[:, y0][:, :, x0] * (1 - wx) + stack[:, y0][:, :, x1] * wx
    bottom = stack[:, y1][:, :, x0] * (1 - wx) + stack[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def classify_pixels(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax label and max score; ties go to the lowest class index.

    The score map is gathered from the stack at the label indices, so the
    two outputs are consistent by construction.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ShapeMismatchError(f"expected a non-empty (K, H, W) stack, got shape {stack.shape}")
    labels = stack.argmax(axis=0)
    scores = np.take_along_axis(stack, labels[None, :, :], axis=0)[0]
    return labels, scores
