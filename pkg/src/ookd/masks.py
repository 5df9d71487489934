"""Mask utilities shared by the dataset, augmentation, tracker and metrics code.

RLE convention: a mask of shape (H, W) is flattened in column-major (Fortran)
order and stored as alternating run lengths, counts-first, starting with the
run of zeros (which may be 0 if the first pixel is foreground). This is the
same layout COCO uses for uncompressed RLE.
"""
from __future__ import annotations

import numpy as np

EMPTY_BOX = (0.0, 0.0, 0.0, 0.0)


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    flat = mask.ravel(order="F").astype(np.int8)
    # positions where the value changes
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(r) for r in runs]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def mask_to_box(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    """Tight box of a binary mask as normalized (cx, cy, w, h); None if empty.

    Pixel (r, c) covers [c, c+1) x [r, r+1), so a single pixel has width 1/W.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    x1, x2 = cols[0], cols[-1] + 1
    y1, y2 = rows[0], rows[-1] + 1
    return ((x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h)


def masks_to_boxes(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boxes (T, 4) and visibility flags (T,) for a stack of masks."""
    boxes = np.zeros((len(masks), 4), dtype=np.float64)
    visible = np.zeros(len(masks), dtype=bool)
    for t, m in enumerate(masks):
        box = mask_to_box(m)
        if box is not None:
            boxes[t] = box
            visible[t] = True
    return boxes, visible


def box_pixel_error(box, mask: np.ndarray) -> float:
    """Largest edge disagreement, in pixels, between a stored box and the mask's tight box."""
    tight = mask_to_box(mask)
    h, w = mask.shape
    if tight is None:
        return 0.0 if not np.any(box) else float("inf")
    a = cxcywh_to_xyxy(np.asarray(box, dtype=np.float64)) * [w, h, w, h]
    b = cxcywh_to_xyxy(np.asarray(tight, dtype=np.float64)) * [w, h, w, h]
    return float(np.max(np.abs(a - b)))


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def shift_mask(mask: np.ndarray, dy: int, dx: int, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Translate a mask by (dy, dx) pixels into a canvas of ``out_shape``; pixels leaving it are dropped."""
    mask = np.asarray(mask, dtype=bool)
    oh, ow = out_shape if out_shape is not None else mask.shape
    out = np.zeros((oh, ow), dtype=bool)
    ys, xs = np.nonzero(mask)
    ys = ys + dy
    xs = xs + dx
    keep = (ys >= 0) & (ys < oh) & (xs >= 0) & (xs < ow)
    out[ys[keep], xs[keep]] = True
    return out
