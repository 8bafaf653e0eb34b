"""Annotation geometry: validation, rasterization and mask merging.

Polygons are lists of (x, y) float vertices in image coordinates; a pixel
(i, j) belongs to a polygon when its center (j + 0.5, i + 0.5) is inside
under the even-odd rule. Brush strokes arrive as row-major run-length
pairs over the pixel grid.
"""

from __future__ import annotations

import numpy as np

from .core import SegxalError, rle_decode_mask


class GeometryError(SegxalError):
    pass


def _orient(ax, ay, bx, by, cx, cy) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py) -> bool:
    return (min(ax, bx) <= px <= max(ax, bx)) and (min(ay, by) <= py <= max(ay, by))


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    # collinear overlap or endpoint touching an interior counts as invalid too
    for (a, b, p) in ((p3, p4, p1), (p3, p4, p2), (p1, p2, p3), (p1, p2, p4)):
        if _orient(*a, *b, *p) == 0 and _on_segment(*a, *b, *p):
            return True
    return False


def validate_polygon(points: list[list[float]], shape: tuple[int, int]) -> None:
    """Raise GeometryError on too-few/out-of-bounds vertices, zero-length
    edges or self-intersection."""
    if len(points) < 3:
        raise GeometryError(f"polygon needs at least 3 vertices, got {len(points)}")
    h, w = shape
    for idx, pt in enumerate(points):
        if len(pt) != 2:
            raise GeometryError(f"vertex {idx} is not an (x, y) pair: {pt!r}")
        x, y = float(pt[0]), float(pt[1])
        if not (np.isfinite(x) and np.isfinite(y)):
            raise GeometryError(f"vertex {idx} is not finite: ({x}, {y})")
        if x < 0 or y < 0 or x > w or y > h:
            raise GeometryError(f"vertex {idx} at ({x}, {y}) outside {w}x{h} image")
    n = len(points)
    edges = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for (a, b) in edges:
        if a[0] == b[0] and a[1] == b[1]:
            raise GeometryError(f"zero-length edge at vertex ({a[0]}, {a[1]})")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share an endpoint by construction
            if _segments_properly_intersect(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                raise GeometryError(f"edges {i} and {j} intersect: self-intersecting polygon")


def rasterize_polygon(points: list[list[float]], shape: tuple[int, int]) -> np.ndarray:
    """Even-odd fill of the polygon at pixel centers, vectorized per edge."""
    h, w = shape
    cx = np.arange(w) + 0.5  # pixel-center x per column
    cy = np.arange(h) + 0.5  # pixel-center y per row
    gx = cx[None, :]
    gy = cy[:, None]
    inside = np.zeros((h, w), dtype=bool)
    n = len(points)
    for i in range(n):
        x1, y1 = float(points[i][0]), float(points[i][1])
        x2, y2 = float(points[(i + 1) % n][0]), float(points[(i + 1) % n][1])
        if y1 == y2:
            continue  # horizontal edges never cross the test ray
        straddles = (gy > min(y1, y2)) & (gy <= max(y1, y2))
        x_at = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (gx < x_at)
    return inside


def rasterize_brush(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    try:
        return rle_decode_mask(runs, shape)
    except ValueError as e:
        raise GeometryError(str(e)) from e


def merge_edits(
    initial: np.ndarray, edits: list[dict], shape: tuple[int, int], num_classes: int,
) -> np.ndarray:
    """Apply annotation edits onto the initial labels, in order.

    Each edit is {"class_id": int, "polygon": [[x, y], ...]} or
    {"class_id": int, "brush_rle": [[start, len], ...]}. Merging is
    idempotent: replaying identical edits yields identical labels.
    """
    out = np.asarray(initial, dtype=np.int64).copy()
    for idx, edit in enumerate(edits):
        cid = edit.get("class_id")
        if not isinstance(cid, int) or not (0 <= cid < num_classes):
            raise GeometryError(f"edit {idx}: class_id {cid!r} outside [0, {num_classes})")
        has_poly = "polygon" in edit
        has_brush = "brush_rle" in edit
        if has_poly == has_brush:
            raise GeometryError(f"edit {idx}: exactly one of polygon/brush_rle required")
        if has_poly:
            validate_polygon(edit["polygon"], shape)
            mask = rasterize_polygon(edit["polygon"], shape)
        else:
            mask = rasterize_brush(edit["brush_rle"], shape)
        out[mask] = cid
    return out
