"""Oriented 3D boxes in the lidar frame and their overlaps.

Boxes are cuboids rotated about the vertical axis: ``center`` is the
geometric centre, ``dims`` is ``(length, width, height)`` with length along
the heading and ``yaw`` is measured from +x towards +y.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float = 0.0
    class_name: str = "Car"

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "yaw", float(self.yaw))

    def footprint(self):
        """Ground-plane corners (4, 2), counter-clockwise."""
        return box_footprint(self.center[:2], self.dims[:2], self.yaw)

    def corners(self):
        """All eight corners (8, 3); bottom face first."""
        fp = self.footprint()
        z0 = self.center[2] - self.dims[2] / 2
        z1 = self.center[2] + self.dims[2] / 2
        return np.vstack([np.c_[fp, np.full(4, z0)], np.c_[fp, np.full(4, z1)]])

    def contains(self, xyz):
        """Boolean mask of points inside the box."""
        xyz = np.asarray(xyz, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = xyz - np.asarray(self.center)
        u = c * d[:, 0] + s * d[:, 1]
        v = -s * d[:, 0] + c * d[:, 1]
        l, w, h = self.dims
        return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)

    @property
    def volume(self):
        return self.dims[0] * self.dims[1] * self.dims[2]


def box_footprint(center_xy, size_lw, yaw):
    l, w = size_lw
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]], dtype=np.float64) / 2
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center_xy, dtype=np.float64)


def _polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def _footprint_tuples(box):
    # same corner order as box_footprint, without numpy overhead
    (cx, cy), (l, w) = box.center[:2], box.dims[:2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return [(cx + c * u - s * v, cy + s * u + c * v)
            for u, v in ((l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2))]


def convex_intersection(subject, clip):
    """Intersection polygon of two convex CCW polygons (Sutherland-Hodgman)."""
    out = _clip_polygon([tuple(map(float, p)) for p in subject],
                        [tuple(map(float, p)) for p in clip])
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _clip_polygon(subject, clip):
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection_area(a, b):
    return _polygon_area(_clip_polygon(_footprint_tuples(a), _footprint_tuples(b)))


def iou_3d(a, b):
    """Volume IoU of two yaw-rotated cuboids."""
    za = (a.center[2] - a.dims[2] / 2, a.center[2] + a.dims[2] / 2)
    zb = (b.center[2] - b.dims[2] / 2, b.center[2] + b.dims[2] / 2)
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class ClassBoxSpec:
    """Fixed detection box for one class: ``(length, width, height)`` in meters."""

    class_name: str
    dims: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError(f"class box dimensions must be positive, got {self.dims}")
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))

    def cells(self, cell_size):
        """Box extent in cells per axis (x along length, y along width, z)."""
        return tuple(int(math.ceil(d / cell_size - 1e-9)) for d in self.dims)

    def to_dict(self):
        return {"class_name": self.class_name, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["class_name"], tuple(d["dims"]))


def nearest_rank_percentile(values, percentile):
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError("percentile of an empty set")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile / 100.0 * values.size - 1e-12))
    return float(values[rank - 1])


def fit_class_box(boxes, percentile=95.0, class_name=None):
    """Per-axis nearest-rank percentile of ground-truth box dimensions."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("cannot fit a class box to an empty label set")
    dims = np.array([b.dims for b in boxes], dtype=np.float64)
    name = class_name if class_name is not None else boxes[0].class_name
    return ClassBoxSpec(name, tuple(nearest_rank_percentile(dims[:, k], percentile) for k in range(3)))
