"""KITTI object-benchmark files: velodyne scans, labels and calibration."""

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .geometry import Box3D
from .voxel_grid import PointCloud

DEFAULT_IMAGE_SIZE = (1242, 375)
_NEAR_PLANE = 1e-3


class KittiFormatError(ValueError):
    pass


def read_velodyne_bin(path):
    """Little-endian float32 ``(x, y, z, reflectance)`` records."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 16:
        raise KittiFormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts.astype(np.float64))


def write_velodyne_bin(path, cloud):
    with open(path, "wb") as fh:
        fh.write(np.asarray(cloud.points, dtype="<f4").tobytes())


@dataclass(frozen=True)
class FrameLabel:
    """One object line of a KITTI label file (camera coordinates)."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: Tuple[float, float, float, float]
    dimensions: Tuple[float, float, float]  # height, width, length
    location: Tuple[float, float, float]  # bottom centre in camera frame
    rotation_y: float
    score: Optional[float] = None

    @property
    def is_dontcare(self):
        return self.type == "DontCare"

    @property
    def height_px(self):
        return self.bbox[3] - self.bbox[1]

    def to_line(self):
        vals = [self.type, f"{self.truncated:.2f}", str(int(self.occluded)), f"{self.alpha:.2f}"]
        vals += [f"{v:.2f}" for v in self.bbox]
        vals += [f"{v:.2f}" for v in self.dimensions]
        vals += [f"{v:.2f}" for v in self.location]
        vals.append(f"{self.rotation_y:.2f}")
        if self.score is not None:
            vals.append(f"{self.score:.4f}")
        return " ".join(vals)


def parse_label_line(line, lineno=0, source="<string>"):
    parts = line.split()
    if len(parts) not in (15, 16):
        raise KittiFormatError(f"{source}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
    try:
        nums = [float(p) for p in parts[1:]]
        label = FrameLabel(
            type=parts[0],
            truncated=nums[0],
            occluded=int(round(nums[1])),
            alpha=nums[2],
            bbox=tuple(nums[3:7]),
            dimensions=tuple(nums[7:10]),
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        )
    except ValueError as exc:
        raise KittiFormatError(f"{source}:{lineno}: malformed numeric field ({exc})") from exc
    if not label.is_dontcare and not (label.bbox[0] <= label.bbox[2] and label.bbox[1] <= label.bbox[3]):
        raise KittiFormatError(f"{source}:{lineno}: image box corners out of order")
    return label


def read_labels(path):
    """All label lines of a file, including ``DontCare`` entries."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                labels.append(parse_label_line(line, lineno, path))
    return labels


def write_labels(path, labels):
    with open(path, "w") as fh:
        for label in labels:
            fh.write(label.to_line() + "\n")


@dataclass(frozen=True, eq=False)
class Calibration:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name, shape in (("P2", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            m = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(m)):
                raise KittiFormatError(f"calibration matrix {name} is not finite")
            object.__setattr__(self, name, m)

    def velo_to_rect(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = xyz @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_velo(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.R0_rect, xyz.T).T
        R, t = self.Tr_velo_to_cam[:, :3], self.Tr_velo_to_cam[:, 3]
        return np.linalg.solve(R, (cam - t).T).T

    def rect_to_image(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        hom = np.c_[xyz, np.ones(len(xyz))] @ self.P2.T
        return hom[:, :2] / hom[:, 2:3]


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calibration(path, image_size=DEFAULT_IMAGE_SIZE):
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                raise KittiFormatError(f"{path}:{lineno}: expected 'KEY: values'")
            try:
                entries[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError as exc:
                raise KittiFormatError(f"{path}:{lineno}: malformed numeric field ({exc})") from exc
    mats = {}
    for key, shape in _CALIB_KEYS.items():
        if key not in entries:
            raise KittiFormatError(f"{path}: missing calibration key {key}")
        if entries[key].size != shape[0] * shape[1]:
            raise KittiFormatError(f"{path}: {key} needs {shape[0] * shape[1]} values")
        mats[key] = entries[key].reshape(shape)
    extra = {k: v for k, v in entries.items() if k not in _CALIB_KEYS}
    return Calibration(mats["P2"], mats["R0_rect"], mats["Tr_velo_to_cam"], tuple(image_size), extra)


def write_calibration(path, calib):
    rows = {"P0": calib.P2, "P1": calib.P2, "P2": calib.P2, "P3": calib.P2}
    rows.update(calib.extra)
    rows["R0_rect"] = calib.R0_rect
    rows["Tr_velo_to_cam"] = calib.Tr_velo_to_cam
    with open(path, "w") as fh:
        for key, mat in rows.items():
            fh.write(key + ": " + " ".join(repr(float(v)) for v in np.ravel(mat)) + "\n")


def label_to_box(label, calib):
    """Lidar-frame box of a label (KITTI locations are bottom centres)."""
    h, w, l = label.dimensions
    x, y, z = label.location
    center = calib.rect_to_velo([x, y - h / 2.0, z])[0]
    return Box3D(tuple(center), (l, w, h), _wrap(-label.rotation_y - math.pi / 2), label.type)


def _wrap(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


def project_box(box, calib):
    """Axis-aligned image hull of a 3D box, clipped to the image, or ``None``.

    Box edges crossing the camera plane are cut there; boxes entirely behind
    the camera or landing outside the image give ``None``.
    """
    corners = calib.velo_to_rect(box.corners())
    front = corners[:, 2] > _NEAR_PLANE
    if not front.any():
        return None
    pts = [corners[front]]
    if not front.all():
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                 (0, 4), (1, 5), (2, 6), (3, 7)]
        cuts = []
        for a, b in edges:
            if front[a] != front[b]:
                pa, pb = corners[a], corners[b]
                t = (_NEAR_PLANE - pa[2]) / (pb[2] - pa[2])
                cuts.append(pa + t * (pb - pa))
        pts.append(np.array(cuts))
    uv = calib.rect_to_image(np.vstack(pts))
    W, H = calib.image_size
    x1, y1 = max(uv[:, 0].min(), 0.0), max(uv[:, 1].min(), 0.0)
    x2, y2 = min(uv[:, 0].max(), W - 1.0), min(uv[:, 1].max(), H - 1.0)
    if x2 <= x1 or y2 <= y1:
        return None
    return (float(x1), float(y1), float(x2), float(y2))


def project_to_image(det, calib):
    return project_box(det.box, calib)


def box_to_label(box, calib, score=None, bbox=None):
    """KITTI label for a lidar box; truncation and occlusion are emitted as 0."""
    l, w, h = box.dims
    bottom = calib.velo_to_rect([box.center[0], box.center[1], box.center[2] - h / 2.0])[0]
    ry = _wrap(-box.yaw - math.pi / 2)
    if bbox is None:
        bbox = project_box(box, calib) or (0.0, 0.0, 0.0, 0.0)
    alpha = _wrap(ry - math.atan2(bottom[0], bottom[2]))
    return FrameLabel(box.class_name, 0.0, 0, alpha, tuple(bbox), (h, w, l), tuple(bottom), ry, score)


def detections_to_labels(detections, calib):
    """Label records for detections that land inside the image.

    The records are passed through the text format, so in-memory evaluation
    sees exactly the values a written label file would hold.
    """
    out = []
    for det in detections:
        bbox = project_to_image(det, calib)
        if bbox is None:
            continue
        line = box_to_label(det.box, calib, det.score, bbox).to_line()
        out.append(parse_label_line(line))
    return out


@dataclass(frozen=True)
class KittiLayout:
    """Where a dataset keeps its files; every directory is relative to ``root``."""

    root: str
    velodyne_dir: str = "velodyne"
    label_dir: str = "label_2"
    calib_dir: str = "calib"

    def velodyne(self, frame_id):
        return os.path.join(self.root, self.velodyne_dir, f"{frame_id}.bin")

    def label(self, frame_id):
        return os.path.join(self.root, self.label_dir, f"{frame_id}.txt")

    def calib(self, frame_id):
        return os.path.join(self.root, self.calib_dir, f"{frame_id}.txt")

    def split(self, name):
        path = os.path.join(self.root, f"{name}.txt")
        with open(path) as fh:
            return [line.strip() for line in fh if line.strip()]

    def frame_ids(self):
        return sorted(os.path.splitext(f)[0] for f in os.listdir(os.path.join(self.root, self.velodyne_dir))
                      if f.endswith(".bin"))


@dataclass
class Frame:
    """A loaded frame: cloud, calibration and lidar-frame ground-truth boxes."""

    frame_id: str
    cloud: PointCloud
    calib: Optional[Calibration]
    labels: list
    boxes: list

    def boxes_of(self, class_name):
        return [b for b in self.boxes if b.class_name == class_name]


def load_frame(layout, frame_id, image_size=DEFAULT_IMAGE_SIZE, with_labels=True):
    cloud = read_velodyne_bin(layout.velodyne(frame_id))
    calib = read_calibration(layout.calib(frame_id), image_size)
    labels = read_labels(layout.label(frame_id)) if with_labels else []
    boxes = [label_to_box(lb, calib) for lb in labels if not lb.is_dontcare]
    return Frame(frame_id, cloud, calib, labels, boxes)

