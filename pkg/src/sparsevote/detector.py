"""Full-frame detection over orientation bins and 3D non-maximum suppression."""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import Box3D, iou_3d
from .voxel_grid import discretize, rotate_points

DEFAULT_THRESHOLD = 1.0
DEFAULT_NMS_IOU = 0.25
DEFAULT_MAX_CANDIDATES = 5000


@dataclass(frozen=True)
class Detection:
    class_name: str
    center: Tuple[float, float, float]
    yaw: float
    score: float
    dims: Tuple[float, float, float]
    bin_index: int = 0

    @property
    def box(self):
        return Box3D(self.center, self.dims, self.yaw, self.class_name)

    def to_dict(self):
        return {
            "class_name": self.class_name,
            "center": [float(c) for c in self.center],
            "yaw": float(self.yaw),
            "score": float(self.score),
            "dims": [float(d) for d in self.dims],
            "bin_index": int(self.bin_index),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["class_name"], tuple(d["center"]), d["yaw"], d["score"],
                   tuple(d["dims"]), d.get("bin_index", 0))


def score_bin(net, cloud, config, bin_index):
    """Scores of one orientation pass as ``(world_centers, scores)``.

    The cloud is rotated by the negative bin angle, discretised and scored;
    cell centres are rotated back into the world frame.
    """
    alpha = float(config.bin_angles()[bin_index])
    grid = discretize(rotate_points(cloud, -alpha), config)
    scores = net.forward(grid)
    centers = config.cell_centers(scores.coords)
    c, s = np.cos(alpha), np.sin(alpha)
    world = centers.copy()
    world[:, 0] = c * centers[:, 0] - s * centers[:, 1]
    world[:, 1] = s * centers[:, 0] + c * centers[:, 1]
    return world, scores.features[:, 0]


def frame_scores(net, cloud, config, workers=None):
    """``score_bin`` for every orientation bin, on a thread pool when useful.

    The voting kernels release the GIL, so bins overlap on multi-core hosts.
    """
    bins = range(config.angular_bins)
    workers = workers or os.cpu_count() or 1
    if workers > 1 and config.angular_bins > 1:
        with ThreadPoolExecutor(min(workers, config.angular_bins)) as pool:
            return list(pool.map(lambda b: score_bin(net, cloud, config, b), bins))
    return [score_bin(net, cloud, config, b) for b in bins]


def select_detections(scores_per_bin, config, class_box, threshold=DEFAULT_THRESHOLD,
                      nms_iou=DEFAULT_NMS_IOU, max_candidates=DEFAULT_MAX_CANDIDATES):
    """Threshold per-bin scores, keep the top candidates and suppress overlaps."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative so vote-free cells never fire")
    if not np.isfinite(threshold) or not scores_per_bin:
        return []
    centers, scores, bin_ids = [], [], []
    for b, (c, s) in enumerate(scores_per_bin):
        fire = s > threshold
        centers.append(c[fire])
        scores.append(s[fire])
        bin_ids.append(np.full(int(fire.sum()), b))
    centers, scores, bin_ids = np.vstack(centers), np.concatenate(scores), np.concatenate(bin_ids)
    order = np.argsort(-scores, kind="stable")
    if max_candidates is not None:
        order = order[:max_candidates]
    angles = config.bin_angles()
    dets = [Detection(class_box.class_name, tuple(centers[i]), float(angles[bin_ids[i]]),
                      float(scores[i]), class_box.dims, int(bin_ids[i])) for i in order]
    return nms_3d(dets, nms_iou)


def detect_frame(net, cloud, config=None, threshold=DEFAULT_THRESHOLD,
                 nms_iou=DEFAULT_NMS_IOU, workers=None, max_candidates=DEFAULT_MAX_CANDIDATES):
    """Detect one class in a point cloud.

    Each orientation bin is an independent pass. Cells scoring strictly above
    ``threshold`` become detections carrying the class box, merged across
    bins. At most ``max_candidates`` of the highest scoring ones (``None``
    for no cap) go through :func:`nms_3d`.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative so vote-free cells never fire")
    config = config or net.grid_config
    if config is None:
        raise ValueError("no grid configuration given and none stored in the network")
    if net.class_box is None:
        raise ValueError("network has no class box")
    if len(cloud) == 0 or not np.isfinite(threshold):
        return []
    results = frame_scores(net, cloud, config, workers)
    return select_detections(results, config, net.class_box, threshold, nms_iou, max_candidates)


def nms_3d(detections, iou_threshold=DEFAULT_NMS_IOU):
    """Greedy suppression in descending score order, per class.

    A detection is dropped when its 3D IoU with an already kept detection of
    the same class exceeds ``iou_threshold``.
    """
    n = len(detections)
    order = sorted(range(n), key=lambda i: -detections[i].score)
    kept = []
    state = {}  # class -> (boxes, centers, radii, yaws, dims)
    for i in order:
        det = detections[i]
        box = det.box
        st = state.get(det.class_name)
        if st is None:
            st = ([], np.empty((n, 3)), np.empty(n), np.empty(n), np.empty((n, 3)))
            state[det.class_name] = st
        boxes, centers, radii, yaws, dims = st
        k = len(boxes)
        r = 0.5 * math.hypot(box.dims[0], box.dims[1])
        if k and _suppressed(box, r, boxes, centers[:k], radii[:k], yaws[:k], dims[:k],
                             iou_threshold):
            continue
        centers[k], radii[k], yaws[k], dims[k] = box.center, r, box.yaw, box.dims
        boxes.append(box)
        kept.append(det)
    return kept


def _suppressed(box, radius, boxes, centers, radii, yaws, dims, iou_threshold):
    d = centers - box.center
    near = (np.hypot(d[:, 0], d[:, 1]) < radii + radius) & (
        np.abs(d[:, 2]) < (dims[:, 2] + box.dims[2]) / 2)
    if not near.any():
        return False
    # boxes sharing size and heading overlap as axis-aligned boxes in their own frame
    same = near & (yaws == box.yaw) & np.all(dims == box.dims, axis=1)
    if same.any():
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        ds = d[same]
        off = np.abs(np.c_[c * ds[:, 0] + s * ds[:, 1], -s * ds[:, 0] + c * ds[:, 1], ds[:, 2]])
        inter = np.prod(np.clip(np.asarray(box.dims) - off, 0.0, None), axis=1)
        vol = box.volume
        if np.any(inter / (2 * vol - inter) > iou_threshold):
            return True
    return any(iou_3d(box, boxes[j]) > iou_threshold for j in np.flatnonzero(near & ~same))
