"""Synthetic lidar scenes written in the KITTI object layout.

Scenes hold solid boxes (the positive class) plus unlabelled clutter on a
ground plane: thin pillars, raised plates and box-shaped decoys whose surface
reflectance lies outside the range of the real boxes. Points are sampled only
on the faces that look towards the sensor, with a density that falls with
range and incidence angle, restricted to the forward camera field of view.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D
from .kitti_io import (
    Calibration,
    Frame,
    box_to_label,
    label_to_box,
    parse_label_line,
    write_calibration,
    write_labels,
    write_velodyne_bin,
)
from .voxel_grid import GridConfig, PointCloud

SYNTHETIC_CLASS = "Box"
SENSOR_HEIGHT = 1.73
GROUND_Z = -SENSOR_HEIGHT


@dataclass(frozen=True)
class SceneParams:
    density: float = 60000.0  # points per m^2 at 1 m, normal incidence
    noise: float = 0.02
    fov: float = math.radians(45.0)
    max_range: float = 20.0
    object_range: tuple = (5.0, 17.0)
    object_azimuth: float = math.radians(35.0)
    # a fixed-size class box only scores well when the class is size-consistent.
    # Square footprints make a window turned by 90 degrees as good as the right
    # one; heights around 1.2 put box centres near a cell-layer centre.
    box_length: tuple = (1.35, 1.5)
    box_width: tuple = (1.35, 1.5)
    box_height: tuple = (1.1, 1.3)
    box_reflectance: tuple = (0.35, 0.65)
    objects: tuple = (3, 5)
    distractors: tuple = (2, 6)
    # box-shaped decoys, darker or brighter than any real box: no monotone
    # function of reflectance tells them apart, so a linear scorer cannot
    decoys: tuple = (1, 3)
    decoy_reflectance: tuple = ((0.0, 0.12), (0.88, 1.0))
    ground: bool = True


def synthetic_grid_config(params=SceneParams(), angular_bins=8, cell_size=0.2):
    """A grid centred on the sensor that covers the scene for every bin rotation."""
    half = params.max_range + 1.0
    cells = int(math.ceil(2 * half / cell_size))
    zcells = int(math.ceil(3.6 / cell_size))
    # keep the flat ground in the middle of a cell layer; on a boundary the
    # range noise splits it across two layers, which training crops never see
    base = GROUND_Z - 1.5 * cell_size
    return GridConfig(cell_size, (-half, -half, base), (cells, cells, zcells), angular_bins)


def synthetic_calibration():
    P2 = np.array([[721.5377, 0.0, 609.5593, 0.0],
                   [0.0, 721.5377, 172.854, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    Tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, -0.08],
                   [1.0, 0.0, 0.0, -0.27]])
    return Calibration(P2, np.eye(3), Tr)


def _cuboid_faces(box):
    """(centre, normal, u-axis, v-axis, u-size, v-size) for the six faces."""
    c = np.asarray(box.center)
    l, w, h = box.dims
    cy, sy = math.cos(box.yaw), math.sin(box.yaw)
    ex = np.array([cy, sy, 0.0])
    ey = np.array([-sy, cy, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    return [
        (c + ex * l / 2, ex, ey, ez, w, h),
        (c - ex * l / 2, -ex, ey, ez, w, h),
        (c + ey * w / 2, ey, ex, ez, l, h),
        (c - ey * w / 2, -ey, ex, ez, l, h),
        (c + ez * h / 2, ez, ex, ey, l, w),
        (c - ez * h / 2, -ez, ex, ey, l, w),
    ]


def _sample_surface(rng, center, normal, u, v, su, sv, params, reflectance):
    to_sensor = -center
    dist = float(np.linalg.norm(to_sensor))
    cos_inc = float(np.dot(normal, to_sensor)) / dist
    if cos_inc <= 0.02:
        return np.empty((0, 4))
    n = rng.poisson(params.density * su * sv * cos_inc / dist**2)
    if n == 0:
        return np.empty((0, 4))
    a = rng.uniform(-0.5, 0.5, size=(n, 1)) * su
    b = rng.uniform(-0.5, 0.5, size=(n, 1)) * sv
    xyz = center + a * u + b * v + rng.normal(0.0, params.noise, size=(n, 3))
    refl = np.clip(reflectance + rng.normal(0.0, 0.05, size=n), 0.0, 1.0)
    return np.c_[xyz, refl]


def _sample_cuboid(rng, box, params, refl):
    parts = [_sample_surface(rng, *face, params, refl) for face in _cuboid_faces(box)]
    return np.vstack(parts)


def _sample_ground(rng, params, footprints):
    # Density on flat ground goes as h / r^3; sample r from that law directly.
    r0, r1 = 2.5, params.max_range
    mass = params.density * SENSOR_HEIGHT * 2 * params.fov * (1 / r0 - 1 / r1)
    n = rng.poisson(mass)
    u = rng.random(n)
    r = 1.0 / (1 / r0 - u * (1 / r0 - 1 / r1))
    theta = rng.uniform(-params.fov, params.fov, n)
    xyz = np.c_[r * np.cos(theta), r * np.sin(theta), np.full(n, GROUND_Z)]
    xyz += rng.normal(0.0, params.noise, size=(n, 3))
    keep = np.ones(n, dtype=bool)
    for box in footprints:
        keep &= ~box.contains(np.c_[xyz[:, :2], np.full(n, box.center[2])])
    refl = np.clip(rng.normal(0.3, 0.1, size=n), 0.0, 1.0)
    return np.c_[xyz, refl][keep]


def _random_distractor(rng):
    yaw = rng.uniform(0, math.pi)
    if rng.random() < 0.5:  # thin pillar
        s = rng.uniform(0.15, 0.3)
        return (s, s, rng.uniform(1.0, 2.5)), yaw, 0.0
    # raised horizontal plate
    dims = (rng.uniform(1.2, 2.2), rng.uniform(0.8, 1.3), rng.uniform(0.05, 0.12))
    return dims, yaw, rng.uniform(0.6, 1.2)


def _place(rng, params, placed, radius):
    for _ in range(200):
        r = rng.uniform(*params.object_range)
        az = rng.uniform(-params.object_azimuth, params.object_azimuth)
        x, y = r * math.cos(az), r * math.sin(az)
        if all(math.hypot(x - px, y - py) > radius + pr + 0.4 for px, py, pr in placed):
            return x, y
    return None


def generate_scene(rng, params=SceneParams(), n_objects=None, n_distractors=None):
    """Return ``(PointCloud, boxes)`` for one random scene."""
    if n_objects is None:
        n_objects = int(rng.integers(params.objects[0], params.objects[1] + 1))
    if n_distractors is None:
        n_distractors = int(rng.integers(params.distractors[0], params.distractors[1] + 1))
    n_decoys = int(rng.integers(params.decoys[0], params.decoys[1] + 1))
    placed, boxes, clutter, refl = [], [], [], []
    for i in range(n_objects + n_decoys):
        dims = (rng.uniform(*params.box_length), rng.uniform(*params.box_width),
                rng.uniform(*params.box_height))
        radius = 0.5 * math.hypot(dims[0], dims[1])
        spot = _place(rng, params, placed, radius)
        if spot is None:
            continue
        placed.append((*spot, radius))
        real = i < n_objects
        box = Box3D((spot[0], spot[1], GROUND_Z + dims[2] / 2), dims,
                    rng.uniform(-math.pi, math.pi), SYNTHETIC_CLASS if real else "Clutter")
        if real:
            boxes.append(box)
            refl.append(rng.uniform(*params.box_reflectance))
        else:
            clutter.append(box)
            refl.append(rng.uniform(*params.decoy_reflectance[rng.integers(2)]))
    for _ in range(n_distractors):
        dims, yaw, lift = _random_distractor(rng)
        radius = 0.5 * math.hypot(dims[0], dims[1])
        spot = _place(rng, params, placed, radius)
        if spot is None:
            continue
        placed.append((*spot, radius))
        clutter.append(Box3D((spot[0], spot[1], GROUND_Z + lift + dims[2] / 2), dims, yaw, "Clutter"))
        refl.append(rng.uniform(0.1, 0.9))
    # the loop places real boxes first, so refl follows boxes + clutter
    parts = [_sample_cuboid(rng, b, params, r) for b, r in zip(boxes + clutter, refl)]
    if params.ground:
        parts.append(_sample_ground(rng, params, boxes + clutter))
    pts = np.vstack(parts) if parts else np.empty((0, 4))
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    pts = pts[(np.abs(azimuth) <= params.fov) & (pts[:, 0] > 0)]
    return PointCloud(pts), boxes


def quantize_box(box, calib):
    """The box as it reads back from a two-decimal KITTI label line."""
    label = parse_label_line(box_to_label(box, calib).to_line())
    return label, label_to_box(label, calib)


def write_dataset(root, n_train=60, n_val=50, seed=0, params=SceneParams(),
                  single_object_val=False):
    """Write a synthetic dataset in KITTI layout plus ``train.txt``/``val.txt``."""
    rng = np.random.default_rng(seed)
    calib = synthetic_calibration()
    for sub in ("velodyne", "label_2", "calib"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    ids = {"train": [], "val": []}
    for i in range(n_train + n_val):
        split = "train" if i < n_train else "val"
        if split == "val" and single_object_val:
            cloud, boxes = generate_scene(rng, params, n_objects=1)
        else:
            cloud, boxes = generate_scene(rng, params)
        fid = f"{i:06d}"
        ids[split].append(fid)
        write_velodyne_bin(os.path.join(root, "velodyne", fid + ".bin"), cloud)
        write_labels(os.path.join(root, "label_2", fid + ".txt"),
                     [quantize_box(b, calib)[0] for b in boxes])
        write_calibration(os.path.join(root, "calib", fid + ".txt"), calib)
    for split, fids in ids.items():
        with open(os.path.join(root, f"{split}.txt"), "w") as fh:
            fh.write("\n".join(fids) + ("\n" if fids else ""))
    return ids


def make_frames(n_frames, seed=0, params=SceneParams(), n_objects=None, prefix="syn"):
    """In-memory frames equivalent to what :func:`write_dataset` stores."""
    rng = np.random.default_rng(seed)
    calib = synthetic_calibration()
    frames = []
    for i in range(n_frames):
        cloud, boxes = generate_scene(rng, params, n_objects=n_objects)
        cloud = PointCloud(cloud.points.astype(np.float32).astype(np.float64))
        pairs = [quantize_box(b, calib) for b in boxes]
        frames.append(Frame(f"{prefix}{i:06d}", cloud, calib,
                            [p[0] for p in pairs], [p[1] for p in pairs]))
    return frames
