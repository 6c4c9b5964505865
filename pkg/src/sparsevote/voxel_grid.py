"""Point clouds, sparse feature grids and discretisation."""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

NUM_FEATURES = 6
_DEGENERATE_EIGENVALUE = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """Lidar returns as an ``(n, 4)`` array of x, y, z (meters) and reflectance.

    Reflectance is clamped into ``[0, 1]`` on construction.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (n, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates and reflectance must be finite")
        pts = pts.copy()
        np.clip(pts[:, 3], 0.0, 1.0, out=pts[:, 3])
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)))

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def reflectance(self):
        return self.points[:, 3]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class GridConfig:
    """Uniform 3D discretisation of a volume.

    The default volume is 80 m x 80 m x 6.4 m centred on the sensor in x and y
    with 0.2 m cells, and 8 orientation bins over [0, pi).
    """

    cell_size: float = 0.2
    origin: Tuple[float, float, float] = (-40.0, -40.0, -3.2)
    extents: Tuple[int, int, int] = (400, 400, 32)
    angular_bins: int = 8

    def __post_init__(self):
        if not (np.isfinite(self.cell_size) and self.cell_size > 0):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if len(self.extents) != 3 or any(int(e) < 1 for e in self.extents):
            raise ValueError(f"extents must be three counts >= 1, got {self.extents}")
        if int(self.angular_bins) < 1:
            raise ValueError(f"angular_bins must be >= 1, got {self.angular_bins}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "angular_bins", int(self.angular_bins))

    @property
    def num_cells(self):
        L, M, N = self.extents
        return L * M * N

    def cell_indices(self, xyz):
        """Integer cell index of each point; boundary points go to the higher cell."""
        rel = (np.asarray(xyz, dtype=np.float64) - np.asarray(self.origin)) / self.cell_size
        return np.floor(rel).astype(np.int64)

    def cell_centers(self, coords):
        return np.asarray(self.origin) + (np.asarray(coords, dtype=np.float64) + 0.5) * self.cell_size

    def bin_angles(self):
        return np.arange(self.angular_bins) * (np.pi / self.angular_bins)

    def to_dict(self):
        return {
            "cell_size": self.cell_size,
            "origin": list(self.origin),
            "extents": list(self.extents),
            "angular_bins": self.angular_bins,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cell_size=d["cell_size"],
            origin=tuple(d["origin"]),
            extents=tuple(d["extents"]),
            angular_bins=d["angular_bins"],
        )


class FeatureVector(NamedTuple):
    occupancy: float
    mean_reflectance: float
    var_reflectance: float
    linearity: float
    planarity: float
    sphericity: float


def _linear_keys(coords, shape):
    _, M, N = shape
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] * M + c[:, 1]) * N + c[:, 2]


def _keys_to_coords(keys, shape):
    _, M, N = shape
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.size, 3), dtype=np.int32)
    out[:, 0] = keys // (M * N)
    out[:, 1] = (keys // N) % M
    out[:, 2] = keys % N
    return out


@dataclass(frozen=True, eq=False)
class SparseGrid:
    """Occupied cells of an ``L x M x N`` grid and their feature vectors.

    ``coords`` is an ``(P, 3)`` int32 array kept in ascending lexicographic
    order with no duplicates; ``features`` is the matching ``(P, F)`` float32
    array. Cells whose feature vector is all zero are never stored.
    """

    coords: np.ndarray
    features: np.ndarray
    shape: Tuple[int, int, int]
    _keys: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"grid shape must be three positive ints, got {self.shape}")
        coords = np.ascontiguousarray(self.coords, dtype=np.int32).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError("features must be (P, F) matching coords")
        feats = np.ascontiguousarray(feats)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        if self._keys is None:
            if coords.size and (np.any(coords < 0) or np.any(coords >= np.asarray(shape))):
                raise ValueError("cell index outside grid extents")
            if feats.size and np.any(~np.any(feats != 0, axis=1)):
                raise ValueError("all-zero feature vectors must not be stored")
            keys = _linear_keys(coords, shape)
            if keys.size > 1 and np.any(np.diff(keys) <= 0):
                order = np.argsort(keys, kind="stable")
                keys = keys[order]
                if np.any(np.diff(keys) == 0):
                    raise ValueError("duplicate cell indices")
                object.__setattr__(self, "coords", coords[order])
                object.__setattr__(self, "features", feats[order])
            object.__setattr__(self, "_keys", keys)
        for arr in (self.coords, self.features, self._keys):
            arr.setflags(write=False)

    @classmethod
    def _trusted(cls, keys, features, shape):
        """Build from already sorted, unique, in-bounds, non-zero rows."""
        keys = np.asarray(keys, dtype=np.int64)
        return cls(_keys_to_coords(keys, shape), features, shape, _keys=keys)

    @classmethod
    def empty(cls, shape, channels):
        return cls._trusted(np.empty(0, np.int64), np.empty((0, channels), np.float32), shape)

    @classmethod
    def from_dense(cls, dense):
        """Sparse view of an ``(L, M, N, F)`` array (all-zero cells dropped)."""
        dense = np.asarray(dense, dtype=np.float32)
        occupied = np.any(dense != 0, axis=3)
        coords = np.argwhere(occupied).astype(np.int32)
        return cls(coords, dense[occupied], dense.shape[:3])

    @property
    def keys(self):
        """Linear cell indices ``(l * M + m) * N + n``, ascending."""
        return self._keys

    @property
    def num_occupied(self):
        return self.coords.shape[0]

    @property
    def num_channels(self):
        return self.features.shape[1]

    @property
    def num_cells(self):
        L, M, N = self.shape
        return L * M * N

    def __len__(self):
        return self.num_occupied

    def __iter__(self):
        """Yield ``((l, m, n), feature_vector)`` once per occupied cell."""
        for c, f in zip(self.coords, self.features):
            yield (int(c[0]), int(c[1]), int(c[2])), f

    def lookup(self, index):
        """Feature vector at ``index`` or ``None`` when the cell is empty."""
        key = _linear_keys(np.asarray(index).reshape(1, 3), self.shape)[0]
        pos = np.searchsorted(self._keys, key)
        if pos < self._keys.size and self._keys[pos] == key:
            return self.features[pos]
        return None

    def to_dense(self):
        L, M, N = self.shape
        out = np.zeros((L, M, N, self.num_channels), dtype=np.float32)
        if self.num_occupied:
            out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.features
        return out

    def scaled(self, alpha):
        alpha = np.float32(alpha)
        if alpha == 0:
            return SparseGrid.empty(self.shape, self.num_channels)
        return SparseGrid._trusted(self._keys, self.features * alpha, self.shape)


def compute_cell_features(cell_points):
    """Feature vector of the points falling into one cell.

    Args:
        cell_points: ``(n, 4)`` array of x, y, z, reflectance with ``n >= 1``.

    Returns:
        FeatureVector with population mean/variance of reflectance and the
        linearity, planarity and sphericity of the coordinate scatter matrix.
        Cells with fewer than three points or a vanishing largest eigenvalue
        get zero shape factors.
    """
    pts = np.asarray(cell_points, dtype=np.float64).reshape(-1, 4)
    if pts.shape[0] == 0:
        raise ValueError("compute_cell_features needs at least one point")
    refl = np.clip(pts[:, 3], 0.0, 1.0)
    mean = refl.mean()
    var = float(np.mean((refl - mean) ** 2))
    shape = (0.0, 0.0, 0.0)
    if pts.shape[0] >= 3:
        centred = pts[:, :3] - pts[:, :3].mean(axis=0)
        lam = np.linalg.eigvalsh(centred.T @ centred)[::-1]
        lam = np.maximum(lam, 0.0)
        if lam[0] >= _DEGENERATE_EIGENVALUE:
            shape = ((lam[0] - lam[1]) / lam[0], (lam[1] - lam[2]) / lam[0], lam[2] / lam[0])
    return FeatureVector(1.0, float(mean), var, *(float(s) for s in shape))


def discretize(cloud, config):
    """Bin a point cloud into a :class:`SparseGrid` of per-cell features.

    Points outside the configured volume are dropped. Vectorised over cells;
    agrees with :func:`compute_cell_features` applied cell by cell.
    """
    shape = config.extents
    if len(cloud) == 0:
        return SparseGrid.empty(shape, NUM_FEATURES)
    pts = cloud.points
    idx = config.cell_indices(pts[:, :3])
    inside = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    if not inside.any():
        return SparseGrid.empty(shape, NUM_FEATURES)
    idx, pts = idx[inside], pts[inside]
    keys = _linear_keys(idx, shape)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    n = counts.astype(np.float64)
    q = uniq.size

    def cell_sum(values):
        return np.bincount(inv, weights=values, minlength=q)

    refl = pts[:, 3]
    mean_r = cell_sum(refl) / n
    var_r = cell_sum((refl - mean_r[inv]) ** 2) / n

    xyz = pts[:, :3]
    centroid = np.stack([cell_sum(xyz[:, d]) for d in range(3)], axis=1) / n[:, None]
    d = xyz - centroid[inv]
    scatter = np.empty((q, 3, 3))
    for r in range(3):
        for c in range(r, 3):
            scatter[:, r, c] = scatter[:, c, r] = cell_sum(d[:, r] * d[:, c])
    lam = np.maximum(np.linalg.eigvalsh(scatter)[:, ::-1], 0.0)
    valid = (counts >= 3) & (lam[:, 0] >= _DEGENERATE_EIGENVALUE)
    l1 = np.where(valid, lam[:, 0], 1.0)
    shape_factors = np.stack(
        [(lam[:, 0] - lam[:, 1]) / l1, (lam[:, 1] - lam[:, 2]) / l1, lam[:, 2] / l1], axis=1
    )
    shape_factors[~valid] = 0.0

    feats = np.empty((q, NUM_FEATURES), dtype=np.float32)
    feats[:, 0] = 1.0
    feats[:, 1] = mean_r
    feats[:, 2] = var_r
    feats[:, 3:] = np.clip(shape_factors, 0.0, 1.0)
    return SparseGrid._trusted(uniq, feats, shape)


def rotate_points(cloud, yaw):
    """Rotate a cloud by ``yaw`` radians about the vertical axis through (0, 0)."""
    if yaw == 0:
        return cloud
    c, s = np.cos(yaw), np.sin(yaw)
    pts = cloud.points.copy()
    x, y = pts[:, 0].copy(), pts[:, 1]
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    return PointCloud(pts)


def translate_points(cloud, offset):
    pts = cloud.points.copy()
    pts[:, :3] += np.asarray(offset, dtype=np.float64)
    return PointCloud(pts)
