"""Timing and sparsity measurements for detection and for the voting kernels."""

import csv
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import _backend
from .detector import detect_frame
from .sparse_conv import FilterBank, vote_forward
from .voxel_grid import SparseGrid, discretize, rotate_points


@dataclass
class BenchReport:
    times: np.ndarray  # seconds per frame, one entry per (repetition, frame)
    input_occupancy: float
    layer_occupancy: List[float]  # mean occupied cells after each layer
    frames: int
    repetitions: int
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(self.times.mean()) if self.times.size else 0.0

    @property
    def std(self):
        return float(self.times.std()) if self.times.size else 0.0

    def to_dict(self):
        return {
            "frames": self.frames,
            "repetitions": self.repetitions,
            "mean_seconds_per_frame": self.mean,
            "std_seconds_per_frame": self.std,
            "input_occupancy": self.input_occupancy,
            "layer_occupancy": list(self.layer_occupancy),
            **self.meta,
        }


def occupancy_profile(net, clouds, grid_config=None):
    """Mean occupied cells of the input and of every layer output over frames and bins."""
    grid_config = grid_config or net.grid_config
    n_layers = len(net.banks)
    inputs, layers, passes = 0.0, np.zeros(n_layers), 0
    for cloud in clouds:
        for alpha in grid_config.bin_angles():
            grid = discretize(rotate_points(cloud, -float(alpha)), grid_config)
            out, acts = net.forward(grid, return_activations=True)
            inputs += grid.num_occupied
            layers += [a.num_occupied for a in acts] + [out.num_occupied]
            passes += 1
    passes = max(passes, 1)
    return inputs / passes, (layers / passes).tolist()


def benchmark_detection(net, clouds, repetitions=1, threshold=0.0, workers=None,
                        grid_config=None):
    """Wall time of :func:`detect_frame` per frame plus the occupancy profile."""
    clouds = list(clouds)
    if not clouds:
        raise ValueError("benchmark needs at least one frame")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    grid_config = grid_config or net.grid_config
    times = []
    for _ in range(repetitions):
        for cloud in clouds:
            t0 = time.perf_counter()
            detect_frame(net, cloud, grid_config, threshold, workers=workers)
            times.append(time.perf_counter() - t0)
    inp, layers = occupancy_profile(net, clouds, grid_config)
    return BenchReport(np.asarray(times), inp, layers, len(clouds), repetitions)


def write_bench_csv(path, rows):
    """One row per model: penalty, runtime mean/std, per-layer occupancy and an AP slot."""
    depth = max((len(r["report"].layer_occupancy) for r in rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "l1_penalty", "runtime_mean_s", "runtime_std_s", "input_occupancy"]
                   + [f"layer{i + 1}_occupancy" for i in range(depth)] + ["ap"])
        for r in rows:
            rep = r["report"]
            occ = list(rep.layer_occupancy) + [""] * (depth - len(rep.layer_occupancy))
            ap = r.get("ap")
            w.writerow([r.get("model", ""), r.get("penalty", ""), f"{rep.mean:.6f}",
                        f"{rep.std:.6f}", f"{rep.input_occupancy:.1f}"]
                       + [f"{o:.1f}" if o != "" else "" for o in occ]
                       + ["" if ap is None else f"{ap:.6f}"])


def _random_grid(rng, shape, occupancy, channels):
    n_cells = int(np.prod(shape))
    count = max(1, int(round(occupancy * n_cells)))
    keys = np.sort(rng.choice(n_cells, size=count, replace=False)).astype(np.int64)
    feats = (np.abs(rng.normal(size=(count, channels))) + 0.1).astype(np.float32)
    return SparseGrid._trusted(keys, feats, tuple(shape))


def kernel_benchmark(shape=(100, 100, 20), occupancies=(0.01, 0.05, 0.1), kernel=(3, 3, 3),
                     f_in=8, f_out=8, repeats=5, seed=0, backends=None):
    """Median ``vote_forward`` time per backend and occupancy.

    Returns a list of dicts with ``backend``, ``occupancy``, ``occupied`` and
    ``seconds``. The active backend is restored afterwards.
    """
    rng = np.random.default_rng(seed)
    bank = FilterBank(rng.normal(size=(*kernel, f_in, f_out)) * 0.1, -0.1 * rng.random(f_out))
    grids = [(occ, _random_grid(rng, shape, occ, f_in)) for occ in occupancies]
    backends = backends or _backend.available_backends()
    previous = _backend.get_backend()
    rows = []
    try:
        for name in backends:
            _backend.set_backend(name)
            for occ, grid in grids:
                vote_forward(grid, bank)  # warm-up
                samples = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    vote_forward(grid, bank)
                    samples.append(time.perf_counter() - t0)
                rows.append({"backend": name, "occupancy": occ, "occupied": grid.num_occupied,
                             "seconds": float(np.median(samples))})
    finally:
        _backend.set_backend(previous)
    return rows
