"""Training class-specific networks on receptive-field sized crops.

Objective per example: hinge loss on the crop-centre score plus an L1
penalty on every hidden activation, normalised by the crop volume. Batches
are optimised with momentum SGD and L2 weight decay; biases are projected
back to ``b <= 0`` after every step. Negatives start as random crops that
do not touch any positive and are extended by hard negative mining.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .detector import detect_frame
from .evaluation import evaluate
from .geometry import Box3D, fit_class_box, iou_3d
from .kitti_io import detections_to_labels
from .network import Network, architecture_for_box, init_he
from .sparse_conv import backward_raw, vote_forward_raw
from .voxel_grid import GridConfig, PointCloud, SparseGrid, discretize

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE = 1, -1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    l2_weight_decay: float = 1e-4
    l1_sparsity_penalty: float = 0.0
    mining_period_epochs: int = 10
    mined_per_frame: int = 10
    seed: int = 0
    augment: bool = True
    deterministic: bool = True
    workers: Optional[int] = None
    validate_every: int = 1
    difficulty: str = "moderate"
    mining_iou: float = 0.25
    mining_threshold: float = 0.0
    eval_threshold: float = 0.0

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "l2_weight_decay", "l1_sparsity_penalty"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.mining_period_epochs < 1 or self.mined_per_frame < 0:
            raise ValueError("epochs, mining period and mined count must be non-negative")
        if self.validate_every < 1:
            raise ValueError("validate_every must be >= 1")


@dataclass
class Example:
    """A receptive-field sized crop with its label.

    ``points`` are the source points in the crop frame (centred on the crop,
    rotated to the canonical orientation) so augmentation can re-discretise.
    """

    crop: SparseGrid
    label: int
    frame_id: str = ""
    source: str = "ground-truth"
    points: Optional[np.ndarray] = None


@dataclass
class OptimizerState:
    velocity_w: List[np.ndarray]
    velocity_b: List[np.ndarray]

    @classmethod
    def zeros(cls, net):
        return cls([np.zeros_like(b.weights) for b in net.banks],
                   [np.zeros_like(b.biases) for b in net.banks])


@dataclass
class Gradients:
    """Per-layer ``(d_weights, d_biases)`` pairs."""

    layers: List[tuple]

    @classmethod
    def zeros(cls, net):
        return cls([(np.zeros(b.weights.shape, np.float64), np.zeros(b.biases.shape, np.float64))
                    for b in net.banks])

    def add_(self, other, scale=1.0):
        for (dw, db), (ow, ob) in zip(self.layers, other.layers):
            dw += scale * ow
            db += scale * ob
        return self


def hinge_loss(score, label):
    """``max(0, 1 - score * label)`` and its subgradient in the score."""
    if label not in (POSITIVE, NEGATIVE):
        raise ValueError(f"label must be +1 or -1, got {label}")
    margin = 1.0 - score * label
    if margin > 0:
        return margin, -float(label)
    return 0.0, 0.0


def l1_activation_penalty(activations, lam):
    """``lam * sum_layers sum|h| / (L*M*N)`` and per-layer subgradients.

    Subgradients are arrays aligned with each activation's stored features.
    """
    penalty = 0.0
    grads = []
    for h in activations:
        vol = float(h.num_cells)
        penalty += float(np.abs(h.features).sum(dtype=np.float64)) / vol
        grads.append((lam / vol) * np.sign(h.features))
    return lam * penalty, grads


def crop_config(rf_cells, cell_size):
    """Grid for a crop centred on the origin; the origin is the centre of the middle cell."""
    rf = np.asarray(rf_cells)
    return GridConfig(cell_size, tuple(-rf * cell_size / 2.0), tuple(int(r) for r in rf), 1)


def crop_points(cloud, center, yaw, rf_cells, cell_size):
    """Points inside the crop volume, expressed in the crop frame."""
    half = np.asarray(rf_cells) * cell_size / 2.0
    pts = cloud.points
    d = pts[:, :3] - np.asarray(center)
    # cheap radius cut before rotating
    near = (np.abs(d[:, 2]) < half[2]) & (np.hypot(d[:, 0], d[:, 1]) < np.hypot(half[0], half[1]))
    d, refl = d[near], pts[near, 3]
    c, s = math.cos(yaw), math.sin(yaw)
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    local = np.c_[u, v, d[:, 2], refl]
    inside = np.all(np.abs(local[:, :3]) < half, axis=1)
    return local[inside]


def make_example(cloud, center, yaw, rf_cells, cell_size, label, frame_id="", source="ground-truth"):
    pts = crop_points(cloud, center, yaw, rf_cells, cell_size)
    crop = discretize(PointCloud(pts), crop_config(rf_cells, cell_size))
    return Example(crop, label, frame_id, source, pts)


def augment(example, grid_config, rng, rf_cells=None):
    """Jitter a crop by a sub-cell translation and a sub-bin rotation.

    Translation is uniform in ``(-cell_size, cell_size)`` per axis and yaw is
    uniform in ``(-pi/bins, pi/bins)``; the crop is re-discretised from its
    source points.
    """
    if example.points is None:
        raise ValueError("augmentation needs the example's source points")
    cs = grid_config.cell_size
    shift = rng.uniform(-cs, cs, size=3)
    yaw = rng.uniform(-math.pi / grid_config.angular_bins, math.pi / grid_config.angular_bins)
    pts = example.points.copy()
    c, s = math.cos(yaw), math.sin(yaw)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y + shift[0]
    pts[:, 1] = s * x + c * y + shift[1]
    pts[:, 2] += shift[2]
    rf = rf_cells if rf_cells is not None else example.crop.shape
    half = np.asarray(rf) * cs / 2.0
    inside = np.all(np.abs(pts[:, :3]) < half, axis=1)
    crop = discretize(PointCloud(pts[inside]), crop_config(rf, cs))
    return replace(example, crop=crop, points=pts)


def _center_key(shape):
    L, M, N = shape
    return ((L // 2) * M + M // 2) * N + N // 2


@dataclass
class ExampleResult:
    score: float
    loss: float
    penalty: float
    gradients: Gradients
    occupancy: List[int]


def example_gradients(net, crop, label, lam=0.0):
    """Loss and parameter gradients for one crop.

    The score is the final-layer value at the crop centre; when no vote
    reaches the centre it equals the output bias (the dense value there).
    """
    layers = net.architecture.layers
    h = crop
    inputs, trace = [], []
    for spec, bank in zip(layers[:-1], net.banks[:-1]):
        keys, z = vote_forward_raw(h, bank)
        inputs.append(h)
        a = np.maximum(z, 0.0)
        keep = np.any(a > 0, axis=1)
        trace.append((keys[keep], z[keep], a[keep]))
        h = SparseGrid._trusted(keys[keep], a[keep], h.shape)
    last = net.banks[-1]
    keys, z = vote_forward_raw(h, last)
    center = _center_key(crop.shape)
    pos = np.searchsorted(keys, center)
    hit = pos < keys.size and keys[pos] == center
    score = float(z[pos, 0]) if hit else float(last.biases[0])
    loss, dscore = hinge_loss(score, label)

    activations = [SparseGrid._trusted(k, a, crop.shape) for k, _, a in trace]
    penalty, l1_grads = l1_activation_penalty(activations, lam)

    grads = [None] * len(layers)
    g_keys = np.array([center], np.int64) if hit else np.empty(0, np.int64)
    g_vals = np.full((g_keys.size, 1), dscore, np.float32)
    dw, db, g_in = backward_raw(h, last, g_keys, g_vals)
    if not hit:
        db = np.array([dscore], np.float32)
    grads[-1] = (dw, db)
    for idx in range(len(layers) - 2, -1, -1):
        keys_h, z_h, a_h = trace[idx]
        g_h = g_in + l1_grads[idx]
        g_z = (g_h * (a_h > 0)).astype(np.float32)
        dw, db, g_in = backward_raw(inputs[idx], net.banks[idx], keys_h, g_z)
        grads[idx] = (dw, db)
    occupancy = [int(k.size) for k, _, _ in trace]
    return ExampleResult(score, loss, penalty,
                         Gradients([(w.astype(np.float64), b.astype(np.float64)) for w, b in grads]),
                         occupancy)


def batch_gradients(net, crops, labels, lam=0.0, workers=1, deterministic=True):
    """Mean objective and gradients over a batch.

    Examples are evaluated on a thread pool; each produces a private
    gradient. In deterministic mode the reduction follows batch order.
    """
    n = len(crops)
    total = Gradients.zeros(net)
    loss = penalty = 0.0
    occupancy = np.zeros(max(len(net.banks) - 1, 0))
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(example_gradients, net, c, y, lam) for c, y in zip(crops, labels)]
            done = futures if deterministic else as_completed(futures)
            results = [f.result() for f in done]
    else:
        results = [example_gradients(net, c, y, lam) for c, y in zip(crops, labels)]
    for r in results:
        total.add_(r.gradients, 1.0 / n)
        loss += r.loss / n
        penalty += r.penalty / n
        occupancy += np.asarray(r.occupancy, dtype=np.float64) / n
    return loss, penalty, total, occupancy


def sgd_step(net, state, grads, config):
    """Momentum SGD with L2 decay; biases are clamped to ``<= 0`` afterwards.

    ``v <- momentum * v - lr * (grad + l2 * param)``, ``param <- param + v``.
    A non-finite gradient aborts the step without touching the parameters.
    """
    for i, (dw, db) in enumerate(grads.layers):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise FloatingPointError(f"non-finite gradient in layer {i}; step aborted")
    lr, mu, l2 = config.learning_rate, config.momentum, config.l2_weight_decay
    for bank, vw, vb, (dw, db) in zip(net.banks, state.velocity_w, state.velocity_b, grads.layers):
        vw *= mu
        vw -= (lr * (dw + l2 * bank.weights)).astype(np.float32)
        vb *= mu
        vb -= (lr * (db + l2 * bank.biases)).astype(np.float32)
        bank.weights += vw
        bank.biases += vb
        bank.project()
    return net, state


# ----------------------------------------------------------------------------
# Example pools


def canonical_yaw(yaw):
    """Box yaw folded into ``[0, pi)``; boxes are symmetric under half turns."""
    return yaw % math.pi


def positive_examples(frames, class_name, rf_cells, cell_size):
    out = []
    for frame in frames:
        for box in frame.boxes_of(class_name):
            out.append(make_example(frame.cloud, box.center, canonical_yaw(box.yaw),
                                    rf_cells, cell_size, POSITIVE, frame.frame_id))
    return out


def _overlaps_any(box, gt_boxes, max_iou=0.0):
    return any(iou_3d(box, g) > max_iou for g in gt_boxes)


def random_negatives(frames, class_box, count, rf_cells, cell_size, angular_bins, rng,
                     max_tries=200):
    """Crops centred near random points whose class box touches no positive."""
    out = []
    usable = [f for f in frames if len(f.cloud)]
    if not usable or count <= 0:
        return out
    bin_width = math.pi / angular_bins
    half = np.asarray(class_box.dims) / 2
    i = 0
    while len(out) < count:
        frame = usable[i % len(usable)]
        i += 1
        gts = frame.boxes_of(class_box.class_name)
        for _ in range(max_tries):
            p = frame.cloud.xyz[rng.integers(len(frame.cloud))]
            center = p + rng.uniform(-half, half)
            yaw = bin_width * rng.integers(angular_bins)
            box = Box3D(tuple(center), class_box.dims, yaw, class_box.class_name)
            if not _overlaps_any(box, gts):
                out.append(make_example(frame.cloud, center, yaw, rf_cells, cell_size, NEGATIVE,
                                        frame.frame_id, "random-negative"))
                break
        if i > 50 * count + len(usable):
            logger.warning("could only place %d of %d random negatives", len(out), count)
            break
    return out


def mine_hard_negatives(net, frames, config, class_name=None, grid_config=None):
    """Highest scoring false positives per frame, cropped as negatives.

    A detection is false when its 3D IoU with every same-class ground-truth
    box is below ``config.mining_iou``.
    """
    grid_config = grid_config or net.grid_config
    class_name = class_name or net.class_box.class_name
    rf = net.receptive_field
    out = []
    for frame in frames:
        dets = detect_frame(net, frame.cloud, grid_config, config.mining_threshold,
                            workers=config.workers)
        gts = frame.boxes_of(class_name)
        false = [d for d in dets if not any(iou_3d(d.box, g) >= config.mining_iou for g in gts)]
        false.sort(key=lambda d: -d.score)
        for d in false[:config.mined_per_frame]:
            out.append(make_example(frame.cloud, d.center, d.yaw, rf, grid_config.cell_size,
                                    NEGATIVE, frame.frame_id, "mined-negative"))
    return out


# ----------------------------------------------------------------------------
# Validation


def detect_frames(net, frames, threshold, workers=None, grid_config=None):
    return [detect_frame(net, f.cloud, grid_config or net.grid_config, threshold, workers=workers)
            for f in frames]


def validation_ap(net, frames, difficulty="moderate", threshold=0.0, workers=None):
    """AP of ``net`` on labelled frames through the image-plane protocol."""
    if not frames:
        return None
    dets = detect_frames(net, frames, threshold, workers)
    det_labels = [detections_to_labels(d, f.calib) for d, f in zip(dets, frames)]
    return evaluate(det_labels, [f.labels for f in frames], net.class_box.class_name,
                    difficulty).ap


def mean_hidden_occupancy(net, frames, grid_config=None):
    """Mean occupied cells per hidden layer over frames (bin 0 pass)."""
    grid_config = grid_config or net.grid_config
    totals = np.zeros(max(len(net.banks) - 1, 0))
    for f in frames:
        _, acts = net.forward(discretize(f.cloud, grid_config), return_activations=True)
        totals += [a.num_occupied for a in acts]
    return totals / max(len(frames), 1)


# ----------------------------------------------------------------------------
# Training loop


@dataclass
class FitResult:
    best: Network
    final: Network
    log: List[dict] = field(default_factory=list)
    best_epoch: int = 0


def _worker_count(config):
    return config.workers or os.cpu_count() or 1


def fit(train_frames, class_name, model="D", config=None, grid_config=None, val_frames=(),
        class_box=None, net=None, hidden=8, log_path=None):
    """Train a detector for ``class_name``.

    Returns the validation-best and final-epoch networks along with one log
    record per epoch (also appended to ``log_path`` as JSON lines).
    """
    config = config or TrainConfig()
    grid_config = grid_config or GridConfig()
    train_frames = list(train_frames)
    val_frames = list(val_frames)
    gt = [b for f in train_frames for b in f.boxes_of(class_name)]
    if not gt:
        raise ValueError(f"no positive {class_name!r} examples in the training frames")
    rng = np.random.default_rng(config.seed)
    if net is None:
        class_box = class_box or fit_class_box(gt, 95.0, class_name)
        arch = architecture_for_box(model, class_box, grid_config.cell_size, hidden)
        net = init_he(arch, config.seed, grid_config=grid_config, class_box=class_box)
    else:
        net = net.copy()
        net.grid_config = net.grid_config or grid_config
        if net.class_box is None:
            net.class_box = class_box or fit_class_box(gt, 95.0, class_name)
    grid_config = net.grid_config
    rf = net.receptive_field
    cs = grid_config.cell_size
    workers = _worker_count(config)
    lam = config.l1_sparsity_penalty

    positives = positive_examples(train_frames, class_name, rf, cs)
    negatives = random_negatives(train_frames, net.class_box, len(positives), rf, cs,
                                 grid_config.angular_bins, rng)
    state = OptimizerState.zeros(net)
    log = []
    best, best_ap, best_epoch = net.copy(), -1.0, 0
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            pool = [(augment(p, grid_config, rng, rf).crop if config.augment else p.crop, POSITIVE)
                    for p in positives]
            pool += [(n.crop, NEGATIVE) for n in negatives]
            order = rng.permutation(len(pool))
            sums = np.zeros(2)
            occ = np.zeros(max(len(net.banks) - 1, 0))
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, penalty, grads, occupancy = batch_gradients(
                    net, [pool[i][0] for i in idx], [pool[i][1] for i in idx], lam,
                    workers, config.deterministic)
                sgd_step(net, state, grads, config)
                sums += (loss, penalty)
                occ += occupancy
                batches += 1
            mined = 0
            if epoch % config.mining_period_epochs == 0 and epoch < config.epochs:
                new = mine_hard_negatives(net, train_frames, config, class_name)
                negatives += new
                mined = len(new)
            ap = None
            if val_frames and (epoch % config.validate_every == 0 or epoch == config.epochs):
                ap = validation_ap(net, val_frames, config.difficulty, config.eval_threshold, workers)
                if ap is not None and ap > best_ap:
                    best, best_ap, best_epoch = net.copy(), ap, epoch
            record = {
                "epoch": epoch,
                "loss": float(sums[0] / max(batches, 1)),
                "penalty": float(sums[1] / max(batches, 1)),
                "validation_ap": ap,
                "layer_occupancy": [float(o) for o in occ / max(batches, 1)],
                "pool_positives": len(positives),
                "pool_negatives": len(negatives),
                "mined": mined,
                "wall_time": time.perf_counter() - t0,
            }
            log.append(record)
            logger.info("epoch %d loss %.4f ap %s", epoch, record["loss"], ap)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    final = net
    if best_ap < 0:
        best, best_epoch = final.copy(), config.epochs
    for n in (best, final):
        n.meta = {"class_name": class_name, "train_config": asdict(config)}
    return FitResult(best, final, log, best_epoch)
