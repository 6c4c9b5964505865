import math

import numpy as np
import pytest

from sparsevote import trainer
from sparsevote.detector import Detection
from sparsevote.geometry import Box3D, ClassBoxSpec, iou_3d
from sparsevote.network import (
    Architecture,
    LayerSpec,
    Network,
    dumps,
    init_he,
    make_architecture,
)
from sparsevote.sparse_conv import FilterBank
from sparsevote.synthetic import SYNTHETIC_CLASS, make_frames, synthetic_grid_config
from sparsevote.trainer import (
    Example,
    Gradients,
    OptimizerState,
    TrainConfig,
    augment,
    example_gradients,
    fit,
    hinge_loss,
    l1_activation_penalty,
    make_example,
    mine_hard_negatives,
    random_negatives,
    sgd_step,
)
from sparsevote.voxel_grid import GridConfig, PointCloud, SparseGrid

from conftest import random_grid
from oracles import finite_difference_check, network_objective64, toy_network


class TestHinge:
    @pytest.mark.parametrize(
        "score,label,loss,grad",
        [(2.0, 1, 0.0, 0.0), (0.0, 1, 1.0, -1.0), (-0.5, -1, 0.5, 1.0)],
    )
    def test_table(self, score, label, loss, grad):
        assert hinge_loss(score, label) == (loss, grad)

    def test_margin_point_has_zero_subgradient(self):
        assert hinge_loss(1.0, 1) == (0.0, 0.0)
        assert hinge_loss(-1.0, -1) == (0.0, 0.0)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            hinge_loss(0.0, 0)


class TestL1Penalty:
    def test_all_zero(self):
        penalty, grads = l1_activation_penalty([SparseGrid.empty((4, 4, 4), 3)], 0.5)
        assert penalty == 0.0 and grads[0].shape == (0, 3)

    def test_single_value(self):
        h = SparseGrid([[1, 2, 3]], [[3.0]], (10, 10, 10))
        penalty, _ = l1_activation_penalty([h], 0.01)
        assert penalty == pytest.approx(3e-5, rel=1e-12)

    def test_matches_dense_formula(self, rng):
        layers = [random_grid(rng, (6, 5, 4), 3, 0.3, positive=True) for _ in range(2)]
        penalty, grads = l1_activation_penalty(layers, 0.2)
        ref = sum(0.2 * np.abs(h.to_dense()).sum() / 120.0 for h in layers)
        assert penalty == pytest.approx(ref, rel=1e-6)
        np.testing.assert_allclose(grads[0], 0.2 / 120.0 * np.sign(layers[0].features))


def tiny_net(bias=0.0):
    arch = Architecture((LayerSpec((1, 1, 1), 1, 1, False),))
    return Network(arch, [FilterBank(np.ones((1, 1, 1, 1, 1)), np.array([bias]))])


class TestSgd:
    def test_fixed_point(self):
        net = init_he(make_architecture("B", (5, 5, 5)), seed=0)
        before = net.copy()
        state = OptimizerState.zeros(net)
        cfg = TrainConfig(l2_weight_decay=0.0)
        sgd_step(net, state, Gradients.zeros(net), cfg)
        assert net.parameters_equal(before)

    def test_single_step(self):
        net = tiny_net()
        grads = Gradients([(np.ones((1, 1, 1, 1, 1)), np.zeros(1))])
        sgd_step(net, OptimizerState.zeros(net), grads,
                 TrainConfig(learning_rate=0.1, momentum=0.0, l2_weight_decay=0.0))
        assert net.banks[0].weights.item() == pytest.approx(0.9)

    def test_momentum_and_decay_recurrence(self):
        net = tiny_net()
        state = OptimizerState.zeros(net)
        cfg = TrainConfig(learning_rate=0.1, momentum=0.5, l2_weight_decay=0.2)
        w, v = 1.0, 0.0
        for g in (1.0, -2.0, 0.5):
            sgd_step(net, state, Gradients([(np.full((1, 1, 1, 1, 1), g), np.zeros(1))]), cfg)
            v = 0.5 * v - 0.1 * (g + 0.2 * w)
            w = w + v
            assert net.banks[0].weights.item() == pytest.approx(w, rel=1e-6)

    def test_two_steps_with_heavy_momentum(self):
        rng = np.random.default_rng(2)
        net = init_he(make_architecture("B", (5, 3, 3), hidden=2), seed=1)
        ref = [(b.weights.astype(np.float64), b.biases.astype(np.float64)) for b in net.banks]
        vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in ref]
        state = OptimizerState.zeros(net)
        cfg = TrainConfig(learning_rate=0.05, momentum=0.9, l2_weight_decay=1e-3)
        for _ in range(2):
            grads = Gradients([(rng.normal(size=w.shape), -np.abs(rng.normal(size=b.shape)))
                               for w, b in ref])
            sgd_step(net, state, grads, cfg)
            new_ref, new_vel = [], []
            for (w, b), (vw, vb), (gw, gb) in zip(ref, vel, grads.layers):
                vw = 0.9 * vw - 0.05 * (gw + 1e-3 * w)
                vb = 0.9 * vb - 0.05 * (gb + 1e-3 * b)
                new_ref.append((w + vw, np.minimum(b + vb, 0.0)))
                new_vel.append((vw, vb))
            ref, vel = new_ref, new_vel
        for bank, (w, b) in zip(net.banks, ref):
            assert np.max(np.abs(bank.weights - w)) <= 1e-7
            assert np.max(np.abs(bank.biases - b)) <= 1e-7

    def test_bias_projected(self):
        net = tiny_net(-0.05)
        grads = Gradients([(np.zeros((1, 1, 1, 1, 1)), np.array([-1.0]))])
        sgd_step(net, OptimizerState.zeros(net), grads, TrainConfig(learning_rate=0.1))
        assert net.banks[0].biases.item() == 0.0

    def test_nan_gradient_aborts(self):
        net = tiny_net()
        grads = Gradients([(np.full((1, 1, 1, 1, 1), np.nan), np.zeros(1))])
        with pytest.raises(FloatingPointError):
            sgd_step(net, OptimizerState.zeros(net), grads, TrainConfig())
        assert net.banks[0].weights.item() == 1.0

    @pytest.mark.parametrize("field", ["learning_rate", "momentum", "l1_sparsity_penalty"])
    def test_negative_hyperparameters_rejected(self, field):
        with pytest.raises(ValueError):
            TrainConfig(**{field: -1.0})


class ZeroRng:
    def uniform(self, low, high, size=None):
        return np.zeros(size) if size is not None else 0.0


class TestAugment:
    def make(self, rng):
        pts = np.c_[rng.uniform(-0.9, 0.9, size=(200, 3)), rng.random(200)]
        cloud = PointCloud(pts)
        return make_example(cloud, (0.0, 0.0, 0.0), 0.0, (11, 9, 9), 0.2, 1)

    def test_zero_draws_identity(self, rng):
        ex = self.make(rng)
        out = augment(ex, GridConfig(0.2, angular_bins=8), ZeroRng(), (11, 9, 9))
        np.testing.assert_array_equal(out.crop.coords, ex.crop.coords)
        np.testing.assert_array_equal(out.crop.features, ex.crop.features)

    def test_point_count_and_bounds(self, rng):
        ex = self.make(rng)
        cfg = GridConfig(0.2, angular_bins=8)
        for seed in range(20):
            out = augment(ex, cfg, np.random.default_rng(seed), (11, 9, 9))
            assert len(out.points) == len(ex.points)
            # rigid motion: pairwise distances preserved
            d0 = np.linalg.norm(ex.points[1:, :3] - ex.points[0, :3], axis=1)
            d1 = np.linalg.norm(out.points[1:, :3] - out.points[0, :3], axis=1)
            np.testing.assert_allclose(d0, d1, atol=1e-9)
            shift = out.points[:, :3].mean(0) - ex.points[:, :3].mean(0)
            # centroid moves by the translation plus the rotation of a small offset
            assert np.all(np.abs(shift) < 0.2 + np.linalg.norm(ex.points[:, :2].mean(0)) * math.pi / 8)
            assert out.crop.shape == ex.crop.shape


class TestExampleGradients:
    def test_finite_differences(self, backend):
        rng = np.random.default_rng(11)
        net = toy_network(rng)
        crop = random_grid(rng, (8, 8, 8), 6, 0.15, positive=True)
        for label in (1, -1):
            res = example_gradients(net, crop, label, 0.05)
            assert res.loss > 0, "probe point must sit off the hinge kink"
            assert finite_difference_check(net, crop, label, 0.05, 15, rng) <= 1e-3

    def test_objective_matches_oracle(self, backend, rng):
        net = toy_network(rng)
        crop = random_grid(rng, (8, 8, 8), 6, 0.15, positive=True)
        res = example_gradients(net, crop, 1, 0.1)
        params = [(b.weights, b.biases) for b in net.banks]
        ref = network_objective64(crop.to_dense(), params, 1, 0.1, [True, False])
        assert res.loss + res.penalty == pytest.approx(ref, rel=1e-5)

    def test_empty_centre_scores_bias(self):
        net = init_he(make_architecture("A", (3, 3, 3)), seed=0)
        net.banks[0].biases[:] = -0.4
        crop = SparseGrid([[0, 0, 0]], [[1.0] * 6], (9, 9, 9))
        res = example_gradients(net, crop, 1, 0.0)
        assert res.score == pytest.approx(-0.4)
        dw, db = res.gradients.layers[0]
        assert not dw.any() and db.tolist() == [-1.0]


@pytest.fixture(scope="module")
def small_frames():
    return make_frames(4, seed=5)


def small_config(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 8, "workers": 1, "seed": 3, **kw})


def test_small_step_lowers_batch_objective():
    rng = np.random.default_rng(21)
    decreased = 0
    for _ in range(100):
        net = toy_network(rng, 0.1)
        crops = [random_grid(rng, (8, 8, 8), 6, 0.15, positive=True) for _ in range(4)]
        labels = [1, -1, 1, -1]
        loss, pen, grads, _ = trainer.batch_gradients(net, crops, labels, 1e-3)
        sgd_step(net, OptimizerState.zeros(net), grads,
                 TrainConfig(learning_rate=1e-3, momentum=0.0, l2_weight_decay=0.0))
        after, pen2, _, _ = trainer.batch_gradients(net, crops, labels, 1e-3)
        decreased += (after + pen2) <= (loss + pen)
    assert decreased >= 90


class TestFit:
    def test_zero_epochs_returns_initialisation(self, small_frames):
        res = fit(small_frames, SYNTHETIC_CLASS, "B", small_config(epochs=0),
                  synthetic_grid_config())
        assert res.log == []
        ref = init_he(res.final.architecture, 3)
        assert res.final.parameters_equal(ref)

    def test_deterministic_and_bias_constraint(self, small_frames):
        cfg = small_config(epochs=3, learning_rate=0.01)
        runs = [fit(small_frames, SYNTHETIC_CLASS, "D", cfg, synthetic_grid_config())
                for _ in range(2)]
        assert dumps(runs[0].final) == dumps(runs[1].final)
        assert len(runs[0].log) == 3
        for bank in runs[0].final.banks:
            assert np.all(bank.biases <= 0)
        assert not runs[0].final.parameters_equal(init_he(runs[0].final.architecture, 3))

    def test_threaded_batches_match_serial(self, small_frames):
        a = fit(small_frames, SYNTHETIC_CLASS, "B", small_config(), synthetic_grid_config())
        b = fit(small_frames, SYNTHETIC_CLASS, "B", small_config(workers=3),
                synthetic_grid_config())
        assert a.final.parameters_equal(b.final)

    def test_no_positives_rejected(self, small_frames):
        with pytest.raises(ValueError):
            fit(small_frames, "Pedestrian", "B", small_config(), synthetic_grid_config())

    def test_log_file(self, small_frames, tmp_path):
        path = tmp_path / "log.jsonl"
        fit(small_frames, SYNTHETIC_CLASS, "A", small_config(), synthetic_grid_config(),
            log_path=path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2 and '"epoch": 1' in lines[0]


class TestNegatives:
    def test_random_negatives_do_not_touch_positives(self, small_frames):
        box = ClassBoxSpec(SYNTHETIC_CLASS, (1.9, 1.2, 1.2))
        rng = np.random.default_rng(0)
        got = []

        def record(cloud, center, yaw, *args, **kwargs):
            got.append((id(cloud), Box3D(center, box.dims, yaw, SYNTHETIC_CLASS)))
            return None

        original = trainer.make_example
        trainer.make_example = record
        try:
            random_negatives(small_frames, box, 25, (11, 7, 7), 0.2, 8, rng)
        finally:
            trainer.make_example = original
        assert len(got) == 25
        gts = {id(f.cloud): f.boxes for f in small_frames}
        assert all(iou_3d(g, b) == 0.0 for key, b in got for g in gts[key])

    def test_silent_network_mines_nothing(self, small_frames):
        net = init_he(make_architecture("A", (9, 7, 7)), seed=0,
                      grid_config=synthetic_grid_config(),
                      class_box=ClassBoxSpec(SYNTHETIC_CLASS, (1.8, 1.1, 1.1)))
        net.banks[0].weights[:] = 0.0
        net.banks[0].biases[:] = -1.0
        assert mine_hard_negatives(net, small_frames[:1], small_config()) == []

    def test_cap_keeps_highest_scoring_false_positives(self, small_frames, monkeypatch):
        frame = small_frames[0]
        gt = frame.boxes[0]
        dims = (1.8, 1.1, 1.1)
        far = [Detection(SYNTHETIC_CLASS, (-30.0 - 3 * i, 40.0, 0.0), 0.0, float(i), dims)
               for i in range(30)]
        on_target = Detection(SYNTHETIC_CLASS, gt.center, gt.yaw, 100.0, gt.dims)
        monkeypatch.setattr(trainer, "detect_frame", lambda *a, **k: far + [on_target])
        seen = []
        monkeypatch.setattr(trainer, "make_example",
                            lambda cloud, center, *a, **k: seen.append(center) or center)
        net = init_he(make_architecture("A", (9, 7, 7)), seed=0,
                      grid_config=synthetic_grid_config(),
                      class_box=ClassBoxSpec(SYNTHETIC_CLASS, dims))
        out = mine_hard_negatives(net, [frame], small_config())
        assert len(out) == 10
        assert [c[0] for c in seen] == [-30.0 - 3 * i for i in range(29, 19, -1)]


def test_example_requires_points_for_augmentation():
    ex = Example(SparseGrid.empty((3, 3, 3), 6), 1)
    with pytest.raises(ValueError):
        augment(ex, GridConfig(), np.random.default_rng(0))
