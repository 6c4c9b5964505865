import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from sparsevote import cli
from sparsevote.geometry import ClassBoxSpec
from sparsevote.kitti_io import KittiLayout, load_frame, write_velodyne_bin
from sparsevote.network import init_he, load, make_architecture, save
from sparsevote.synthetic import SYNTHETIC_CLASS, synthetic_grid_config, write_dataset
from sparsevote.voxel_grid import PointCloud


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(argv, capsys):
    code, out, err = run(argv, capsys)
    assert code == 0, err
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    write_dataset(str(root), n_train=3, n_val=2, seed=5)
    # an extra frame with no returns at all
    write_velodyne_bin(str(root / "velodyne" / "empty.bin"), PointCloud.empty())
    shutil.copy(root / "calib" / "000000.txt", root / "calib" / "empty.txt")
    (root / "label_2" / "empty.txt").write_text("")
    return root


@pytest.fixture(scope="module")
def model_path(dataset, tmp_path_factory):
    net = init_he(make_architecture("D", (9, 6, 6), hidden=4), seed=3,
                  grid_config=synthetic_grid_config(),
                  class_box=ClassBoxSpec(SYNTHETIC_CLASS, (1.8, 1.1, 1.1)))
    path = tmp_path_factory.mktemp("model") / "init.spv"
    save(net, str(path))
    return path


def grid_args():
    g = synthetic_grid_config()
    return (["--cell-size", g.cell_size, "--origin", *g.origin, "--extents", *g.extents])


class TestVoxelize:
    def test_occupancy_matches_direct_count(self, dataset, capsys):
        stats = run_json(["voxelize", "--root", dataset, "--frame", "000001", *grid_args()],
                         capsys)
        g = synthetic_grid_config()
        pts = load_frame(KittiLayout(str(dataset)), "000001").cloud.points[:, :3]
        idx = np.floor((pts - np.array(g.origin)) / g.cell_size).astype(int)
        inside = np.all((idx >= 0) & (idx < np.array(g.extents)), axis=1)
        expected = len({tuple(i) for i in idx[inside]})
        assert stats["occupied_cells"] == expected
        assert stats["occupancy_fraction"] == pytest.approx(expected / np.prod(g.extents))

    def test_deterministic(self, dataset, capsys, tmp_path):
        argv = ["voxelize", "--root", dataset, "--frame", "000002", *grid_args()]
        a = run_json(argv + ["--dump", tmp_path / "a.npz"], capsys)
        b = run_json(argv + ["--dump", tmp_path / "b.npz"], capsys)
        a.pop("dump"), b.pop("dump")
        assert a == b
        da, db = np.load(tmp_path / "a.npz"), np.load(tmp_path / "b.npz")
        np.testing.assert_array_equal(da["coords"], db["coords"])
        np.testing.assert_array_equal(da["features"], db["features"])

    def test_empty_frame(self, dataset, capsys):
        stats = run_json(["voxelize", "--root", dataset, "--frame", "empty"], capsys)
        assert stats["occupied_cells"] == 0 and stats["occupancy_fraction"] == 0


class TestTrain:
    def test_zero_epochs_writes_initial_model(self, dataset, capsys, tmp_path):
        out = tmp_path / "m.spv"
        rep = run_json(["train", "--root", dataset, "--out", out, "--class", SYNTHETIC_CLASS,
                        "--epochs", 0, "--seed", 7, "--model", "B", "--hidden", 4,
                        *grid_args()], capsys)
        assert rep["epochs"] == 0
        net = load(str(out))
        ref = init_he(make_architecture("B", net.class_box.cells(net.grid_config.cell_size),
                                        hidden=4), seed=7)
        assert net.parameters_equal(ref)

    def test_config_file_and_resume(self, dataset, capsys, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("# small run\nepochs = 1\nbatch_size = 4\nmodel = A\n"
                       f"class = {SYNTHETIC_CLASS}\nvalidate-every = 5\nworkers = 1\n")
        first = tmp_path / "a.spv"
        run_json(["train", "--root", dataset, "--out", first, "--config", cfg, *grid_args()],
                 capsys)
        second = tmp_path / "b.spv"
        run_json(["train", "--root", dataset, "--out", second, "--config", cfg,
                  "--resume", first, "--epochs", 0], capsys)
        assert load(str(first)).parameters_equal(load(str(second)))

    def test_unknown_config_key(self, dataset, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochz = 3\n")
        code, _, err = run(["train", "--root", dataset, "--out", tmp_path / "x.spv",
                            "--config", cfg], capsys)
        assert code == 1
        msg = json.loads(err.strip().splitlines()[-1])
        assert msg["status"] == "error" and "epochz" in msg["message"]

    def test_synthetic_reports_validation_ap(self, capsys, tmp_path):
        root = tmp_path / "gen"
        rep = run_json(["train", "--root", root, "--out", tmp_path / "s.spv", "--synthetic",
                        "--synthetic-train", 2, "--synthetic-val", 1, "--model", "A",
                        "--epochs", 1, "--validate-every", 5, "--val-split", "val",
                        "--workers", 1], capsys)
        assert (root / "velodyne").is_dir()
        assert 0.0 <= rep["validation_ap"] <= 1.0


class TestDetect:
    def test_empty_frame_gives_empty_file(self, dataset, model_path, capsys, tmp_path):
        rep = run_json(["detect", "--model", model_path, "--root", dataset, "--out", tmp_path,
                        "--frames", "empty"], capsys)
        assert rep["outputs"]["0"]["detections"] == 0
        assert (tmp_path / "empty.txt").read_text() == ""
        assert json.loads((tmp_path / "detections.json").read_text()) == {"empty": []}

    def test_sweep_writes_one_set_per_threshold(self, dataset, model_path, capsys, tmp_path):
        rep = run_json(["detect", "--model", model_path, "--root", dataset, "--out", tmp_path,
                        "--frames", "000000", "--sweep", 0, 0.5, 2, "--workers", 1], capsys)
        counts = [rep["outputs"][k]["detections"] for k in ("0", "0.5", "2")]
        assert counts == sorted(counts, reverse=True)
        for t in ("0", "0.5", "2"):
            assert (tmp_path / f"threshold_{t}" / "000000.txt").exists()

    def test_negative_threshold_is_an_error(self, dataset, model_path, capsys, tmp_path):
        code, out, err = run(["detect", "--model", model_path, "--root", dataset,
                              "--out", tmp_path, "--frames", "000000", "--threshold", -1],
                             capsys)
        assert code == 1 and out == ""
        assert json.loads(err)["command"] == "detect"


class TestEval:
    def test_labels_against_themselves(self, dataset, capsys, tmp_path):
        dets = tmp_path / "dets"
        dets.mkdir()
        for f in (dataset / "label_2").iterdir():
            lines = [ln + " 1.0" for ln in f.read_text().splitlines() if ln]
            (dets / f.name).write_text("\n".join(lines) + ("\n" if lines else ""))
        rep = run_json(["eval", "--detections", dets, "--labels", dataset / "label_2",
                        "--out", tmp_path / "res"], capsys)
        aps = {r["difficulty"]: r["ap"] for r in rep["results"] if r["positives"]}
        assert aps and all(v == 1.0 for v in aps.values())
        assert (tmp_path / "res" / "results.json").exists()
        assert (tmp_path / "res" / f"pr_{SYNTHETIC_CLASS}_moderate.csv").exists()

    def test_no_detections(self, dataset, capsys, tmp_path):
        rep = run_json(["eval", "--detections", tmp_path, "--labels", dataset / "label_2",
                        "--difficulty", "moderate"], capsys)
        assert [r["ap"] for r in rep["results"]] == [0.0]

    def test_missing_directory(self, dataset, capsys, tmp_path):
        code, _, err = run(["eval", "--detections", tmp_path / "nope",
                            "--labels", dataset / "label_2"], capsys)
        assert code == 1 and json.loads(err)["type"] == "FileNotFoundError"


def test_detect_then_eval_reproduces_training_validation(dataset, capsys, tmp_path):
    model = tmp_path / "m.spv"
    rep = run_json(["train", "--root", dataset, "--out", model, "--class", SYNTHETIC_CLASS,
                    "--model", "A", "--epochs", 2, "--batch-size", 4, "--validate-every", 5,
                    "--val-split", "val", "--keep-final", "--workers", 1, *grid_args()], capsys)
    run_json(["detect", "--model", model, "--root", dataset, "--split", "val",
              "--out", tmp_path / "dets", "--workers", 1], capsys)
    ev = run_json(["eval", "--detections", tmp_path / "dets", "--labels", dataset / "label_2",
                   "--frames", *KittiLayout(str(dataset)).split("val"),
                   "--classes", SYNTHETIC_CLASS, "--difficulty", "moderate"], capsys)
    assert ev["results"][0]["ap"] == pytest.approx(rep["validation_ap"], abs=1e-6)


class TestBench:
    def test_single_repetition(self, dataset, model_path, capsys, tmp_path):
        argv = ["bench", "--model", model_path, "--root", dataset, "--frames", "000000",
                "--repetitions", 1, "--threshold", 1.0, "--workers", 1]
        a = run_json(argv + ["--csv", tmp_path / "b.csv", "--ap", 0.5], capsys)
        assert a["std_seconds_per_frame"] == 0.0 and a["mean_seconds_per_frame"] > 0
        b = run_json(argv, capsys)
        assert a["input_occupancy"] == b["input_occupancy"]
        assert a["layer_occupancy"] == b["layer_occupancy"]
        header, row = (tmp_path / "b.csv").read_text().splitlines()
        assert header.startswith("model,l1_penalty,runtime_mean_s")
        assert row.endswith("0.500000")

    def test_kernels(self, capsys):
        rep = run_json(["bench-kernels", "--shape", 20, 20, 10, "--occupancy", 0.05,
                        "--repeats", 1, "--channels", 2], capsys)
        assert {r["backend"] for r in rep["kernels"]} >= {"numpy"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sparsevote", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "voxelize" in res.stdout
