"""End-to-end command-line tests on reduced problem sizes."""

import json

import numpy as np
import pytest

from shockcast.cli import main
from shockcast.microsim import TrajectoryLog
from shockcast.model import build_model, load_checkpoint, save_checkpoint
from shockcast.tsgrid import (
    AveragedTimeSpaceMatrix,
    DatasetWriter,
    SamplePair,
    TsdsDataset,
    read_ppm,
)
from shockcast.trainer import split_runs


@pytest.fixture(scope="module")
def short_config(tmp_path_factory):
    # 60 s / 4000 ft runs keep the CLI suite fast; flows stay realistic
    root = tmp_path_factory.mktemp("pipeline")
    cfg = {
        "seed": 500,
        "runs": 2,
        "trajectory_dir": str(root / "runs"),
        "dataset": str(root / "data.tsds"),
        "checkpoint": str(root / "model.tsck"),
        "report": str(root / "report.json"),
        "render_dir": str(root / "renders"),
        "simulation": {"duration_s": 60.0, "road_length_ft": 4000.0,
                       "speed_limit_mph": 65, "inflow_vphpl": 1800},
        "training": {"batch_size": 4, "patience": 1, "max_epochs": 1},
    }
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg, root


class TestSimulate:
    def test_runs_created_and_reproducible(self, short_config):
        path, cfg, root = short_config
        assert main(["--config", str(path), "simulate"]) == 0
        runs = sorted((root / "runs").glob("run_*.csv"))
        assert [p.name for p in runs] == ["run_500.csv", "run_501.csv"]
        first = runs[0].read_bytes()
        assert main(["--config", str(path), "simulate", "--runs", "1"]) == 0
        assert runs[0].read_bytes() == first  # byte-identical rerun

    def test_max_time_matches_duration(self, short_config):
        path, cfg, root = short_config
        log = TrajectoryLog.from_csv(root / "runs" / "run_500.csv")
        assert abs(log.time_index.max() * 0.1 - 59.9) < 1e-9

    def test_full_duration_max_time_contract(self):
        # the default 900 s run ends at t = 899.9: verified structurally
        from shockcast.microsim import SimConfig

        assert SimConfig(seed=0).n_steps == 9000


def make_tiny_dataset(path, n_runs=4, pairs_per_run=3, h=20, w=20, seed=0,
                      target_from_model=None):
    rng = np.random.default_rng(seed)
    writer = DatasetWriter(path, height=h, width=w)
    for run in range(n_runs):
        for _ in range(pairs_per_run):
            a = rng.random((h, w)).astype(np.float32)
            if target_from_model is not None:
                b = target_from_model.forward(a[None, None].astype(np.float32))[0, 0]
            else:
                b = rng.random((h, w)).astype(np.float32)
            writer.add_pair(SamplePair(
                input=AveragedTimeSpaceMatrix(np.asarray(a, dtype=np.float64), 0.0, 0.0, 0),
                target=AveragedTimeSpaceMatrix(np.asarray(b, dtype=np.float64), 0.0, 20.0, 0),
                run_id=run,
            ))
    writer.finalize(split=split_runs(range(n_runs), seed))
    return TsdsDataset(path)


class TestBuildDataset:
    def test_short_runs_rejected_as_truncated(self, short_config):
        # 60 s logs cannot fill the 900 s segmentation: the command fails
        path, cfg, root = short_config
        rc = main(["--config", str(path), "build-dataset",
                   "--out", str(root / "bad.tsds")])
        assert rc == 1
        assert not (root / "bad.tsds").exists()

    @pytest.mark.slow
    def test_full_run_pair_count(self, tmp_path):
        # one full-size run yields 440 pairs per lane and 1320 total
        cfg = {
            "seed": 900,
            "runs": 1,
            "trajectory_dir": str(tmp_path / "runs"),
            "simulation": {"speed_limit_mph": 65, "inflow_vphpl": 1500},
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["--config", str(cfg_path), "simulate"]) == 0
        rc = main(["--config", str(cfg_path), "build-dataset",
                   "--trajectories", str(tmp_path / "runs"),
                   "--out", str(tmp_path / "one.tsds")])
        assert rc == 1  # a single run cannot be split 80/10/10
        # three pseudo-runs: reuse the same trajectory under new names
        for alias in (901, 902):
            src = (tmp_path / "runs" / "run_900.csv").read_text()
            body = src.replace("900,", f"{alias},", src.count("\n"))
            (tmp_path / "runs" / f"run_{alias}.csv").write_text(body)
        rc = main(["--config", str(cfg_path), "build-dataset",
                   "--trajectories", str(tmp_path / "runs"),
                   "--out", str(tmp_path / "three.tsds")])
        assert rc == 0
        ds = TsdsDataset(tmp_path / "three.tsds")
        assert ds.pair_count == 3 * 1320
        assert ds.inputs[0].min() >= 0.0 and float(np.max(ds.inputs)) <= 1.0
        split = ds.sidecar["split"]
        assert len(split["train"]) == 1 and len(split["validation"]) == 1 \
            and len(split["test"]) == 1

    def test_pairs_per_lane_subsample(self, tmp_path):
        # subsampling picks an evenly spaced subset per lane
        from shockcast.cli import _select_pairs

        pairs = []
        for lane in range(3):
            for k in range(10):
                grid = np.zeros((4, 4))
                pairs.append(SamplePair(
                    input=AveragedTimeSpaceMatrix(grid, 0.0, 40.0 * k, lane),
                    target=AveragedTimeSpaceMatrix(grid, 0.0, 40.0 * k + 20.0, lane),
                    run_id=1,
                ))
        picked = _select_pairs(pairs, per_lane=4, lanes=3)
        assert len(picked) == 12
        starts = sorted(p.input.window_start_s for p in picked if p.input.lane == 0)
        assert starts == [0.0, 120.0, 240.0, 360.0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    ds_path = root / "tiny.tsds"
    make_tiny_dataset(ds_path, n_runs=4, pairs_per_run=3, seed=3)
    cfg = {
        "seed": 7,
        "dataset": str(ds_path),
        "checkpoint": str(root / "m.tsck"),
        "report": str(root / "r.json"),
        "render_dir": str(root / "renders"),
        "training": {"batch_size": 4, "patience": 1, "max_epochs": 1},
    }
    cfg_path = root / "c.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["--config", str(cfg_path), "train"])
    assert rc == 0
    return root, cfg_path


class TestTrainEvaluatePredict:
    def test_train_outputs(self, trained):
        root, cfg_path = trained
        model, meta = load_checkpoint(root / "m.tsck")
        assert model.parameter_count() == 180_449
        assert meta["phase"] == "mse"
        report = json.loads((root / "r.json").read_text())
        assert [p["phase"] for p in report["phases"]] == ["custom", "mse"]

    def test_train_reproducible(self, trained, tmp_path):
        root, cfg_path = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["checkpoint"] = str(tmp_path / "m2.tsck")
        cfg["report"] = str(tmp_path / "r2.json")
        cfg_path2 = tmp_path / "c2.json"
        cfg_path2.write_text(json.dumps(cfg))
        assert main(["--config", str(cfg_path2), "train"]) == 0
        a = json.loads((root / "r.json").read_text())
        b = json.loads((tmp_path / "r2.json").read_text())
        assert a["phases"] == b["phases"]
        assert (root / "m.tsck").read_bytes() == (tmp_path / "m2.tsck").read_bytes()

    def test_evaluate_table(self, trained, capsys):
        root, cfg_path = trained
        assert main(["--config", str(cfg_path), "evaluate"]) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.strip().split("\n") if l]
        assert lines[0].startswith("metric")
        assert "persistence" in lines[0]
        table = {}
        for line in lines[1:]:
            parts = line.rsplit(None, 2)
            table[parts[0].strip()] = (float(parts[1]), float(parts[2]))
        # internal consistency of the printed numbers
        mse = table["matrix MSE"][0]
        rmse = table["density RMSE [vpm]"][0]
        assert abs(rmse - 528.0 * np.sqrt(mse)) < 0.01
        assert "density MAE [vpm]" in table

    def test_evaluate_perfect_model_zero_error(self, tmp_path, capsys):
        # dataset whose targets are exactly the model's outputs
        model = build_model(seed=42)
        ds_path = tmp_path / "perfect.tsds"
        make_tiny_dataset(ds_path, n_runs=3, pairs_per_run=2, seed=5,
                          target_from_model=model)
        ckpt = tmp_path / "m.tsck"
        save_checkpoint(model, ckpt, metadata={"epoch": 0, "phase": "mse",
                                               "validation_loss": 0.0})
        rc = main(["evaluate", "--dataset", str(ds_path),
                   "--checkpoint", str(ckpt), "--split", "test"])
        assert rc == 0
        out = capsys.readouterr().out
        row = [l for l in out.split("\n") if l.startswith("matrix MSE")][0]
        assert float(row.rsplit(None, 2)[1]) == 0.0

    def test_predict_renders_three_panels(self, trained):
        root, cfg_path = trained
        assert main(["--config", str(cfg_path), "predict", "--index", "2"]) == 0
        for name in ("input", "target", "prediction"):
            img = read_ppm(root / "renders" / f"sample_2_{name}.ppm")
            assert img.shape == (20, 20, 3)
        # prediction panel is clamped to [0, 1]: no colors outside the ramp
        img = read_ppm(root / "renders" / "sample_2_prediction.ppm")
        assert img[..., 0].min() == 255  # red channel stays saturated on the ramp

    def test_predict_out_of_range_index(self, trained):
        root, cfg_path = trained
        assert main(["--config", str(cfg_path), "predict", "--index", "99"]) == 1

    def test_stationary_jam_target_band(self, tmp_path):
        # a stopped platoon spanning both windows renders as a horizontal
        # high-value band in the target panel
        h = w = 200
        cells = np.zeros((h, w))
        for row in range(60, 80, 2):  # stopped vehicles every 20 ft
            cells[row, :] = 1.0
        from shockcast.boxfilter import box_mean_2d

        avg = box_mean_2d(cells, 10)
        writer = DatasetWriter(tmp_path / "jam.tsds", height=h, width=w)
        writer.add_pair(SamplePair(
            input=AveragedTimeSpaceMatrix(avg, 0.0, 0.0, 0),
            target=AveragedTimeSpaceMatrix(avg, 0.0, 20.0, 0),
            run_id=0,
        ))
        writer.finalize()
        model = build_model(seed=1)
        ckpt = tmp_path / "m.tsck"
        save_checkpoint(model, ckpt)
        rc = main(["predict", "--dataset", str(tmp_path / "jam.tsds"),
                   "--checkpoint", str(ckpt), "--index", "0",
                   "--out", str(tmp_path / "r")])
        assert rc == 0
        img = read_ppm(tmp_path / "r" / "sample_0_target.ppm")
        # image rows are flipped: matrix rows 60..79 sit near the bottom
        band = img[h - 80:h - 60, :, 1].mean()      # green drops toward red
        empty = img[0:20, :, 1].mean()
        assert band < 160 and empty == 255


class TestErrors:
    def test_missing_dataset(self):
        assert main(["evaluate", "--dataset", "/nonexistent.tsds",
                     "--checkpoint", "/nonexistent.tsck"]) == 1

    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus": 1}))
        assert main(["--config", str(p), "simulate"]) == 1
