"""Command-line pipeline: simulate, build-dataset, train, evaluate, predict.

Every command is deterministic given its inputs and seeds.  Data goes only
to the declared output paths (written via temp-and-rename so failures leave
no partial files); logs go to stderr.  Exit status is nonzero on any error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .microsim import (
    SimConfig,
    SimulationCollisionError,
    TrajectoryLog,
    run_simulation,
)
from .model import build_model, load_checkpoint, save_checkpoint
from .trainer import (
    DatasetSplit,
    baseline_persistence,
    evaluate,
    split_runs,
    train_two_phase,
)
from .tsgrid import (
    DatasetWriter,
    TsdsDataset,
    extract_sample_pairs,
    render_heatmap,
    to_density,
    AveragedTimeSpaceMatrix,
)

DEFAULT_SEED = 20240101


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


@dataclass
class PipelineConfig:
    """Paths, simulation defaults, and training options for the pipeline."""

    seed: int = DEFAULT_SEED
    runs: int = 50
    trajectory_dir: str = "trajectories"
    dataset: str = "dataset.tsds"
    checkpoint: str = "model.tsck"
    report: str = "training_report.json"
    render_dir: str = "renders"
    pairs_per_lane: int | None = None
    simulation: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        if cfg.runs < 1:
            raise ValueError("run count must be >= 1")
        return cfg

    def sim_config(self, seed: int) -> SimConfig:
        s = self.simulation
        return SimConfig(
            seed=seed,
            speed_limit_mph=s.get("speed_limit_mph"),
            duration_s=s.get("duration_s", 900.0),
            road_length_ft=s.get("road_length_ft", 40000.0),
            lanes=s.get("lanes", 3),
            dt_s=s.get("dt_s", 0.1),
            inflow_vphpl=s.get("inflow_vphpl"),
        )


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    n_runs = args.runs if args.runs is not None else cfg.runs
    out_dir = Path(args.out if args.out else cfg.trajectory_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for i in range(n_runs):
        seed = cfg.seed + i
        sim = cfg.sim_config(seed)
        try:
            log = run_simulation(sim)
        except SimulationCollisionError as exc:
            _log(f"run {seed}: FAILED ({exc})")
            failures += 1
            continue
        path = out_dir / f"run_{seed}.csv"
        tmp = str(path) + ".partial"
        log.to_csv(tmp)
        os.replace(tmp, path)
        _log(
            f"run {seed}: {log.total_vehicles} vehicles, {len(log)} samples, "
            f"limit {log.speed_limit_mph:.0f} mph, inflow {log.inflow_vphpl:.0f} veh/h/lane "
            f"-> {path}"
        )
    return 1 if failures else 0


def _select_pairs(pairs, per_lane: int | None, lanes: int):
    """Deterministic evenly spaced subsample of each lane's pair list."""
    if per_lane is None:
        return pairs
    by_lane: dict[int, list] = {}
    for p in pairs:
        by_lane.setdefault(p.input.lane, []).append(p)
    selected = []
    for lane in sorted(by_lane):
        group = by_lane[lane]
        take = min(per_lane, len(group))
        idx = np.unique(np.linspace(0, len(group) - 1, take).round().astype(int))
        selected.extend(group[i] for i in idx)
    return selected


def cmd_build_dataset(args) -> int:
    cfg = _load_config(args)
    traj_dir = Path(args.trajectories if args.trajectories else cfg.trajectory_dir)
    out_path = args.out if args.out else cfg.dataset
    per_lane = args.pairs_per_lane if args.pairs_per_lane is not None else cfg.pairs_per_lane
    csvs = sorted(traj_dir.glob("run_*.csv"))
    if not csvs:
        _log(f"no trajectory CSVs found under {traj_dir}")
        return 1
    sim = cfg.simulation
    writer = DatasetWriter(out_path)
    run_ids = []
    try:
        for path in csvs:
            log = TrajectoryLog.from_csv(
                path,
                road_length_ft=sim.get("road_length_ft", 40000.0),
                lanes=sim.get("lanes", 3),
            )
            pairs = extract_sample_pairs(
                log,
                road_length_ft=sim.get("road_length_ft", 40000.0),
                duration_s=sim.get("duration_s", 900.0),
            )
            pairs = _select_pairs(pairs, per_lane, sim.get("lanes", 3))
            for p in pairs:
                writer.add_pair(p)
            run_ids.append(log.run_id)
            _log(f"{path.name}: {len(pairs)} pairs")
    except Exception:
        writer.abort()
        raise
    split = split_runs(run_ids, cfg.seed)
    writer.finalize(split=split)
    _log(f"dataset: {sum(1 for _ in run_ids)} runs -> {out_path} "
         f"(split {len(split['train'])}/{len(split['validation'])}/{len(split['test'])} runs)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = TsdsDataset(args.dataset if args.dataset else cfg.dataset)
    ckpt_path = args.checkpoint if args.checkpoint else cfg.checkpoint
    report_path = args.report if args.report else cfg.report
    t = cfg.training
    split = DatasetSplit(
        train=dataset.split_indices("train"),
        validation=dataset.split_indices("validation"),
        test=dataset.split_indices("test"),
        runs_by_split=dataset.sidecar.get("split", {}),
    )
    model = build_model(seed=cfg.seed)
    report = train_two_phase(
        model, dataset, split,
        patience=args.patience if args.patience is not None else t.get("patience", 5),
        batch_size=args.batch_size if args.batch_size is not None else t.get("batch_size", 60),
        max_epochs=args.max_epochs if args.max_epochs is not None else t.get("max_epochs", 200),
        learning_rate=t.get("learning_rate", 0.001),
        seed=cfg.seed,
        log=_log,
    )
    phase2 = report.phases[-1]
    save_checkpoint(model, str(ckpt_path) + ".partial", metadata={
        "epoch": phase2.best_epoch,
        "phase": phase2.phase,
        "validation_loss": phase2.best_val_loss,
        "seed": cfg.seed,
    })
    os.replace(str(ckpt_path) + ".partial", ckpt_path)
    with open(str(report_path) + ".partial", "w") as fh:
        fh.write(report.to_json())
    os.replace(str(report_path) + ".partial", report_path)
    _log(f"checkpoint -> {ckpt_path}; report -> {report_path}")
    print(_format_metrics_table(report.test_metrics, report.baseline_metrics))
    return 0


_METRIC_ROWS = [
    ("matrix MSE", "matrix_mse", "{:.6f}"),
    ("matrix MAE", "matrix_mae", "{:.6f}"),
    ("density MSE [vpm^2]", "density_mse_vpm2", "{:.2f}"),
    ("density MAE [vpm]", "density_mae_vpm", "{:.2f}"),
    ("density RMSE [vpm]", "density_rmse_vpm", "{:.2f}"),
]


def _format_metrics_table(model_metrics: dict, baseline_metrics: dict) -> str:
    lines = [f"{'metric':<22}{'trained model':>16}{'persistence':>16}"]
    for label, key, fmt in _METRIC_ROWS:
        lines.append(
            f"{label:<22}{fmt.format(model_metrics[key]):>16}"
            f"{fmt.format(baseline_metrics[key]):>16}"
        )
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    dataset = TsdsDataset(args.dataset if args.dataset else cfg.dataset)
    model, meta = load_checkpoint(args.checkpoint if args.checkpoint else cfg.checkpoint)
    indices = dataset.split_indices(args.split)
    metrics = evaluate(model, indices, dataset)
    baseline = baseline_persistence(indices, dataset)
    _log(f"checkpoint metadata: {meta}")
    _log(f"evaluating split {args.split!r}: {indices.size} pairs")
    print(_format_metrics_table(metrics, baseline))
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    dataset = TsdsDataset(args.dataset if args.dataset else cfg.dataset)
    model, _ = load_checkpoint(args.checkpoint if args.checkpoint else cfg.checkpoint)
    index = args.index
    if not 0 <= index < dataset.pair_count:
        _log(f"sample index {index} out of range [0, {dataset.pair_count})")
        return 1
    out_dir = Path(args.out if args.out else cfg.render_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x, y = dataset.load_batch([index])
    pred = model.forward(x, clamp=True)
    meta = dataset.sidecar.get("pairs", [{}] * dataset.pair_count)[index]
    lane = meta.get("lane", 0)
    origin = meta.get("segment_origin_ft", 0.0)
    start = meta.get("input_window_start_s", 0.0)
    panels = {
        "input": (x[0, 0], start),
        "target": (y[0, 0], start + 20.0),
        "prediction": (pred[0, 0], start + 20.0),
    }
    for name, (grid, t0) in panels.items():
        mat = AveragedTimeSpaceMatrix(np.asarray(grid, dtype=np.float64), origin, t0, lane)
        if args.density:
            mat = to_density(mat)
        path = out_dir / f"sample_{index}_{name}.ppm"
        render_heatmap(mat, path)
        _log(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shockcast",
        description="Traffic shockwave prediction pipeline",
    )
    parser.add_argument("--config", help="JSON pipeline config", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the microscopic simulator")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--out", default=None, help="trajectory output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-dataset", help="discretize trajectories into sample pairs")
    p.add_argument("--trajectories", default=None, help="directory of run_*.csv files")
    p.add_argument("--out", default=None, help="dataset output path")
    p.add_argument("--pairs-per-lane", type=int, default=None,
                   help="evenly spaced subsample per run and lane (default: all)")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics table on a dataset split")
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="render input/target/prediction heatmaps")
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", default=None, help="render output directory")
    p.add_argument("--density", action="store_true",
                   help="render in density units (528 vpm full scale)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
