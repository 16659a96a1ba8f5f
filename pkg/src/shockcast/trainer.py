"""Dataset splitting, batched two-phase training, and evaluation.

Training follows the two-step protocol: first with the heavily smoothed
composite loss, then a plain-MSE refinement starting from the first
phase's best checkpoint.  Both phases use batches of 60, per-epoch
validation, and patience-based early stopping with best-weight restore;
the pre-training state counts as the epoch-0 candidate, so a phase can
never end worse than it started on its own validation metric.

Evaluation reports grid-unit MSE/MAE plus their density-unit counterparts,
which are exact scalar transforms (528^2 x MSE, 528 x MAE, 528 x RMSE).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from .model import EncoderDecoderModel
from .netcore import AdamState, Tape, adam_step
from .tsgrid import DENSITY_SCALE_VPM, TsdsDataset

DEFAULT_BATCH_SIZE = 60
DEFAULT_PATIENCE = 5
MAX_EPOCHS_CAP = 200
# samples per recorded forward/backward pass; gradients accumulate across
# chunks so the optimizer still sees exact full-batch gradients
GRAD_CHUNK = 10

TRAIN_FRACTION, VAL_FRACTION, TEST_FRACTION = 0.8, 0.1, 0.1


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared; carries epoch, batch, and the loss value."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass
class DatasetSplit:
    """Disjoint pair-index lists, partitioned at simulation-run granularity."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    runs_by_split: dict[str, list[int]] = field(default_factory=dict)


def split_runs(run_ids, seed: int) -> dict[str, list[int]]:
    """Partition distinct run ids 80/10/10; validation and test stay nonempty."""
    unique = sorted({int(r) for r in run_ids})
    n = len(unique)
    if n < 3:
        raise ValueError(f"need at least 3 runs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [unique[i] for i in order]
    n_test = max(1, round(TEST_FRACTION * n))
    n_val = max(1, round(VAL_FRACTION * n))
    return {
        "train": sorted(shuffled[: n - n_val - n_test]),
        "validation": sorted(shuffled[n - n_val - n_test: n - n_test]),
        "test": sorted(shuffled[n - n_test:]),
    }


def split_dataset(dataset: TsdsDataset, seed: int) -> DatasetSplit:
    """Run-level random 80/10/10 split of a dataset's pair indices."""
    rids = dataset.run_ids()
    by_split = split_runs(rids, seed)
    members = {name: set(runs) for name, runs in by_split.items()}
    idx = {name: np.nonzero([int(r) in m for r in rids])[0]
           for name, m in members.items()}
    return DatasetSplit(train=idx["train"], validation=idx["validation"],
                        test=idx["test"], runs_by_split=by_split)


@dataclass
class PhaseReport:
    """One training phase: per-epoch losses and the early-stopping outcome."""

    phase: str                     # "custom" | "mse"
    train_losses: list[float]
    val_losses: list[float]        # index 0 is the pre-training evaluation
    best_epoch: int
    stop_epoch: int
    best_val_loss: float
    val_mse_final: float           # plain MSE of the restored best weights


@dataclass
class TrainingReport:
    phases: list[PhaseReport]
    test_metrics: dict
    baseline_metrics: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "phases": [asdict(p) for p in self.phases],
            "test_metrics": self.test_metrics,
            "baseline_metrics": self.baseline_metrics,
            "config": self.config,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainingReport":
        d = json.loads(text)
        return cls(
            phases=[PhaseReport(**p) for p in d["phases"]],
            test_metrics=d["test_metrics"],
            baseline_metrics=d["baseline_metrics"],
            config=d.get("config", {}),
        )


class EarlyStopper:
    """Minimum-tracking stopper: halt once patience epochs pass the best."""

    def __init__(self, patience: int, initial_loss: float):
        self.patience = patience
        self.best_loss = initial_loss
        self.best_epoch = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch loss; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


def iter_batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Shuffled batches; the final partial batch is kept."""
    order = rng.permutation(indices.size)
    shuffled = indices[order]
    for start in range(0, shuffled.size, batch_size):
        yield shuffled[start:start + batch_size]


def _loss_value(kind: str, pred, target) -> float:
    return netcore.custom_loss(pred, target) if kind == "custom" else netcore.mse(pred, target)


def _tape_loss(kind: str, tape: Tape, pred, target):
    return tape.custom_loss(pred, target) if kind == "custom" else tape.mse_loss(pred, target)


def _dataset_loss(model, dataset, indices, kind: str, chunk: int = GRAD_CHUNK) -> float:
    """Weighted mean of per-chunk losses over the index set (no recording)."""
    total = 0.0
    n = 0
    for start in range(0, len(indices), chunk):
        idx = indices[start:start + chunk]
        x, y = dataset.load_batch(idx)
        pred = model.forward(x)
        total += _loss_value(kind, pred, y) * len(idx)
        n += len(idx)
    return total / n


def _train_batch(model, dataset, batch_idx, kind: str, adam: AdamState,
                 params: list[np.ndarray]) -> float:
    """One optimizer step on a batch, accumulating gradients chunk-wise."""
    n = len(batch_idx)
    grad_acc = [np.zeros_like(p) for p in params]
    loss_acc = 0.0
    for start in range(0, n, GRAD_CHUNK):
        idx = batch_idx[start:start + GRAD_CHUNK]
        x, y = dataset.load_batch(idx)
        tape = Tape()
        pred = model.forward(x, tape=tape)
        loss = _tape_loss(kind, tape, pred, y)
        weight = len(idx) / n
        loss_acc += float(loss) * weight
        grads = tape.backward(loss).for_params(params)
        for acc, g in zip(grad_acc, grads):
            acc += g * weight
    adam_step(params, grad_acc, adam)
    return loss_acc


def train_phase(model: EncoderDecoderModel, dataset: TsdsDataset,
                train_indices, val_indices, loss_kind: str,
                patience: int = DEFAULT_PATIENCE,
                batch_size: int = DEFAULT_BATCH_SIZE,
                max_epochs: int = MAX_EPOCHS_CAP,
                learning_rate: float = 0.001,
                seed: int = 0,
                log=None) -> PhaseReport:
    """Train with one loss until validation stops improving; restore the best.

    Validation is evaluated with the phase loss at every epoch end; training
    stops once `patience` epochs elapse without a new minimum (or at the
    epoch cap) and the best-epoch weights are restored.
    """
    if loss_kind not in ("custom", "mse"):
        raise ValueError(f"loss_kind must be 'custom' or 'mse', got {loss_kind!r}")
    train_indices = np.asarray(train_indices)
    val_indices = np.asarray(val_indices)
    if train_indices.size == 0 or val_indices.size == 0:
        raise ValueError("training and validation index lists must be nonempty")

    params = model.parameter_arrays()
    adam = AdamState.for_params(params, learning_rate=learning_rate)

    initial_val = _dataset_loss(model, dataset, val_indices, loss_kind)
    stopper = EarlyStopper(patience, initial_val)
    best_params = [p.copy() for p in params]
    train_losses: list[float] = []
    val_losses = [initial_val]

    epoch = 0
    for epoch in range(1, max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        epoch_loss = 0.0
        seen = 0
        for b, batch_idx in enumerate(iter_batches(train_indices, batch_size, rng)):
            loss = _train_batch(model, dataset, batch_idx, loss_kind, adam, params)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            epoch_loss += loss * len(batch_idx)
            seen += len(batch_idx)
        train_losses.append(epoch_loss / seen)
        val = _dataset_loss(model, dataset, val_indices, loss_kind)
        if not np.isfinite(val):
            raise TrainingDivergedError(epoch, -1, val)
        val_losses.append(val)
        if log:
            log(f"[{loss_kind}] epoch {epoch}: train={train_losses[-1]:.6f} val={val:.6f}")
        if val < stopper.best_loss:
            best_params = [p.copy() for p in params]
        if stopper.update(epoch, val):
            break

    for p, best in zip(params, best_params):
        p[...] = best

    val_mse_final = _dataset_loss(model, dataset, val_indices, "mse")
    return PhaseReport(
        phase=loss_kind,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=stopper.best_epoch,
        stop_epoch=epoch,
        best_val_loss=stopper.best_loss,
        val_mse_final=val_mse_final,
    )


def train_two_phase(model: EncoderDecoderModel, dataset: TsdsDataset,
                    split: DatasetSplit,
                    patience: int = DEFAULT_PATIENCE,
                    batch_size: int = DEFAULT_BATCH_SIZE,
                    max_epochs: int = MAX_EPOCHS_CAP,
                    learning_rate: float = 0.001,
                    seed: int = 0,
                    log=None) -> TrainingReport:
    """Composite-loss phase, then plain-MSE refinement from its best weights.

    The optimizer state resets at the phase boundary.  The report carries
    both phase records plus test metrics and the persistence baseline.
    """
    phase1 = train_phase(model, dataset, split.train, split.validation, "custom",
                         patience=patience, batch_size=batch_size,
                         max_epochs=max_epochs, learning_rate=learning_rate,
                         seed=seed, log=log)
    phase2 = train_phase(model, dataset, split.train, split.validation, "mse",
                         patience=patience, batch_size=batch_size,
                         max_epochs=max_epochs, learning_rate=learning_rate,
                         seed=seed + 1, log=log)
    return TrainingReport(
        phases=[phase1, phase2],
        test_metrics=evaluate(model, split.test, dataset),
        baseline_metrics=baseline_persistence(split.test, dataset),
        config={
            "patience": patience, "batch_size": batch_size,
            "max_epochs": max_epochs, "learning_rate": learning_rate,
            "seed": seed,
        },
    )


def _metrics_from_errors(sq_sum: float, abs_sum: float, count: int) -> dict:
    matrix_mse = sq_sum / count
    matrix_mae = abs_sum / count
    return {
        "matrix_mse": matrix_mse,
        "matrix_mae": matrix_mae,
        "density_mse_vpm2": DENSITY_SCALE_VPM ** 2 * matrix_mse,
        "density_mae_vpm": DENSITY_SCALE_VPM * matrix_mae,
        "density_rmse_vpm": DENSITY_SCALE_VPM * float(np.sqrt(matrix_mse)),
    }


def evaluate(model: EncoderDecoderModel, indices, dataset: TsdsDataset,
             chunk: int = GRAD_CHUNK) -> dict:
    """Grid-unit MSE/MAE and their density-unit transforms over an index set."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty index list")
    sq, ab, n = 0.0, 0.0, 0
    for start in range(0, indices.size, chunk):
        idx = indices[start:start + chunk]
        x, y = dataset.load_batch(idx)
        d = model.forward(x).astype(np.float64) - y.astype(np.float64)
        sq += float(np.sum(d * d))
        ab += float(np.sum(np.abs(d)))
        n += d.size
    metrics = _metrics_from_errors(sq, ab, n)
    metrics["sample_count"] = int(indices.size)
    return metrics


def baseline_persistence(indices, dataset: TsdsDataset) -> dict:
    """Metrics of the do-nothing predictor: the future window equals the past."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty index list")
    sq, ab, n = 0.0, 0.0, 0
    for start in range(0, indices.size, 256):
        idx = indices[start:start + 256]
        x, y = dataset.load_batch(idx)
        d = x.astype(np.float64) - y.astype(np.float64)
        sq += float(np.sum(d * d))
        ab += float(np.sum(np.abs(d)))
        n += d.size
    metrics = _metrics_from_errors(sq, ab, n)
    metrics["sample_count"] = int(indices.size)
    return metrics
