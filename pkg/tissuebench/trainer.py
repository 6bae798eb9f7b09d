"""Patch-wise training with a weighted cross-entropy and early stopping.

Checkpoints are HDF5 files holding the architecture spec and training report
as attributes and one dataset per state-dict entry.
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import h5py
import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Subset

from tissuebench.architectures import U_SHAPED, ArchitectureSpec
from tissuebench.networks import SegmentationNetwork
from tissuebench.sampling import SampleListDataset, TrainingSample
from tissuebench.utils import human_readable_duration

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-12
VALID_CONV_BATCH_SIZE = 32
U_SHAPED_BATCH_SIZE = 8
CHECKPOINT_FORMAT = "tissuebench-checkpoint"


@dataclass
class TrainConfig:
    max_epochs: int = 20
    patience: int = 2
    val_fraction: float = 0.2
    batch_size: Optional[int] = None
    learning_rate: float = 1e-3
    seed: int = 0
    samples_per_epoch: Optional[int] = None
    device: str = "cpu"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValueError(f"samples_per_epoch must be >= 1, got {self.samples_per_epoch}")

    def resolved_batch_size(self, family: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return U_SHAPED_BATCH_SIZE if family in U_SHAPED else VALID_CONV_BATCH_SIZE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs_run: int = 0
    train_loss_curve: List[float] = field(default_factory=list)
    val_loss_curve: List[float] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0
    best_val_loss: float = math.inf
    diverged: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss. The partial report is kept on ``report``."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


class EarlyStopping:
    """Counts epochs without strict validation improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Records one epoch and returns True when it set a new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def split_dataset(cases: Sequence, val_fraction: float, seed: int) -> Tuple[list, list]:
    """Seeded split of training cases into train and validation subsets.

    The validation subset holds round(val_fraction * n) cases, at least one
    and at most n - 1. Both subsets keep the input order.
    """
    n = len(cases)
    if n < 2:
        raise ValueError(f"Need at least 2 training cases to split off validation, got {n}")
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = min(max(1, int(math.floor(val_fraction * n + 0.5))), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val_indices = sorted(int(i) for i in order[:n_val])
    train_indices = sorted(int(i) for i in order[n_val:])
    return [cases[i] for i in train_indices], [cases[i] for i in val_indices]


def weighted_loss(
    predictions: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor
) -> Optional[torch.Tensor]:
    """Mean of -w * log p[target] over voxels with positive weight.

    Args:
        predictions: (batch, classes, X, Y, Z) probabilities.
        targets: (batch, X, Y, Z) integer labels.
        weights: (batch, X, Y, Z) non-negative weights.

    Returns:
        A scalar tensor, or None when no voxel carries weight (the batch
        should be skipped).
    """
    if predictions.shape[0:1] + predictions.shape[2:] != targets.shape or targets.shape != weights.shape:
        raise ValueError(
            f"Shape mismatch: predictions {tuple(predictions.shape)}, targets {tuple(targets.shape)}, "
            f"weights {tuple(weights.shape)}"
        )
    active = weights > 0
    if not bool(active.any()):
        return None
    picked = predictions.gather(1, targets.long().unsqueeze(1)).squeeze(1)
    losses = -weights[active] * torch.log(picked[active].clamp_min(LOG_EPSILON))
    return losses.mean()


def _as_dataset(samples: Union[Dataset, Sequence[TrainingSample]]) -> Dataset:
    if isinstance(samples, Dataset):
        return samples
    return SampleListDataset(samples)


def evaluate_loss(
    model: SegmentationNetwork, samples: Union[Dataset, Sequence[TrainingSample]], batch_size: int = 32
) -> float:
    """Weighted cross-entropy over a whole sample set, averaged per weighted voxel."""
    dataset = _as_dataset(samples)
    device = next(model.parameters()).device
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for inputs, targets, weights in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            inputs, targets, weights = inputs.to(device), targets.to(device), weights.to(device)
            probabilities = model(inputs)
            active = weights > 0
            if not bool(active.any()):
                continue
            picked = probabilities.gather(1, targets.unsqueeze(1)).squeeze(1)
            total += float((-weights[active] * torch.log(picked[active].clamp_min(LOG_EPSILON))).double().sum())
            count += int(active.sum())
    return total / count if count else math.nan


def train_model(
    model: SegmentationNetwork,
    train_samples: Union[Dataset, Sequence[TrainingSample]],
    val_samples: Union[Dataset, Sequence[TrainingSample]],
    config: TrainConfig,
) -> TrainReport:
    """Trains with Adam until validation loss stalls for ``patience`` epochs.

    On return the model holds the weights of the best validation epoch.

    Raises:
        TrainingDivergedError: A training or validation loss became NaN or infinite.
        ValueError: Either sample set is empty.
    """
    train_set = _as_dataset(train_samples)
    val_set = _as_dataset(val_samples)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError(f"Training needs samples in both sets (train={len(train_set)}, val={len(val_set)})")

    device = torch.device(config.device)
    model.to(device)
    batch_size = config.resolved_batch_size(model.spec.family)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    started = time.monotonic()

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        if config.samples_per_epoch is not None:
            order = order[: config.samples_per_epoch]
        loader = DataLoader(Subset(train_set, order.tolist()), batch_size=batch_size, shuffle=False)
        running, batches = 0.0, 0
        for inputs, targets, weights in loader:
            inputs, targets, weights = inputs.to(device), targets.to(device), weights.to(device)
            loss = weighted_loss(model(inputs), targets, weights)
            if loss is None:
                logger.debug(f"Epoch {epoch}: skipped a batch with no weighted voxels")
                continue
            if not torch.isfinite(loss):
                report.diverged = True
                report.epochs_run = epoch
                raise TrainingDivergedError(f"Training loss became {loss.item()} in epoch {epoch}", report)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item()
            batches += 1

        train_loss = running / batches if batches else math.nan
        val_loss = evaluate_loss(model, val_set, batch_size)
        report.epochs_run = epoch
        report.train_loss_curve.append(train_loss)
        report.val_loss_curve.append(val_loss)
        if not math.isfinite(val_loss):
            report.diverged = True
            raise TrainingDivergedError(f"Validation loss became {val_loss} in epoch {epoch}", report)

        if stopper.step(epoch, val_loss):
            best_state = copy.deepcopy(model.state_dict())
        logger.info(
            f"Epoch {epoch}/{config.max_epochs}: train loss {train_loss:.4f}, "
            f"val loss {val_loss:.4f} (best {stopper.best_loss:.4f} at epoch {stopper.best_epoch})"
        )
        if stopper.should_stop:
            report.stopped_early = True
            logger.info(f"Early stopping after {epoch} epochs")
            break

    model.load_state_dict(best_state)
    model.eval()
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best_loss
    report.seconds = time.monotonic() - started
    logger.info(
        f"Trained {model.spec.family} {model.spec.dimensionality} in {human_readable_duration(report.seconds)}, "
        f"best epoch {report.best_epoch}"
    )
    return report


def save_checkpoint(path: Union[str, Path], model: SegmentationNetwork, report: Optional[TrainReport] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with h5py.File(path, "w") as handle:
        handle.attrs["format"] = CHECKPOINT_FORMAT
        handle.attrs["architecture_spec"] = model.spec.to_json()
        if report is not None:
            handle.attrs["train_report"] = report.to_json()
        weights = handle.create_group("weights")
        for key, tensor in model.state_dict().items():
            weights.create_dataset(key, data=tensor.detach().cpu().numpy())
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[SegmentationNetwork, Optional[TrainReport]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with h5py.File(path, "r") as handle:
        if handle.attrs.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint written by this package")
        spec = ArchitectureSpec.from_json(handle.attrs["architecture_spec"])
        report = TrainReport.from_json(handle.attrs["train_report"]) if "train_report" in handle.attrs else None
        state = {key: torch.as_tensor(np.asarray(dataset[()])) for key, dataset in handle["weights"].items()}
    model = SegmentationNetwork(spec)
    model.load_state_dict(state)
    model.eval()
    return model, report
