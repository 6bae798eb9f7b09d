"""Patch-wise prediction and majority-vote fusion into a whole-volume segmentation."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
import torch

from tissuebench.networks import SegmentationNetwork
from tissuebench.sampling import (
    PlanError,
    SamplingPlan,
    context_margin,
    pad_for_context,
    patch_region,
    plan_grid,
)
from tissuebench.volumes import BACKGROUND, NUM_CLASSES, Case, LabelMap, Triple, save_label_volume, stack_modalities

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 64


@dataclass
class VoteGrid:
    """Per-class vote counts (classes, X, Y, Z) and per-voxel patch coverage."""

    votes: np.ndarray
    coverage: np.ndarray

    @classmethod
    def empty(cls, dims: Sequence[int], num_classes: int = NUM_CLASSES) -> "VoteGrid":
        dims = tuple(int(d) for d in dims)
        return cls(np.zeros((num_classes,) + dims, dtype=np.int32), np.zeros(dims, dtype=np.int32))

    @property
    def dims(self) -> Triple:
        return tuple(self.coverage.shape)

    @property
    def num_classes(self) -> int:
        return int(self.votes.shape[0])

    def merge(self, other: "VoteGrid") -> "VoteGrid":
        if other.votes.shape != self.votes.shape:
            raise ValueError(f"Cannot merge vote grids of shapes {self.votes.shape} and {other.votes.shape}")
        return VoteGrid(self.votes + other.votes, self.coverage + other.coverage)

    def fractions(self) -> np.ndarray:
        """Vote share per class; zero where no patch landed."""
        coverage = np.maximum(self.coverage, 1).astype(np.float32)
        return (self.votes / coverage[None]).astype(np.float32)


def accumulate_votes(grid: VoteGrid, origin: Sequence[int], patch_labels: np.ndarray) -> VoteGrid:
    """Adds one predicted label patch to ``grid`` in place and returns it."""
    patch_labels = np.asarray(patch_labels)
    if patch_labels.ndim != 3:
        raise ValueError(f"Label patch must be 3D, got shape {patch_labels.shape}")
    if any(o < 0 or o + s > d for o, s, d in zip(origin, patch_labels.shape, grid.dims)):
        raise PlanError(f"Patch at {tuple(origin)} of size {patch_labels.shape} leaves volume {grid.dims}")
    if patch_labels.size and (patch_labels.min() < 0 or patch_labels.max() >= grid.num_classes):
        raise ValueError(f"Patch labels must lie in [0, {grid.num_classes})")
    region = patch_region(origin, patch_labels.shape)
    for class_id in range(grid.num_classes):
        grid.votes[(class_id,) + region] += patch_labels == class_id
    grid.coverage[region] += 1
    return grid


def fuse_votes(grid: VoteGrid) -> LabelMap:
    """Majority vote per voxel; ties go to the lowest class id, uncovered voxels to background."""
    return LabelMap(np.argmax(grid.votes, axis=0).astype(np.uint8))


def predict_patches(
    model: SegmentationNetwork,
    case: Case,
    plan: SamplingPlan,
    batch_size: int = DEFAULT_BATCH_SIZE,
    mask_filter: bool = False,
) -> Iterator[Tuple[Triple, np.ndarray]]:
    """Yields (origin, label patch) in plan order.

    With ``mask_filter`` set, origins whose output window misses the brain
    mask are skipped.
    """
    spec = model.spec
    if tuple(plan.patch_size) != tuple(spec.output_size):
        raise PlanError(f"Plan patch size {plan.patch_size} differs from network output {spec.output_size}")
    if tuple(plan.volume_dims) != tuple(case.dims):
        raise PlanError(f"Plan built for {plan.volume_dims}, case {case.case_id} has {case.dims}")
    if case.modality_count != spec.in_channels:
        raise ValueError(f"Network expects {spec.in_channels} modalities, case {case.case_id} has {case.modality_count}")

    padded = pad_for_context(stack_modalities(case), context_margin(spec.input_size, spec.output_size))
    origins = list(plan.origins)
    if mask_filter:
        origins = [o for o in origins if case.brain_mask[patch_region(o, plan.patch_size)].any()]

    device = next(model.parameters()).device
    model.eval()
    with torch.no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start : start + batch_size]
            batch = np.stack([padded[(slice(None),) + patch_region(o, spec.input_size)] for o in chunk])
            probabilities = model(torch.from_numpy(batch).to(device))
            labels = probabilities.argmax(dim=1).cpu().numpy().astype(np.uint8)
            for origin, patch in zip(chunk, labels):
                yield origin, patch


def collect_votes(
    model: SegmentationNetwork,
    case: Case,
    plan: SamplingPlan,
    batch_size: int = DEFAULT_BATCH_SIZE,
    mask_filter: bool = True,
) -> VoteGrid:
    grid = VoteGrid.empty(case.dims, model.spec.num_classes)
    for origin, patch in predict_patches(model, case, plan, batch_size, mask_filter):
        accumulate_votes(grid, origin, patch)
    return grid


def segment_case(
    model: SegmentationNetwork,
    case: Case,
    level,
    batch_size: int = DEFAULT_BATCH_SIZE,
    return_votes: bool = False,
) -> Union[LabelMap, Tuple[LabelMap, VoteGrid]]:
    """Segments a whole case at the given test-time overlap level.

    Voxels outside the brain mask are forced to background.
    """
    plan = plan_grid(case.dims, model.spec.output_size, level)
    grid = collect_votes(model, case, plan, batch_size)
    labels = np.array(fuse_votes(grid).labels)
    labels[~case.brain_mask] = BACKGROUND
    logger.debug(f"Segmented {case.case_id} from {plan.origin_count} planned patches")
    segmentation = LabelMap(labels)
    return (segmentation, grid) if return_votes else segmentation


def save_segmentation(segmentation: LabelMap, case: Case, path: Union[str, Path]) -> Path:
    return save_label_volume(segmentation.labels, case, path)


def save_vote_fractions(grid: VoteGrid, case: Case, path: Union[str, Path]) -> Path:
    """Writes a 4D NIfTI (X, Y, Z, classes) of per-class vote shares."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fractions = np.moveaxis(grid.fractions(), 0, -1)
    image = nib.Nifti1Image(fractions, np.asarray(case.affine, dtype=np.float64))
    image.set_data_dtype(np.float32)
    nib.save(image, str(path))
    return path
