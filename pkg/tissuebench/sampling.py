"""Regular-grid patch planning and training-sample extraction."""

import itertools
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from tissuebench.volumes import Case, Triple, stack_modalities

logger = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


class OverlapLevel(Enum):
    """Overlap between neighbouring patches, as a divisor of the patch size."""

    NULL = ("null", 1)
    MEDIUM = ("medium", 2)
    HIGH = ("high", 8)

    def __init__(self, label: str, stride_divisor: int):
        self.label = label
        self.stride_divisor = stride_divisor

    @classmethod
    def parse(cls, value) -> "OverlapLevel":
        if isinstance(value, OverlapLevel):
            return value
        text = str(value).strip().lower()
        for level in cls:
            if text in (level.label, level.name.lower()):
                return level
        raise ValueError(f"Unknown overlap level {value!r}; expected one of {[l.label for l in cls]}")

    def stride(self, patch_size: Sequence[int]) -> Triple:
        return tuple(max(1, int(p) // self.stride_divisor) for p in patch_size)


def _axis_origins(dim: int, patch: int, stride: int) -> List[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


@dataclass(frozen=True)
class SamplingPlan:
    patch_size: Triple
    stride: Triple
    volume_dims: Triple
    origins: Tuple[Triple, ...]
    level: Optional[str] = None

    @property
    def origin_count(self) -> int:
        return len(self.origins)

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "stride": list(self.stride),
            "volume_dims": list(self.volume_dims),
            "level": self.level,
            "origin_count": self.origin_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SamplingPlan":
        payload = json.loads(text)
        return plan_with_stride(payload["volume_dims"], payload["patch_size"], payload["stride"], payload.get("level"))


def plan_with_stride(
    volume_dims: Sequence[int], patch_size: Sequence[int], stride: Sequence[int], level: Optional[str] = None
) -> SamplingPlan:
    volume_dims = tuple(int(d) for d in volume_dims)
    patch_size = tuple(int(p) for p in patch_size)
    stride = tuple(int(s) for s in stride)
    if not (len(volume_dims) == len(patch_size) == len(stride) == 3):
        raise PlanError("Volume dims, patch size and stride must all be 3-tuples")
    if any(p < 1 for p in patch_size) or any(s < 1 for s in stride):
        raise PlanError(f"Patch size {patch_size} and stride {stride} must be positive")
    if any(p > d for p, d in zip(patch_size, volume_dims)):
        raise PlanError(f"Patch size {patch_size} exceeds volume dims {volume_dims}")
    axes = [_axis_origins(d, p, s) for d, p, s in zip(volume_dims, patch_size, stride)]
    origins = tuple(itertools.product(*axes))
    return SamplingPlan(patch_size, stride, volume_dims, origins, level)


def plan_grid(volume_dims: Sequence[int], patch_size: Sequence[int], level) -> SamplingPlan:
    """Lays patches on a regular grid with stride patch_size // divisor (at least 1).

    A final origin clamped to the far edge is added on every axis whose
    stride does not land there, so the union of patches covers the volume.
    """
    level = OverlapLevel.parse(level)
    plan = plan_with_stride(volume_dims, patch_size, level.stride(patch_size), level.label)
    logger.debug(f"Planned {plan.origin_count} origins for {volume_dims} at {level.label} overlap")
    return plan


def patch_region(origin: Sequence[int], size: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def useful_origins(case: Case, plan: SamplingPlan) -> List[Triple]:
    """Origins whose output window holds at least one tissue (non-background) voxel."""
    if case.ground_truth is None:
        raise ValueError(f"{case.case_id}: cannot select training origins without ground truth")
    if tuple(case.dims) != tuple(plan.volume_dims):
        raise PlanError(f"{case.case_id}: plan built for {plan.volume_dims}, case has {case.dims}")
    labels = case.ground_truth.labels
    return [origin for origin in plan.origins if labels[patch_region(origin, plan.patch_size)].any()]


def compute_sample_weights(target_patch: np.ndarray) -> np.ndarray:
    """Weight 1 on tissue voxels and 0 on background."""
    return (np.asarray(target_patch) > 0).astype(np.float32)


def context_margin(input_size: Sequence[int], output_size: Sequence[int]) -> Triple:
    margins = []
    for i, o in zip(input_size, output_size):
        if i < o or (i - o) % 2:
            raise PlanError(f"Input {tuple(input_size)} cannot centre output {tuple(output_size)}")
        margins.append((i - o) // 2)
    return tuple(margins)


def pad_for_context(stacked: np.ndarray, margin: Sequence[int]) -> np.ndarray:
    """Zero-pads a (channels, X, Y, Z) grid so input windows at the volume edge stay in bounds."""
    return np.pad(stacked, [(0, 0)] + [(m, m) for m in margin], mode="constant")


@dataclass(frozen=True)
class TrainingSample:
    input_patch: np.ndarray
    target_patch: np.ndarray
    weight_patch: np.ndarray


def extract_training_samples(
    case: Case, plan: SamplingPlan, input_size: Sequence[int], output_size: Sequence[int]
) -> Iterator[TrainingSample]:
    """Yields (input, target, weight) samples at every useful origin.

    The input window is centred on the output window; context reaching past
    the volume edge is zero.
    """
    if tuple(output_size) != tuple(plan.patch_size):
        raise PlanError(f"Plan patch size {plan.patch_size} differs from network output {tuple(output_size)}")
    margin = context_margin(input_size, output_size)
    padded = pad_for_context(stack_modalities(case), margin)
    labels = case.ground_truth.labels if case.ground_truth is not None else None
    for origin in useful_origins(case, plan):
        target = labels[patch_region(origin, output_size)]
        inputs = padded[(slice(None),) + patch_region(origin, input_size)]
        yield TrainingSample(
            np.ascontiguousarray(inputs, dtype=np.float32),
            np.array(target, dtype=np.int64),
            compute_sample_weights(target),
        )


class PatchDataset(Dataset):
    """Lazily cuts training samples from a list of cases.

    Items are (input float32 [C, *input], target int64 [*output],
    weight float32 [*output]) tensors.
    """

    def __init__(self, cases: Sequence[Case], level, input_size: Sequence[int], output_size: Sequence[int]):
        self.level = OverlapLevel.parse(level)
        self.input_size = tuple(input_size)
        self.output_size = tuple(output_size)
        margin = context_margin(self.input_size, self.output_size)
        self._padded: List[np.ndarray] = []
        self._labels: List[np.ndarray] = []
        self._index: List[Tuple[int, Triple]] = []
        self.plans: List[SamplingPlan] = []
        for case_index, case in enumerate(cases):
            plan = plan_grid(case.dims, self.output_size, self.level)
            origins = useful_origins(case, plan)
            self.plans.append(plan)
            self._padded.append(pad_for_context(stack_modalities(case), margin))
            self._labels.append(case.ground_truth.labels)
            self._index.extend((case_index, origin) for origin in origins)
        logger.info(
            f"Patch dataset: {len(self._index)} samples from {len(cases)} cases "
            f"({self.level.label} overlap, output {self.output_size})"
        )

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, index: int):
        case_index, origin = self._index[index]
        inputs = self._padded[case_index][(slice(None),) + patch_region(origin, self.input_size)]
        target = self._labels[case_index][patch_region(origin, self.output_size)]
        return (
            torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32)),
            torch.from_numpy(np.array(target, dtype=np.int64)),
            torch.from_numpy(compute_sample_weights(target)),
        )


class SampleListDataset(Dataset):
    """Wraps already extracted TrainingSample objects."""

    def __init__(self, samples: Sequence[TrainingSample]):
        self._samples = list(samples)

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index: int):
        sample = self._samples[index]
        return (
            torch.from_numpy(np.ascontiguousarray(sample.input_patch, dtype=np.float32)),
            torch.from_numpy(np.asarray(sample.target_patch, dtype=np.int64)),
            torch.from_numpy(np.asarray(sample.weight_patch, dtype=np.float32)),
        )
