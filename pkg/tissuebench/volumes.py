"""Volumetric data model: volumes, label maps and cases.

Covers NIfTI loading and saving, dataset manifests, the preprocessing applied
before sampling (skull stripping by mask, zero-mean/unit-variance intensities,
modality stacking) and the synthetic phantoms used for desk-scale runs.
"""

import configparser
import logging
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import nibabel as nib
from nibabel.filebasedimages import ImageFileError
import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
TISSUE_CLASSES: Tuple[int, ...] = (BACKGROUND, CSF, GM, WM)
CLASS_NAMES: Dict[int, str] = {CSF: "CSF", GM: "GM", WM: "WM"}
NUM_CLASSES: int = len(TISSUE_CLASSES)

MIN_PHANTOM_DIM: int = 32
DESCRIP_PREFIX = "tissuebench:modality="

Triple = Tuple[int, int, int]
PathLike = Union[str, os.PathLike]


class ModalityId(str, Enum):
    T1W = "T1w"
    T2W = "T2w"
    SYNTHETIC = "synthetic"


class DimensionMismatchError(ValueError):
    """Raised when grids that must share a shape do not.

    The offending file (if any) is kept on ``path``.
    """

    def __init__(self, message: str, path: Optional[PathLike] = None):
        super().__init__(message)
        self.path = path


class DegenerateIntensityError(ValueError):
    pass


class LabelValueError(ValueError):
    pass


class PhantomGeometryError(ValueError):
    pass


def _read_only(array: np.ndarray, dtype) -> np.ndarray:
    frozen = np.array(array, dtype=dtype, copy=True)
    frozen.setflags(write=False)
    return frozen


def _as_label_array(values: np.ndarray, source: str = "label map") -> np.ndarray:
    values = np.asarray(values)
    if values.dtype.kind == "f":
        if not np.all(np.isfinite(values)) or not np.array_equal(values, np.round(values)):
            raise LabelValueError(f"{source}: labels must be integers")
    elif values.dtype.kind not in "iub":
        raise LabelValueError(f"{source}: unsupported label dtype {values.dtype}")
    if values.size and (values.min() < min(TISSUE_CLASSES) or values.max() > max(TISSUE_CLASSES)):
        found = sorted(int(v) for v in np.unique(values) if int(v) not in TISSUE_CLASSES)
        raise LabelValueError(f"{source}: label values {found} outside {list(TISSUE_CLASSES)}")
    return values.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Volume:
    """A single-modality 3D intensity grid with its voxel spacing in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_id: ModalityId = ModalityId.T1W

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionMismatchError(f"Volume must be a non-empty 3D grid, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"Voxel spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", _read_only(data, np.float32))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality_id", ModalityId(self.modality_id))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.modality_id == other.modality_id
            and np.array_equal(self.data, other.data)
        )

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    classes: Tuple[int, ...] = TISSUE_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DimensionMismatchError(f"Label map must be 3D, got shape {labels.shape}")
        object.__setattr__(self, "labels", _read_only(_as_label_array(labels), np.uint8))
        object.__setattr__(self, "classes", tuple(self.classes))

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.classes == other.classes and np.array_equal(self.labels, other.labels)

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.labels.shape)

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


@dataclass(frozen=True, eq=False)
class Case:
    """One subject: modality volumes, optional ground truth and the brain mask.

    All grids share one shape. The arrays are read-only, so a Case can be
    handed to several threads at once.
    """

    volumes: Tuple[Volume, ...]
    ground_truth: Optional[LabelMap]
    brain_mask: np.ndarray
    case_id: str
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        volumes = tuple(self.volumes)
        mask = np.asarray(self.brain_mask)
        if mask.ndim != 3:
            raise DimensionMismatchError(f"{self.case_id}: brain mask must be 3D, got shape {mask.shape}")
        for index, volume in enumerate(volumes):
            if volume.dims != mask.shape:
                raise DimensionMismatchError(
                    f"{self.case_id}: modality {index} has shape {volume.dims}, mask has {mask.shape}"
                )
        if self.ground_truth is not None and self.ground_truth.dims != mask.shape:
            raise DimensionMismatchError(
                f"{self.case_id}: ground truth has shape {self.ground_truth.dims}, mask has {mask.shape}"
            )
        mask = mask.astype(bool)
        if not mask.any():
            raise ValueError(f"{self.case_id}: brain mask is empty")
        if self.affine is None:
            spacing = volumes[0].spacing if volumes else (1.0, 1.0, 1.0)
            affine = np.diag(list(spacing) + [1.0])
        else:
            affine = np.asarray(self.affine, dtype=np.float64)
            if affine.shape != (4, 4):
                raise ValueError(f"{self.case_id}: affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "volumes", volumes)
        object.__setattr__(self, "brain_mask", _read_only(mask, bool))
        object.__setattr__(self, "affine", _read_only(affine, np.float64))

    def __eq__(self, other):
        """Value equality over id, modalities, ground truth and mask; the affine is not compared."""
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.volumes == other.volumes
            and self.ground_truth == other.ground_truth
            and np.array_equal(self.brain_mask, other.brain_mask)
        )

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.brain_mask.shape)

    @property
    def modality_count(self) -> int:
        return len(self.volumes)

    def select_modalities(self, indices: Sequence[int]) -> "Case":
        """Returns a Case holding only the given modality channels, in the given order."""
        return replace(self, volumes=tuple(self.volumes[i] for i in indices))


# --- NIfTI input/output ---------------------------------------------------


def _load_nifti(path: PathLike):
    if not Path(path).exists():
        raise FileNotFoundError(f"No such file: {path}")
    try:
        image = nib.load(str(path))
        data = np.asanyarray(image.dataobj)
    except (ImageFileError, EOFError, ValueError) as e:
        raise OSError(f"Cannot read {path} as NIfTI: {e}") from e
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise DimensionMismatchError(f"{path}: expected a 3D volume, got shape {data.shape}", path=path)
    return image, data


def _modality_from_header(image, position: int) -> ModalityId:
    try:
        descrip = image.header["descrip"].item()
        if isinstance(descrip, bytes):
            descrip = descrip.decode("ascii", errors="ignore")
    except (KeyError, AttributeError):
        descrip = ""
    if descrip.startswith(DESCRIP_PREFIX):
        try:
            return ModalityId(descrip[len(DESCRIP_PREFIX):].strip())
        except ValueError:
            pass
    return (ModalityId.T1W, ModalityId.T2W)[position] if position < 2 else ModalityId.SYNTHETIC


def load_case(
    modality_paths: Sequence[PathLike],
    gt_path: Optional[PathLike],
    mask_path: PathLike,
    case_id: Optional[str] = None,
    label_mapping: Optional[Mapping[int, int]] = None,
) -> Case:
    """Loads a case from NIfTI files.

    Args:
        modality_paths: One file per modality; channel order follows this list.
        gt_path: Ground-truth label file, or None for inference-only cases.
        mask_path: Binary brain mask.
        case_id: Identifier; defaults to the stem of the first modality file.
        label_mapping: Optional source->target label table applied to the ground truth.

    Returns:
        A validated Case.

    Raises:
        DimensionMismatchError: A file does not match the first modality's shape.
        LabelValueError: Ground-truth labels fall outside {0, 1, 2, 3}.
        OSError: A file is missing or not readable as NIfTI.
    """
    if not modality_paths:
        raise ValueError("At least one modality file is required")

    volumes: List[Volume] = []
    reference_shape = None
    affine = None
    for position, path in enumerate(modality_paths):
        image, data = _load_nifti(path)
        if reference_shape is None:
            reference_shape = data.shape
            affine = image.affine
        elif data.shape != reference_shape:
            raise DimensionMismatchError(
                f"{path}: shape {data.shape} does not match {reference_shape} of {modality_paths[0]}",
                path=path,
            )
        spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
        volumes.append(Volume(data, spacing, _modality_from_header(image, position)))

    _, mask = _load_nifti(mask_path)
    if mask.shape != reference_shape:
        raise DimensionMismatchError(
            f"{mask_path}: mask shape {mask.shape} does not match {reference_shape}", path=mask_path
        )

    ground_truth = None
    if gt_path is not None:
        _, labels = _load_nifti(gt_path)
        if labels.shape != reference_shape:
            raise DimensionMismatchError(
                f"{gt_path}: ground-truth shape {labels.shape} does not match {reference_shape}", path=gt_path
            )
        if label_mapping is not None:
            labels = apply_label_mapping(labels, label_mapping)
        try:
            ground_truth = LabelMap(_as_label_array(labels, str(gt_path)))
        except LabelValueError:
            logger.error(f"Rejected ground truth {gt_path}")
            raise

    if case_id is None:
        case_id = Path(modality_paths[0]).name.split(".")[0]
    logger.debug(f"Loaded case {case_id}: {len(volumes)} modalities, shape {reference_shape}")
    return Case(tuple(volumes), ground_truth, mask != 0, case_id, affine=affine)


def _nifti(data: np.ndarray, affine: np.ndarray, dtype, spacing=None, descrip: Optional[str] = None):
    image = nib.Nifti1Image(np.asarray(data, dtype=dtype), np.asarray(affine, dtype=np.float64))
    image.set_data_dtype(dtype)
    if spacing is not None:
        image.header.set_zooms(tuple(spacing))
    if descrip:
        image.header["descrip"] = descrip
    return image


def save_case(case: Case, directory: PathLike) -> Dict[str, object]:
    """Writes every grid of a case as NIfTI and returns the written paths.

    The modality tag goes into the header ``descrip`` field so that
    ``load_case`` restores it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, object] = {"modalities": [], "ground_truth": None}
    for index, volume in enumerate(case.volumes):
        path = directory / f"{case.case_id}_{index}_{volume.modality_id.value}.nii.gz"
        image = _nifti(volume.data, case.affine, np.float32, volume.spacing, DESCRIP_PREFIX + volume.modality_id.value)
        nib.save(image, str(path))
        paths["modalities"].append(path)
    spacing = case.volumes[0].spacing if case.volumes else None
    if case.ground_truth is not None:
        path = directory / f"{case.case_id}_gt.nii.gz"
        nib.save(_nifti(case.ground_truth.labels, case.affine, np.uint8, spacing), str(path))
        paths["ground_truth"] = path
    mask_path = directory / f"{case.case_id}_mask.nii.gz"
    nib.save(_nifti(case.brain_mask, case.affine, np.uint8, spacing), str(mask_path))
    paths["mask"] = mask_path
    return paths


def save_label_volume(labels: np.ndarray, case: Case, path: PathLike) -> Path:
    """Writes a label grid with the geometry of ``case``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spacing = case.volumes[0].spacing if case.volumes else None
    nib.save(_nifti(labels, case.affine, np.uint8, spacing), str(path))
    return path


def load_label_volume(path: PathLike) -> LabelMap:
    _, labels = _load_nifti(path)
    return LabelMap(_as_label_array(labels, str(path)))


# --- label mapping --------------------------------------------------------


def read_label_mapping(path: PathLike) -> Dict[int, int]:
    """Reads a two-column "source_label target_label" table.

    Blank lines and lines starting with '#' are ignored.
    """
    mapping: Dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_number}: expected 'source target', got {line!r}")
            source, target = int(parts[0]), int(parts[1])
            if target not in TISSUE_CLASSES:
                raise LabelValueError(f"{path}:{line_number}: target label {target} outside {list(TISSUE_CLASSES)}")
            mapping[source] = target
    return mapping


def apply_label_mapping(labels: np.ndarray, mapping: Mapping[int, int]) -> np.ndarray:
    labels = np.asarray(labels)
    present = np.unique(labels).astype(np.int64)
    missing = [int(v) for v in present if int(v) not in mapping]
    if missing:
        raise LabelValueError(f"Labels {missing} have no entry in the label mapping")
    lookup_keys = np.array(sorted(mapping), dtype=np.int64)
    lookup_values = np.array([mapping[k] for k in lookup_keys], dtype=np.uint8)
    positions = np.searchsorted(lookup_keys, labels.astype(np.int64))
    return lookup_values[positions]


# --- dataset manifests ----------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    modalities: Tuple[Path, ...]
    mask: Path
    ground_truth: Optional[Path] = None
    label_mapping: Optional[Path] = None


def read_dataset_manifest(path: PathLike) -> List[ManifestEntry]:
    """Reads an INI manifest with one section per case.

    Keys: ``modalities`` (comma-separated), ``mask``, optional ``ground_truth``
    and ``label_mapping``. Relative paths resolve against the manifest folder.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    base = path.parent

    def resolve(value: str) -> Path:
        candidate = Path(value.strip()).expanduser()
        return candidate if candidate.is_absolute() else base / candidate

    entries = []
    for case_id in parser.sections():
        section = parser[case_id]
        if "modalities" not in section or "mask" not in section:
            raise ValueError(f"{path}: case [{case_id}] needs 'modalities' and 'mask'")
        modalities = tuple(resolve(p) for p in section["modalities"].split(",") if p.strip())
        entries.append(
            ManifestEntry(
                case_id=case_id,
                modalities=modalities,
                mask=resolve(section["mask"]),
                ground_truth=resolve(section["ground_truth"]) if section.get("ground_truth") else None,
                label_mapping=resolve(section["label_mapping"]) if section.get("label_mapping") else None,
            )
        )
    if not entries:
        raise ValueError(f"{path}: manifest lists no cases")
    return entries


def write_dataset_manifest(path: PathLike, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    base = path.parent.resolve()

    def relative(p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(p)

    parser = configparser.ConfigParser()
    for entry in entries:
        section = {"modalities": ", ".join(relative(p) for p in entry.modalities), "mask": relative(entry.mask)}
        if entry.ground_truth is not None:
            section["ground_truth"] = relative(entry.ground_truth)
        if entry.label_mapping is not None:
            section["label_mapping"] = relative(entry.label_mapping)
        parser[entry.case_id] = section
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path


def load_cases_from_manifest(path: PathLike, require_ground_truth: bool = False) -> List[Case]:
    cases = []
    for entry in read_dataset_manifest(path):
        if require_ground_truth and entry.ground_truth is None:
            raise ValueError(f"{path}: case [{entry.case_id}] has no ground truth")
        mapping = read_label_mapping(entry.label_mapping) if entry.label_mapping else None
        cases.append(load_case(entry.modalities, entry.ground_truth, entry.mask, entry.case_id, mapping))
    logger.info(f"Loaded {len(cases)} cases from {path}")
    return cases


# --- preprocessing --------------------------------------------------------


def normalize_intensity(volume: Volume, mask: np.ndarray) -> Volume:
    """Standardizes intensities to zero mean and unit variance inside the mask.

    Statistics use the population standard deviation over mask-foreground
    voxels only; voxels outside the mask are set to 0.

    Raises:
        DegenerateIntensityError: Intensities are constant inside the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise DimensionMismatchError(f"Mask shape {mask.shape} does not match volume shape {volume.dims}")
    if int(mask.sum()) < 2:
        raise ValueError("Normalization needs at least two mask-foreground voxels")
    values = volume.data[mask].astype(np.float64)
    if np.ptp(values) == 0:
        raise DegenerateIntensityError("Intensity is constant inside the mask; cannot standardize")
    mean = values.mean()
    std = values.std()
    normalized = np.zeros(volume.dims, dtype=np.float32)
    normalized[mask] = ((values - mean) / std).astype(np.float32)
    return Volume(normalized, volume.spacing, volume.modality_id)


def stack_modalities(case: Case) -> np.ndarray:
    """Early fusion: returns a (channels, X, Y, Z) float32 grid in input order."""
    if not case.volumes:
        raise ValueError(f"{case.case_id}: no modalities to stack")
    return np.stack([volume.data for volume in case.volumes], axis=0).astype(np.float32, copy=False)


def preprocess_case(case: Case) -> Case:
    """Skull strips by the brain mask and standardizes every modality."""
    volumes = tuple(normalize_intensity(volume, case.brain_mask) for volume in case.volumes)
    return replace(case, volumes=volumes)


# --- synthetic phantoms ---------------------------------------------------

# Normalized radii of the concentric shells (fraction of the half extent per axis).
WM_RADIUS = 0.32
GM_RADIUS = 0.52
CSF_RADIUS = 0.66
SKULL_RADIUS = 0.78
# Relative amplitude of the GM/WM boundary harmonics. Large enough that the
# shell radii alone do not predict the boundary.
BOUNDARY_UNDULATION = 0.3


def generate_phantom(
    seed: int,
    dims: Sequence[int] = (64, 64, 64),
    noise_sigma: float = 0.0,
    modality_count: int = 1,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    case_id: Optional[str] = None,
) -> Case:
    """Builds a deterministic concentric-shell brain phantom.

    A WM core (with an undulating GM boundary), a GM shell and a CSF shell
    sit inside the brain mask; a bright skull ring lies outside it. Class
    intensity levels are spaced by max(1, 3.2 * noise_sigma). With two
    modalities GM and WM follow an XOR design: within each channel both draw
    from the same two levels, so only the pair of channels separates them.

    Args:
        seed: Controls geometry jitter, intensity jitter and noise.
        dims: Grid shape, at least 32 per axis.
        noise_sigma: Standard deviation of additive Gaussian noise.
        modality_count: 1 or 2.
        spacing: Voxel size in mm.
        case_id: Defaults to ``phantom_<seed>``.

    Returns:
        A Case with ground truth and brain mask populated.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIM:
        raise PhantomGeometryError(
            f"Phantom dims {dims} too small to hold three tissue shells (need >= {MIN_PHANTOM_DIM} per axis)"
        )
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if modality_count not in (1, 2):
        raise ValueError(f"Phantoms support 1 or 2 modalities, got {modality_count}")

    rng = np.random.default_rng(seed)
    scale = 1.0 + rng.uniform(-0.005, 0.005)
    offset = rng.integers(-2, 3, size=3)
    phase_a, phase_b = rng.uniform(0.0, 2.0 * np.pi, size=2)

    half = np.array(dims, dtype=np.float64) / 2.0
    center = (np.array(dims, dtype=np.float64) - 1.0) / 2.0 + offset
    ux, uy, uz = [
        ((np.arange(d, dtype=np.float64) - c) / h).reshape(shape)
        for d, c, h, shape in zip(dims, center, half, ((-1, 1, 1), (1, -1, 1), (1, 1, -1)))
    ]
    rho = np.sqrt(ux**2 + uy**2 + uz**2)
    theta = np.arctan2(uy, ux)
    phi = np.arccos(np.clip(np.divide(uz, rho, out=np.zeros_like(rho), where=rho > 0), -1.0, 1.0))
    undulation = BOUNDARY_UNDULATION * (
        np.cos(3.0 * theta + phase_a) * np.sin(phi) + 0.5 * np.cos(4.0 * theta + phase_b) * np.sin(phi) ** 2
    )

    labels = np.zeros(dims, dtype=np.uint8)
    labels[rho < CSF_RADIUS * scale] = CSF
    labels[rho < GM_RADIUS * scale] = GM
    labels[rho < WM_RADIUS * scale * (1.0 + undulation)] = WM
    brain_mask = rho < CSF_RADIUS * scale
    skull = (rho >= CSF_RADIUS * scale) & (rho < SKULL_RADIUS * scale)

    step = max(1.0, 3.2 * noise_sigma)

    def level(base: float) -> float:
        return step * (base + rng.uniform(-0.02, 0.02))

    if modality_count == 1:
        channel = np.zeros(dims, dtype=np.float64)
        channel[skull] = level(2.5)
        channel[labels == CSF] = level(1.0)
        channel[labels == GM] = level(2.0)
        channel[labels == WM] = level(3.0)
        channels = [channel]
    else:
        t1_low, t1_high, t1_csf, t1_skull = level(2.0), level(3.0), level(1.0), level(2.5)
        t2_low, t2_high, t2_csf, t2_skull = level(1.0), level(2.0), level(4.0), level(0.5)
        coin = rng.random(dims) < 0.5
        gm, wm = labels == GM, labels == WM
        t1 = np.zeros(dims, dtype=np.float64)
        t1[skull] = t1_skull
        t1[labels == CSF] = t1_csf
        t1[(gm | wm) & coin] = t1_high
        t1[(gm | wm) & ~coin] = t1_low
        t2 = np.zeros(dims, dtype=np.float64)
        t2[skull] = t2_skull
        t2[labels == CSF] = t2_csf
        t2[(gm & coin) | (wm & ~coin)] = t2_high
        t2[(gm & ~coin) | (wm & coin)] = t2_low
        channels = [t1, t2]

    if noise_sigma > 0:
        channels = [c + rng.normal(0.0, noise_sigma, size=dims) for c in channels]

    volumes = tuple(Volume(c.astype(np.float32), tuple(spacing), ModalityId.SYNTHETIC) for c in channels)
    return Case(volumes, LabelMap(labels), brain_mask, case_id or f"phantom_{seed}")
