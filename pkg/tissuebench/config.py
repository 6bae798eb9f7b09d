"""Experiment configuration files.

An experiment is described by an INI file with the sections [experiment],
[dataset], [training], [architecture] and [statistics]. Every key is
optional; ``EXPERIMENT_SCHEMA`` lists the parser and default of each.
"""

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from tissuebench.architectures import DIMENSIONALITIES, FAMILIES
from tissuebench.evaluation import SIDES
from tissuebench.sampling import OverlapLevel
from tissuebench.trainer import TrainConfig

logger = logging.getLogger(__name__)

STUDIES = ("overlap", "modality", "dimensionality", "single_run")
OVERLAP_AXES = ("train", "test", "both", "grid")
EVALUATIONS = ("loocv", "holdout")
SOURCES = ("phantom", "manifest")


class ConfigError(ValueError):
    pass


def _choice(*options: str) -> Callable[[str], str]:
    def parse(value: str) -> str:
        value = value.strip()
        if value not in options:
            raise ValueError(f"expected one of {list(options)}, got {value!r}")
        return value

    return parse


def _list_of(options: Tuple[str, ...]) -> Callable[[str], Tuple[str, ...]]:
    def parse(value: str) -> Tuple[str, ...]:
        items = tuple(item.strip() for item in value.split(",") if item.strip())
        if not items:
            raise ValueError("expected at least one entry")
        unknown = [item for item in items if item not in options]
        if unknown:
            raise ValueError(f"unknown entries {unknown}; expected any of {list(options)}")
        return items

    return parse


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise ValueError(f"expected a positive integer, got {number}")
    return number


def _optional_positive_int(value: str) -> Optional[int]:
    return _positive_int(value) if value.strip() else None


def _positive_float(value: str) -> float:
    number = float(value)
    if not number > 0:
        raise ValueError(f"expected a positive number, got {number}")
    return number


def _non_negative_float(value: str) -> float:
    number = float(value)
    if number < 0:
        raise ValueError(f"expected a non-negative number, got {number}")
    return number


def _fraction(value: str) -> float:
    number = float(value)
    if not 0 < number < 1:
        raise ValueError(f"expected a value in (0, 1), got {number}")
    return number


def _optional_path(value: str) -> Optional[Path]:
    return Path(value.strip()).expanduser() if value.strip() else None


def _boolean(value: str) -> bool:
    text = value.strip().lower()
    if text in ("1", "yes", "true", "on"):
        return True
    if text in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _triple(value: str) -> Tuple[int, int, int]:
    numbers = tuple(int(v) for v in value.replace("x", ",").split(",") if v.strip())
    if len(numbers) != 3 or any(n < 1 for n in numbers):
        raise ValueError(f"expected three positive integers, got {value!r}")
    return numbers


EXPERIMENT_SCHEMA: Dict[str, Dict[str, Tuple[Callable, str]]] = {
    "experiment": {
        "study": (_choice(*STUDIES), "single_run"),
        "families": (_list_of(FAMILIES), "UNet"),
        "dims": (_list_of(DIMENSIONALITIES), "3D"),
        "overlap_train": (OverlapLevel.parse, "high"),
        "overlap_test": (OverlapLevel.parse, "high"),
        "overlap_axis": (_choice(*OVERLAP_AXES), "train"),
        "evaluation": (_choice(*EVALUATIONS), "loocv"),
        "test_fraction": (_fraction, "0.2"),
        "seed": (int, "0"),
        "jobs": (_positive_int, "1"),
        "output_dir": (_optional_path, ""),
        "save_segmentations": (_boolean, "no"),
    },
    "dataset": {
        "source": (_choice(*SOURCES), "phantom"),
        "manifest": (_optional_path, ""),
        "count": (_positive_int, "4"),
        "dims": (_triple, "64, 64, 64"),
        "noise_sigma": (_non_negative_float, "0.0"),
        "modality_count": (_positive_int, "1"),
    },
    "training": {
        "max_epochs": (_positive_int, "20"),
        "patience": (_positive_int, "2"),
        "val_fraction": (_fraction, "0.2"),
        "batch_size": (_optional_positive_int, ""),
        "learning_rate": (_positive_float, "0.001"),
        "samples_per_epoch": (_optional_positive_int, ""),
        "device": (str, "cpu"),
    },
    "architecture": {
        "width_scale": (_positive_float, "1.0"),
    },
    "statistics": {
        "alpha": (_fraction, "0.01"),
        "sided": (_choice(*SIDES), "two-sided"),
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "phantom"
    manifest: Optional[Path] = None
    count: int = 4
    dims: Tuple[int, int, int] = (64, 64, 64)
    noise_sigma: float = 0.0
    modality_count: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    study: str = "single_run"
    families: Tuple[str, ...] = ("UNet",)
    dims: Tuple[str, ...] = ("3D",)
    overlap_train: OverlapLevel = OverlapLevel.HIGH
    overlap_test: OverlapLevel = OverlapLevel.HIGH
    overlap_axis: str = "train"
    evaluation: str = "loocv"
    test_fraction: float = 0.2
    seed: int = 0
    jobs: int = 1
    output_dir: Optional[Path] = None
    save_segmentations: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    width_scale: float = 1.0
    alpha: float = 0.01
    sided: str = "two-sided"

    def validate(self) -> "ExperimentConfig":
        if self.dataset.source == "manifest" and self.dataset.manifest is None:
            raise ConfigError("[dataset] source = manifest needs a 'manifest' path")
        if self.dataset.source == "phantom":
            if self.dataset.modality_count not in (1, 2):
                raise ConfigError("Phantom datasets support modality_count 1 or 2")
            if self.study == "modality" and self.dataset.modality_count < 2:
                raise ConfigError("The modality study needs at least 2 modalities")
            if self.dataset.count < 3:
                raise ConfigError(f"{self.evaluation} evaluation needs at least 3 cases")
        return self

    def to_dict(self) -> dict:
        return {
            "experiment": {
                "study": self.study,
                "families": list(self.families),
                "dims": list(self.dims),
                "overlap_train": self.overlap_train.label,
                "overlap_test": self.overlap_test.label,
                "overlap_axis": self.overlap_axis,
                "evaluation": self.evaluation,
                "test_fraction": self.test_fraction,
                "seed": self.seed,
                "jobs": self.jobs,
                "output_dir": str(self.output_dir) if self.output_dir else None,
                "save_segmentations": self.save_segmentations,
            },
            "dataset": {
                "source": self.dataset.source,
                "manifest": str(self.dataset.manifest) if self.dataset.manifest else None,
                "count": self.dataset.count,
                "dims": list(self.dataset.dims),
                "noise_sigma": self.dataset.noise_sigma,
                "modality_count": self.dataset.modality_count,
            },
            "training": self.training.to_dict(),
            "architecture": {"width_scale": self.width_scale},
            "statistics": {"alpha": self.alpha, "sided": self.sided},
        }


def _parse_sections(parser: configparser.ConfigParser, source: str) -> Dict[str, Dict[str, object]]:
    unknown_sections = [s for s in parser.sections() if s not in EXPERIMENT_SCHEMA]
    if unknown_sections:
        raise ConfigError(f"{source}: unknown sections {unknown_sections}")
    values: Dict[str, Dict[str, object]] = {}
    for section, keys in EXPERIMENT_SCHEMA.items():
        present = parser[section] if parser.has_section(section) else {}
        unknown_keys = [k for k in present if k not in keys]
        if unknown_keys:
            raise ConfigError(f"{source}: unknown keys {unknown_keys} in [{section}]")
        values[section] = {}
        for key, (parse, default) in keys.items():
            raw = present.get(key, default)
            try:
                values[section][key] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {e}") from e
    return values


def load_experiment_config(
    path: Optional[Path] = None,
    seed: Optional[int] = None,
    output_dir: Optional[Path] = None,
    jobs: Optional[int] = None,
) -> ExperimentConfig:
    """Reads an experiment INI file and applies command-line overrides.

    Relative dataset manifest paths resolve against the config file's folder.
    Without a path, every setting takes its default.

    Raises:
        ConfigError: Unknown section or key, unparsable value, or an
            inconsistent combination of settings.
    """
    parser = configparser.ConfigParser()
    base = Path.cwd()
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        parser.read(path, encoding="utf-8")
        base = path.parent
        source = str(path)
    values = _parse_sections(parser, source)

    experiment, dataset, training = values["experiment"], values["dataset"], values["training"]
    manifest = dataset["manifest"]
    if manifest is not None and not manifest.is_absolute():
        manifest = base / manifest
    try:
        train_config = TrainConfig(**training)
    except ValueError as e:
        raise ConfigError(f"{source}: [training] {e}") from e

    config = ExperimentConfig(
        study=experiment["study"],
        families=experiment["families"],
        dims=experiment["dims"],
        overlap_train=experiment["overlap_train"],
        overlap_test=experiment["overlap_test"],
        overlap_axis=experiment["overlap_axis"],
        evaluation=experiment["evaluation"],
        test_fraction=experiment["test_fraction"],
        seed=experiment["seed"],
        jobs=experiment["jobs"],
        output_dir=experiment["output_dir"],
        save_segmentations=experiment["save_segmentations"],
        dataset=DatasetConfig(
            source=dataset["source"],
            manifest=manifest,
            count=dataset["count"],
            dims=dataset["dims"],
            noise_sigma=dataset["noise_sigma"],
            modality_count=dataset["modality_count"],
        ),
        training=train_config,
        width_scale=values["architecture"]["width_scale"],
        alpha=values["statistics"]["alpha"],
        sided=values["statistics"]["sided"],
    )
    if seed is not None:
        config = replace(config, seed=int(seed))
    if output_dir is not None:
        config = replace(config, output_dir=Path(output_dir))
    if jobs is not None:
        if jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {jobs}")
        config = replace(config, jobs=int(jobs))
    logger.debug(f"Loaded experiment config from {source}")
    return config.validate()


def write_default_config(path: Path) -> Path:
    """Writes an INI file listing every key with its default value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, keys in EXPERIMENT_SCHEMA.items():
        parser[section] = {key: default for key, (_, default) in keys.items()}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path
