"""Benchmark studies: settings, cross-validated training runs and paired comparisons.

A study expands into settings (family x dimensionality x overlap x
modalities). Each setting is trained and evaluated per fold, and pairs of
settings are compared per tissue class with the Wilcoxon signed-rank test.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tissuebench.architectures import build_spec
from tissuebench.config import ConfigError, ExperimentConfig
from tissuebench.evaluation import (
    DSCResult,
    SignificanceResult,
    evaluate_case,
    holdout_split,
    loocv_folds,
    wilcoxon_signed_rank,
)
from tissuebench.inference import save_segmentation, segment_case
from tissuebench.networks import instantiate
from tissuebench.sampling import OverlapLevel, PatchDataset, plan_grid
from tissuebench.trainer import TrainReport, split_dataset, train_model
from tissuebench.utils import derive_seed, human_readable_duration
from tissuebench.volumes import CLASS_NAMES, Case, generate_phantom, load_cases_from_manifest, preprocess_case

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Setting:
    family: str
    dim: str
    overlap_train: OverlapLevel
    overlap_test: OverlapLevel
    modalities: Tuple[int, ...]

    @property
    def key(self) -> str:
        modalities = "+".join(str(m) for m in self.modalities)
        return (
            f"{self.family}_{self.dim}_train-{self.overlap_train.label}"
            f"_test-{self.overlap_test.label}_mod-{modalities}"
        )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "dim": self.dim,
            "overlap_train": self.overlap_train.label,
            "overlap_test": self.overlap_test.label,
            "modalities": "+".join(str(m) for m in self.modalities),
        }


@dataclass(frozen=True)
class MetricRow:
    setting: Setting
    case_id: str
    class_id: int
    dsc: float


@dataclass(frozen=True)
class Comparison:
    group: str
    setting_a: str
    setting_b: str
    class_id: int
    mean_a: float
    mean_b: float
    result: SignificanceResult
    higher: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "setting_a": self.setting_a,
            "setting_b": self.setting_b,
            "class": CLASS_NAMES[self.class_id],
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "significantly_higher": self.higher,
            **self.result.to_dict(),
        }


@dataclass
class MetricsBundle:
    settings: List[Setting] = field(default_factory=list)
    groups: Dict[str, str] = field(default_factory=dict)
    rows: List[MetricRow] = field(default_factory=list)
    comparisons: List[Comparison] = field(default_factory=list)
    provenance: Dict[str, dict] = field(default_factory=dict)
    alpha: float = 0.01

    def values(self, setting_key: str, class_id: int) -> Dict[str, float]:
        return {r.case_id: r.dsc for r in self.rows if r.setting.key == setting_key and r.class_id == class_id}


@dataclass
class TaskResult:
    setting_index: int
    fold_index: int
    seed: int
    results: List[DSCResult]
    report: TrainReport


def expand_study(config: ExperimentConfig, modality_count: int) -> Tuple[List[Tuple[str, Setting]], List[Tuple[str, Setting, Setting]]]:
    """Lists the (group, setting) pairs of a study and the pairs to compare."""
    levels = list(OverlapLevel)
    all_modalities = tuple(range(modality_count))
    settings: List[Tuple[str, Setting]] = []
    pairs: List[Tuple[str, Setting, Setting]] = []

    if config.study == "overlap":
        for family in config.families:
            for dim in config.dims:
                group = f"{family}_{dim}"
                if config.overlap_axis == "train":
                    combos = [(level, config.overlap_test) for level in levels]
                elif config.overlap_axis == "test":
                    combos = [(config.overlap_train, level) for level in levels]
                elif config.overlap_axis == "both":
                    combos = [(level, level) for level in levels]
                else:
                    combos = [(a, b) for a in levels for b in levels]
                group_settings = [Setting(family, dim, a, b, all_modalities) for a, b in combos]
                settings.extend((group, s) for s in group_settings)
                pairs.extend(
                    (group, a, b) for i, a in enumerate(group_settings) for b in group_settings[i + 1 :]
                )
    elif config.study == "modality":
        if modality_count < 2:
            raise ConfigError(f"The modality study needs at least 2 modalities, the dataset has {modality_count}")
        for family in config.families:
            for dim in config.dims:
                group = f"{family}_{dim}"
                combined = Setting(family, dim, config.overlap_train, config.overlap_test, all_modalities)
                singles = [
                    Setting(family, dim, config.overlap_train, config.overlap_test, (m,)) for m in all_modalities
                ]
                settings.extend((group, s) for s in singles + [combined])
                pairs.extend((group, combined, single) for single in singles)
    elif config.study == "dimensionality":
        if (config.overlap_train, config.overlap_test) != (OverlapLevel.HIGH, OverlapLevel.HIGH):
            logger.warning("The dimensionality study always uses high overlap for training and testing")
        for family in config.families:
            group = family
            flat = Setting(family, "2D", OverlapLevel.HIGH, OverlapLevel.HIGH, all_modalities)
            volumetric = Setting(family, "3D", OverlapLevel.HIGH, OverlapLevel.HIGH, all_modalities)
            settings.extend([(group, flat), (group, volumetric)])
            pairs.append((group, volumetric, flat))
    else:
        group_settings = [
            Setting(family, dim, config.overlap_train, config.overlap_test, all_modalities)
            for family in config.families
            for dim in config.dims
        ]
        settings.extend(("all", s) for s in group_settings)
        pairs.extend(("all", a, b) for i, a in enumerate(group_settings) for b in group_settings[i + 1 :])
    return settings, pairs


def load_dataset(config: ExperimentConfig) -> List[Case]:
    """Generates phantoms or loads the manifest cases, then preprocesses them."""
    dataset = config.dataset
    if dataset.source == "phantom":
        cases = [
            generate_phantom(
                seed=derive_seed(config.seed, 1000 + index),
                dims=dataset.dims,
                noise_sigma=dataset.noise_sigma,
                modality_count=dataset.modality_count,
                case_id=f"phantom_{index:03d}",
            )
            for index in range(dataset.count)
        ]
    else:
        cases = load_cases_from_manifest(dataset.manifest, require_ground_truth=True)
    counts = {case.modality_count for case in cases}
    if len(counts) != 1:
        raise ConfigError(f"Cases disagree on modality count: {sorted(counts)}")
    return [preprocess_case(case) for case in cases]


def make_folds(config: ExperimentConfig, cases: Sequence[Case]) -> List[Tuple[List[Case], List[Case]]]:
    if config.evaluation == "loocv":
        return [(train, [test]) for train, test in loocv_folds(cases)]
    train, test = holdout_split(cases, config.test_fraction, derive_seed(config.seed, 2000))
    return [(train, test)]


def run_task(
    setting: Setting,
    train_cases: Sequence[Case],
    test_cases: Sequence[Case],
    config: ExperimentConfig,
    seed: int,
    segmentation_dir: Optional[Path] = None,
) -> Tuple[List[DSCResult], TrainReport]:
    """Trains one setting on one fold and scores its test cases."""
    train_subset, val_subset = split_dataset(list(train_cases), config.training.val_fraction, seed)
    spec = build_spec(setting.family, setting.dim, len(setting.modalities), {"width_scale": config.width_scale})
    model = instantiate(spec, seed)

    def select(cases: Sequence[Case]) -> List[Case]:
        return [case.select_modalities(setting.modalities) for case in cases]

    train_set = PatchDataset(select(train_subset), setting.overlap_train, spec.input_size, spec.output_size)
    val_set = PatchDataset(select(val_subset), setting.overlap_train, spec.input_size, spec.output_size)
    report = train_model(model, train_set, val_set, replace(config.training, seed=seed))

    results = []
    for case in test_cases:
        segmentation = segment_case(model, case.select_modalities(setting.modalities), setting.overlap_test)
        results.append(evaluate_case(case.ground_truth, segmentation, case.case_id))
        if segmentation_dir is not None:
            save_segmentation(segmentation, case, segmentation_dir / setting.key / f"{case.case_id}_seg.nii.gz")
    return results, report


def _compare(bundle: MetricsBundle, pairs: Sequence[Tuple[str, Setting, Setting]], sided: str) -> List[Comparison]:
    comparisons = []
    for group, a, b in pairs:
        for class_id in CLASS_NAMES:
            values_a = bundle.values(a.key, class_id)
            values_b = bundle.values(b.key, class_id)
            cases = sorted(set(values_a) & set(values_b))
            series_a = [values_a[c] for c in cases]
            series_b = [values_b[c] for c in cases]
            result = wilcoxon_signed_rank(series_a, series_b, sided=sided)
            mean_a = float(np.mean(series_a)) if cases else float("nan")
            mean_b = float(np.mean(series_b)) if cases else float("nan")
            higher = None
            if result.p_value < bundle.alpha and mean_a != mean_b:
                higher = a.key if mean_a > mean_b else b.key
            comparisons.append(Comparison(group, a.key, b.key, class_id, mean_a, mean_b, result, higher))
    return comparisons


def run_experiment(config: ExperimentConfig, cases: Optional[Sequence[Case]] = None) -> MetricsBundle:
    """Runs every setting of the configured study over every fold.

    Args:
        config: A validated experiment configuration.
        cases: Preprocessed cases; loaded from the configured dataset when omitted.

    Returns:
        A MetricsBundle whose rows are sorted by setting, case and class, so
        the result does not depend on ``config.jobs``.

    Raises:
        ConfigError: The study cannot run on this dataset. Raised before any training.
    """
    started = time.monotonic()
    cases = list(cases) if cases is not None else load_dataset(config)
    if not cases:
        raise ConfigError("The dataset holds no cases")
    modality_count = cases[0].modality_count
    settings, pairs = expand_study(config, modality_count)
    folds = make_folds(config, cases)
    logger.info(
        f"Study '{config.study}': {len(settings)} settings x {len(folds)} folds on {len(cases)} cases"
    )

    segmentation_dir = None
    if config.save_segmentations and config.output_dir is not None:
        segmentation_dir = Path(config.output_dir) / "segmentations"

    tasks = []
    for setting_index, (_, setting) in enumerate(settings):
        for fold_index, (train_cases, test_cases) in enumerate(folds):
            seed = derive_seed(config.seed, setting_index, fold_index)
            tasks.append((setting_index, fold_index, seed, setting, train_cases, test_cases))

    def execute(task) -> TaskResult:
        setting_index, fold_index, seed, setting, train_cases, test_cases = task
        logger.info(f"Training {setting.key} fold {fold_index + 1}/{len(folds)}")
        results, report = run_task(setting, train_cases, test_cases, config, seed, segmentation_dir)
        return TaskResult(setting_index, fold_index, seed, results, report)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as executor:
            outcomes = list(executor.map(execute, tasks))
    else:
        outcomes = [execute(task) for task in tasks]

    bundle = MetricsBundle(alpha=config.alpha)
    bundle.settings = [setting for _, setting in settings]
    bundle.groups = {setting.key: group for group, setting in settings}
    rows = []
    for outcome in outcomes:
        setting = settings[outcome.setting_index][1]
        for result in outcome.results:
            rows.extend(MetricRow(setting, result.case_id, c, d) for c, d in result.per_class.items())
    order = {s.key: i for i, s in enumerate(bundle.settings)}
    bundle.rows = sorted(rows, key=lambda r: (order[r.setting.key], r.case_id, r.class_id))
    bundle.comparisons = _compare(bundle, pairs, config.sided)
    bundle.provenance = _provenance(config, cases, settings, outcomes, modality_count)
    logger.info(f"Study finished in {human_readable_duration(time.monotonic() - started)}")
    return bundle


def _provenance(config, cases, settings, outcomes, modality_count) -> Dict[str, dict]:
    specs, plans = {}, {}
    dims = cases[0].dims
    for _, setting in settings:
        spec = build_spec(setting.family, setting.dim, len(setting.modalities), {"width_scale": config.width_scale})
        specs[setting.key] = spec.to_dict()
        plans[setting.key] = {
            "train": plan_grid(dims, spec.output_size, setting.overlap_train).to_dict(),
            "test": plan_grid(dims, spec.output_size, setting.overlap_test).to_dict(),
        }
    seeds = {"experiment": config.seed, "tasks": {}}
    reports = {}
    for outcome in outcomes:
        key = f"{settings[outcome.setting_index][1].key}/fold{outcome.fold_index}"
        seeds["tasks"][key] = outcome.seed
        reports[key] = outcome.report.to_dict()
    return {
        "config": config.to_dict(),
        "dataset": {"case_ids": [case.case_id for case in cases], "modality_count": modality_count},
        "specs": specs,
        "plans": plans,
        "seeds": seeds,
        "train_reports": reports,
    }
