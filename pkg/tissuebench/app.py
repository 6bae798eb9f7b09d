import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from tissuebench.architectures import DIMENSIONALITIES, FAMILIES, SpecError, build_spec
from tissuebench.config import ConfigError, load_experiment_config, write_default_config
from tissuebench.evaluation import SIDES, evaluate_case, wilcoxon_signed_rank
from tissuebench.experiment import run_experiment
from tissuebench.inference import save_segmentation, save_vote_fractions, segment_case
from tissuebench.networks import instantiate
from tissuebench.report import emit_report, save_label_preview, write_case_metrics
from tissuebench.sampling import OverlapLevel, PatchDataset, PlanError
from tissuebench.trainer import TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, split_dataset, train_model
from tissuebench.utils import default_output_root, write_json
from tissuebench.volumes import (
    CLASS_NAMES,
    ManifestEntry,
    generate_phantom,
    load_cases_from_manifest,
    load_label_volume,
    preprocess_case,
    save_case,
    write_dataset_manifest,
)

logger = logging.getLogger("tissuebench")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
OVERLAP_CHOICES = [level.label for level in OverlapLevel]


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(description="TissueBench: patch-based FCNN brain tissue segmentation benchmark")
    parser.add_argument("--verbose", action="store_true", help="Log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", help="Generate synthetic phantom cases and a dataset manifest")
    phantom.add_argument("--output", type=Path, required=True, help="Folder for the NIfTI files and cases.ini")
    phantom.add_argument("--count", type=int, default=4, help="Number of cases (default: 4)")
    phantom.add_argument("--seed", type=int, default=0, help="Seed of the first case; case i uses seed + i")
    phantom.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("X", "Y", "Z"))
    phantom.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian noise standard deviation")
    phantom.add_argument("--modalities", type=int, default=1, choices=[1, 2], help="Number of modalities")

    train = commands.add_parser("train", help="Train one architecture on the cases of a manifest")
    train.add_argument("--cases", type=Path, required=True, help="Dataset manifest (INI)")
    train.add_argument("--family", choices=FAMILIES, required=True)
    train.add_argument("--dim", choices=DIMENSIONALITIES, default="3D")
    train.add_argument("--overlap", choices=OVERLAP_CHOICES, default="high", help="Training overlap level")
    train.add_argument("--output", type=Path, default=None, help="Output folder (default: app data runs folder)")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--max-epochs", type=int, default=20)
    train.add_argument("--patience", type=int, default=2)
    train.add_argument("--val-fraction", type=float, default=0.2)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--learning-rate", type=float, default=1e-3)
    train.add_argument("--samples-per-epoch", type=int, default=None)
    train.add_argument("--width-scale", type=float, default=1.0)
    train.add_argument("--device", default="cpu")

    segment = commands.add_parser("segment", help="Segment the cases of a manifest with a trained checkpoint")
    segment.add_argument("--checkpoint", type=Path, required=True)
    segment.add_argument("--cases", type=Path, required=True, help="Dataset manifest (INI)")
    segment.add_argument("--overlap", choices=OVERLAP_CHOICES, default="high", help="Test overlap level")
    segment.add_argument("--output", type=Path, required=True)
    segment.add_argument("--batch-size", type=int, default=64)
    segment.add_argument("--vote-fractions", action="store_true", help="Also write per-class vote shares")

    evaluate = commands.add_parser("evaluate", help="Score segmentations against ground truth")
    evaluate.add_argument("--cases", type=Path, required=True, help="Dataset manifest with ground truth")
    evaluate.add_argument("--segmentations", type=Path, required=True, help="Folder of <case_id>_seg.nii.gz files")
    evaluate.add_argument("--baseline", type=Path, default=None, help="Second folder to compare against")
    evaluate.add_argument("--output", type=Path, required=True)
    evaluate.add_argument("--sided", choices=SIDES, default="two-sided")

    experiment = commands.add_parser("experiment", help="Run a benchmark study from an INI config")
    experiment.add_argument("--config", type=Path, default=None, help="Experiment INI file")
    experiment.add_argument("--seed", type=int, default=None, help="Override [experiment] seed")
    experiment.add_argument("--output", type=Path, default=None, help="Override [experiment] output_dir")
    experiment.add_argument("--jobs", type=int, default=None, help="Override [experiment] jobs")
    experiment.add_argument("--create-config", type=Path, default=None, help="Write a default config and exit")

    return parser.parse_args(argv)


def setup_logging(output_dir: Optional[Path], verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(output_dir / "run.log", encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def run_phantom(args: argparse.Namespace) -> int:
    entries = []
    for index in range(args.count):
        case = generate_phantom(
            seed=args.seed + index,
            dims=args.dims,
            noise_sigma=args.noise_sigma,
            modality_count=args.modalities,
            case_id=f"phantom_{args.seed + index:03d}",
        )
        paths = save_case(case, args.output)
        entries.append(ManifestEntry(case.case_id, tuple(paths["modalities"]), paths["mask"], paths["ground_truth"]))
    manifest = write_dataset_manifest(args.output / "cases.ini", entries)
    logger.info(f"Wrote {len(entries)} phantom cases and manifest {manifest}")
    return 0


def run_train(args: argparse.Namespace) -> int:
    config = TrainConfig(
        max_epochs=args.max_epochs,
        patience=args.patience,
        val_fraction=args.val_fraction,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        samples_per_epoch=args.samples_per_epoch,
        device=args.device,
    )
    cases = [preprocess_case(c) for c in load_cases_from_manifest(args.cases, require_ground_truth=True)]
    train_cases, val_cases = split_dataset(cases, config.val_fraction, config.seed)
    spec = build_spec(args.family, args.dim, cases[0].modality_count, {"width_scale": args.width_scale})
    model = instantiate(spec, args.seed)
    train_set = PatchDataset(train_cases, args.overlap, spec.input_size, spec.output_size)
    val_set = PatchDataset(val_cases, args.overlap, spec.input_size, spec.output_size)
    report = train_model(model, train_set, val_set, config)
    save_checkpoint(args.output / "model.h5", model, report)
    write_json(args.output / "train_report.json", report.to_dict())
    write_json(args.output / "architecture.json", spec.to_dict())
    write_json(args.output / "split.json", {"train": [c.case_id for c in train_cases], "val": [c.case_id for c in val_cases]})
    return 0


def run_segment(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    args.output.mkdir(parents=True, exist_ok=True)
    for case in load_cases_from_manifest(args.cases):
        case = preprocess_case(case)
        segmentation, grid = segment_case(model, case, args.overlap, args.batch_size, return_votes=True)
        save_segmentation(segmentation, case, args.output / f"{case.case_id}_seg.nii.gz")
        save_label_preview(segmentation, args.output / f"{case.case_id}_seg.png")
        if args.vote_fractions:
            save_vote_fractions(grid, case, args.output / f"{case.case_id}_votes.nii.gz")
        logger.info(f"Segmented {case.case_id}")
    return 0


def _score_folder(cases, folder: Path):
    return [
        evaluate_case(case.ground_truth, load_label_volume(folder / f"{case.case_id}_seg.nii.gz"), case.case_id)
        for case in cases
    ]


def run_evaluate(args: argparse.Namespace) -> int:
    cases = load_cases_from_manifest(args.cases, require_ground_truth=True)
    results = _score_folder(cases, args.segmentations)
    write_case_metrics(results, args.output)
    if args.baseline is not None:
        baseline = _score_folder(cases, args.baseline)
        comparisons = {}
        for class_id, name in CLASS_NAMES.items():
            result = wilcoxon_signed_rank(
                [r.per_class[class_id] for r in results], [r.per_class[class_id] for r in baseline], sided=args.sided
            )
            comparisons[name] = result.to_dict()
        write_json(args.output / "comparison.json", comparisons)
    return 0


def _experiment_config(args: argparse.Namespace):
    config = load_experiment_config(args.config, seed=args.seed, output_dir=args.output, jobs=args.jobs)
    if config.output_dir is None:
        config = replace(config, output_dir=default_output_root() / "experiment")
    return config


def run_experiment_command(args: argparse.Namespace) -> int:
    if args.create_config is not None:
        write_default_config(args.create_config)
        logger.info(f"Wrote default config to {args.create_config}")
        return 0
    config = _experiment_config(args)
    bundle = run_experiment(config)
    emit_report(bundle, config.output_dir)
    return 0


COMMANDS = {
    "phantom": run_phantom,
    "train": run_train,
    "segment": run_segment,
    "evaluate": run_evaluate,
    "experiment": run_experiment_command,
}


def _log_folder(args: argparse.Namespace) -> Optional[Path]:
    if args.command == "experiment":
        if args.create_config is not None:
            return None
        try:
            return _experiment_config(args).output_dir
        except ConfigError:
            return None
    if args.command == "train" and args.output is None:
        args.output = default_output_root() / f"train_{args.family}_{args.dim}"
    return args.output


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_arguments(argv)
    setup_logging(_log_folder(args), args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SpecError, PlanError, TrainingDivergedError, ValueError, OSError) as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
