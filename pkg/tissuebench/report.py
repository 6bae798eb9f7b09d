"""Result files of a study: metric tables, summaries, box plots and provenance."""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from tissuebench.evaluation import DSCResult, summarize
from tissuebench.experiment import MetricsBundle
from tissuebench.utils import write_json
from tissuebench.volumes import CLASS_NAMES, CSF, GM, WM, LabelMap

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["setting", "family", "dim", "overlap_train", "overlap_test", "modalities", "case_id", "class", "dsc"]
SUMMARY_COLUMNS = ["setting", "class", "n", "mean", "std", "median", "significantly_higher"]
PREVIEW_COLORS = {CSF: (255, 0, 0), GM: (0, 0, 255), WM: (0, 255, 0)}


def summarize_bundle(bundle: MetricsBundle) -> List[dict]:
    """Per setting and class: mean, population std and median DSC.

    ``significantly_higher`` lists the settings this one beat at p < alpha and
    ``marker`` is "*" when that list is not empty.
    """
    winners: Dict[tuple, List[str]] = {}
    for comparison in bundle.comparisons:
        if comparison.higher is None:
            continue
        loser = comparison.setting_b if comparison.higher == comparison.setting_a else comparison.setting_a
        winners.setdefault((comparison.higher, comparison.class_id), []).append(loser)

    summary = []
    for setting in bundle.settings:
        for class_id, name in CLASS_NAMES.items():
            values = np.array(list(bundle.values(setting.key, class_id).values()), dtype=np.float64)
            if values.size == 0:
                continue
            beaten = sorted(winners.get((setting.key, class_id), []))
            summary.append(
                {
                    "setting": setting.key,
                    "class": name,
                    "n": int(values.size),
                    "mean": float(values.mean()),
                    "std": float(values.std()),
                    "median": float(np.median(values)),
                    "significantly_higher": beaten,
                    "marker": "*" if beaten else "",
                }
            )
    return summary


def write_metrics_csv(bundle: MetricsBundle, path: Path) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in bundle.rows:
            columns = row.setting.to_dict()
            writer.writerow(
                [
                    row.setting.key,
                    columns["family"],
                    columns["dim"],
                    columns["overlap_train"],
                    columns["overlap_test"],
                    columns["modalities"],
                    row.case_id,
                    CLASS_NAMES[row.class_id],
                    repr(float(row.dsc)),
                ]
            )
    return path


def write_summary_csv(summary: Sequence[dict], path: Path) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for entry in summary:
            writer.writerow(
                [
                    entry["setting"],
                    entry["class"],
                    entry["n"],
                    f"{entry['mean']:.6f}{entry['marker']}",
                    f"{entry['std']:.6f}",
                    f"{entry['median']:.6f}",
                    ";".join(entry["significantly_higher"]),
                ]
            )
    return path


def plot_class_distributions(bundle: MetricsBundle, class_id: int, path: Path) -> Path:
    """Box plot of per-case DSC for one class, one box per setting."""
    labels = [s.key for s in bundle.settings]
    data = [list(bundle.values(key, class_id).values()) for key in labels]
    figure, axis = plt.subplots(figsize=(max(6.0, 1.2 * len(labels)), 4.5))
    try:
        axis.boxplot(data, showmeans=True)
        axis.set_xticks(range(1, len(labels) + 1))
        axis.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        axis.set_ylabel("DSC")
        axis.set_title(f"{CLASS_NAMES[class_id]} DSC per setting")
        axis.set_ylim(0.0, 1.0)
        figure.tight_layout()
        figure.savefig(path, dpi=100)
    finally:
        plt.close(figure)
    return path


def emit_report(bundle: MetricsBundle, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """Writes metrics.csv, summary.csv, summary.json, plots/ and provenance/.

    Raises:
        ValueError: The bundle holds no results; nothing is written.
        OSError: The output folder cannot be created or written.
    """
    if not bundle.rows:
        raise ValueError("The metrics bundle is empty; no report written")
    output_dir = Path(output_dir)
    (output_dir / "plots").mkdir(parents=True, exist_ok=True)
    (output_dir / "provenance").mkdir(parents=True, exist_ok=True)

    summary = summarize_bundle(bundle)
    written = {
        "metrics": write_metrics_csv(bundle, output_dir / "metrics.csv"),
        "summary_csv": write_summary_csv(summary, output_dir / "summary.csv"),
        "summary_json": write_json(
            output_dir / "summary.json",
            {
                "alpha": bundle.alpha,
                "settings": summary,
                "comparisons": [c.to_dict() for c in bundle.comparisons],
            },
        ),
    }
    for class_id, name in CLASS_NAMES.items():
        written[f"plot_{name}"] = plot_class_distributions(bundle, class_id, output_dir / "plots" / f"dsc_{name}.png")
    for name, payload in bundle.provenance.items():
        written[f"provenance_{name}"] = write_json(output_dir / "provenance" / f"{name}.json", payload)
    logger.info(f"Report written to {output_dir}")
    return written


def write_case_metrics(results: Sequence[DSCResult], output_dir: Union[str, Path]) -> Dict[str, Path]:
    """Writes metrics.csv (case_id, class, dsc) and summary.json for a plain evaluation."""
    if not results:
        raise ValueError("No case results to write")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = output_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["case_id", "class", "dsc"])
        for result in results:
            for class_id, value in result.per_class.items():
                writer.writerow([result.case_id, CLASS_NAMES[class_id], repr(float(value))])
    summary = {
        CLASS_NAMES[class_id]: {"n": len(results), "mean": mean, "std": std}
        for class_id, (mean, std) in summarize(results).items()
    }
    return {"metrics": metrics_path, "summary_json": write_json(output_dir / "summary.json", summary)}


def save_label_preview(segmentation: LabelMap, path: Union[str, Path], slice_index: Optional[int] = None) -> Path:
    """Saves an axial slice as PNG: CSF red, GM blue, WM green, background black."""
    labels = segmentation.labels
    if slice_index is None:
        slice_index = labels.shape[2] // 2
    if not 0 <= slice_index < labels.shape[2]:
        raise ValueError(f"Slice {slice_index} outside 0..{labels.shape[2] - 1}")
    axial = labels[:, :, slice_index]
    rgb = np.zeros(axial.shape + (3,), dtype=np.uint8)
    for class_id, color in PREVIEW_COLORS.items():
        rgb[axial == class_id] = color
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(np.rot90(rgb))).save(path)
    return path
