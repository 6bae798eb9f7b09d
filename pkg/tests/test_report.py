import csv
import json

import numpy as np
import pytest
from PIL import Image

from tissuebench.evaluation import DSCResult, wilcoxon_signed_rank
from tissuebench.experiment import Comparison, MetricRow, MetricsBundle, Setting
from tissuebench.report import emit_report, save_label_preview, summarize_bundle, write_case_metrics
from tissuebench.sampling import OverlapLevel
from tissuebench.volumes import LabelMap


def _bundle():
    low = Setting("DM", "3D", OverlapLevel.NULL, OverlapLevel.HIGH, (0,))
    high = Setting("DM", "3D", OverlapLevel.HIGH, OverlapLevel.HIGH, (0,))
    rows = []
    for index in range(6):
        for class_id in (1, 2, 3):
            rows.append(MetricRow(low, f"case{index}", class_id, 0.6 + 0.01 * index))
            rows.append(MetricRow(high, f"case{index}", class_id, 0.8 + 0.01 * index))
    bundle = MetricsBundle(settings=[low, high], groups={low.key: "DM_3D", high.key: "DM_3D"}, rows=rows, alpha=0.05)
    for class_id in (1, 2, 3):
        result = wilcoxon_signed_rank(
            list(bundle.values(low.key, class_id).values()), list(bundle.values(high.key, class_id).values())
        )
        bundle.comparisons.append(Comparison("DM_3D", low.key, high.key, class_id, 0.625, 0.825, result, high.key))
    bundle.provenance = {"config": {"experiment": {"seed": 0}}, "seeds": {"experiment": 0, "tasks": {}}}
    return bundle, low, high


def test_summary_marks_the_higher_setting():
    bundle, low, high = _bundle()
    summary = summarize_bundle(bundle)
    assert len(summary) == 6
    entry = next(e for e in summary if e["setting"] == high.key and e["class"] == "GM")
    assert entry["mean"] == pytest.approx(0.825)
    assert entry["significantly_higher"] == [low.key]
    assert not next(e for e in summary if e["setting"] == low.key)["significantly_higher"]


def test_emit_report_writes_every_file(tmp_path):
    bundle, low, high = _bundle()
    written = emit_report(bundle, tmp_path)
    for name in ("metrics.csv", "summary.csv", "summary.json", "plots/dsc_CSF.png", "plots/dsc_WM.png", "provenance/seeds.json"):
        assert (tmp_path / name).exists(), name
    assert written["metrics"] == tmp_path / "metrics.csv"

    with open(tmp_path / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 36
    assert rows[0]["overlap_train"] == "null"
    assert rows[0]["dsc"] == "0.6"

    with open(tmp_path / "summary.csv", newline="") as f:
        summary_rows = list(csv.DictReader(f))
    starred = [row for row in summary_rows if row["mean"].endswith("*")]
    assert {row["setting"] for row in starred} == {high.key}

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["alpha"] == 0.05
    assert len(summary["comparisons"]) == 3
    assert summary["comparisons"][0]["significantly_higher"] == high.key
    markers = {(e["setting"], e["class"]): e["marker"] for e in summary["settings"]}
    assert markers[(high.key, "WM")] == "*"
    assert markers[(low.key, "WM")] == ""


def test_empty_bundle_writes_nothing(tmp_path):
    with pytest.raises(ValueError):
        emit_report(MetricsBundle(), tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_case_metrics(tmp_path):
    results = [DSCResult("a", {1: 0.5, 2: 0.7, 3: 0.9}), DSCResult("b", {1: 0.7, 2: 0.7, 3: 0.7})]
    write_case_metrics(results, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["CSF"]["mean"] == pytest.approx(0.6)
    assert summary["GM"]["std"] == pytest.approx(0.0)
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 7


def test_label_preview_colors(tmp_path):
    labels = np.zeros((4, 4, 3), dtype=np.uint8)
    labels[0, 0, 1] = 1
    labels[1, 1, 1] = 2
    labels[2, 2, 1] = 3
    path = save_label_preview(LabelMap(labels), tmp_path / "preview.png")
    pixels = np.asarray(Image.open(path))
    assert pixels.shape == (4, 4, 3)
    colors = {tuple(int(v) for v in pixel) for pixel in pixels.reshape(-1, 3)}
    assert colors == {(0, 0, 0), (255, 0, 0), (0, 0, 255), (0, 255, 0)}
    with pytest.raises(ValueError):
        save_label_preview(LabelMap(labels), tmp_path / "bad.png", slice_index=3)


def test_summary_is_recomputable_from_metrics_csv(tmp_path):
    rng = np.random.default_rng(4)
    first = Setting("KK", "2D", OverlapLevel.HIGH, OverlapLevel.NULL, (0,))
    second = Setting("KK", "2D", OverlapLevel.HIGH, OverlapLevel.HIGH, (0,))
    rows = [
        MetricRow(setting, f"case{index}", class_id, float(rng.random()))
        for setting in (first, second)
        for index in range(5)
        for class_id in (1, 2, 3)
    ]
    bundle = MetricsBundle(settings=[first, second], groups={first.key: "KK_2D", second.key: "KK_2D"}, rows=rows)
    emit_report(bundle, tmp_path)

    with open(tmp_path / "metrics.csv", newline="") as f:
        per_setting = {}
        for row in csv.DictReader(f):
            per_setting.setdefault((row["setting"], row["class"]), []).append(float(row["dsc"]))
    summary = json.loads((tmp_path / "summary.json").read_text())
    for entry in summary["settings"]:
        values = np.array(per_setting[(entry["setting"], entry["class"])])
        assert entry["mean"] == pytest.approx(values.mean(), abs=1e-12)
        assert entry["std"] == pytest.approx(values.std(), abs=1e-12)
        assert entry["median"] == pytest.approx(np.median(values), abs=1e-12)
        assert entry["marker"] == ""


def test_case_metrics_keep_full_precision(tmp_path):
    results = [DSCResult("a", {1: 1 / 3, 2: 2 / 7, 3: 0.9}), DSCResult("b", {1: 0.7, 2: 0.7, 3: 0.7})]
    write_case_metrics(results, tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as f:
        first = next(csv.DictReader(f))
    assert float(first["dsc"]) == 1 / 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["CSF"]["mean"] == pytest.approx((1 / 3 + 0.7) / 2, abs=1e-15)
    assert summary["GM"]["n"] == 2
