import unittest

import nibabel as nib
import numpy as np
import pytest

from tissuebench.evaluation import dice
from tissuebench.volumes import (
    CSF,
    GM,
    WM,
    Case,
    DegenerateIntensityError,
    DimensionMismatchError,
    LabelMap,
    LabelValueError,
    ManifestEntry,
    ModalityId,
    PhantomGeometryError,
    Volume,
    apply_label_mapping,
    generate_phantom,
    load_case,
    load_cases_from_manifest,
    normalize_intensity,
    preprocess_case,
    read_label_mapping,
    save_case,
    stack_modalities,
    write_dataset_manifest,
)


def _class_fractions(case):
    labels = case.ground_truth.labels
    return {c: float((labels == c).mean()) for c in (CSF, GM, WM)}


class TestDataModel(unittest.TestCase):
    def test_volume_is_read_only_float32(self):
        volume = Volume(np.ones((4, 4, 4), dtype=np.int16))
        self.assertEqual(volume.data.dtype, np.float32)
        with self.assertRaises(ValueError):
            volume.data[0, 0, 0] = 2.0

    def test_volume_rejects_bad_spacing(self):
        with self.assertRaises(ValueError):
            Volume(np.ones((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_label_map_rejects_out_of_range_labels(self):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        labels[0, 0, 0] = 5
        with self.assertRaises(LabelValueError):
            LabelMap(labels)

    def test_case_rejects_mismatched_shapes(self):
        volume = Volume(np.ones((4, 4, 4)))
        mask = np.ones((4, 4, 5), dtype=bool)
        with self.assertRaises(DimensionMismatchError):
            Case((volume,), None, mask, "bad")

    def test_case_rejects_empty_mask(self):
        with self.assertRaises(ValueError):
            Case((Volume(np.ones((4, 4, 4))),), None, np.zeros((4, 4, 4), bool), "empty")

    def test_select_modalities_keeps_order(self):
        case = generate_phantom(seed=3, dims=(32, 32, 32), modality_count=2)
        swapped = case.select_modalities([1, 0])
        np.testing.assert_array_equal(swapped.volumes[0].data, case.volumes[1].data)
        self.assertEqual(swapped.modality_count, 2)

    def test_equality_compares_array_contents(self):
        data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
        self.assertEqual(Volume(data), Volume(data.copy()))
        self.assertNotEqual(Volume(data), Volume(data + 1))
        self.assertNotEqual(Volume(data), Volume(data, modality_id=ModalityId.T2W))
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        self.assertEqual(LabelMap(labels), LabelMap(labels.copy()))
        mask = np.ones((4, 4, 4), dtype=bool)
        case = Case((Volume(data),), LabelMap(labels), mask, "c")
        self.assertEqual(case, Case((Volume(data.copy()),), LabelMap(labels), mask.copy(), "c"))
        self.assertNotEqual(case, Case((Volume(data),), None, mask, "c"))
        self.assertNotEqual(case, Case((Volume(data),), LabelMap(labels), mask, "other"))
        self.assertNotEqual(case, "c")


class TestNormalization(unittest.TestCase):
    def test_three_values_standardize_to_known_scores(self):
        volume = Volume(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        result = normalize_intensity(volume, np.ones((3, 1, 1), dtype=bool))
        np.testing.assert_allclose(result.data.ravel(), [-1.2247449, 0.0, 1.2247449], atol=1e-6)

    def test_outside_mask_is_zero(self):
        volume = Volume(np.array([1.0, 2.0, 3.0, 50.0]).reshape(4, 1, 1))
        mask = np.array([True, True, True, False]).reshape(4, 1, 1)
        result = normalize_intensity(volume, mask)
        self.assertEqual(result.data[3, 0, 0], 0.0)
        np.testing.assert_allclose(result.data[:3].ravel(), [-1.2247449, 0.0, 1.2247449], atol=1e-6)

    def test_constant_intensity_raises(self):
        volume = Volume(np.full((4, 4, 4), 0.1))
        with self.assertRaises(DegenerateIntensityError):
            normalize_intensity(volume, np.ones((4, 4, 4), dtype=bool))

    def test_moments_and_idempotence(self):
        rng = np.random.default_rng(0)
        volume = Volume(rng.normal(100.0, 20.0, size=(12, 12, 12)))
        mask = rng.random((12, 12, 12)) < 0.6
        once = normalize_intensity(volume, mask)
        values = once.data[mask].astype(np.float64)
        self.assertLess(abs(values.mean()), 1e-5)
        self.assertLess(abs(values.std() - 1.0), 1e-4)
        twice = normalize_intensity(once, mask)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)

    def test_mask_shape_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            normalize_intensity(Volume(np.arange(8.0).reshape(2, 2, 2)), np.ones((2, 2, 3), bool))

    def test_stack_modalities_order_and_empty(self):
        case = generate_phantom(seed=1, dims=(32, 32, 32), modality_count=2)
        stacked = stack_modalities(case)
        self.assertEqual(stacked.shape, (2, 32, 32, 32))
        np.testing.assert_array_equal(stacked[1], case.volumes[1].data)
        with self.assertRaises(ValueError):
            stack_modalities(case.select_modalities([]))

    def test_preprocess_case_normalizes_every_modality(self):
        case = preprocess_case(generate_phantom(seed=2, dims=(32, 32, 32), noise_sigma=0.2, modality_count=2))
        for volume in case.volumes:
            self.assertLess(abs(float(volume.data[case.brain_mask].mean())), 1e-4)
            self.assertTrue(np.all(volume.data[~case.brain_mask] == 0))


class TestPhantom(unittest.TestCase):
    def test_same_seed_is_bit_identical(self):
        a = generate_phantom(seed=7, dims=(40, 40, 40), noise_sigma=0.3)
        b = generate_phantom(seed=7, dims=(40, 40, 40), noise_sigma=0.3)
        np.testing.assert_array_equal(a.volumes[0].data, b.volumes[0].data)
        np.testing.assert_array_equal(a.ground_truth.labels, b.ground_truth.labels)
        np.testing.assert_array_equal(a.brain_mask, b.brain_mask)
        self.assertEqual(a, b)
        self.assertEqual(generate_phantom(seed=7, modality_count=2), generate_phantom(seed=7, modality_count=2))
        self.assertNotEqual(a, generate_phantom(seed=8, dims=(40, 40, 40), noise_sigma=0.3))

    def test_different_seeds_keep_class_fractions(self):
        first = _class_fractions(generate_phantom(seed=1))
        second = _class_fractions(generate_phantom(seed=2))
        for class_id in (CSF, GM, WM):
            self.assertLess(abs(first[class_id] - second[class_id]) / first[class_id], 0.05)

    def test_noiseless_classes_are_point_masses(self):
        case = generate_phantom(seed=7, dims=(64, 64, 64), noise_sigma=0.0)
        data, labels = case.volumes[0].data, case.ground_truth.labels
        levels = []
        for class_id in (CSF, GM, WM):
            values = np.unique(data[labels == class_id])
            self.assertEqual(values.size, 1)
            levels.append(values[0])
        self.assertEqual(len(set(levels)), 3)

    def test_noisy_class_means_are_separated(self):
        sigma = 1.0
        for seed in range(4):
            case = generate_phantom(seed=seed, dims=(64, 64, 64), noise_sigma=sigma)
            data, labels = case.volumes[0].data, case.ground_truth.labels
            means = [float(data[labels == c].mean()) for c in (CSF, GM, WM)]
            self.assertGreaterEqual(means[1] - means[0], 3 * sigma, seed)
            self.assertGreaterEqual(means[2] - means[1], 3 * sigma, seed)

    def test_two_modalities_need_both_channels(self):
        case = generate_phantom(seed=5, dims=(40, 40, 40), modality_count=2)
        labels = case.ground_truth.labels
        for volume in case.volumes:
            gm_levels = set(np.unique(volume.data[labels == GM]).tolist())
            wm_levels = set(np.unique(volume.data[labels == WM]).tolist())
            self.assertEqual(gm_levels, wm_levels)
            self.assertEqual(len(gm_levels), 2)
        pairs_gm = {tuple(p) for p in np.stack([v.data[labels == GM] for v in case.volumes], axis=1).tolist()}
        pairs_wm = {tuple(p) for p in np.stack([v.data[labels == WM] for v in case.volumes], axis=1).tolist()}
        self.assertFalse(pairs_gm & pairs_wm)

    def test_wm_boundary_is_not_a_sphere(self):
        for seed in range(3):
            labels = generate_phantom(seed=seed, dims=(64, 64, 64)).ground_truth.labels
            inner = np.argwhere(labels >= GM)
            distance = np.linalg.norm(np.indices(labels.shape).reshape(3, -1).T - inner.mean(axis=0), axis=1)
            distance = distance.reshape(labels.shape)
            truth = np.where(labels == WM, WM, 0)
            best = max(
                dice(truth, np.where((distance < radius) & (labels >= GM), WM, 0), WM)
                for radius in np.linspace(6.0, 16.0, 41)
            )
            self.assertLess(best, 0.9, seed)

    def test_tissue_lies_inside_the_mask_and_skull_outside(self):
        case = generate_phantom(seed=0, dims=(48, 48, 48))
        labels, mask = case.ground_truth.labels, case.brain_mask
        self.assertFalse(np.any(labels[~mask]))
        self.assertTrue(np.all(labels[mask] > 0))
        self.assertGreater(float(case.volumes[0].data[~mask].max()), 0.0)

    def test_small_dims_raise(self):
        with self.assertRaises(PhantomGeometryError):
            generate_phantom(seed=0, dims=(16, 64, 64))

    def test_unsupported_modality_count_raises(self):
        with self.assertRaises(ValueError):
            generate_phantom(seed=0, dims=(32, 32, 32), modality_count=3)


def test_save_and_load_round_trip(tmp_path):
    case = generate_phantom(seed=11, dims=(32, 32, 32), noise_sigma=0.1, modality_count=2)
    paths = save_case(case, tmp_path)
    loaded = load_case(paths["modalities"], paths["ground_truth"], paths["mask"], case_id=case.case_id)
    assert loaded.case_id == case.case_id
    assert loaded.modality_count == 2
    for original, restored in zip(case.volumes, loaded.volumes):
        np.testing.assert_array_equal(original.data, restored.data)
        assert restored.modality_id == ModalityId.SYNTHETIC
        assert restored.spacing == pytest.approx(original.spacing)
    np.testing.assert_array_equal(loaded.ground_truth.labels, case.ground_truth.labels)
    np.testing.assert_array_equal(loaded.brain_mask, case.brain_mask)
    assert loaded == case


def test_load_rejects_mismatched_mask(tmp_path):
    case = generate_phantom(seed=11, dims=(32, 32, 32))
    paths = save_case(case, tmp_path)
    wrong = tmp_path / "wrong_mask.nii.gz"
    nib.save(nib.Nifti1Image(np.ones((32, 32, 30), dtype=np.uint8), np.eye(4)), str(wrong))
    with pytest.raises(DimensionMismatchError) as excinfo:
        load_case(paths["modalities"], paths["ground_truth"], wrong)
    assert excinfo.value.path == wrong


def test_load_rejects_modalities_of_different_shapes(tmp_path):
    t1 = tmp_path / "t1.nii.gz"
    t2 = tmp_path / "t2.nii.gz"
    mask = tmp_path / "mask.nii.gz"
    nib.save(nib.Nifti1Image(np.ones((64, 64, 64), dtype=np.float32), np.eye(4)), str(t1))
    nib.save(nib.Nifti1Image(np.ones((32, 32, 32), dtype=np.float32), np.eye(4)), str(t2))
    nib.save(nib.Nifti1Image(np.ones((64, 64, 64), dtype=np.uint8), np.eye(4)), str(mask))
    with pytest.raises(DimensionMismatchError) as excinfo:
        load_case([t1, t2], None, mask)
    assert excinfo.value.path == t2
    assert "(32, 32, 32)" in str(excinfo.value)


def test_load_rejects_foreign_labels(tmp_path):
    case = generate_phantom(seed=11, dims=(32, 32, 32))
    paths = save_case(case, tmp_path)
    labels = np.array(case.ground_truth.labels)
    labels[0, 0, 0] = 9
    bad = tmp_path / "bad_gt.nii.gz"
    nib.save(nib.Nifti1Image(labels, np.eye(4)), str(bad))
    with pytest.raises(LabelValueError):
        load_case(paths["modalities"], bad, paths["mask"])


def test_missing_file_raises(tmp_path):
    with pytest.raises(OSError):
        load_case([tmp_path / "absent.nii.gz"], None, tmp_path / "mask.nii.gz")


def test_label_mapping(tmp_path):
    table = tmp_path / "mapping.txt"
    table.write_text("# source target\n0 0\n10 1\n20 2\n30 3\n")
    mapping = read_label_mapping(table)
    mapped = apply_label_mapping(np.array([0, 10, 20, 30, 20]).reshape(5, 1, 1), mapping)
    np.testing.assert_array_equal(mapped.ravel(), [0, 1, 2, 3, 2])
    with pytest.raises(LabelValueError):
        apply_label_mapping(np.array([0, 40]).reshape(2, 1, 1), mapping)


def test_manifest_round_trip(tmp_path):
    entries = []
    for seed in (1, 2, 3):
        case = generate_phantom(seed=seed, dims=(32, 32, 32))
        paths = save_case(case, tmp_path / "data")
        entries.append(ManifestEntry(case.case_id, tuple(paths["modalities"]), paths["mask"], paths["ground_truth"]))
    manifest = write_dataset_manifest(tmp_path / "cases.ini", entries)
    assert "data/" in manifest.read_text()
    cases = load_cases_from_manifest(manifest, require_ground_truth=True)
    assert [c.case_id for c in cases] == ["phantom_1", "phantom_2", "phantom_3"]
    assert all(c.ground_truth is not None for c in cases)
