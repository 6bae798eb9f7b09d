import unittest

import numpy as np
import pytest
import torch

from tissuebench.sampling import (
    OverlapLevel,
    PatchDataset,
    PlanError,
    SamplingPlan,
    compute_sample_weights,
    extract_training_samples,
    plan_grid,
    plan_with_stride,
    useful_origins,
)
from tissuebench.volumes import generate_phantom, stack_modalities


class TestOverlapLevel(unittest.TestCase):
    def test_strides(self):
        self.assertEqual(OverlapLevel.NULL.stride((9, 9, 9)), (9, 9, 9))
        self.assertEqual(OverlapLevel.MEDIUM.stride((9, 9, 9)), (4, 4, 4))
        self.assertEqual(OverlapLevel.HIGH.stride((9, 9, 9)), (1, 1, 1))
        self.assertEqual(OverlapLevel.HIGH.stride((32, 32, 1)), (4, 4, 1))

    def test_parse(self):
        self.assertIs(OverlapLevel.parse("Medium"), OverlapLevel.MEDIUM)
        self.assertIs(OverlapLevel.parse(OverlapLevel.HIGH), OverlapLevel.HIGH)
        with self.assertRaises(ValueError):
            OverlapLevel.parse("extreme")


class TestPlanGrid(unittest.TestCase):
    def test_large_volume_origin_counts(self):
        high = plan_grid((256, 256, 256), (32, 32, 32), "high")
        self.assertEqual(high.origin_count, 57**3)
        medium = plan_grid((256, 256, 256), (32, 32, 32), "medium")
        self.assertEqual(medium.origin_count, 3375)
        null = plan_grid((256, 256, 256), (32, 32, 32), "null")
        self.assertEqual(null.origin_count, 8**3)

    def test_counts_grow_as_stride_shrinks(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            patch = tuple(int(p) for p in rng.integers(1, 12, size=3))
            dims = tuple(int(p + d) for p, d in zip(patch, rng.integers(0, 30, size=3)))
            counts = [plan_with_stride(dims, patch, (s, s, s)).origin_count for s in range(12, 0, -1)]
            self.assertEqual(counts, sorted(counts), (dims, patch))
            by_level = [plan_grid(dims, patch, level).origin_count for level in ("null", "medium", "high")]
            self.assertEqual(by_level, sorted(by_level), (dims, patch))

    def test_high_overlap_interior_coverage(self):
        dims, patch = (51, 52, 50), (16, 16, 16)
        plan = plan_grid(dims, patch, "high")
        self.assertEqual(plan.stride, (2, 2, 2))
        coverage = np.zeros(dims, dtype=np.int32)
        for x, y, z in plan.origins:
            coverage[x : x + 16, y : y + 16, z : z + 16] += 1
        interior = coverage[15:35, 15:35, 15:35]
        self.assertTrue(np.all(interior == (16 // 2) ** 3))

    def test_final_origin_is_clamped(self):
        plan = plan_with_stride((10, 4, 4), (4, 4, 4), (4, 4, 4))
        self.assertEqual(sorted({o[0] for o in plan.origins}), [0, 4, 6])

    def test_every_voxel_is_covered(self):
        dims, patch = (23, 17, 9), (9, 9, 9)
        for level in OverlapLevel:
            plan = plan_grid(dims, patch, level)
            coverage = np.zeros(dims, dtype=np.int32)
            for x, y, z in plan.origins:
                self.assertTrue(x + 9 <= 23 and y + 9 <= 17 and z + 9 <= 9)
                coverage[x : x + 9, y : y + 9, z : z + 9] += 1
            self.assertTrue(np.all(coverage >= 1), level)

    def test_origins_follow_lexicographic_order(self):
        plan = plan_grid((12, 12, 12), (4, 4, 4), "medium")
        self.assertEqual(list(plan.origins), sorted(plan.origins))

    def test_patch_larger_than_volume_raises(self):
        with self.assertRaises(PlanError):
            plan_grid((16, 16, 16), (32, 32, 32), "high")

    def test_json_round_trip(self):
        plan = plan_grid((40, 36, 20), (9, 9, 9), "medium")
        restored = SamplingPlan.from_json(plan.to_json())
        self.assertEqual(restored, plan)


class TestTrainingSamples(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.case = generate_phantom(seed=2, dims=(64, 64, 64), noise_sigma=0.1)

    def test_null_overlap_samples_match_tissue_blocks(self):
        plan = plan_grid(self.case.dims, (16, 16, 16), "null")
        samples = list(extract_training_samples(self.case, plan, (24, 24, 24), (16, 16, 16)))
        labels = self.case.ground_truth.labels
        expected = sum(
            1
            for x in range(0, 64, 16)
            for y in range(0, 64, 16)
            for z in range(0, 64, 16)
            if labels[x : x + 16, y : y + 16, z : z + 16].any()
        )
        self.assertEqual(len(samples), expected)
        self.assertLess(len(samples), 64)

    def test_samples_hold_tissue_and_weights_mark_it(self):
        plan = plan_grid(self.case.dims, (9, 9, 9), "medium")
        for sample in extract_training_samples(self.case, plan, (25, 25, 25), (9, 9, 9)):
            self.assertEqual(sample.input_patch.shape, (1, 25, 25, 25))
            self.assertTrue(sample.target_patch.any())
            np.testing.assert_array_equal(sample.weight_patch, (sample.target_patch > 0).astype(np.float32))

    def test_input_is_centred_on_target(self):
        plan = plan_with_stride(self.case.dims, (9, 9, 9), (9, 9, 9))
        stacked = stack_modalities(self.case)
        origins = useful_origins(self.case, plan)
        interior = next(o for o in origins if all(8 <= c <= 64 - 17 for c in o))
        samples = {
            tuple(o): s
            for o, s in zip(origins, extract_training_samples(self.case, plan, (25, 25, 25), (9, 9, 9)))
        }
        x, y, z = interior
        np.testing.assert_array_equal(samples[interior].input_patch, stacked[:, x - 8 : x + 17, y - 8 : y + 17, z - 8 : z + 17])

    def test_context_beyond_the_edge_is_zero(self):
        plan = plan_with_stride(self.case.dims, (9, 9, 9), (9, 9, 9))
        labels = np.zeros(self.case.dims, dtype=np.uint8)
        labels[0:9, 0:9, 0:9] = 1
        edge_case = type(self.case)(self.case.volumes, type(self.case.ground_truth)(labels), self.case.brain_mask, "edge")
        samples = list(extract_training_samples(edge_case, plan, (25, 25, 25), (9, 9, 9)))
        self.assertEqual(len(samples), 1)
        self.assertTrue(np.all(samples[0].input_patch[:, :8] == 0))

    def test_mismatched_output_size_raises(self):
        plan = plan_grid(self.case.dims, (9, 9, 9), "null")
        with self.assertRaises(PlanError):
            list(extract_training_samples(self.case, plan, (25, 25, 25), (11, 11, 11)))

    def test_weights(self):
        target = np.array([0, 1, 2, 3, 0]).reshape(5, 1, 1)
        np.testing.assert_array_equal(compute_sample_weights(target).ravel(), [0, 1, 1, 1, 0])


def test_patch_dataset_items():
    cases = [generate_phantom(seed=s, dims=(32, 32, 32)) for s in (1, 2)]
    dataset = PatchDataset(cases, "null", (32, 32, 1), (32, 32, 1))
    expected = sum(len(useful_origins(c, plan_grid(c.dims, (32, 32, 1), "null"))) for c in cases)
    assert len(dataset) == expected
    inputs, target, weight = dataset[0]
    assert inputs.shape == (1, 32, 32, 1) and inputs.dtype == torch.float32
    assert target.shape == (32, 32, 1) and target.dtype == torch.int64
    assert torch.equal(weight, (target > 0).float())


def test_useful_origins_need_ground_truth():
    case = generate_phantom(seed=1, dims=(32, 32, 32))
    unlabeled = type(case)(case.volumes, None, case.brain_mask, "unlabeled")
    with pytest.raises(ValueError):
        useful_origins(unlabeled, plan_grid(case.dims, (16, 16, 16), "null"))
