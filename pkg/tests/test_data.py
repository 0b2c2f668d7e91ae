"""Tests for the synthetic scene generator, its persistence and the AP evaluator."""

import numpy as np
import pytest
import torch

from depthdial.data import (
    CLASS_NAMES,
    TIER_SIDES,
    DatasetSpec,
    SceneDataset,
    SizeTier,
    collate_scenes,
    evaluate_map,
    generate_dataset,
    load_dataset,
    save_dataset,
    size_tier_of,
    tier_counts,
)


class TestDatasetSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [{"class_mix": (1.0, 0.0)}, {"class_mix": (1.0, -1.0, 1.0)}, {"clutter": 1.5}, {"hw": (8, 8)}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            DatasetSpec(**kwargs)

    @pytest.mark.parametrize("clutter, most", [(0.0, 1), (0.5, 5), (1.0, 8)])
    def test_object_budget(self, clutter, most):
        assert DatasetSpec(clutter=clutter).max_objects == most


class TestGenerateDataset:
    def test_deterministic(self, small_spec):
        a = generate_dataset(3, 4, small_spec)
        b = generate_dataset(3, 4, small_spec)
        for x, y in zip(a, b):
            assert np.array_equal(x.image, y.image)
            assert x.objects == y.objects

    def test_prefix_is_reproducible(self, small_spec, scenes):
        prefix = generate_dataset(7, 3, small_spec)
        assert all(np.array_equal(p.image, s.image) for p, s in zip(prefix, scenes))

    def test_seeds_differ(self, small_spec):
        a, b = generate_dataset(1, 1, small_spec)[0], generate_dataset(2, 1, small_spec)[0]
        assert not np.array_equal(a.image, b.image)

    def test_images_and_boxes(self, scenes, small_spec):
        for scene in scenes:
            assert scene.image.shape == (64, 64, 3)
            assert scene.image.dtype == np.float32
            assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0
            assert 1 <= len(scene.objects) <= small_spec.max_objects
            xyxy = scene.ground_truth()["boxes"]
            assert xyxy.min() >= -1e-9 and xyxy.max() <= 1 + 1e-9

    def test_tiers_match_sizes(self, scenes):
        for scene in scenes:
            for obj in scene.objects:
                lo, hi = TIER_SIDES[obj.tier]
                assert lo - 1e-9 <= obj.box[2] <= hi + 1e-9

    def test_single_class_mix(self):
        spec = DatasetSpec(hw=(32, 32), class_mix=(0.0, 1.0, 0.0), supersample=1)
        scenes = generate_dataset(0, 5, spec)
        assert {o.name for s in scenes for o in s.objects} == {"square"}

    def test_tier_counts(self, scenes):
        counts = tier_counts(scenes)
        assert set(counts) == {"small", "medium", "large"}
        assert sum(counts.values()) == sum(len(s.objects) for s in scenes)

    def test_needs_images(self):
        with pytest.raises(ValueError):
            generate_dataset(0, 0)


class TestSizeTier:
    @pytest.mark.parametrize("area, tier", [(0.01, SizeTier.SMALL), (0.05, SizeTier.MEDIUM), (0.3, SizeTier.LARGE)])
    def test_thresholds(self, area, tier):
        assert size_tier_of(area) is tier


class TestPersistence:
    def test_save_and_load(self, scenes, tmp_path):
        save_dataset(scenes, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == len(scenes)
        for original, restored in zip(scenes, loaded):
            assert np.array_equal(original.image, restored.image)
            assert np.allclose(original.boxes, restored.boxes, atol=1e-9)
            assert [o.label for o in original.objects] == [o.label for o in restored.objects]
            assert [o.tier for o in original.objects] == [o.tier for o in restored.objects]

    def test_annotation_categories(self, scenes, tmp_path):
        import json

        payload = json.loads(save_dataset(scenes, tmp_path).read_text())
        assert [c["name"] for c in payload["categories"]] == list(CLASS_NAMES)
        assert min(a["category_id"] for a in payload["annotations"]) >= 1

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nowhere")


class TestSceneDataset:
    def test_item_and_collate(self, scenes):
        dataset = SceneDataset(scenes)
        image, target = dataset[0]
        assert image.shape == (3, 64, 64)
        assert target["boxes"].dtype == torch.float32
        images, targets = collate_scenes([dataset[0], dataset[1]])
        assert images.shape == (2, 3, 64, 64)
        assert len(targets) == 2


def gt(boxes, labels):
    return {"boxes": np.asarray(boxes, dtype=float), "labels": np.asarray(labels)}


def det(boxes, labels, scores):
    return {"boxes": np.asarray(boxes, dtype=float), "labels": np.asarray(labels), "scores": np.asarray(scores)}


class TestEvaluateMap:
    def test_perfect_predictions(self, scenes):
        truth = [s.ground_truth() for s in scenes]
        preds = [{**t, "scores": np.ones(len(t["labels"]))} for t in truth]
        report = evaluate_map(preds, truth)
        assert report.ap == pytest.approx(1.0)
        assert report.ap50 == pytest.approx(1.0)
        assert report.ar100 == pytest.approx(1.0)

    def test_no_predictions(self, scenes):
        truth = [s.ground_truth() for s in scenes]
        preds = [det(np.zeros((0, 4)), [], []) for _ in truth]
        assert all(v == 0.0 for v in evaluate_map(preds, truth).to_dict().values())

    def test_nothing_at_all(self):
        report = evaluate_map([det(np.zeros((0, 4)), [], [])], [gt(np.zeros((0, 4)), [])])
        assert report.ap == 0.0

    def test_false_positive_ranked_first(self):
        truth = [gt([[0.0, 0.0, 0.5, 0.5]], [0])]
        preds = [det([[0.6, 0.6, 0.9, 0.9], [0.0, 0.0, 0.5, 0.5]], [0, 0], [0.95, 0.9])]
        report = evaluate_map(preds, truth)
        assert report.ap50 == pytest.approx(0.5)
        assert report.ar100 == pytest.approx(1.0)

    def test_partial_overlap(self):
        # IoU 0.64 counts at the three lowest thresholds
        truth = [gt([[0.0, 0.0, 1.0, 0.5]], [1])]
        preds = [det([[0.0, 0.0, 1.0, 0.32]], [1], [0.8])]
        report = evaluate_map(preds, truth)
        assert report.ap50 == pytest.approx(1.0)
        assert report.ap75 == 0.0
        assert report.ap == pytest.approx(0.3)
        assert report.ap_large == pytest.approx(0.3)
        assert report.ap_small == 0.0

    def test_wrong_label(self):
        report = evaluate_map([det([[0.1, 0.1, 0.4, 0.4]], [2], [0.9])], [gt([[0.1, 0.1, 0.4, 0.4]], [0])])
        assert report.ap50 == 0.0

    def test_detection_cap(self):
        truth = [gt([[0.0, 0.0, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]], [0, 0])]
        preds = [det(truth[0]["boxes"], [0, 0], [0.9, 0.8])]
        report = evaluate_map(preds, truth)
        assert report.ar1 == pytest.approx(0.5)
        assert report.ar10 == pytest.approx(1.0)

    def test_duplicate_detection_is_false_positive(self):
        truth = [gt([[0.1, 0.1, 0.5, 0.5]], [0])]
        preds = [det([[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]], [0, 0], [0.9, 0.8])]
        assert evaluate_map(preds, truth).ap50 == pytest.approx(1.0)
        preds = [det([[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]], [0, 0], [0.8, 0.9])]
        assert evaluate_map(preds, truth).ap50 == pytest.approx(1.0)

    def test_accepts_tensors(self):
        truth = [{"boxes": torch.tensor([[0.1, 0.1, 0.5, 0.5]]), "labels": torch.tensor([0])}]
        preds = [{"boxes": torch.tensor([[0.1, 0.1, 0.5, 0.5]]), "labels": torch.tensor([0]), "scores": torch.tensor([0.7])}]
        assert evaluate_map(preds, truth).ap50 == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_map([], [gt(np.zeros((0, 4)), [])])
