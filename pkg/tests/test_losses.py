"""Tests for ground-truth losses, distillation terms and their combination."""

import math
from dataclasses import replace

import pytest
import torch
import torch.nn.functional as F

from depthdial.assignment import AnchorAssignment, MatchResult, detr_assign, tal_assign
from depthdial.errors import InvalidSpecError
from depthdial.losses import (
    EdgeVariant,
    FeatVariant,
    GtLossWeights,
    KDHyper,
    LossBreakdown,
    base_total_loss,
    detection_gt_loss,
    distillation_terms,
    distribution_focal_loss,
    kd_cls_loss,
    kd_feat_loss,
    kd_feat_spatial_loss,
    kd_reg_loss,
)
from depthdial.model import BoundaryPair, LayerPrediction, ModelOutputs


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def random_boxes(n, seed=0):
    g = gen(seed)
    centres = torch.rand(n, 2, generator=g, dtype=torch.float64) * 0.5 + 0.25
    sizes = torch.rand(n, 2, generator=g, dtype=torch.float64) * 0.3 + 0.1
    return torch.cat([centres, sizes], dim=1)


GRAD_SEEDS = range(20)


def gradcheck(fn, *inputs):
    inputs = tuple(t.detach().clone().requires_grad_(True) for t in inputs)
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5, rtol=1e-3)


@pytest.fixture
def two_objects():
    return [{"labels": torch.tensor([0, 2]), "boxes": torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], dtype=torch.float64)}]


@pytest.fixture
def dense_outputs():
    side = (torch.arange(4, dtype=torch.float64) + 0.5) / 4
    gy, gx = torch.meshgrid(side, side, indexing="ij")
    points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
    g = gen(3)
    boxes = torch.cat([points, torch.full((16, 2), 0.45, dtype=torch.float64)], dim=1)[None]
    return ModelOutputs(
        cls_logits=torch.randn(1, 16, 3, generator=g, dtype=torch.float64),
        boxes=boxes + 0.01 * torch.randn(1, 16, 4, generator=g, dtype=torch.float64),
        edge_logits=torch.randn(1, 16, 4, 8, generator=g, dtype=torch.float64),
        anchor_points=points,
        anchor_scale=torch.full((16, 2), 0.25, dtype=torch.float64),
    )


class TestKdClsLoss:
    def test_closed_form(self):
        t, s = torch.randn(5, 3, generator=gen(0)), torch.randn(5, 3, generator=gen(1))
        p = F.softmax(t / 2, dim=-1)
        expected = (p * (p.log() - F.log_softmax(s / 2, dim=-1))).sum(-1).mean() * 4
        assert torch.allclose(kd_cls_loss(t, s, temperature=2.0), expected, atol=1e-6)

    def test_zero_for_identical_logits(self):
        t = torch.randn(4, 3, generator=gen(0))
        assert kd_cls_loss(t, t.clone()).item() == pytest.approx(0.0, abs=1e-7)

    def test_index_selects_rows(self):
        t, s = torch.randn(6, 3, generator=gen(0)), torch.randn(6, 3, generator=gen(1))
        index = torch.tensor([1, 4])
        assert torch.allclose(kd_cls_loss(t, s, index), kd_cls_loss(t[index], s[index]))

    def test_empty_selection(self):
        s = torch.randn(3, 3, requires_grad=True)
        loss = kd_cls_loss(torch.randn(3, 3), s, torch.zeros(0, dtype=torch.long))
        assert loss.item() == 0.0
        loss.backward()
        assert torch.equal(s.grad, torch.zeros(3, 3))

    def test_teacher_receives_no_gradient(self):
        t = torch.randn(4, 3, requires_grad=True)
        s = torch.randn(4, 3, requires_grad=True)
        kd_cls_loss(t, s, temperature=2.0).backward()
        assert t.grad is None
        assert s.grad is not None

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, seed):
        t = torch.randn(4, 3, generator=gen(2 * seed), dtype=torch.float64)
        s = torch.randn(4, 3, generator=gen(2 * seed + 1), dtype=torch.float64)
        assert gradcheck(lambda x: kd_cls_loss(t, x, temperature=2.0), s)


class TestKdRegLoss:
    def test_giou_closed_form(self):
        student = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        teacher = torch.tensor([[0.6, 0.5, 0.2, 0.2]], dtype=torch.float64)
        iou_term, edge_term = kd_reg_loss(teacher, student)
        # IoU 1/3, enclosing box equals the union
        assert iou_term.item() == pytest.approx(2 / 3, abs=1e-5)
        assert edge_term.item() == pytest.approx(0.1, abs=1e-9)

    def test_l1_is_summed_per_box(self):
        teacher, student = random_boxes(5, 0), random_boxes(5, 1)
        _, edge = kd_reg_loss(teacher, student)
        assert edge.item() == pytest.approx((student - teacher).abs().sum(-1).mean().item())

    def test_identical_boxes(self):
        boxes = random_boxes(4)
        iou_term, edge_term = kd_reg_loss(boxes, boxes.clone())
        assert iou_term.item() == pytest.approx(0.0, abs=1e-6)
        assert edge_term.item() == 0.0

    def test_dfl_needs_edges(self):
        with pytest.raises(ValueError, match="edge logits"):
            kd_reg_loss(random_boxes(2), random_boxes(2), variant="dfl")

    def test_dfl_edge_term(self):
        t_edges = torch.randn(3, 4, 8, generator=gen(0), dtype=torch.float64)
        s_edges = torch.randn(3, 4, 8, generator=gen(1), dtype=torch.float64)
        _, same = kd_reg_loss(random_boxes(3), random_boxes(3), None, EdgeVariant.DFL, t_edges, t_edges.clone())
        assert same.item() == pytest.approx(0.0, abs=1e-12)
        _, edge = kd_reg_loss(random_boxes(3), random_boxes(3), None, "dfl", t_edges, s_edges, t_dfl=2.0)
        p = F.softmax(t_edges / 2, dim=-1)
        expected = (p * (p.log() - F.log_softmax(s_edges / 2, dim=-1))).sum(-1).mean() * 4
        assert edge.item() == pytest.approx(expected.item())

    def test_empty_selection(self):
        iou_term, edge_term = kd_reg_loss(random_boxes(3), random_boxes(3), torch.zeros(0, dtype=torch.long))
        assert iou_term.item() == 0.0 and edge_term.item() == 0.0

    def test_teacher_receives_no_gradient(self):
        teacher = random_boxes(3, 0).requires_grad_(True)
        student = random_boxes(3, 1).requires_grad_(True)
        iou_term, edge_term = kd_reg_loss(teacher, student)
        (iou_term + edge_term).backward()
        assert teacher.grad is None

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient_l1(self, seed):
        teacher = random_boxes(4, seed)
        assert gradcheck(lambda s: kd_reg_loss(teacher, s), random_boxes(4, seed + 100))

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient_dfl(self, seed):
        teacher, t_edges = random_boxes(3, seed), torch.randn(3, 4, 8, generator=gen(seed + 200), dtype=torch.float64)

        def fn(boxes, edges):
            return kd_reg_loss(teacher, boxes, None, "dfl", t_edges, edges, t_dfl=1.5)

        assert gradcheck(fn, random_boxes(3, seed + 100), torch.randn(3, 4, 8, generator=gen(seed + 300), dtype=torch.float64))


@pytest.fixture
def groups():
    return {"P3": "backbone", "P4": "backbone", "FPN-P3": "neck"}


def feature_maps(seed, shape=(4, 6, 3, 3)):
    g = gen(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64), torch.randn(*shape, generator=g, dtype=torch.float64)


class TestKdFeatLoss:
    @pytest.mark.parametrize("seed", range(100))
    def test_equals_twice_one_minus_cosine(self, groups, seed):
        x_ess, x_full = feature_maps(seed)
        hyper = KDHyper(feat_weights={"backbone": 1.0, "neck": 0.0})
        loss = kd_feat_loss({"P3": (x_ess, x_full)}, hyper, groups)
        cos = F.cosine_similarity(x_ess.mean(dim=(2, 3)), x_full.mean(dim=(2, 3)), dim=1)
        assert abs(loss.item() - (2 * (1 - cos)).mean().item()) < 1e-6

    def test_group_weights_and_stage_average(self, groups):
        a, b = feature_maps(0), feature_maps(1)
        unit = KDHyper(feat_weights={"backbone": 1.0, "neck": 1.0})
        la = kd_feat_loss({"P3": a}, unit, groups)
        lb = kd_feat_loss({"FPN-P3": b}, unit, groups)
        loss = kd_feat_loss({"P3": a, "FPN-P3": b}, KDHyper(), groups)
        assert loss.item() == pytest.approx((0.5 * la.item() + 0.2 * lb.item()) / 2)

    def test_supervised_stages(self, groups):
        a, b = feature_maps(0), feature_maps(1)
        hyper = KDHyper(supervised_stages=("P4",))
        loss = kd_feat_loss({"P3": a, "P4": b}, hyper, groups)
        assert loss.item() == pytest.approx(kd_feat_loss({"P4": b}, KDHyper(), groups).item())

    def test_no_stages(self, groups):
        assert kd_feat_loss({}, KDHyper(), groups).item() == 0.0

    def test_positive_scale_invariance(self, groups):
        x_ess, x_full = feature_maps(2)
        before = kd_feat_loss({"P3": (x_ess, x_full)}, KDHyper(), groups)
        after = kd_feat_loss({"P3": (3.0 * x_ess, 0.5 * x_full)}, KDHyper(), groups)
        assert after.item() == pytest.approx(before.item())

    def test_full_side_receives_no_gradient(self, groups):
        x_ess, x_full = (t.requires_grad_(True) for t in feature_maps(0))
        kd_feat_loss({"P3": (x_ess, x_full)}, KDHyper(), groups).backward()
        assert x_full.grad is None and x_ess.grad is not None

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, groups, seed):
        x_ess, x_full = feature_maps(seed)
        assert gradcheck(lambda x: kd_feat_loss({"P3": (x, x_full)}, KDHyper(), groups), x_ess)


class TestKdFeatSpatialLoss:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_location_loop(self, groups, seed):
        x_ess, x_full = feature_maps(seed)
        hyper = KDHyper(feat_weights={"backbone": 1.0, "neck": 0.0})
        loss = kd_feat_spatial_loss({"P3": (x_ess, x_full)}, hyper, groups)
        total, count = 0.0, 0
        b, _, h, w = x_ess.shape
        for n in range(b):
            for i in range(h):
                for j in range(w):
                    u = x_ess[n, :, i, j] / x_ess[n, :, i, j].norm()
                    v = x_full[n, :, i, j] / x_full[n, :, i, j].norm()
                    total += float((u - v).pow(2).sum())
                    count += 1
        assert loss.item() == pytest.approx(total / count, rel=1e-9)

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, groups, seed):
        x_ess, x_full = feature_maps(seed, (2, 4, 2, 2))
        assert gradcheck(lambda x: kd_feat_spatial_loss({"FPN-P3": (x, x_full)}, KDHyper(), groups), x_ess)


class TestDistributionFocalLoss:
    def test_integer_target(self):
        logits = torch.randn(2, 4, 8, generator=gen(0), dtype=torch.float64)
        target = torch.full((2, 4), 2.0, dtype=torch.float64)
        expected = -F.log_softmax(logits, dim=-1)[..., 2].mean(-1)
        assert torch.allclose(distribution_focal_loss(logits, target), expected)

    def test_fractional_target_splits_mass(self):
        logits = torch.randn(1, 4, 8, generator=gen(1), dtype=torch.float64)
        target = torch.full((1, 4), 2.5, dtype=torch.float64)
        logp = F.log_softmax(logits, dim=-1)
        expected = -(0.5 * logp[..., 2] + 0.5 * logp[..., 3]).mean(-1)
        assert torch.allclose(distribution_focal_loss(logits, target), expected)


def detr_outputs(two_objects, perfect=True):
    gt = two_objects[0]["boxes"]
    boxes = torch.tensor([[0.5, 0.5, 0.1, 0.1], [0.0, 0.0, 0.0, 0.0], [0.1, 0.9, 0.1, 0.1], [0.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    boxes[3], boxes[1] = gt[0], gt[1]
    logits = torch.full((4, 3), -12.0, dtype=torch.float64)
    logits[3, 0] = logits[1, 2] = 12.0
    if not perfect:
        boxes = boxes + 0.02
        logits = torch.zeros_like(logits)
    return ModelOutputs(cls_logits=logits[None], boxes=boxes[None])


class TestDetectionGtLossSetPrediction:
    def test_perfect_predictions(self, two_objects):
        breakdown, matches = detection_gt_loss(detr_outputs(two_objects), two_objects, "set_prediction")
        assert matches[0].sigma == {1: 1, 3: 0}
        assert set(breakdown.components) == {"gt_cls", "gt_reg"}
        assert breakdown.total.item() < 1e-3

    def test_worse_predictions_cost_more(self, two_objects):
        good, _ = detection_gt_loss(detr_outputs(two_objects), two_objects, "set_prediction")
        bad, _ = detection_gt_loss(detr_outputs(two_objects, perfect=False), two_objects, "set_prediction")
        assert bad.total.item() > good.total.item()

    def test_no_objects(self, two_objects):
        empty = [{"labels": torch.zeros(0, dtype=torch.long), "boxes": torch.zeros(0, 4)}]
        breakdown, matches = detection_gt_loss(detr_outputs(two_objects), empty, "set_prediction")
        assert len(matches[0]) == 0
        assert breakdown.components["gt_reg"].item() == 0.0
        assert breakdown.is_finite()

    def test_sums_every_decoder_layer(self, two_objects):
        first = detr_outputs(two_objects, perfect=False)
        last = detr_outputs(two_objects)
        stacked = ModelOutputs(
            cls_logits=last.cls_logits,
            boxes=last.boxes,
            decoder_aux=[LayerPrediction(first.cls_logits, first.boxes), LayerPrediction(last.cls_logits, last.boxes)],
        )
        total, _ = detection_gt_loss(stacked, two_objects, "set_prediction")
        a, _ = detection_gt_loss(first, two_objects, "set_prediction")
        b, _ = detection_gt_loss(last, two_objects, "set_prediction")
        assert total.total.item() == pytest.approx(a.total.item() + b.total.item())

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, two_objects, seed):
        g = gen(seed)
        start = detr_outputs(two_objects, perfect=False)
        logits = start.cls_logits + torch.randn(start.cls_logits.shape, generator=g, dtype=torch.float64)
        boxes = start.boxes + 0.01 * torch.randn(start.boxes.shape, generator=g, dtype=torch.float64)
        boxes[..., 2:] = boxes[..., 2:].clamp(min=0.01)
        matches = detr_assign(ModelOutputs(cls_logits=logits, boxes=boxes), two_objects)

        def fn(logits, boxes):
            outputs = ModelOutputs(cls_logits=logits, boxes=boxes)
            return detection_gt_loss(outputs, two_objects, "set_prediction", assignments=matches)[0].total

        assert gradcheck(fn, logits, boxes)


class TestDetectionGtLossDense:
    @pytest.fixture
    def target(self):
        return [{"labels": torch.tensor([1]), "boxes": torch.tensor([[0.5, 0.5, 0.5, 0.5]], dtype=torch.float64)}]

    def test_assigns_and_scores(self, dense_outputs, target):
        breakdown, assignments = detection_gt_loss(dense_outputs, target, "dense")
        assert assignments[0].foreground.numel() > 0
        assert set(assignments[0].target_of[assignments[0].foreground].tolist()) == {0}
        assert breakdown.is_finite()
        assert breakdown.components["gt_reg"].item() > 0

    def test_no_objects(self, dense_outputs):
        empty = [{"labels": torch.zeros(0, dtype=torch.long), "boxes": torch.zeros(0, 4, dtype=torch.float64)}]
        breakdown, assignments = detection_gt_loss(dense_outputs, empty, "dense")
        assert assignments[0].foreground.numel() == 0
        assert breakdown.components["gt_reg"].item() == 0.0
        expected = 0.5 * F.binary_cross_entropy_with_logits(
            dense_outputs.cls_logits, torch.zeros_like(dense_outputs.cls_logits), reduction="sum"
        )
        assert breakdown.total.item() == pytest.approx(expected.item())

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, dense_outputs, target, seed):
        g = gen(seed + 1000)
        dense_outputs = replace(
            dense_outputs,
            cls_logits=torch.randn(dense_outputs.cls_logits.shape, generator=g, dtype=torch.float64),
            boxes=dense_outputs.boxes + 0.01 * torch.randn(dense_outputs.boxes.shape, generator=g, dtype=torch.float64),
            edge_logits=torch.randn(dense_outputs.edge_logits.shape, generator=g, dtype=torch.float64),
        )
        assignments = tal_assign(dense_outputs, target)

        def fn(logits, boxes, edges):
            outputs = ModelOutputs(
                cls_logits=logits,
                boxes=boxes,
                edge_logits=edges,
                anchor_points=dense_outputs.anchor_points,
                anchor_scale=dense_outputs.anchor_scale,
            )
            return detection_gt_loss(outputs, target, "dense", assignments=assignments)[0].total

        assert gradcheck(fn, dense_outputs.cls_logits, dense_outputs.boxes, dense_outputs.edge_logits)


class TestKDHyper:
    def test_dense_defaults(self):
        hyper = KDHyper.for_head("dense")
        assert (hyper.alpha, hyper.w_cls_kd, hyper.temperature) == (0.2, 0.4, 2.0)
        assert (hyper.w_iou_kd, hyper.w_edge_kd, hyper.edge_variant) == (1.2, 0.8, EdgeVariant.DFL)
        assert hyper.feat_weights == {"backbone": 0.4, "neck": 0.4}
        assert hyper.gt_weights == GtLossWeights(0.5, 0.0, 7.5, 1.5)

    def test_set_prediction_defaults(self):
        hyper = KDHyper.for_head("set_prediction")
        assert hyper == KDHyper()
        assert (hyper.alpha, hyper.w_cls_kd, hyper.w_iou_kd, hyper.w_edge_kd) == (0.0, 3.75, 2.0, 5.0)
        assert hyper.feat_weights == {"backbone": 0.5, "neck": 0.2}

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"alpha": 1.5},
            {"alpha": -0.1},
            {"temperature": 0.0},
            {"t_dfl": -1.0},
            {"w_iou_kd": -1.0},
            {"feat_weights": {"backbone": -0.5}},
            {"feat_weights": {"head": 0.5}},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidSpecError):
            KDHyper(**kwargs)

    def test_dict_round_trip(self):
        hyper = KDHyper.for_head("dense")
        assert KDHyper.from_dict(hyper.to_dict()) == hyper

    def test_from_dict_unknown_key(self):
        with pytest.raises(InvalidSpecError, match="beta"):
            KDHyper.from_dict({"beta": 0.5})

    def test_from_dict_bad_variant(self):
        with pytest.raises(InvalidSpecError):
            KDHyper.from_dict({"edge_variant": "l2"})

    def test_feat_variant_from_string(self):
        assert KDHyper(feat_variant="spatial").feat_variant is FeatVariant.SPATIAL

    def test_naive_joint(self):
        naive = KDHyper.for_head("dense").naive_joint()
        assert naive.alpha == 1.0 and not naive.distills
        assert naive.w_cls_kd == naive.w_iou_kd == naive.w_edge_kd == 0.0
        assert set(naive.feat_weights.values()) == {0.0}


def breakdown_of(gt_cls, gt_reg):
    components = {"gt_cls": torch.tensor(gt_cls), "gt_reg": torch.tensor(gt_reg)}
    return LossBreakdown(components["gt_cls"] + components["gt_reg"], components)


@pytest.fixture
def kd_terms():
    return {k: torch.tensor(v) for k, v in zip(("kd_cls", "kd_reg_iou", "kd_reg_edge", "kd_feat"), (0.3, 0.2, 0.1, 0.05))}


class TestBaseTotalLoss:
    def test_gt_only_when_alpha_is_one(self, kd_terms):
        gt = breakdown_of(1.25, 0.5)
        combined = base_total_loss(gt, kd_terms, KDHyper(alpha=1.0))
        assert torch.equal(combined.total, gt.gt_total)
        assert "kd_cls" in combined.components

    def test_weighted_combination(self, kd_terms):
        hyper = KDHyper(alpha=0.2, w_cls_kd=0.4, w_iou_kd=1.2, w_edge_kd=0.8)
        combined = base_total_loss(breakdown_of(1.0, 0.5), kd_terms, hyper)
        kd = 0.4 * 0.3 + 1.2 * 0.2 + 0.8 * 0.1 + 0.05
        assert combined.total.item() == pytest.approx(0.2 * 1.5 + 0.8 * kd, rel=1e-5)

    @pytest.mark.parametrize("seed", GRAD_SEEDS)
    def test_gradient(self, seed):
        g = gen(seed)
        hyper = KDHyper(alpha=float(torch.rand(1, generator=g)) * 0.9, w_cls_kd=0.4, w_iou_kd=1.2, w_edge_kd=0.8)

        def fn(gt_terms, kd_values):
            gt = LossBreakdown(gt_terms.sum(), {"gt_cls": gt_terms[0], "gt_reg": gt_terms[1]})
            kd = dict(zip(("kd_cls", "kd_reg_iou", "kd_reg_edge", "kd_feat"), kd_values))
            return base_total_loss(gt, kd, hyper).total

        assert gradcheck(fn, torch.rand(2, generator=g, dtype=torch.float64), torch.rand(4, generator=g, dtype=torch.float64))

    def test_pure_distillation(self, kd_terms):
        combined = base_total_loss(breakdown_of(9.0, 9.0), kd_terms, KDHyper(alpha=0.0))
        assert combined.total.item() == pytest.approx(3.75 * 0.3 + 2.0 * 0.2 + 5.0 * 0.1 + 0.05, rel=1e-5)


class TestLossBreakdown:
    def test_scalars(self):
        scalars = breakdown_of(1.0, 2.0).scalars()
        assert scalars == {"gt_cls": 1.0, "gt_reg": 2.0, "total": 3.0}

    def test_non_finite(self):
        assert not breakdown_of(math.nan, 1.0).is_finite()
        assert breakdown_of(0.0, 1.0).is_finite()


def outputs_with(logits, boxes, edges=None, features=None):
    return ModelOutputs(cls_logits=logits[None], boxes=boxes[None], edge_logits=None if edges is None else edges[None],
                        boundary_features=features or {})


class TestDistillationTerms:
    @pytest.fixture
    def swapped_queries(self):
        g = gen(0)
        t_logits, t_boxes = torch.randn(3, 3, generator=g, dtype=torch.float64), random_boxes(3, 1)
        order = torch.tensor([1, 0, 2])
        s_logits, s_boxes = t_logits[order].clone(), t_boxes[order].clone()
        s_logits[2] += 1.0
        teacher, student = outputs_with(t_logits, t_boxes), outputs_with(s_logits, s_boxes)
        # the teacher answers object 0 with query 1, the student with query 0
        return teacher, student, [MatchResult({1: 0, 0: 1})], [MatchResult({0: 0, 1: 1})]

    def test_aligned_queries_agree(self, swapped_queries):
        teacher, student, t_match, s_match = swapped_queries
        terms = distillation_terms(teacher, student, "set_prediction", KDHyper(), {}, t_match, s_match)
        assert set(terms) == {"kd_cls", "kd_reg_iou", "kd_reg_edge", "kd_feat"}
        assert terms["kd_cls"].item() == pytest.approx(0.0, abs=1e-9)
        assert terms["kd_reg_iou"].item() == pytest.approx(0.0, abs=1e-6)
        assert terms["kd_reg_edge"].item() == pytest.approx(0.0, abs=1e-12)
        assert terms["kd_feat"].item() == 0.0

    def test_index_pairing_sees_the_swap(self, swapped_queries):
        teacher, student, t_match, s_match = swapped_queries
        terms = distillation_terms(teacher, student, "set_prediction", KDHyper(align_targets=False), {}, t_match, s_match)
        assert terms["kd_cls"].item() > 1e-4
        assert terms["kd_reg_edge"].item() > 1e-4

    def test_unmatched_student(self, swapped_queries):
        teacher, student, _, _ = swapped_queries
        terms = distillation_terms(teacher, student, "set_prediction", KDHyper(), {}, [MatchResult()], [MatchResult()])
        assert all(v.item() == 0.0 for v in terms.values())

    @pytest.fixture
    def conflicting_anchors(self):
        g = gen(1)
        t_logits, t_boxes = torch.randn(4, 3, generator=g, dtype=torch.float64), random_boxes(4, 2)
        t_edges = torch.randn(4, 4, 8, generator=g, dtype=torch.float64)
        s_logits, s_boxes, s_edges = t_logits.clone(), t_boxes.clone(), t_edges.clone()
        s_logits[1, 0] += 2.0
        s_boxes[1, :2] += 0.1
        s_edges[1] += torch.randn(4, 8, generator=g, dtype=torch.float64)
        zeros = torch.zeros(4)
        t_assign = AnchorAssignment(torch.tensor([0, 1, -1, 2]), zeros, zeros)
        s_assign = AnchorAssignment(torch.tensor([0, 2, 1, 2]), zeros, zeros)
        teacher = outputs_with(t_logits, t_boxes, t_edges)
        student = outputs_with(s_logits, s_boxes, s_edges)
        return teacher, student, [t_assign], [s_assign]

    def test_dense_valid_anchors_only(self, conflicting_anchors):
        teacher, student, t_assign, s_assign = conflicting_anchors
        terms = distillation_terms(teacher, student, "dense", KDHyper.for_head("dense"), {}, t_assign, s_assign)
        assert terms["kd_cls"].item() == pytest.approx(0.0, abs=1e-9)
        assert terms["kd_reg_iou"].item() == pytest.approx(0.0, abs=1e-6)
        assert terms["kd_reg_edge"].item() == pytest.approx(0.0, abs=1e-9)

    def test_dense_naive_keeps_conflicts(self, conflicting_anchors):
        teacher, student, t_assign, s_assign = conflicting_anchors
        hyper = replace(KDHyper.for_head("dense"), align_targets=False)
        terms = distillation_terms(teacher, student, "dense", hyper, {}, t_assign, s_assign)
        assert terms["kd_cls"].item() > 1e-4
        assert terms["kd_reg_edge"].item() > 1e-4

    def test_features_pair_student_essential_with_teacher_full(self, groups, swapped_queries):
        teacher, student, t_match, s_match = swapped_queries
        x_ess, x_full = feature_maps(7, (1, 6, 3, 3))
        teacher.boundary_features = {"P3": BoundaryPair(None, x_full)}
        student.boundary_features = {"P3": BoundaryPair(x_ess, None)}
        terms = distillation_terms(teacher, student, "set_prediction", KDHyper(), groups, t_match, s_match)
        expected = kd_feat_loss({"P3": (x_ess, x_full)}, KDHyper(), groups)
        assert terms["kd_feat"].item() == pytest.approx(expected.item())

    def test_spatial_variant(self, groups, swapped_queries):
        teacher, student, t_match, s_match = swapped_queries
        x_ess, x_full = feature_maps(8, (1, 6, 3, 3))
        teacher.boundary_features = {"P3": BoundaryPair(None, x_full)}
        student.boundary_features = {"P3": BoundaryPair(x_ess, None)}
        hyper = KDHyper(feat_variant="spatial")
        terms = distillation_terms(teacher, student, "set_prediction", hyper, groups, t_match, s_match)
        assert terms["kd_feat"].item() == pytest.approx(kd_feat_spatial_loss({"P3": (x_ess, x_full)}, hyper, groups).item())
