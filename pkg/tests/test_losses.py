import itertools
import math

import numpy as np
import pytest
import torch

from docseg.heads import PredictionSet
from docseg.losses import (
    LossWeights,
    SampleTargets,
    dice_loss,
    diou_loss,
    focal_loss,
    loss_box,
    loss_class,
    loss_instance,
    loss_semantic,
    match,
    match_cost_matrix,
    MatchResult,
    point_sample,
    smooth_l1,
    targets_from_sample,
    total_loss,
)
from fdcheck import finite_difference_check


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating all injections gt -> query."""
    n, g = cost.shape
    best = None
    for perm in itertools.permutations(range(n), g):
        c = sum(cost[perm[j], j] for j in range(g))
        if best is None or c < best:
            best = c
    return best


def random_problem(rng, n, g, m=3, p=32):
    logits = torch.from_numpy(rng.normal(size=(n, p))).float()
    class_logits = torch.from_numpy(rng.normal(size=(n, m + 1))).float()
    boxes = torch.from_numpy(rng.uniform(0.1, 0.9, size=(n, 4))).float()
    gt_masks = torch.from_numpy((rng.uniform(size=(g, p)) > 0.5).astype(np.float32))
    gt_classes = torch.from_numpy(rng.integers(0, m, size=g))
    gt_boxes = torch.from_numpy(rng.uniform(0.1, 0.9, size=(g, 4))).float()
    pred = PredictionSet(
        semantic_logits=torch.zeros(m, p),
        instance_logits=logits,
        class_logits=class_logits,
        boxes=boxes,
        spatial_shape=(4, 8),
    )
    return pred, gt_masks, gt_classes, gt_boxes


class TestMatch:
    def test_higher_class_prob_wins_on_equal_masks(self):
        p = 16
        logits = torch.zeros(2, p)
        cls = torch.tensor([[4.0, 0.0], [0.0, 0.0]])  # query 0 confident on class 0
        boxes = torch.full((2, 4), 0.5)
        pred = PredictionSet(
            semantic_logits=torch.zeros(1, p),
            instance_logits=logits,
            class_logits=cls,
            boxes=boxes,
            spatial_shape=(4, 4),
        )
        gt_masks = torch.ones(1, p)
        result = match(pred, gt_masks, torch.tensor([0]), torch.full((1, 4), 0.5), LossWeights())
        assert result.pairs == [(0, 0)]
        assert result.unmatched_queries == [1]

    def test_matches_brute_force_on_small_problems(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            n = int(rng.integers(1, 8))
            g = int(rng.integers(1, n + 1))
            pred, gt_masks, gt_classes, gt_boxes = random_problem(rng, n, g)
            w = LossWeights()
            result = match(pred, gt_masks, gt_classes, gt_boxes, w)
            cost = match_cost_matrix(
                pred.instance_logits, pred.class_probs, pred.boxes, gt_masks, gt_classes, gt_boxes, w
            ).double().numpy()
            assert result.cost == brute_force_min_cost(cost)
            assert len(result.pairs) == g
            assert sorted(result.gt_ids()) == list(range(g))

    def test_exact_ties_break_lexicographically(self):
        p = 16
        pred = PredictionSet(
            semantic_logits=torch.zeros(1, p),
            instance_logits=torch.zeros(3, p),  # identical queries
            class_logits=torch.zeros(3, 2),
            boxes=torch.full((3, 4), 0.5),
            spatial_shape=(4, 4),
        )
        gt_masks = (torch.rand(2, p, generator=torch.Generator().manual_seed(0)) > 0.5).float()
        result = match(pred, gt_masks, torch.tensor([0, 0]), torch.full((2, 4), 0.5), LossWeights())
        assert result.pairs == [(0, 0), (1, 1)]
        assert result.unmatched_queries == [2]

    def test_more_gts_than_queries_errors_with_counts(self):
        rng = np.random.default_rng(1)
        pred, gt_masks, gt_classes, gt_boxes = random_problem(rng, 2, 3)
        with pytest.raises(ValueError, match="3 ground-truth instances but only 2"):
            match(pred, gt_masks, gt_classes, gt_boxes, LossWeights())

    def test_row_restriction_excludes_pruned_queries(self):
        rng = np.random.default_rng(2)
        pred, gt_masks, gt_classes, gt_boxes = random_problem(rng, 5, 2)
        rows = torch.tensor([False, True, True, True, False])
        result = match(pred, gt_masks, gt_classes, gt_boxes, LossWeights(), rows=rows)
        assert set(result.query_ids()) <= {1, 2, 3}
        assert set(result.unmatched_queries) <= {1, 2, 3}


class TestMaskLosses:
    def test_perfect_prediction_near_zero(self):
        target = (torch.rand(3, 64, generator=torch.Generator().manual_seed(0)) > 0.5).float()
        logits = 20.0 * (2 * target - 1)
        total, parts = loss_semantic(logits, target, LossWeights())
        assert total.item() < 1e-3

    def test_dice_half_probability_fixture(self):
        # prediction 0.5 everywhere, target all ones on a 2x2 map:
        # dice = 1 - (2*(0.5*4) + 1) / ((0.5*4) + 4 + 1) = 1 - 5/7
        logits = torch.zeros(1, 4)
        target = torch.ones(1, 4)
        w = LossWeights()
        dice = dice_loss(logits, target, w)
        assert dice.item() == pytest.approx(1 - 5 / 7, abs=1e-6)

    def test_class_order_symmetry(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(3, 32, generator=g)
        target = (torch.rand(3, 32, generator=g) > 0.5).float()
        w = LossWeights()
        a, _ = loss_semantic(logits, target, w)
        perm = torch.tensor([2, 0, 1])
        b, _ = loss_semantic(logits[perm], target[perm], w)
        assert a.item() == pytest.approx(b.item(), rel=1e-6)

    def test_instance_loss_empty_is_zero(self):
        w = LossWeights()
        total, _ = loss_instance(torch.zeros(0, 16), torch.zeros(0, 16), w)
        assert total.item() == 0.0

    def test_instance_equals_semantic_kernel(self):
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(2, 16, generator=g)
        target = (torch.rand(2, 16, generator=g) > 0.5).float()
        w = LossWeights()
        a, _ = loss_instance(logits, target, w)
        b, _ = loss_semantic(logits, target, w)
        assert torch.equal(a, b)

    def test_focal_uses_canonical_parameters(self):
        # single pixel, target 1, p = 0.5: focal = alpha * (1-p)^gamma * (-log p)
        logits = torch.zeros(1, 1)
        target = torch.ones(1, 1)
        w = LossWeights()
        expected = 0.25 * 0.5**2 * math.log(2)
        assert focal_loss(logits, target, w).item() == pytest.approx(expected, rel=1e-5)


class TestBoxLoss:
    def test_identical_boxes_zero(self):
        b = torch.tensor([[0.3, 0.4, 0.2, 0.1]])
        total, _ = loss_box(b, b.clone(), LossWeights())
        assert total.item() == pytest.approx(0.0, abs=1e-7)

    def test_disjoint_diou_fixture(self):
        # IoU = 0, center distance^2 = 0.5, enclosing diagonal^2 = 0.98
        a = torch.tensor([[0.25, 0.25, 0.2, 0.2]])
        b = torch.tensor([[0.75, 0.75, 0.2, 0.2]])
        val = diou_loss(a, b)
        assert val.item() == pytest.approx(1 + 0.5 / 0.98, abs=1e-6)
        assert val.item() == pytest.approx(1.5102, abs=1e-4)

    def test_translation_invariance(self):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(4, 4, generator=g) * 0.3 + 0.2
        b = torch.rand(4, 4, generator=g) * 0.3 + 0.2
        w = LossWeights()
        base, _ = loss_box(a, b, w)
        shift = torch.tensor([0.1, -0.05, 0.0, 0.0])
        moved, _ = loss_box(a + shift, b + shift, w)
        assert base.item() == pytest.approx(moved.item(), rel=1e-5)

    def test_smooth_l1_beta_one(self):
        x = torch.tensor([0.5, 2.0])
        y = torch.zeros(2)
        out = smooth_l1(x, y)
        assert out[0].item() == pytest.approx(0.125)
        assert out[1].item() == pytest.approx(1.5)


class TestClassLoss:
    def test_confident_match_is_zero(self):
        logits = torch.tensor([[50.0, 0.0, 0.0]])
        result = MatchResult(pairs=[(0, 0)], unmatched_queries=[])
        loss = loss_class(logits, result, torch.tensor([0]), LossWeights())
        assert loss.item() < 1e-6

    def test_uniform_gives_log3(self):
        logits = torch.zeros(4, 3)
        result = MatchResult(pairs=[], unmatched_queries=[0, 1, 2, 3])
        loss = loss_class(logits, result, torch.zeros(0, dtype=torch.long), LossWeights())
        assert loss.item() == pytest.approx(math.log(3), rel=1e-5)

    def test_unit_noobject_weight_is_plain_ce(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(5, 4, generator=g)
        result = MatchResult(pairs=[(1, 0), (3, 1)], unmatched_queries=[0, 2, 4])
        classes = torch.tensor([2, 0])
        w1 = LossWeights(no_object=1.0)
        loss = loss_class(logits, result, classes, w1)
        labels = torch.tensor([3, 2, 3, 0, 3])
        expected = torch.nn.functional.cross_entropy(logits, labels)
        assert loss.item() == pytest.approx(expected.item(), rel=1e-6)


def perfect_predictions(targets: SampleTargets, n_queries=4, m=2):
    h, w = targets.image_shape
    g = targets.masks.shape[0]
    inst_logits = torch.full((n_queries, h * w), -20.0)
    inst_logits[:g] = 20.0 * (2 * targets.masks.flatten(1) - 1)
    cls = torch.zeros(n_queries, m + 1)
    cls[:, m] = 20.0
    for i in range(g):
        cls[i] = 0.0
        cls[i, targets.classes[i]] = 20.0
    boxes = torch.full((n_queries, 4), 0.5)
    boxes[:g] = targets.boxes
    sem_logits = 20.0 * (2 * targets.semantic_onehot.flatten(1) - 1)
    return PredictionSet(
        semantic_logits=sem_logits,
        instance_logits=inst_logits,
        class_logits=cls,
        boxes=boxes,
        spatial_shape=(h, w),
    )


def tiny_targets(m=2):
    masks = torch.zeros(2, 8, 8)
    masks[0, 1:4, 1:5] = 1.0
    masks[1, 5:7, 2:8] = 1.0
    classes = torch.tensor([0, 1])
    boxes = torch.tensor([[3 / 8, 2.5 / 8, 4 / 8, 3 / 8], [5 / 8, 6 / 8, 6 / 8, 2 / 8]])
    onehot = torch.zeros(m, 8, 8)
    onehot[0] = masks[0]
    onehot[1] = masks[1]
    return SampleTargets(
        masks=masks, classes=classes, boxes=boxes, semantic_onehot=onehot, image_shape=(8, 8)
    )


class TestTotalLoss:
    def test_single_layer_sum(self):
        targets = tiny_targets()
        pred = perfect_predictions(targets)
        total, report = total_loss([pred], targets)
        assert len(report["layers"]) == 1
        assert total.item() == pytest.approx(report["total"], rel=1e-6)

    def test_perfect_predictions_near_zero(self):
        targets = tiny_targets()
        preds = [perfect_predictions(targets) for _ in range(3)]
        total, _ = total_loss(preds, targets)
        assert total.item() < 1e-2

    def test_doubling_semantic_weight_doubles_its_term(self):
        g = torch.Generator().manual_seed(0)
        targets = tiny_targets()
        pred = perfect_predictions(targets)
        pred.semantic_logits.add_(torch.randn_like(pred.semantic_logits))
        _, base = total_loss([pred], targets, LossWeights())
        _, doubled = total_loss([pred], targets, LossWeights(semantic=10.0))
        assert doubled["semantic"] == pytest.approx(base["semantic"], rel=1e-6)
        base_contrib = 5.0 * base["semantic"]
        doubled_contrib = 10.0 * doubled["semantic"]
        assert doubled_contrib == pytest.approx(2 * base_contrib, rel=1e-6)

    def test_layer_order_does_not_change_total(self):
        g = torch.Generator().manual_seed(1)
        targets = tiny_targets()
        preds = []
        for _ in range(3):
            p = perfect_predictions(targets)
            p.instance_logits.add_(2 * torch.randn(p.instance_logits.shape, generator=g))
            p.class_logits.add_(torch.randn(p.class_logits.shape, generator=g))
            preds.append(p)
        t1, _ = total_loss(preds, targets)
        t2, _ = total_loss(preds[::-1], targets)
        assert t1.item() == pytest.approx(t2.item(), rel=1e-6)

    def test_no_instances_sample(self):
        m = 2
        targets = SampleTargets(
            masks=torch.zeros(0, 8, 8),
            classes=torch.zeros(0, dtype=torch.long),
            boxes=torch.zeros(0, 4),
            semantic_onehot=torch.zeros(m, 8, 8),
            image_shape=(8, 8),
        )
        pred = perfect_predictions(targets, n_queries=3, m=m)
        total, report = total_loss([pred], targets)
        assert torch.isfinite(total)
        assert report["layers"][0]["matched"] == 0
        assert report["layers"][0]["instance"] == 0.0


class TestTargetsFromSample:
    def test_roundtrip_fields(self):
        from docseg.datamodel import DatasetSpec, InstanceAnnotation, SegSample, paint_semantic, tight_bbox

        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 3:7] = True
        spec = DatasetSpec(name="d", class_names=("a", "b"), task_group="layout")
        inst = InstanceAnnotation(1, mask, tight_bbox(mask))
        sem = paint_semantic([inst], (8, 8), spec.background_label)
        sample = SegSample(
            image=np.zeros((8, 8, 3), dtype=np.float32), instances=[inst], semantic=sem, dataset=spec
        )
        targets = targets_from_sample(sample)
        assert targets.masks.shape == (1, 8, 8)
        assert targets.classes.tolist() == [1]
        assert targets.semantic_onehot.shape == (2, 8, 8)
        assert torch.equal(targets.semantic_onehot[1], targets.masks[0])
        assert targets.semantic_onehot[0].sum() == 0


class TestPointSample:
    def test_nearest_recovers_binary_values(self):
        maps = torch.zeros(1, 4, 4)
        maps[0, :, 2:] = 1.0
        coords = torch.tensor([[0.1, 0.1], [0.9, 0.1], [0.6, 0.9]])
        vals = point_sample(maps, coords, mode="nearest")
        assert vals[0].tolist() == [0.0, 1.0, 1.0]


class TestGradients:
    def test_focal_and_dice_gradients(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 64, generator=g, dtype=torch.float64)
        target = (torch.rand(3, 64, generator=g) > 0.5).double()
        w = LossWeights()

        def fn(x):
            return loss_semantic(x, target, w)[0]

        assert finite_difference_check(fn, [logits], max_coords=120) < 1e-4

    def test_box_loss_gradients(self):
        g = torch.Generator().manual_seed(1)
        pred = torch.rand(5, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
        gt = torch.rand(5, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
        w = LossWeights()

        def fn(x):
            return loss_box(x, gt, w)[0]

        assert finite_difference_check(fn, [pred]) < 1e-4

    def test_class_loss_gradients(self):
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(4, 3, generator=g, dtype=torch.float64)
        result = MatchResult(pairs=[(0, 0), (2, 1)], unmatched_queries=[1, 3])
        classes = torch.tensor([1, 0])
        w = LossWeights()

        def fn(x):
            return loss_class(x, result, classes, w)

        assert finite_difference_check(fn, [logits]) < 1e-4
